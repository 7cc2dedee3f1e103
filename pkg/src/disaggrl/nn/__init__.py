from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dist import gaussian_logprob_entropy, logprob_grads, sample
from .layers import Conv2d, GRUCell, LayerNorm, Linear, LSTMCell, ReLU, ShapeError, Tanh, UsageError
from .optim import AdamState, OptError, adam_step, clip_grad_norm
from .policy import NetConfig, PolicyNet, flatten_grads, set_debug, unflatten_like

__all__ = [
    "AdamState",
    "CheckpointError",
    "Conv2d",
    "GRUCell",
    "LSTMCell",
    "LayerNorm",
    "Linear",
    "NetConfig",
    "OptError",
    "PolicyNet",
    "ReLU",
    "ShapeError",
    "Tanh",
    "UsageError",
    "adam_step",
    "clip_grad_norm",
    "flatten_grads",
    "gaussian_logprob_entropy",
    "load_checkpoint",
    "logprob_grads",
    "sample",
    "save_checkpoint",
    "set_debug",
    "unflatten_like",
]
