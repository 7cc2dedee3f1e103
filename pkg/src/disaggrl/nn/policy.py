"""Actor-critic network: conv encoder -> embed -> concat proprio -> trunk -> heads."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    Conv2d,
    GRUCell,
    Layer,
    LayerNorm,
    Linear,
    LSTMCell,
    ReLU,
    ShapeError,
    Tanh,
    UsageError,
)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECK_FINITE = os.environ.get("DISAGGRL_DEBUG", "") not in ("", "0")


def set_debug(on: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = on


@dataclass
class NetConfig:
    obs_key: str = "depth"
    image_channels: int = 1  # 0 means no conv stack; obs_key then names a vector
    image_hw: tuple[int, int] = (32, 32)
    vector_dim: int = 0
    conv_filters: list[int] = field(default_factory=lambda: [8, 16, 16, 16])
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    embed_dim: int = 32
    proprio_dim: int = 7
    trunk: str = "mlp"  # mlp | gru | lstm
    rnn_hidden: list[int] = field(default_factory=lambda: [64])
    mlp_hidden: list[int] = field(default_factory=lambda: [128, 128])
    mlp_activation: str = "tanh"
    action_dim: int = 3
    aux_head: bool = True
    init_log_std: float = -0.5
    seed: int = 0

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        if self.trunk not in ("mlp", "gru", "lstm"):
            raise ValueError(f"unknown trunk {self.trunk!r}")

    @property
    def recurrent(self) -> bool:
        return self.trunk != "mlp"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    @classmethod
    def full_size(cls, **overrides) -> "NetConfig":
        """The full-size layout: [16,32,64,128] convs, 32-d embed, 2x1024 LSTM, [512,512,256] MLP."""
        base = dict(
            conv_filters=[16, 32, 64, 128],
            embed_dim=32,
            trunk="lstm",
            rnn_hidden=[1024, 1024],
            mlp_hidden=[512, 512, 256],
            mlp_activation="relu",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_obs(cls, obs_mode: str, width: int = 32, height: int = 32, **overrides) -> "NetConfig":
        if obs_mode == "state":
            base = dict(obs_key="state", image_channels=0, vector_dim=5)
        else:
            base = dict(obs_key=obs_mode, image_channels=1 if obs_mode == "depth" else 6, image_hw=(height, width))
        base.update(overrides)
        return cls(**base)


class PolicyNet:
    """Gaussian actor-critic.

    ``forward`` accepts a time-major flat batch of ``seq_len * N`` rows.  The
    recurrent trunk unrolls over ``seq_len`` steps, zeroing the state of rows
    whose ``resets`` flag is set before that step.
    """

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.layers: dict[str, Layer] = {}
        self.encoder: list[str] = []
        feat = 0
        if cfg.image_channels:
            c, (h, w) = cfg.image_channels, cfg.image_hw
            for i, nf in enumerate(cfg.conv_filters):
                conv = Conv2d(c, nf, rng, cfg.kernel, cfg.stride, cfg.padding, name=f"conv{i}")
                h, w = conv.out_hw(h, w)
                self._add(conv, self.encoder)
                self._add(LayerNorm((nf, h, w), name=f"conv{i}_ln"), self.encoder)
                self._add(ReLU(), self.encoder, f"conv{i}_relu")
                c = nf
            self.flat_dim = c * h * w
            self._add(Linear(self.flat_dim, cfg.embed_dim, rng, name="embed"), None)
            feat = cfg.embed_dim
        else:
            feat = cfg.vector_dim
        feat += cfg.proprio_dim
        self.rnn: list[str] = []
        for i, nh in enumerate(cfg.rnn_hidden if cfg.recurrent else []):
            cell = (GRUCell if cfg.trunk == "gru" else LSTMCell)(feat, nh, rng, name=f"rnn{i}")
            self._add(cell, self.rnn)
            feat = nh
        self.mlp: list[str] = []
        act = ReLU if cfg.mlp_activation == "relu" else Tanh
        for i, nh in enumerate(cfg.mlp_hidden):
            self._add(Linear(feat, nh, rng, name=f"mlp{i}"), self.mlp)
            self._add(act(), self.mlp, f"mlp{i}_act")
            feat = nh
        self.feat_dim = feat
        self._add(Linear(feat, cfg.action_dim, rng, gain=0.01, name="mean"), None)
        self._add(Linear(feat, 1, rng, gain=1.0, name="value"), None)
        if cfg.aux_head:
            self._add(Linear(feat, 2, rng, gain=1.0, name="aux"), None)
        self.log_std = np.full(cfg.action_dim, cfg.init_log_std, dtype=np.float32)
        self._cache = None

    def _add(self, layer: Layer, seq: list[str] | None, name: str | None = None) -> None:
        name = name or layer.name
        layer.name = name
        self.layers[name] = layer
        if seq is not None:
            seq.append(name)

    # --- parameters -------------------------------------------------------------

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Ordered ``{layer.param: array}``; arrays are shared, not copied."""
        out = {}
        for lname, layer in self.layers.items():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
        out["log_std"] = self.log_std
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for arr in self.params.values():
            arr[...] = flat[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, net has {pos}")

    def zero_(self) -> "PolicyNet":
        for a in self.params.values():
            a[...] = 0
        return self

    def copy(self) -> "PolicyNet":
        other = PolicyNet(self.cfg)
        other.set_flat(self.get_flat())
        return other

    @property
    def hidden_size(self) -> int:
        return sum(self.layers[n].state_size for n in self.rnn)

    def initial_hidden(self, n: int) -> np.ndarray:
        return np.zeros((n, self.hidden_size), dtype=np.float32)

    def inputs_from_obs(self, obs: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        return obs[self.cfg.obs_key], obs["proprio"]

    # --- forward / backward -----------------------------------------------------

    def forward(self, main, proprio, hidden=None, *, seq_len: int = 1, resets=None, keep_cache: bool = False):
        """Returns ``(mean [B,A], log_std [A], value [B], aux [B,2] | None, hidden')``."""
        cfg = self.cfg
        B = len(proprio)
        if proprio.shape != (B, cfg.proprio_dim):
            raise ShapeError(f"proprio: expected [N x {cfg.proprio_dim}], got {list(proprio.shape)}")
        if len(main) != B:
            raise ShapeError(f"batch mismatch: {len(main)} observations vs {B} proprio rows")
        cache: dict = {"layers": {}}
        x = main
        if cfg.image_channels:
            expect = (cfg.image_channels, *cfg.image_hw)
            if tuple(main.shape[1:]) != expect:
                raise ShapeError(f"conv0: expected image [N x {expect}], got {list(main.shape)}")
            for name in self.encoder:
                x, cache["layers"][name] = self.layers[name].forward(x)
            x = x.reshape(B, -1)
            x, cache["layers"]["embed"] = self.layers["embed"].forward(x)
            x, mask = ReLU().forward(x)
            cache["embed_relu"] = mask
        elif main.shape != (B, cfg.vector_dim):
            raise ShapeError(f"input: expected [N x {cfg.vector_dim}], got {list(main.shape)}")
        x = np.concatenate([x, proprio], axis=1)

        hidden_out = None
        if cfg.recurrent:
            if B % seq_len:
                raise ShapeError(f"batch {B} is not a multiple of seq_len {seq_len}")
            n = B // seq_len
            h = self.initial_hidden(n) if hidden is None else hidden
            if h.shape != (n, self.hidden_size):
                raise ShapeError(f"hidden: expected [{n} x {self.hidden_size}], got {list(h.shape)}")
            resets = np.zeros((seq_len, n), dtype=bool) if resets is None else np.asarray(resets).reshape(seq_len, n)
            x, hidden_out, cache["rnn"] = self._rnn_forward(x.reshape(seq_len, n, -1), h, resets)
            x = x.reshape(B, -1)
        for name in self.mlp:
            x, cache["layers"][name] = self.layers[name].forward(x)
        mean, cache["layers"]["mean"] = self.layers["mean"].forward(x)
        value, cache["layers"]["value"] = self.layers["value"].forward(x)
        aux = None
        if cfg.aux_head:
            aux, cache["layers"]["aux"] = self.layers["aux"].forward(x)
        log_std = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        if CHECK_FINITE:
            for nm, arr in (("mean", mean), ("value", value), ("log_std", log_std)):
                if not np.all(np.isfinite(arr)):
                    raise FloatingPointError(f"non-finite {nm} in forward pass")
        if keep_cache:
            cache["B"] = B
            self._cache = cache
        return mean, log_std, value[:, 0], aux, hidden_out

    def _rnn_forward(self, xs, h0, resets):
        T, n, _ = xs.shape
        sizes = [self.layers[name].state_size for name in self.rnn]
        offsets = np.cumsum([0] + sizes)
        state = h0
        outs, caches, masks = [], [], []
        for t in range(T):
            keep = (~resets[t])[:, None].astype(state.dtype)
            state = state * keep
            masks.append(keep)
            x = xs[t]
            new_parts, step_caches = [], []
            for k, name in enumerate(self.rnn):
                s = state[:, offsets[k] : offsets[k + 1]]
                x, s_new, c = self.layers[name].forward(x, s)
                new_parts.append(s_new)
                step_caches.append(c)
            state = np.concatenate(new_parts, axis=1)
            outs.append(x)
            caches.append(step_caches)
        return np.stack(outs), state, (caches, masks, offsets)

    def _rnn_backward(self, dys, rnn_cache, grads):
        caches, masks, offsets = rnn_cache
        T = len(caches)
        dstate = None
        dxs = [None] * T
        for t in reversed(range(T)):
            dx = dys[t]
            dparts = [None] * len(self.rnn)
            for k in reversed(range(len(self.rnn))):
                name = self.rnn[k]
                ds = None if dstate is None else dstate[:, offsets[k] : offsets[k + 1]]
                dx, ds_prev, g = self.layers[name].backward(caches[t][k], dx, ds)
                dparts[k] = ds_prev
                _accum(grads, name, g)
            dxs[t] = dx
            dstate = np.concatenate(dparts, axis=1) * masks[t]
        return np.stack(dxs)

    def backward(self, d_mean, d_log_std, d_value, d_aux=None) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given its output gradients.

        ``d_log_std`` is the gradient w.r.t. the (clamped) log-std vector, already
        summed over the batch; entries outside the clamp receive zero.
        """
        cache = self._cache
        if cache is None:
            raise UsageError("backward called without a cached forward pass (use keep_cache=True)")
        self._cache = None
        cfg = self.cfg
        grads: dict[str, np.ndarray] = {}
        lc = cache["layers"]
        dx, g = self.layers["mean"].backward(lc["mean"], d_mean)
        _accum(grads, "mean", g)
        dv, g = self.layers["value"].backward(lc["value"], np.asarray(d_value).reshape(-1, 1).astype(d_mean.dtype))
        _accum(grads, "value", g)
        dx = dx + dv
        if cfg.aux_head:
            if d_aux is None:
                d_aux = np.zeros((cache["B"], 2), dtype=d_mean.dtype)
            da, g = self.layers["aux"].backward(lc["aux"], d_aux)
            _accum(grads, "aux", g)
            dx = dx + da
        for name in reversed(self.mlp):
            dx, g = self.layers[name].backward(lc[name], dx)
            _accum(grads, name, g)
        if cfg.recurrent:
            T = len(cache["rnn"][0])
            dx = self._rnn_backward(dx.reshape(T, cache["B"] // T, -1), cache["rnn"], grads)
            dx = dx.reshape(cache["B"], -1)
        if cfg.image_channels:
            demb = dx[:, : cfg.embed_dim] * cache["embed_relu"]
            dx, g = self.layers["embed"].backward(lc["embed"], demb)
            _accum(grads, "embed", g)
            shape = (cache["B"], cfg.conv_filters[-1], *self._enc_hw())
            dx = dx.reshape(shape)
            for name in reversed(self.encoder[1:]):
                dx, g = self.layers[name].backward(lc[name], dx)
                _accum(grads, name, g)
            first = self.encoder[0]
            _, g = self.layers[first].backward(lc[first], dx, need_dx=False)
            _accum(grads, first, g)
        inside = (self.log_std >= LOG_STD_MIN) & (self.log_std <= LOG_STD_MAX)
        grads["log_std"] = (np.asarray(d_log_std, dtype=np.float32) * inside).astype(np.float32)
        out = {}
        for key, arr in self.params.items():
            g = grads.get(key)
            out[key] = np.zeros_like(arr) if g is None else g.astype(arr.dtype, copy=False)
        return out

    def _enc_hw(self) -> tuple[int, int]:
        h, w = self.cfg.image_hw
        for name in self.encoder:
            layer = self.layers[name]
            if isinstance(layer, Conv2d):
                h, w = layer.out_hw(h, w)
        return h, w


def _accum(grads: dict, layer_name: str, g: dict) -> None:
    for k, v in g.items():
        key = f"{layer_name}.{k}"
        if key in grads:
            grads[key] = grads[key] + v
        else:
            grads[key] = v


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()]).astype(np.float32)


def unflatten_like(flat: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k, a in like.items():
        out[k] = flat[pos : pos + a.size].reshape(a.shape)
        pos += a.size
    return out
