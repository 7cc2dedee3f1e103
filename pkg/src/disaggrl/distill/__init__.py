from ..evaluation import EvalResult, evaluate_net, wilson_interval
from .compare import compare_teachers, intervals_overlap, occlusion_probe
from .core import ConfigError, DistillConfig, DistillResult, distill, distill_loss_and_grads, load_teacher, student_config

evaluate = evaluate_net

__all__ = [
    "ConfigError",
    "DistillConfig",
    "DistillResult",
    "EvalResult",
    "compare_teachers",
    "distill",
    "distill_loss_and_grads",
    "evaluate",
    "evaluate_net",
    "intervals_overlap",
    "load_teacher",
    "occlusion_probe",
    "student_config",
    "wilson_interval",
]
