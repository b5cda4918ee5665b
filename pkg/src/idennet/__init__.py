"""Two-stream facial expression networks with an identity-aware fusion head, on a numpy autodiff engine."""
from .autodiff import Tensor, Tape, backward, grad_check
from .config import BackboneConfig, LossConfig, TrainConfig
from .losses import cross_entropy, focal_multiclass, joint_loss
from .model import IdenNet, PretrainNet, Variant, build_model, extract_heatmap, forward, load_pretrained_and_share

__all__ = [
    "Tensor", "Tape", "backward", "grad_check",
    "BackboneConfig", "LossConfig", "TrainConfig",
    "cross_entropy", "focal_multiclass", "joint_loss",
    "IdenNet", "PretrainNet", "Variant", "build_model", "extract_heatmap", "forward",
    "load_pretrained_and_share",
]
__version__ = "0.1.0"
