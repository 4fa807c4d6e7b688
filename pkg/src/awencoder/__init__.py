"""Adversarial watermarking of contrastive-learning encoders on a small numpy autodiff core."""
from .attacks import AttackConfig, attack_report, ftal, prune_attack, rtal
from .contrastive import ContrastiveConfig, ContrastiveModel, moco_loss, ntxent_loss, pretrain, train
from .data import Dataset, SyntheticConfig, generate, key_image
from .models import MLP, ParamStore, ProbeConfig, prune_params, train_linear_probe
from .numcore import Tensor
from .verification import VerificationReport, calibrate_threshold, t_cls, t_sim, verify
from .watermark import EmbedConfig, PGDConfig, Watermark, embed_watermark, generate_watermark

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ContrastiveConfig", "ContrastiveModel", "Dataset", "EmbedConfig", "MLP", "PGDConfig",
    "ParamStore", "ProbeConfig", "SyntheticConfig", "Tensor", "VerificationReport", "Watermark",
    "attack_report", "calibrate_threshold", "embed_watermark", "ftal", "generate", "generate_watermark",
    "key_image", "moco_loss", "ntxent_loss", "pretrain", "prune_attack", "prune_params", "rtal", "t_cls",
    "t_sim", "train", "train_linear_probe", "verify",
]
