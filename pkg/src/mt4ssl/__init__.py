"""Multi-target masked self-supervised speech pre-training (offline K-means + online EMA targets)."""

from .backbone import Backbone, BackboneConfig
from .masking import MaskSpec, sample_mask
from .offline_targets import ClusterCodebook, assign, kmeans_fit
from .online_targets import TeacherConfig, ema_update, extract_targets, tau_at, teacher_init
from .trainer import TrainConfig, Trainer, lr_at

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "ClusterCodebook",
    "MaskSpec",
    "TeacherConfig",
    "TrainConfig",
    "Trainer",
    "assign",
    "ema_update",
    "extract_targets",
    "kmeans_fit",
    "lr_at",
    "sample_mask",
    "tau_at",
    "teacher_init",
]
