"""Online targets from an EMA teacher.

The teacher is a gradient-free copy of the student's projection and context
network. It reads the *unmasked* encoder output and its targets are the average
of its top-k block outputs (each instance-normalised over the feature dim by
default). The teacher tracks the student by ``teacher = tau * teacher + (1 - tau) * student``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .backbone import CONTEXT_SUBSET_PREFIXES, Backbone
from .errors import ConfigError, DimensionError, ParamSetError


@dataclass
class TeacherConfig:
    top_k: int = 3
    tau_start: float = 0.99
    tau_end: float = 0.999
    tau_warmup_frac: float = 0.075
    normalize: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_start <= self.tau_end <= 1.0):
            raise ConfigError(f"need 0 < tau_start <= tau_end <= 1, got {self.tau_start}, {self.tau_end}")
        if not 0.0 <= self.tau_warmup_frac <= 1.0:
            raise ConfigError(f"tau_warmup_frac must be in [0, 1], got {self.tau_warmup_frac}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


class TeacherNetwork(nn.Module):
    def __init__(self, backbone: Backbone):
        super().__init__()
        self.cfg = backbone.cfg
        self.proj = copy.deepcopy(backbone.proj)
        self.context = copy.deepcopy(backbone.context)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, h: torch.Tensor):
        return self.context(self.proj(h), train=False)


@dataclass
class TeacherState:
    network: TeacherNetwork
    cfg: TeacherConfig = field(default_factory=TeacherConfig)
    step: int = 0

    @property
    def params(self) -> nx.ParamSet:
        return nx.param_set(self.network)


def context_subset(student: Mapping[str, torch.Tensor]) -> nx.ParamSet:
    return {n: p for n, p in student.items() if n.startswith(CONTEXT_SUBSET_PREFIXES)}


def teacher_init(backbone: Backbone, cfg: TeacherConfig | None = None) -> TeacherState:
    cfg = cfg or TeacherConfig()
    student = context_subset(nx.param_set(backbone))
    if not any(n.startswith("proj.") for n in student) or not any(n.startswith("context.") for n in student):
        raise ParamSetError("student backbone lacks the projection/context parameters the teacher mirrors")
    if cfg.top_k > backbone.cfg.num_layers:
        raise ConfigError(f"top_k={cfg.top_k} exceeds num_layers={backbone.cfg.num_layers}")
    net = TeacherNetwork(backbone)
    assert list(nx.param_set(net)) == list(student)
    return TeacherState(net, cfg, 0)


def tau_at(step: int, total_steps: int, tau_start: float = 0.99, tau_end: float = 0.999, warmup_frac: float = 0.075) -> float:
    """Linear ramp ``tau_start -> tau_end`` over ``floor(warmup_frac * total_steps)`` steps, then flat."""
    warmup = math.floor(warmup_frac * total_steps)
    if step >= warmup:
        return tau_end
    return tau_start + (tau_end - tau_start) * step / warmup


@torch.no_grad()
def ema_update(state: TeacherState, student, tau: float) -> TeacherState:
    """``teacher <- tau * teacher + (1 - tau) * student`` for every mirrored parameter."""
    if isinstance(student, nn.Module):
        student = nx.param_set(student)
    src = context_subset(student)
    dst = state.params
    if list(src) != list(dst):
        raise ParamSetError(f"teacher/student name mismatch: {sorted(set(src) ^ set(dst))[:5]}")
    for name, d in dst.items():
        d.mul_(tau).add_(src[name].detach(), alpha=1.0 - tau)
    state.step += 1
    return state


@torch.no_grad()
def extract_targets(state: TeacherState, h: torch.Tensor) -> torch.Tensor:
    """Average of the teacher's top-k block outputs on unmasked encoder frames ``h``."""
    k = state.cfg.top_k
    if k > len(state.network.context.layers):
        raise ConfigError(f"top_k={k} exceeds num_layers={len(state.network.context.layers)}")
    out = state.network(h.detach())
    layers = out.layer_outputs[-k:]
    if state.cfg.normalize:
        layers = [F.layer_norm(y, y.shape[-1:]) for y in layers]
    if k == 1:
        return layers[0]
    return sum(layers) / k


def online_loss(z: torch.Tensor, targets: torch.Tensor, mask, head) -> torch.Tensor:
    """MSE between ``head(z)`` and teacher targets on masked frames only."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != z.shape[:-1] or targets.shape[:-1] != z.shape[:-1]:
        raise DimensionError(
            f"mask {tuple(mask.shape)} / targets {tuple(targets.shape)} do not align with frames {tuple(z.shape)}"
        )
    return nx.mse(head(z[mask]), targets[mask])
