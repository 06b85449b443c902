"""Waveform encoder, feature projection with mask token, and transformer context network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputTooShortError, MaskIndexError


@dataclass
class BackboneConfig:
    sample_rate: int = 16000
    encoder_kernels: Sequence[int] = (10, 3, 3, 3, 3, 2, 2)
    encoder_strides: Sequence[int] = (5, 2, 2, 2, 2, 2, 2)
    encoder_dim: int = 32
    model_dim: int = 64
    ffn_dim: int = 256
    num_layers: int = 4
    num_heads: int = 4
    pos_conv_kernel: int = 9
    pos_conv_groups: int = 4
    frame_rate: float = 50.0
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.encoder_kernels = tuple(int(k) for k in self.encoder_kernels)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_kernels) != 7 or len(self.encoder_strides) != 7:
            raise ConfigError(
                f"encoder needs 7 kernels and 7 strides, got {len(self.encoder_kernels)} and {len(self.encoder_strides)}"
            )
        if min(self.encoder_kernels) < 1 or min(self.encoder_strides) < 1:
            raise ConfigError("encoder kernels and strides must be positive")
        if not math.isclose(self.hop * self.frame_rate, self.sample_rate, rel_tol=1e-9):
            raise ConfigError(
                f"stride product {self.hop} x frame_rate {self.frame_rate} != sample_rate {self.sample_rate}"
            )
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.model_dim % self.pos_conv_groups:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by pos_conv_groups {self.pos_conv_groups}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def hop(self) -> int:
        """Samples between consecutive output frames (product of strides)."""
        return int(np.prod(self.encoder_strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.encoder_kernels, self.encoder_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def num_frames(self, num_samples: int) -> int:
        """Encoder output length, iterating the valid-conv length formula layer by layer."""
        t = num_samples
        for k, s in zip(self.encoder_kernels, self.encoder_strides):
            t = nx.conv_out_len(t, k, s)
        return t

    def samples_for_frames(self, num_frames: int) -> int:
        """Smallest waveform length that yields ``num_frames`` encoder frames."""
        return (num_frames - 1) * self.hop + self.receptive_field

    @classmethod
    def paper(cls, **overrides) -> "BackboneConfig":
        base = dict(
            encoder_dim=512, model_dim=768, ffn_dim=3072, num_layers=12, num_heads=12,
            pos_conv_kernel=128, pos_conv_groups=16,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_as_printed(cls, **overrides) -> "BackboneConfig":
        """Kernel/stride lists in the originally published order (~4.9 Hz frames)."""
        base = dict(
            encoder_kernels=(5, 2, 2, 2, 2, 2, 2), encoder_strides=(10, 3, 3, 3, 3, 2, 2),
            frame_rate=16000 / 3240,
        )
        base.update(overrides)
        return cls.paper(**base)

    @classmethod
    def desk(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)


@dataclass
class BackboneOutput:
    frames: torch.Tensor
    layer_outputs: List[torch.Tensor] = field(default_factory=list)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.empty(d_out)) if bias else None
        bound = 1.0 / math.sqrt(d_in)
        nn.init.uniform_(self.weight, -bound, bound)
        if self.bias is not None:
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.layernorm(x, self.weight, self.bias, self.eps)


class ConvLayer(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, group_norm: bool, eps: float):
        super().__init__()
        self.stride = stride
        self.kernel = nn.Parameter(torch.empty(kernel, c_in, c_out))
        nn.init.kaiming_normal_(self.kernel.data.permute(2, 1, 0))
        if group_norm:
            self.norm_weight = nn.Parameter(torch.ones(c_out))
            self.norm_bias = nn.Parameter(torch.zeros(c_out))
        else:
            self.norm_weight = self.norm_bias = None
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = nx.conv1d(x, self.kernel, stride=self.stride)
        if self.norm_weight is not None:
            # one group per channel: normalise each channel over time
            y = nx.groupnorm(y, y.shape[-1], self.norm_weight, self.norm_bias, self.eps)
        return nx.gelu(y)


class ConvEncoder(nn.Module):
    """Seven strided valid convolutions, waveform ``[..., N]`` -> frames ``[..., T, D_enc]``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 1
        for i, (k, s) in enumerate(zip(cfg.encoder_kernels, cfg.encoder_strides)):
            layers.append(ConvLayer(c_in, cfg.encoder_dim, k, s, group_norm=(i == 0), eps=cfg.layer_norm_eps))
            c_in = cfg.encoder_dim
        self.layers = nn.ModuleList(layers)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        n = wave.shape[-1]
        if n < self.cfg.receptive_field:
            raise InputTooShortError(
                f"waveform has {n} samples, encoder receptive field is {self.cfg.receptive_field}"
            )
        if not torch.isfinite(wave).all():
            raise ValueError("waveform contains non-finite samples")
        x = wave.unsqueeze(-1)
        for layer in self.layers:
            x = layer(x)
        return x


class FeatureProjection(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm = LayerNorm(cfg.encoder_dim, cfg.layer_norm_eps)
        self.linear = Linear(cfg.encoder_dim, cfg.model_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.linear(self.norm(h))


class PositionalConv(nn.Module):
    """Grouped "same"-length convolution added residually (learnable relative position)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, k, g = cfg.model_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups
        self.groups = g
        self.kernel = nn.Parameter(torch.empty(k, d // g, d))
        nn.init.normal_(self.kernel, 0.0, math.sqrt(4.0 / (k * d)))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = self.kernel.shape[0]
        t = x.shape[-2]
        padded = F.pad(x.transpose(-1, -2), (k // 2, k // 2)).transpose(-1, -2)
        y = nx.conv1d(padded, self.kernel, stride=1, groups=self.groups)[..., :t, :] + self.bias
        return x + nx.gelu(y)


class TransformerBlock(nn.Module):
    """Pre-norm block: ``x + attn(LN(x))`` then ``x + ffn(LN(x))``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.p = cfg.dropout
        self.attn_norm = LayerNorm(d, cfg.layer_norm_eps)
        self.qkv = Linear(d, 3 * d)
        self.out = Linear(d, d)
        self.ffn_norm = LayerNorm(d, cfg.layer_norm_eps)
        self.fc1 = Linear(d, cfg.ffn_dim)
        self.fc2 = Linear(cfg.ffn_dim, d)

    def forward(self, x: torch.Tensor, train: bool = False, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        a = nx.self_attention(
            self.attn_norm(x), self.qkv.weight, self.qkv.bias, self.out.weight, self.out.bias, self.num_heads
        )
        x = x + nx.dropout(a, self.p, train, generator)
        h = nx.dropout(nx.gelu(self.fc1(self.ffn_norm(x))), self.p, train, generator)
        return x + nx.dropout(self.fc2(h), self.p, train, generator)


class ContextNetwork(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_conv = PositionalConv(cfg)
        self.layers = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.num_layers))

    def forward(self, x: torch.Tensor, train: bool = False, generator: Optional[torch.Generator] = None) -> BackboneOutput:
        if x.shape[-1] != self.cfg.model_dim:
            raise DimensionError(f"context input has dim {x.shape[-1]}, expected {self.cfg.model_dim}")
        x = self.pos_conv(x)
        outs = []
        for layer in self.layers:
            x = layer(x, train, generator)
            outs.append(x)
        return BackboneOutput(frames=x, layer_outputs=outs)


def mask_tensor(mask, num_frames: int) -> torch.Tensor:
    """Normalise a mask (MaskSpec, index list, or bool tensor) to a bool tensor over frames."""
    if isinstance(mask, torch.Tensor) and mask.dtype == torch.bool:
        if mask.shape[-1] != num_frames:
            raise MaskIndexError(f"mask covers {mask.shape[-1]} frames, sequence has {num_frames}")
        return mask
    indices = np.asarray(getattr(mask, "indices", mask), dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_frames):
        raise MaskIndexError(f"mask index out of range [0, {num_frames}): {indices.min()}..{indices.max()}")
    out = torch.zeros(num_frames, dtype=torch.bool)
    out[torch.from_numpy(indices)] = True
    return out


class Backbone(nn.Module):
    """Encoder ``f``, projection + mask ``m``, and context network ``g``."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg)
        self.proj = FeatureProjection(cfg)
        self.mask_emb = nn.Parameter(torch.empty(cfg.model_dim).uniform_())
        self.context = ContextNetwork(cfg)

    def encode(self, wave: torch.Tensor) -> torch.Tensor:
        return self.encoder(wave)

    def project_and_mask(self, h: torch.Tensor, mask=None) -> torch.Tensor:
        x = self.proj(h)
        if mask is None:
            return x
        m = mask_tensor(mask, x.shape[-2])
        return torch.where(m.unsqueeze(-1), self.mask_emb.to(x.dtype), x)

    def context_forward(self, x: torch.Tensor, train: bool = False, generator: Optional[torch.Generator] = None) -> BackboneOutput:
        return self.context(x, train, generator)

    def forward(self, wave: torch.Tensor, mask=None, train: bool = False, generator: Optional[torch.Generator] = None) -> BackboneOutput:
        return self.context_forward(self.project_and_mask(self.encode(wave), mask), train, generator)


# Names (relative to Backbone) mirrored by the EMA teacher.
CONTEXT_SUBSET_PREFIXES = ("proj.", "context.")
