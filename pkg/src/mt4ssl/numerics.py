"""Differentiable tensor primitives and the Adam optimizer step.

Every op here is a thin, shape-checked wrapper over torch autograd. Inputs use
a "frames last-but-one" layout: sequences are ``[..., T, C]`` so that a single
utterance is simply ``T x C`` and batches just add a leading dimension.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Mapping

import torch
import torch.nn.functional as F

from .errors import DimensionError, EmptyOutputError, LabelError, ParamSetError

# Ordered name -> tensor map; iteration order is the canonical parameter order.
ParamSet = Dict[str, torch.Tensor]

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise DimensionError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}") from None


def param_set(module: torch.nn.Module, prefix: str = "") -> ParamSet:
    """Ordered name -> parameter map of a module (deterministic order)."""
    return OrderedDict((prefix + name, p) for name, p in module.named_parameters())


def _shape(t: torch.Tensor) -> tuple:
    return tuple(t.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {_shape(a)} @ {_shape(b)}")
    return a @ b


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    """Valid-padding output length ``floor((T - K) / stride) + 1`` (0 if T < K)."""
    if length < kernel:
        return 0
    return (length - kernel) // stride + 1


def conv1d(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, groups: int = 1) -> torch.Tensor:
    """Valid 1-D convolution.

    Args:
        x: ``[..., T, Cin]``.
        kernel: ``[K, Cin // groups, Cout]``.

    Returns:
        ``[..., T', Cout]`` with ``T' = floor((T - K) / stride) + 1``.
    """
    if kernel.dim() != 3:
        raise DimensionError(f"conv1d kernel must be K x Cin/groups x Cout, got {_shape(kernel)}")
    k, cin_g, cout = kernel.shape
    cin = x.shape[-1]
    if stride < 1 or groups < 1:
        raise DimensionError(f"stride and groups must be positive (stride={stride}, groups={groups})")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise DimensionError(
            f"conv1d channel mismatch: input {_shape(x)}, kernel {_shape(kernel)}, groups={groups}"
        )
    t = x.shape[-2]
    if t < k:
        raise EmptyOutputError(f"conv1d input length {t} is shorter than kernel size {k}")
    lead = x.shape[:-2]
    xb = x.reshape(-1, t, cin).transpose(1, 2)
    y = F.conv1d(xb, kernel.permute(2, 1, 0), stride=stride, groups=groups)
    return y.transpose(1, 2).reshape(*lead, y.shape[-1], cout)


def layernorm(x: torch.Tensor, gain: torch.Tensor | None, bias: torch.Tensor | None, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and _shape(p) != (d,):
            raise DimensionError(f"layernorm {name} shape {_shape(p)} does not match last dim {d}")
    return F.layer_norm(x, (d,), gain, bias, eps)


def groupnorm(
    x: torch.Tensor, num_groups: int, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Group norm over time for ``[..., T, C]`` sequences (statistics per group of channels)."""
    c = x.shape[-1]
    if c % num_groups or _shape(gain) != (c,) or _shape(bias) != (c,):
        raise DimensionError(f"groupnorm mismatch: input {_shape(x)}, groups={num_groups}, gain {_shape(gain)}")
    lead, t = x.shape[:-2], x.shape[-2]
    xb = x.reshape(-1, t, c).transpose(1, 2)
    y = F.group_norm(xb, num_groups, gain, bias, eps)
    return y.transpose(1, 2).reshape(*lead, t, c)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {_shape(x)}, weight {_shape(weight)}")
    if bias is not None and _shape(bias) != (weight.shape[0],):
        raise DimensionError(f"linear bias {_shape(bias)} does not match weight {_shape(weight)}")
    return F.linear(x, weight, bias)


def dropout(x: torch.Tensor, p: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout. The keep-mask is drawn from ``generator`` so runs are reproducible."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def embedding_select(table: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise DimensionError(f"embedding table must be 2-D, got {_shape(table)}")
    indices = torch.as_tensor(indices, dtype=torch.long)
    if indices.numel() and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise LabelError(f"embedding index out of range [0, {table.shape[0]})")
    return table[indices]


def self_attention(
    x: torch.Tensor,
    w_qkv: torch.Tensor,
    b_qkv: torch.Tensor,
    w_out: torch.Tensor,
    b_out: torch.Tensor,
    num_heads: int,
) -> torch.Tensor:
    """Multi-head scaled dot-product self-attention over ``[..., T, D]`` (no masking)."""
    d = x.shape[-1]
    if d % num_heads:
        raise DimensionError(f"model dim {d} not divisible by {num_heads} heads")
    if _shape(w_qkv) != (3 * d, d):
        raise DimensionError(f"attention qkv weight {_shape(w_qkv)} does not match model dim {d}")
    t = x.shape[-2]
    hd = d // num_heads
    qkv = linear(x, w_qkv, b_qkv)
    q, k, v = qkv.split(d, dim=-1)
    # [..., T, D] -> [..., H, T, hd]
    q, k, v = (z.reshape(*z.shape[:-1], num_heads, hd).transpose(-2, -3) for z in (q, k, v))
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(-2, -3).reshape(*x.shape[:-2], t, d)
    return linear(out, w_out, b_out)


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``; zero (with zero grad) for N=0."""
    if logits.dim() != 2:
        raise DimensionError(f"logits must be N x C, got {_shape(logits)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    n, c = logits.shape
    if _shape(labels) != (n,):
        raise DimensionError(f"labels shape {_shape(labels)} does not match logits {_shape(logits)}")
    if n == 0:
        return logits.sum() * 0.0
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"label out of range [0, {c}): min={int(labels.min())}, max={int(labels.max())}")
    return F.cross_entropy(logits, labels)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences; the target is treated as a constant."""
    if _shape(pred) != _shape(target):
        raise DimensionError(f"mse shape mismatch: {_shape(pred)} vs {_shape(target)}")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return ((pred - target.detach()) ** 2).mean()


@dataclass
class AdamState:
    step: int = 0
    exp_avg: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    exp_avg_sq: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor]) -> "AdamState":
        return cls(
            step=0,
            exp_avg=OrderedDict((n, torch.zeros_like(p, requires_grad=False)) for n, p in params.items()),
            exp_avg_sq=OrderedDict((n, torch.zeros_like(p, requires_grad=False)) for n, p in params.items()),
        )


@torch.no_grad()
def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-6,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, applied in place.

    A ``None`` gradient is treated as zero so the moments still decay.
    """
    names = list(params)
    if list(grads) != names or list(state.exp_avg) != names or list(state.exp_avg_sq) != names:
        missing = set(names) ^ set(grads) | set(names) ^ set(state.exp_avg)
        raise ParamSetError(f"params, grads and optimizer state are not aligned by name: {sorted(missing)[:5]}")
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name in names:
        p = params[name]
        g = grads[name]
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {_shape(g)}, parameter {_shape(p)}")
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state
