"""Span masking: each frame starts a span with probability ``p``; a span covers ``l`` frames."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError


@dataclass
class MaskSpec:
    start_prob: float
    span_len: int
    num_frames: int
    indices: np.ndarray
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: Optional[int] = None

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_frames, dtype=bool)
        out[self.indices] = True
        return out

    def __len__(self) -> int:
        return int(self.indices.size)


def sample_mask(
    num_frames: int,
    p: float,
    span_len: int,
    rng: Union[np.random.Generator, int, None] = None,
) -> MaskSpec:
    """Sample span starts independently at every frame and union the truncated spans."""
    if num_frames < 1:
        raise ConfigError(f"num_frames must be >= 1, got {num_frames}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"start probability must be in [0, 1], got {p}")
    if span_len < 1:
        raise ConfigError(f"span length must be >= 1, got {span_len}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    starts = np.flatnonzero(rng.random(num_frames) < p)
    covered = np.zeros(num_frames + span_len, dtype=bool)
    for offset in range(span_len):
        covered[starts + offset] = True
    indices = np.flatnonzero(covered[:num_frames])
    return MaskSpec(p, span_len, num_frames, indices, starts, seed)


def coverage(spec: MaskSpec, num_frames: Optional[int] = None) -> float:
    t = spec.num_frames if num_frames is None else num_frames
    if t <= 0:
        raise ZeroDivisionError("coverage is undefined for zero frames")
    return len(spec) / t


def expected_coverage(p: float, span_len: int) -> float:
    """Asymptotic (T >> l) masked fraction: a frame is unmasked iff none of the l starts covering it fired."""
    return 1.0 - (1.0 - p) ** span_len
