"""Frame-level feature frontends used to fit and apply the K-means codebook.

The default frontend is log-mel filterbank energies whose hop equals the
encoder's stride product and whose window equals its receptive field, so
feature frames line up one-to-one with encoder frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputTooShortError

FRONTENDS = ("logmel", "encoder")


@dataclass
class FeatureConfig:
    kind: str = "logmel"
    sample_rate: int = 16000
    frame_rate: float = 50.0
    win_length: int = 400
    n_fft: int = 512
    num_mels: int = 13
    deltas: bool = False
    fmin: float = 0.0
    fmax: float | None = None
    energy_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.kind not in FRONTENDS:
            raise ConfigError(f"unknown feature frontend {self.kind!r}, expected one of {FRONTENDS}")
        hop = self.sample_rate / self.frame_rate
        if abs(hop - round(hop)) > 1e-9:
            raise ConfigError(f"sample_rate / frame_rate = {hop} is not an integer hop")
        if self.n_fft < self.win_length:
            raise ConfigError(f"n_fft {self.n_fft} shorter than window {self.win_length}")

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate / self.frame_rate))

    @property
    def dim(self) -> int:
        return self.num_mels * (3 if self.deltas else 1)

    @property
    def feature_kind(self) -> str:
        if self.kind == "logmel":
            return f"logmel-{self.dim}"
        return "encoder"

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_length:
            return 0
        return (num_samples - self.win_length) // self.hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, num_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``[num_mels, n_fft // 2 + 1]``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    bins = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None] - lo) / (mid - lo)
    down = (hi - bins[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over time with edge replication."""
    t = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = sum(n * (padded[width + n : width + n + t] - padded[width - n : width - n + t]) for n in range(1, width + 1))
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def logmel(wave: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    t = cfg.num_frames(wave.shape[-1])
    if t < 1:
        raise InputTooShortError(f"waveform has {wave.shape[-1]} samples, need at least {cfg.win_length}")
    frames = np.lib.stride_tricks.sliding_window_view(wave, cfg.win_length)[:: cfg.hop][:t]
    window = np.hanning(cfg.win_length + 1)[:-1]
    power = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft)) ** 2
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.num_mels, cfg.fmin, cfg.fmax)
    feats = np.log(np.maximum(power @ fb.T, cfg.energy_floor))
    if cfg.deltas:
        d1 = deltas(feats)
        feats = np.concatenate([feats, d1, deltas(d1)], axis=1)
    return feats


def frame_features(wave: np.ndarray, cfg: FeatureConfig, backbone=None) -> np.ndarray:
    """Features ``[T, F]`` at the encoder frame rate.

    ``kind="encoder"`` uses the conv-encoder output of ``backbone`` (e.g. a
    previous checkpoint) instead of filterbank energies.
    """
    if cfg.kind == "logmel":
        return logmel(wave, cfg)
    if backbone is None:
        raise ConfigError("encoder features need a backbone (load one from a checkpoint)")
    import torch

    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        h = backbone.encode(torch.as_tensor(np.asarray(wave), dtype=dtype))
    return h.double().numpy()
