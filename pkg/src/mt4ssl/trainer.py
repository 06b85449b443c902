"""Multi-target pre-training: masked student, K-means labels, EMA-teacher regression targets."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import numerics as nx
from .backbone import Backbone, BackboneConfig, Linear
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .masking import sample_mask
from .offline_targets import align_lengths, offline_loss
from .online_targets import (
    TeacherConfig,
    TeacherState,
    ema_update,
    extract_targets,
    online_loss,
    tau_at,
    teacher_init,
)

log = logging.getLogger(__name__)

MODES = ("combined", "offline_only", "online_only")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr_peak: float = 5e-4
    lr_floor: float = 0.0
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    total_steps: int = 800
    lr_phases: Tuple[float, float, float] = (0.03, 0.90, 0.07)
    batch_size: int = 8
    max_frames: int = 100
    grad_accum: int = 1
    mask_prob: float = 0.065
    mask_len: int = 10
    seed: int = 0
    mode: str = "combined"
    precision: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        self.lr_phases = tuple(self.lr_phases)
        if len(self.lr_phases) != 3 or min(self.lr_phases) < 0 or not math.isclose(sum(self.lr_phases), 1.0, abs_tol=1e-9):
            raise ConfigError(f"lr_phases must be three non-negative fractions summing to 1, got {self.lr_phases}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_steps < 0 or self.batch_size < 1 or self.grad_accum < 1 or self.max_frames < 1:
            raise ConfigError("total_steps >= 0, batch_size >= 1, grad_accum >= 1, max_frames >= 1 required")
        nx.resolve_dtype(self.precision)


def lr_at(step: float, cfg: TrainConfig) -> float:
    """Tri-stage schedule: linear warm-up from 0, hold at peak, linear decay to ``lr_floor``."""
    total = cfg.total_steps
    if total <= 0:
        return cfg.lr_peak
    warm_end = cfg.lr_phases[0] * total
    hold_end = (cfg.lr_phases[0] + cfg.lr_phases[1]) * total
    if step < warm_end:
        return cfg.lr_peak * step / warm_end
    if step <= hold_end:
        return cfg.lr_peak
    frac = min(1.0, (step - hold_end) / (total - hold_end))
    return cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * frac


@dataclass
class LossBreakdown:
    L_f: float
    L_n: float
    total: float
    masked_frames: int
    lr: float
    tau: float
    step: int

    def to_record(self, wall_ms: float) -> dict:
        d = dataclasses.asdict(self)
        d["wall_ms"] = round(wall_ms, 3)
        return d


class MT4SSLModel(nn.Module):
    """Student backbone plus the two prediction heads."""

    def __init__(self, cfg: BackboneConfig, num_clusters: int):
        super().__init__()
        self.backbone = Backbone(cfg)
        self.head_f = Linear(cfg.model_dim, num_clusters)
        self.head_n = Linear(cfg.model_dim, cfg.model_dim)


@dataclass
class Corpus:
    """In-memory utterances with their offline labels (and optional latent states)."""

    waves: List[np.ndarray]
    labels: List[np.ndarray]
    latent: Optional[List[np.ndarray]] = None

    @classmethod
    def build(cls, waves, labels, cfg: BackboneConfig, latent=None) -> "Corpus":
        if not waves:
            raise ConfigError("corpus is empty")
        if len(labels) != len(waves):
            raise ConfigError(f"{len(waves)} utterances but {len(labels)} label rows")
        aligned = []
        for w, y in zip(waves, labels):
            t = cfg.num_frames(len(w))
            if t < 1:
                raise ConfigError(f"utterance of {len(w)} samples is shorter than the receptive field")
            aligned.append(np.asarray(align_lengths(np.asarray(y), t), dtype=np.int64))
        waves = [np.asarray(w, dtype=np.float64) for w in waves]
        return cls(waves, aligned, latent)

    def __len__(self) -> int:
        return len(self.waves)


@dataclass
class Batch:
    waves: np.ndarray  # [B, N]
    labels: np.ndarray  # [B, T]
    mask: np.ndarray  # [B, T] bool
    dropout_seed: int


class Trainer:
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        train_cfg: TrainConfig,
        teacher_cfg: TeacherConfig,
        num_clusters: int,
        corpus: Optional[Corpus] = None,
    ):
        self.backbone_cfg = backbone_cfg
        self.cfg = train_cfg
        self.teacher_cfg = teacher_cfg
        self.num_clusters = num_clusters
        self.corpus = corpus
        self.dtype = nx.resolve_dtype(train_cfg.precision)
        with torch.random.fork_rng():
            torch.manual_seed(train_cfg.seed)
            self.model = MT4SSLModel(backbone_cfg, num_clusters).to(self.dtype)
        self.teacher: TeacherState = teacher_init(self.model.backbone, teacher_cfg)
        self.params = self.active_params()
        self.opt_state = nx.AdamState.zeros_like(self.params)
        self.step = 0
        self.empty_masks = 0
        self._perms: Dict[int, np.ndarray] = {}

    def active_params(self) -> nx.ParamSet:
        """Parameters the optimiser owns in this mode (the unused head is frozen, not decayed)."""
        skip = {"offline_only": "head_n.", "online_only": "head_f."}.get(self.cfg.mode)
        return {n: p for n, p in nx.param_set(self.model).items() if skip is None or not n.startswith(skip)}

    # ---- data -----------------------------------------------------------------

    def _epoch_perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(len(self.corpus))}
        return self._perms[epoch]

    def make_batch(self, step: int, micro: int = 0) -> Batch:
        """Batch for (step, micro-batch); a pure function of the seed, so resuming needs only the step."""
        cfg, bcfg, corpus = self.cfg, self.backbone_cfg, self.corpus
        n = len(corpus)
        first = (step * cfg.grad_accum + micro) * cfg.batch_size
        idx = []
        for i in range(first, first + cfg.batch_size):
            idx.append(int(self._epoch_perm(i // n)[i % n]))
        rng = np.random.default_rng([cfg.seed, 2, step, micro])
        lengths = [len(corpus.labels[i]) for i in idx]
        t = min(min(lengths), cfg.max_frames)
        span = bcfg.samples_for_frames(t)
        waves, labels, masks = [], [], []
        for i, n_frames in zip(idx, lengths):
            k = int(rng.integers(0, n_frames - t + 1))
            waves.append(corpus.waves[i][k * bcfg.hop : k * bcfg.hop + span])
            labels.append(corpus.labels[i][k : k + t])
            m = sample_mask(t, cfg.mask_prob, cfg.mask_len, rng)
            if len(m) == 0:
                self.empty_masks += 1
            masks.append(m.as_bool())
        return Batch(np.stack(waves), np.stack(labels), np.stack(masks), int(rng.integers(2**62)))

    # ---- one optimisation step --------------------------------------------------

    def losses(self, batch: Batch, train: bool = True):
        """Forward pass for one batch; returns (L_f, L_n, masked_frames) as tensors."""
        mode = self.cfg.mode
        bb = self.model.backbone
        self.model.train(train)
        gen = torch.Generator().manual_seed(batch.dropout_seed)
        wave = torch.as_tensor(batch.waves, dtype=self.dtype)
        mask = torch.as_tensor(batch.mask)
        h = bb.encode(wave)
        if h.shape[-2] != mask.shape[-1]:
            raise ConfigError(f"encoder produced {h.shape[-2]} frames, batch has {mask.shape[-1]}")
        z = bb.context_forward(bb.project_and_mask(h, mask), train=train, generator=gen).frames
        zero = z.sum() * 0.0
        l_f = offline_loss(z, batch.labels, mask, self.model.head_f) if mode != "online_only" else zero
        if mode != "offline_only":
            y_n = extract_targets(self.teacher, h)
            l_n = online_loss(z, y_n, mask, self.model.head_n)
        else:
            l_n = zero
        return l_f, l_n, int(mask.sum())

    def train_step(self, batches: Optional[Sequence[Batch]] = None) -> LossBreakdown:
        cfg = self.cfg
        step = self.step
        if batches is None:
            batches = [self.make_batch(step, m) for m in range(cfg.grad_accum)]
        names = list(self.params)
        tensors = list(self.params.values())
        grads: List[Optional[torch.Tensor]] = [None] * len(tensors)
        sum_f = sum_n = 0.0
        masked = 0
        for batch in batches:
            l_f, l_n, m = self.losses(batch)
            total = l_f + cfg.alpha * l_n if cfg.mode == "combined" else (l_f if cfg.mode == "offline_only" else cfg.alpha * l_n)
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step} (seed={cfg.seed}, dropout_seed={batch.dropout_seed}): "
                    f"L_f={l_f.item()}, L_n={l_n.item()}"
                )
            g = torch.autograd.grad(total / len(batches), tensors, allow_unused=True)
            grads = [a if b is None else (b if a is None else a + b) for a, b in zip(g, grads)]
            sum_f += l_f.item()
            sum_n += l_n.item()
            masked += m
        lr = lr_at(step, cfg)
        nx.adam_step(
            self.params, dict(zip(names, grads)), self.opt_state,
            lr=lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
        )
        tau = tau_at(step, cfg.total_steps, self.teacher_cfg.tau_start, self.teacher_cfg.tau_end, self.teacher_cfg.tau_warmup_frac)
        if cfg.mode != "offline_only":
            ema_update(self.teacher, self.model.backbone, tau)
        self.step += 1
        l_f = sum_f / len(batches)
        l_n = sum_n / len(batches)
        alpha = 0.0 if cfg.mode == "offline_only" else cfg.alpha
        l_f = 0.0 if cfg.mode == "online_only" else l_f
        return LossBreakdown(l_f, l_n, l_f + alpha * l_n, masked, lr, tau, self.step)

    # ---- loop -------------------------------------------------------------------

    def train_loop(
        self,
        num_steps: Optional[int] = None,
        metrics_path=None,
        checkpoint_path=None,
        checkpoint_every: Optional[int] = None,
    ) -> List[LossBreakdown]:
        """Run until ``total_steps`` (or ``num_steps`` more); append one JSON line per step."""
        if self.corpus is None or len(self.corpus) == 0:
            raise ConfigError("train_loop needs a non-empty corpus")
        end = self.cfg.total_steps if num_steps is None else min(self.cfg.total_steps, self.step + num_steps)
        every = self.cfg.checkpoint_every if checkpoint_every is None else checkpoint_every
        history = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            while self.step < end:
                t0 = time.perf_counter()
                rec = self.train_step()
                wall = (time.perf_counter() - t0) * 1000.0
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec.to_record(wall)) + "\n")
                    fh.flush()
                if checkpoint_path and every and self.step % every == 0:
                    self.save(checkpoint_path)
                if self.step % 50 == 0:
                    log.info("step %d  L_f %.4f  L_n %.4f  total %.4f  lr %.2e  tau %.5f",
                             rec.step, rec.L_f, rec.L_n, rec.total, rec.lr, rec.tau)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        if self.empty_masks:
            log.info("%d utterance draws had an empty mask", self.empty_masks)
        return history

    # ---- checkpointing --------------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for n, p in nx.param_set(self.model).items():
            tensors["student/" + n] = p.detach().numpy()
        for n, p in self.teacher.params.items():
            tensors["teacher/" + n] = p.detach().numpy()
        for n in self.params:
            tensors["optim/exp_avg/" + n] = self.opt_state.exp_avg[n].numpy()
            tensors["optim/exp_avg_sq/" + n] = self.opt_state.exp_avg_sq[n].numpy()
        meta = {
            "backbone": _jsonable(self.backbone_cfg),
            "train": _jsonable(self.cfg),
            "teacher": _jsonable(self.teacher_cfg),
            "num_clusters": self.num_clusters,
            "adam_step": self.opt_state.step,
            "teacher_step": self.teacher.step,
            "empty_masks": self.empty_masks,
        }
        rng = json.dumps({"seed": self.cfg.seed, "next_step": self.step, "scheme": "per-step"}, sort_keys=True).encode()
        return Checkpoint(self.step, meta, tensors, rng)

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt, corpus: Optional[Corpus] = None) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        meta = ckpt.meta
        try:
            bcfg = BackboneConfig(**meta["backbone"])
            tcfg = TrainConfig(**meta["train"])
            teacher_cfg = TeacherConfig(**meta["teacher"])
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"checkpoint metadata incomplete: {e}") from e
        tr = cls(bcfg, tcfg, teacher_cfg, int(meta["num_clusters"]), corpus)
        expected = {"student/" + n for n in nx.param_set(tr.model)} | {"teacher/" + n for n in tr.teacher.params}
        expected |= {f"optim/{k}/{n}" for n in tr.params for k in ("exp_avg", "exp_avg_sq")}
        if expected != set(ckpt.tensors):
            raise CheckpointError(f"checkpoint tensors do not match model: {sorted(expected ^ set(ckpt.tensors))[:5]}")
        with torch.no_grad():
            for n, p in nx.param_set(tr.model).items():
                p.copy_(_to_tensor(ckpt.tensors["student/" + n], p))
            for n, p in tr.teacher.params.items():
                p.copy_(_to_tensor(ckpt.tensors["teacher/" + n], p))
            for n in tr.params:
                tr.opt_state.exp_avg[n].copy_(_to_tensor(ckpt.tensors["optim/exp_avg/" + n], tr.params[n]))
                tr.opt_state.exp_avg_sq[n].copy_(_to_tensor(ckpt.tensors["optim/exp_avg_sq/" + n], tr.params[n]))
        tr.opt_state.step = int(meta["adam_step"])
        tr.teacher.step = int(meta["teacher_step"])
        tr.empty_masks = int(meta.get("empty_masks", 0))
        tr.step = ckpt.step
        return tr


def _to_tensor(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if tuple(t.shape) != tuple(like.shape):
        raise CheckpointError(f"tensor shape {tuple(t.shape)} does not match parameter {tuple(like.shape)}")
    return t.to(like.dtype)


def _jsonable(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
