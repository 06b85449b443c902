"""Offline targets: a K-means codebook fitted before pre-training, its frame labels, and the
masked cross-entropy loss of the classification head against those labels."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch

from . import numerics as nx
from .errors import AlignmentError, DimensionError, FormatError, InsufficientDataError

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"MT4K"
CODEBOOK_VERSION = 1


@dataclass
class ClusterCodebook:
    centroids: np.ndarray
    feature_kind: str
    inertia: float = float("nan")
    history: List[float] = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


def _sq_dists(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared distances ``[N, C]`` from explicit differences (no norm expansion, so ties stay ties)."""
    out = np.empty((x.shape[0], centroids.shape[0]))
    for i in range(0, x.shape[0], chunk):
        diff = x[i : i + chunk, None, :] - centroids[None, :, :]
        out[i : i + chunk] = np.einsum("ncf,ncf->nc", diff, diff)
    return out


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    """Lloyd iterations. Returns centroids, labels, and the objective after every update.

    The recorded objective is J(labels, centroids) after each mean update; each half-step
    (assignment, empty-cluster repair, mean update) can only lower it.
    """
    k = centroids.shape[0]
    history: List[float] = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        point_cost = d[np.arange(x.shape[0]), new_labels]
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # move the worst-served point of a cluster with >1 members into the empty cluster
            donor_ok = counts[new_labels] > 1
            cand = np.where(donor_ok, point_cost, -np.inf)
            i = int(cand.argmax())
            counts[new_labels[i]] -= 1
            new_labels[i] = j
            counts[j] = 1
            point_cost[i] = 0.0
            centroids[j] = x[i]
        sums = np.zeros_like(centroids)
        np.add.at(sums, new_labels, x)
        centroids = sums / counts[:, None]
        diff = x - centroids[new_labels]
        inertia = float(np.einsum("nf,nf->", diff, diff))
        converged = labels is not None and np.array_equal(labels, new_labels)
        if history and history[-1] - inertia <= tol * max(history[-1], 1e-300):
            converged = True
        labels = new_labels
        history.append(inertia)
        if converged:
            break
    return centroids, labels, history


def kmeans_fit(
    features: np.ndarray,
    num_clusters: int,
    restarts: int = 1,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    feature_kind: str = "unknown",
) -> ClusterCodebook:
    """Lloyd's algorithm from k-means++ seeds; keeps the restart with the lowest inertia."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be N x F, got shape {x.shape}")
    if num_clusters < 2:
        raise InsufficientDataError(f"need at least 2 clusters, got {num_clusters}")
    if x.shape[0] < num_clusters:
        raise InsufficientDataError(f"{x.shape[0]} points cannot fill {num_clusters} clusters")
    if np.unique(x, axis=0).shape[0] < num_clusters:
        raise InsufficientDataError(f"fewer than {num_clusters} distinct points")
    rng = np.random.default_rng(seed)
    best: Optional[ClusterCodebook] = None
    for r in range(max(1, restarts)):
        init = kmeans_plusplus(x, num_clusters, rng)
        centroids, _, history = _lloyd(x, init, max_iters, tol)
        log.debug("kmeans restart %d: inertia %.6g after %d iterations", r, history[-1], len(history))
        if best is None or history[-1] < best.inertia:
            best = ClusterCodebook(centroids, feature_kind, history[-1], history)
    return best


def assign(codebook: ClusterCodebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels; ties go to the lowest centroid index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise DimensionError(f"features {x.shape} do not match codebook dimension {codebook.dim}")
    return _sq_dists(x, codebook.centroids.astype(np.float64)).argmin(axis=1)


def align_lengths(labels: np.ndarray, num_frames: int) -> np.ndarray:
    """Truncate labels to the encoder frame count; tolerates only a one-frame boundary mismatch."""
    if abs(len(labels) - num_frames) > 1:
        raise AlignmentError(f"{len(labels)} labels cannot align with {num_frames} frames")
    return labels[: min(len(labels), num_frames)]


def offline_loss(z: torch.Tensor, labels, mask, head) -> torch.Tensor:
    """Cross entropy of ``head(z)`` against cluster labels, averaged over masked frames only.

    ``z`` is ``[..., T, D]``; ``labels`` and ``mask`` share its leading shape ``[..., T]``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if labels.shape != z.shape[:-1] or mask.shape != z.shape[:-1]:
        raise AlignmentError(
            f"labels {tuple(labels.shape)} / mask {tuple(mask.shape)} do not align with frames {tuple(z.shape[:-1])}"
        )
    return nx.softmax_cross_entropy(head(z[mask]), labels[mask])


def save_codebook(codebook: ClusterCodebook, path) -> None:
    kind = codebook.feature_kind.encode("utf-8")
    c, f = codebook.centroids.shape
    blob = b"".join([
        CODEBOOK_MAGIC,
        struct.pack("<III", CODEBOOK_VERSION, c, f),
        np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes(),
        struct.pack("<I", len(kind)),
        kind,
    ])
    Path(path).write_bytes(blob)


def load_codebook(path) -> ClusterCodebook:
    data = Path(path).read_bytes()
    if data[:4] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: not a codebook file (magic {data[:4]!r})")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, c, f = struct.unpack_from("<III", data, 4)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    off = 16 + 4 * c * f
    if len(data) < off + 4:
        raise FormatError(f"{path}: truncated centroid table")
    centroids = np.frombuffer(data, dtype="<f4", count=c * f, offset=16).reshape(c, f).astype(np.float64)
    (n,) = struct.unpack_from("<I", data, off)
    if len(data) != off + 4 + n:
        raise FormatError(f"{path}: feature_kind field length mismatch")
    return ClusterCodebook(centroids, data[off + 4 :].decode("utf-8"))


def write_labels(path, labels: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for row in labels:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_labels(path) -> List[np.ndarray]:
    with open(path) as fh:
        return [np.array(line.split(), dtype=np.int64) for line in fh]
