"""Linear probe on frozen frame features (closed-form ridge regression onto one-hot states)."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np
import torch

from .backbone import Backbone
from .errors import ConfigError


def ridge_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    num_classes: int,
    l2: float = 1e-2,
) -> float:
    """Fit ``W`` minimising ``|[X 1] W - onehot(y)|^2 + l2 |W|^2`` on standardised features; return test accuracy."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    a = np.hstack([(train_x - mu) / sd, np.ones((len(train_x), 1))])
    b = np.eye(num_classes)[train_y]
    reg = l2 * len(a) * np.eye(a.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(a.T @ a + reg, a.T @ b)
    pred = (np.hstack([(test_x - mu) / sd, np.ones((len(test_x), 1))]) @ w).argmax(axis=1)
    return float((pred == test_y).mean())


@torch.no_grad()
def layer_features(backbone: Backbone, waves: Sequence[np.ndarray], layer: int) -> List[np.ndarray]:
    """Unmasked eval-mode output of context block ``layer`` (negative indexes from the top)."""
    n = backbone.cfg.num_layers
    if not -n <= layer < n:
        raise ConfigError(f"probe layer {layer} out of range for {n} layers")
    dtype = next(backbone.parameters()).dtype
    was_training = backbone.training
    backbone.eval()
    feats = []
    for w in waves:
        out = backbone(torch.as_tensor(np.asarray(w), dtype=dtype))
        feats.append(out.layer_outputs[layer].double().numpy())
    backbone.train(was_training)
    return feats


def split_utterances(n: int, held_out: float, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(held_out * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def probe_eval(
    backbone: Backbone,
    waves: Sequence[np.ndarray],
    latent: Sequence[np.ndarray],
    layer: int = -1,
    held_out: float = 0.2,
    seed: int = 0,
    l2: float = 1e-2,
) -> float:
    """Frame accuracy of a linear probe on frozen features, split by utterance."""
    feats = layer_features(backbone, waves, layer)
    xs, ys = [], []
    for f, y in zip(feats, latent):
        t = min(len(f), len(y))
        xs.append(f[:t])
        ys.append(np.asarray(y[:t]))
    return probe_arrays(xs, ys, held_out, seed, l2)


def probe_arrays(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], held_out: float = 0.2, seed: int = 0, l2: float = 1e-2) -> float:
    num_classes = int(max(int(y.max()) for y in ys if len(y)) + 1)
    train, test = split_utterances(len(xs), held_out, seed)
    cat = lambda idx, arrs: np.concatenate([arrs[i] for i in idx])  # noqa: E731
    return ridge_probe(cat(train, xs), cat(train, ys), cat(test, xs), cat(test, ys), num_classes, l2)
