"""Command-line entry point: ``mt4ssl <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import struct
import sys
import zlib
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from .errors import ConfigError, FormatError, MT4SSLError

log = logging.getLogger("mt4ssl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1 here
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _load_cfg(args) -> config_mod.Config:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.preset(args.preset)
    env_seed = os.environ.get("MT4SSL_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"MT4SSL_SEED must be an integer, got {env_seed!r}") from None
    if getattr(args, "mode", None):
        cfg.train = config_mod._override(cfg.train, {"mode": args.mode}, "train")
    if getattr(args, "steps", None) is not None:
        cfg.train = config_mod._override(cfg.train, {"total_steps": args.steps}, "train")
    print("# effective config", file=sys.stderr)
    print(config_mod.dumps(cfg), file=sys.stderr)
    return cfg


def _save_features(path, kind: str, feats: List[np.ndarray]) -> None:
    lengths = np.array([len(f) for f in feats], dtype=np.int64)
    np.savez(path, feature_kind=np.array(kind), lengths=lengths, data=np.concatenate(feats).astype(np.float32))


def _load_features(path):
    with np.load(path) as z:
        kind = str(z["feature_kind"])
        lengths = z["lengths"]
        data = z["data"].astype(np.float64)
    return kind, np.split(data, np.cumsum(lengths)[:-1])


def cmd_synth_data(args) -> int:
    from .data_io import synth_corpus

    cfg = _load_cfg(args)
    spec = cfg.synth.spec
    n = args.n_utts if args.n_utts is not None else cfg.synth.n_utts
    man = synth_corpus(spec, n, args.out)
    print(f"wrote {len(man)} utterances; manifest {Path(args.out) / 'manifest.tsv'}")
    return 0


def cmd_features(args) -> int:
    from .data_io import load_manifest, load_waves
    from .features import frame_features

    cfg = _load_cfg(args)
    man = load_manifest(args.manifest)
    backbone = None
    kind = cfg.features.feature_kind
    if cfg.features.kind == "encoder":
        if not args.checkpoint:
            raise ConfigError("encoder features need --checkpoint")
        from .trainer import Trainer

        backbone = Trainer.from_checkpoint(args.checkpoint).model.backbone
        kind = f"encoder-{backbone.cfg.encoder_dim}"
    feats = [frame_features(w, cfg.features, backbone) for w in load_waves(man, cfg.features.sample_rate)]
    _save_features(args.out, kind, feats)
    print(f"{len(feats)} utterances, {sum(len(f) for f in feats)} frames, kind={kind}, dim={feats[0].shape[1]}")
    return 0


def cmd_kmeans_train(args) -> int:
    from .offline_targets import kmeans_fit, save_codebook

    cfg = _load_cfg(args)
    kc = cfg.kmeans
    kind, feats = _load_features(args.features)
    x = np.concatenate(feats)
    if len(x) > kc.max_points:
        x = x[np.sort(np.random.default_rng(kc.seed).choice(len(x), kc.max_points, replace=False))]
    cb = kmeans_fit(x, kc.num_clusters, kc.restarts, kc.max_iters, kc.tol, kc.seed, feature_kind=kind)
    save_codebook(cb, args.out)
    print(f"codebook: C={cb.num_clusters} F={cb.dim} kind={kind} inertia={cb.inertia:.6g} iterations={len(cb.history)}")
    return 0


def cmd_kmeans_label(args) -> int:
    from .offline_targets import assign, load_codebook, write_labels

    kind, feats = _load_features(args.features)
    cb = load_codebook(args.codebook)
    if kind != cb.feature_kind:
        raise ConfigError(f"feature_kind mismatch: features are {kind!r}, codebook was fit on {cb.feature_kind!r}")
    labels = [assign(cb, f) for f in feats]
    write_labels(args.out, labels)
    print(f"labelled {len(labels)} utterances with {cb.num_clusters} clusters")
    return 0


def _build_corpus(cfg, manifest_path, labels_path):
    from .data_io import load_latent, load_manifest, load_waves
    from .offline_targets import read_labels
    from .trainer import Corpus

    man = load_manifest(manifest_path)
    waves = load_waves(man, cfg.backbone.sample_rate)
    if labels_path:
        labels = read_labels(labels_path)
    else:  # online_only runs never read offline labels
        labels = [np.zeros(cfg.backbone.num_frames(len(w)), dtype=np.int64) for w in waves]
    latent = load_latent(man) if all(e.latent_path for e in man.entries) else None
    return Corpus.build(waves, labels, cfg.backbone, latent)


def _check_resume_config(cfg, tr) -> None:
    """A resumed run must use the checkpoint's settings, or its loss sequence would diverge."""
    diffs = []
    for section, saved in (("backbone", tr.backbone_cfg), ("train", tr.cfg), ("teacher", tr.teacher_cfg)):
        now = dataclasses.asdict(getattr(cfg, section))
        for key, value in dataclasses.asdict(saved).items():
            if now[key] != value:
                diffs.append(f"{section}.{key}: checkpoint {value!r}, config {now[key]!r}")
    if diffs:
        raise ConfigError("resume config differs from checkpoint: " + "; ".join(diffs))


def cmd_pretrain(args) -> int:
    from .trainer import Trainer

    cfg = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.mode != "online_only" and not args.labels:
        raise ConfigError(f"mode {cfg.train.mode} needs offline labels (--labels)")
    corpus = _build_corpus(cfg, args.manifest, args.labels)
    ckpt_path = out / "checkpoint.mt4s"
    if args.resume:
        tr = Trainer.from_checkpoint(args.resume, corpus)
        _check_resume_config(cfg, tr)
        print(f"resumed from {args.resume} at step {tr.step}")
    else:
        num_clusters = cfg.kmeans.num_clusters
        if args.labels:
            top = max(int(y.max()) for y in corpus.labels if len(y))
            if top >= num_clusters:
                raise ConfigError(f"labels reach {top} but kmeans.num_clusters={num_clusters}")
        tr = Trainer(cfg.backbone, cfg.train, cfg.teacher, num_clusters, corpus)
    hist = tr.train_loop(metrics_path=out / "metrics.jsonl", checkpoint_path=ckpt_path)
    last = hist[-1] if hist else None
    print(f"finished at step {tr.step}; checkpoint {ckpt_path}; metrics {out / 'metrics.jsonl'}")
    if last:
        print(f"last step: L_f={last.L_f:.4f} L_n={last.L_n:.4f} total={last.total:.4f}")
    return 0


def cmd_probe(args) -> int:
    from .data_io import load_latent, load_manifest, load_waves
    from .probe import probe_eval
    from .trainer import Trainer

    tr = Trainer.from_checkpoint(args.checkpoint)
    man = load_manifest(args.manifest)
    waves = load_waves(man, tr.backbone_cfg.sample_rate)
    latent = load_latent(man)
    acc = probe_eval(tr.model.backbone, waves, latent, args.layer, args.held_out, args.seed)
    result = {"checkpoint": str(args.checkpoint), "step": tr.step, "layer": args.layer, "accuracy": acc}
    if args.baseline:
        fresh = Trainer(tr.backbone_cfg, tr.cfg, tr.teacher_cfg, tr.num_clusters)
        result["untrained_accuracy"] = probe_eval(fresh.model.backbone, waves, latent, args.layer, args.held_out, args.seed)
    print(json.dumps(result))
    return 0


def cmd_inspect(args) -> int:
    from .checkpoint import MAGIC, decode

    data = Path(args.checkpoint).read_bytes()
    if data[:4] != MAGIC or len(data) < 20:
        raise FormatError(f"{args.checkpoint}: not a checkpoint file")
    version, step = struct.unpack_from("<IQ", data, 4)
    crc_ok = zlib.crc32(data[:-4]) == struct.unpack("<I", data[-4:])[0]
    print(f"version: {version}")
    print(f"step: {step}")
    print(f"crc32: {'ok' if crc_ok else 'MISMATCH'}")
    if not crc_ok:
        return 2
    ck = decode(data, args.checkpoint)
    print(f"mode: {ck.meta.get('train', {}).get('mode')}  precision: {ck.meta.get('train', {}).get('precision')}")
    print(f"tensors: {len(ck.tensors)}")
    for name, arr in ck.tensors.items():
        print(f"  {name}  {list(arr.shape)}  {arr.dtype}")
    return 0


def cmd_plot_metrics(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = []
    for p in args.metrics:
        with open(p) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        if not recs:
            raise FormatError(f"{p}: no metrics records")
        runs.append((Path(p).parent.name or Path(p).stem, recs))
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    panels = [("total", "total loss"), ("L_f", "offline CE"), ("L_n", "online MSE"), ("lr", "learning rate")]
    for ax, (key, title) in zip(axes.flat, panels):
        for name, recs in runs:
            ax.plot([r["step"] for r in recs], [r[key] for r in recs], label=name, lw=1)
        ax.set_title(title)
        ax.set_xlabel("step")
    ax2 = axes.flat[3].twinx()
    for name, recs in runs:
        ax2.plot([r["step"] for r in recs], [r["tau"] for r in recs], ls="--", lw=1)
    ax2.set_ylabel("tau (dashed)")
    axes.flat[0].legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mt4ssl", description="Multi-target self-supervised pre-training at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="TOML or JSON config file")
        g.add_argument("--preset", default="desk", choices=("desk", "paper"))
        return sp

    sp = with_config(sub.add_parser("synth-data", help="generate a synthetic hidden-state corpus"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-utts", type=int)
    sp.set_defaults(func=cmd_synth_data)

    sp = with_config(sub.add_parser("features", help="compute frame features for K-means"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint", help="checkpoint for encoder features")
    sp.set_defaults(func=cmd_features)

    sp = with_config(sub.add_parser("kmeans-train", help="fit the K-means codebook"))
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_kmeans_train)

    sp = sub.add_parser("kmeans-label", help="assign frame labels with a codebook")
    sp.add_argument("--features", required=True)
    sp.add_argument("--codebook", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_kmeans_label)

    sp = with_config(sub.add_parser("pretrain", help="run pre-training"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--labels", help="offline label file from kmeans-label")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mode", choices=("combined", "offline_only", "online_only"))
    sp.add_argument("--steps", type=int, help="override train.total_steps")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("probe", help="linear probe on frozen features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--layer", type=int, default=-1)
    sp.add_argument("--held-out", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--baseline", action="store_true", help="also probe a freshly initialised model")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("plot-metrics", help="plot metrics JSONL logs to SVG")
    sp.add_argument("metrics", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_metrics)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage() + "mt4ssl: error: a subcommand is required")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MT4SSLError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
