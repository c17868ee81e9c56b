"""
Command-line surface: synth, pretrain, eval and analyze.
"""

from __future__ import annotations

import sys
import json
import logging
import argparse
import numpy as np
import pandas as pd
from enum import Enum
from pathlib import Path
from dataclasses import replace
from typing import Callable, Dict, Optional, Sequence
from src.logging_setup import init_logging
from src.config import RESOLVED_CONFIG_NAME, load_run_config, save_run_config
from src.models import CLASS_NAMES, ConfigError, ContrastMode, PriorKind, RunConfig
from src.constants import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, MODE_OPTIONS, ROLE_BANK, ROLE_DISTORTED, ROLE_PRIOR, ROLE_WIN
from src.synthgen import class_counts, generate_dataset, margin_summary
from src.views import build_view_bundle, dump_bundle
from src.evalsuite import alignment, linear_eval, pca_2d, uniformity, zero_shot_eval
from src.trainer import NumericalError, adopt_run_controls, build_encoder, build_state, bundle_seed, fit, load_checkpoint, resume
from src.services.dataset_store import DatasetError, load_dataset, write_dataset
from src.services.checkpoint_store import CheckpointError
from src.services.embedding_store import EmbeddingSnapshot, EmbeddingStoreError, read_snapshot

logger = logging.getLogger(__name__)

ANALYSIS_NAME = "analysis.csv"
VIEWS_DIR = "views"

class EvalTask(str, Enum):
    KNN = "knn"
    LINEAR = "linear"

def _resolve(args: argparse.Namespace, overrides: Callable[[RunConfig], RunConfig]) -> RunConfig:
    config = overrides(load_run_config(args.config))
    config.validate()
    return config

def _start(out_dir: Path, config: Optional[RunConfig]) -> Path:
    out_dir = Path(out_dir)
    init_logging(out_dir / "logs")
    if config is not None:
        save_run_config(config, out_dir / RESOLVED_CONFIG_NAME)
        logger.info("Resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    return out_dir

def _pick(value, fallback):
    return fallback if value is None else value

# --- synth ----------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    def overrides(config: RunConfig) -> RunConfig:
        synth = config.synth
        synth = replace(
            synth,
            n_images=_pick(args.n, synth.n_images),
            seed=_pick(args.seed, synth.seed),
            image_size=_pick(args.size, synth.image_size),
            class_mix=tuple(args.class_mix) if args.class_mix else synth.class_mix,
            hard_mode=args.hard or synth.hard_mode,
            labeled=synth.labeled and not args.unlabeled,
        )
        return replace(config, synth=synth)

    config = _resolve(args, overrides)
    out_dir = _start(args.out, config)
    records = generate_dataset(config.synth)
    write_dataset(records, config.synth, out_dir)
    counts = class_counts(config.synth.class_mix, config.synth.n_images)
    print(f"wrote {len(records)} images to {out_dir}")
    for name, count in zip(CLASS_NAMES, counts):
        print(f"  {name}: {count}")
    summary = margin_summary(records)
    if summary.get("count"):
        print(f"  a* margin: min {summary['min']:.2f}, median {summary['median']:.2f}")
    return EXIT_OK

# --- pretrain -------------------------------------------------------------------------

def cmd_pretrain(args: argparse.Namespace) -> int:
    def overrides(config: RunConfig) -> RunConfig:
        train = replace(
            config.train,
            epochs=_pick(args.epochs, config.train.epochs),
            seed=_pick(args.seed, config.train.seed),
            workers=_pick(args.workers, config.train.workers),
            batch_size=_pick(args.batch_size, config.train.batch_size),
            snapshot_every=_pick(args.snapshot_every, config.train.snapshot_every),
            checkpoint_every=_pick(args.checkpoint_every, config.train.checkpoint_every),
        )
        loss = replace(
            config.loss,
            mode=ContrastMode.from_code(args.mode) if args.mode else config.loss.mode,
            k=_pick(args.k, config.loss.k),
        )
        views = replace(config.views, prior=PriorKind.from_code(args.prior) if args.prior else config.views.prior)
        return replace(config, train=train, loss=loss, views=views)

    if args.resume:
        if args.config:
            raise ConfigError("--config cannot be combined with --resume; the checkpoint carries its config")
        state = load_checkpoint(args.resume)
        config = overrides(state.config)
        adopt_run_controls(state, config)
        out_dir = _start(args.out, config)
        corpus = load_dataset(args.data)
        if args.dump_views:
            _dump_views(config, corpus, out_dir / VIEWS_DIR, args.dump_views)
        state = resume(state, corpus, out_dir)
    else:
        config = _resolve(args, overrides)
        out_dir = _start(args.out, config)
        corpus = load_dataset(args.data)
        state = build_state(config, len(corpus))
        if args.dump_views:
            _dump_views(config, corpus, out_dir / VIEWS_DIR, args.dump_views)
        state = fit(state, corpus, out_dir)
    print(f"trained {state.step} steps ({state.config.loss.mode.code}); checkpoint in {out_dir}")
    return EXIT_OK

def _dump_views(config: RunConfig, corpus, out_dir: Path, count: int) -> None:
    views = replace(config.views, win_enabled=config.loss.mode is ContrastMode.WINCON)
    for index in range(min(count, len(corpus))):
        bundle = build_view_bundle(corpus.images[index], views, index, bundle_seed(config.train.seed, 0, index))
        dump_bundle(bundle, out_dir)
    logger.info("Dumped %d view bundles to %s", min(count, len(corpus)), out_dir)

# --- eval -----------------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    def overrides(config: RunConfig) -> RunConfig:
        evaluation = replace(
            config.eval,
            knn_k=_pick(args.k, config.eval.knn_k),
            knn_tau=_pick(args.tau, config.eval.knn_tau),
            label_fraction=_pick(args.label_fraction, config.eval.label_fraction),
            seed=_pick(args.seed, config.eval.seed),
        )
        return replace(config, eval=evaluation)

    config = _resolve(args, overrides)
    if args.checkpoint:
        trained = load_checkpoint(args.checkpoint)
        encoder, views = trained.encoder, trained.config.views
        config = replace(config, views=views, encoder=trained.config.encoder)
        source = str(args.checkpoint)
    else:
        encoder, views = build_encoder(config), config.views
        source = "random-init"
    out_dir = _start(args.out, config)
    train_corpus = load_dataset(args.train)
    test_corpus = load_dataset(args.test)
    task = EvalTask(args.task)
    evaluate = zero_shot_eval if task is EvalTask.KNN else linear_eval
    report = evaluate(encoder, train_corpus, test_corpus, views, config.eval)
    report.extras["encoder"] = source
    path = report.write_json(out_dir / f"report_{task.value}.json")
    print(f"{task.value} top-1 accuracy: {report.top1_accuracy:.4f} ({source}); report in {path}")
    return EXIT_OK

# --- analyze --------------------------------------------------------------------------

def _by_id(snapshot: EmbeddingSnapshot, role: str) -> EmbeddingSnapshot:
    rows = snapshot.role(role)
    order = np.argsort(rows.ids, kind="stable")
    return EmbeddingSnapshot(rows.ids[order], rows.labels[order], rows.roles[order], rows.steps[order], rows.vectors[order])

def _mean_cos(a: EmbeddingSnapshot, b: EmbeddingSnapshot) -> Optional[float]:
    if len(a) == 0 or len(b) == 0:
        return None
    if not np.array_equal(a.ids, b.ids):
        raise EmbeddingStoreError("roles of a snapshot must cover the same instance ids")
    return float(np.mean(np.sum(a.vectors * b.vectors, axis=1)))

def analyze_snapshot(snapshot: EmbeddingSnapshot, name: str) -> Dict[str, object]:
    prior = _by_id(snapshot, ROLE_PRIOR)
    if len(prior) == 0:
        raise EmbeddingStoreError(f"{name}: snapshot has no {ROLE_PRIOR} rows")
    distorted = _by_id(snapshot, ROLE_DISTORTED)
    return {
        "snapshot": name,
        "step": int(snapshot.steps[0]),
        "align": alignment(prior.vectors, distorted.vectors) if len(distorted) else None,
        "uniform": uniformity(prior.vectors) if len(prior) >= 2 else None,
        "win_zp_cos": _mean_cos(prior, _by_id(snapshot, ROLE_WIN)),
        "bank_zp_cos": _mean_cos(prior, _by_id(snapshot, ROLE_BANK)),
    }

def pca_table(snapshot: EmbeddingSnapshot) -> pd.DataFrame:
    coords = pca_2d(snapshot.vectors)
    return pd.DataFrame({
        "id": snapshot.ids,
        "label": snapshot.labels,
        "role": snapshot.roles,
        "pc1": coords[:, 0],
        "pc2": coords[:, 1],
    })

def cmd_analyze(args: argparse.Namespace) -> int:
    out_dir = _start(args.out, None)
    rows = []
    for path in sorted(Path(p) for p in args.snapshots):
        snapshot = read_snapshot(path)
        rows.append(analyze_snapshot(snapshot, path.name))
        pca_table(snapshot).to_csv(out_dir / f"pca_{path.stem}.csv", index=False, float_format="%.9g")
    table = pd.DataFrame(rows).sort_values("step", kind="stable")
    table.to_csv(out_dir / ANALYSIS_NAME, index=False, float_format="%.9g")
    print(table.to_string(index=False))
    return EXIT_OK

# --- parser and dispatch --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgcon", description="Prior-guided contrastive pretraining on multi-factor images.")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate the synthetic anomaly corpus")
    synth.add_argument("--out", type=Path, required=True, help="dataset directory to write")
    synth.add_argument("--config", type=Path, help="JSON run config")
    synth.add_argument("--n", type=int, help="number of images")
    synth.add_argument("--seed", type=int, help="generator seed")
    synth.add_argument("--size", type=int, help="image side in pixels")
    synth.add_argument("--class-mix", type=float, nargs=len(CLASS_NAMES), metavar="P", help="class proportions")
    synth.add_argument("--hard", action="store_true", help="low-margin anomalies")
    synth.add_argument("--unlabeled", action="store_true", help="flat layout without labels")
    synth.set_defaults(handler=cmd_synth)

    pretrain = commands.add_parser("pretrain", help="contrastive pretraining")
    pretrain.add_argument("--data", type=Path, required=True, help="dataset directory")
    pretrain.add_argument("--out", type=Path, required=True, help="run directory")
    pretrain.add_argument("--config", type=Path, help="JSON run config")
    pretrain.add_argument("--mode", choices=MODE_OPTIONS, help="contrastive objective")
    pretrain.add_argument("--prior", choices=[kind.code for kind in PriorKind], help="prior-view centre")
    pretrain.add_argument("--epochs", type=int, help="number of epochs")
    pretrain.add_argument("--seed", type=int, help="root training seed")
    pretrain.add_argument("--workers", type=int, help="view-construction threads")
    pretrain.add_argument("--batch-size", type=int, help="instances per step")
    pretrain.add_argument("--k", type=int, help="bank negatives per loss term")
    pretrain.add_argument("--snapshot-every", type=int, help="steps between embedding snapshots")
    pretrain.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints")
    pretrain.add_argument("--dump-views", type=int, default=0, metavar="N", help="write the first N view bundles")
    pretrain.add_argument("--resume", type=Path, help="checkpoint to continue from")
    pretrain.set_defaults(handler=cmd_pretrain)

    evaluate = commands.add_parser("eval", help="evaluate a frozen encoder")
    evaluate.add_argument("--train", type=Path, required=True, help="labeled train dataset")
    evaluate.add_argument("--test", type=Path, required=True, help="labeled test dataset")
    evaluate.add_argument("--out", type=Path, required=True, help="report directory")
    evaluate.add_argument("--checkpoint", type=Path, help="checkpoint (random init when omitted)")
    evaluate.add_argument("--task", choices=[t.value for t in EvalTask], default=EvalTask.KNN.value, help="evaluation task")
    evaluate.add_argument("--config", type=Path, help="JSON run config")
    evaluate.add_argument("--k", type=int, help="kNN neighbours")
    evaluate.add_argument("--tau", type=float, help="kNN temperature")
    evaluate.add_argument("--label-fraction", type=float, help="probe label fraction")
    evaluate.add_argument("--seed", type=int, help="evaluation seed")
    evaluate.set_defaults(handler=cmd_eval)

    analyze = commands.add_parser("analyze", help="alignment/uniformity and PCA tables from snapshots")
    analyze.add_argument("snapshots", type=Path, nargs="+", help="snapshot CSV files")
    analyze.add_argument("--out", type=Path, required=True, help="output directory")
    analyze.set_defaults(handler=cmd_analyze)
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.handler(args)
    except NumericalError as exc:
        logger.error("Numerical failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetError, CheckpointError, EmbeddingStoreError, OSError) as exc:
        logger.error("I/O failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, RuntimeError) as exc:
        logger.exception("Invalid configuration or input")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
