"""
Pretraining loop: seeded shuffling, view construction, PGCon/WINCon loss,
cosine-annealed SGD, memory-bank updates, checkpoints and embedding snapshots.
"""

from __future__ import annotations

import json
import math
import logging
import numpy as np
import torch
from pathlib import Path
from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Union
from src.models import ContrastMode, RunConfig
from src.imaging import to_tensor
from src.views import ViewBundle, build_view_bundle
from src.contrastive import MemoryBank, contrastive_loss
from src.encoders import PriorGuidedEncoder, backward, make_optimizer, sgd_step
from src.services.dataset_store import Corpus
from src.services.embedding_store import write_snapshot
from src.services.checkpoint_store import CheckpointError, read_checkpoint, write_checkpoint
from src.constants import ROLE_BANK, ROLE_DISTORTED, ROLE_PRIOR, ROLE_WIN
from src.seeding import STREAM_BANK, STREAM_INIT, STREAM_NEGATIVES, STREAM_PROBE, STREAM_SHUFFLE, STREAM_VIEWS, derive_seed

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT_NAME = "checkpoint.pgcw"
CHECKPOINT_DIR = "checkpoints"
SNAPSHOT_DIR = "snapshots"

# train fields a resumed run may change without leaving the recorded trajectory
RUN_CONTROL_FIELDS = ("workers", "snapshot_every", "checkpoint_every")

StepHook = Callable[[dict], None]

class TrainingError(RuntimeError):
    """Raised when training cannot start or continue."""

class NumericalError(TrainingError):
    """Raised when the loss or an update stops being finite."""

def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """
    lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2.
    """
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise TrainingError(f"step {step} outside the schedule [0, {total_steps}]")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))

def torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32

def steps_per_epoch(n_instances: int, batch_size: int) -> int:
    return math.ceil(n_instances / batch_size)

def bundle_seed(seed: int, epoch: int, instance: int) -> int:
    return derive_seed(seed, STREAM_VIEWS, epoch, instance)

@dataclass
class TrainState:
    """
    Everything a step mutates, plus the counters that place it on the schedule.
    """

    config: RunConfig
    encoder: PriorGuidedEncoder
    optimizer: torch.optim.SGD
    bank: MemoryBank
    n_instances: int
    step: int = 0
    epoch: int = 0

    @property
    def seed(self) -> int:
        return self.config.train.seed

    @property
    def dtype(self) -> torch.dtype:
        return torch_dtype(self.config.train.dtype)

    @property
    def total_steps(self) -> int:
        return self.config.train.epochs * steps_per_epoch(self.n_instances, self.config.train.batch_size)

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.train.epochs

def build_encoder(config: RunConfig) -> PriorGuidedEncoder:
    encoder_config = replace(config.encoder, seed=derive_seed(config.train.seed, STREAM_INIT, config.encoder.seed))
    encoder = PriorGuidedEncoder(encoder_config, view_size=config.views.view_size, tile_size=config.views.tile_size)
    return encoder.to(torch_dtype(config.train.dtype))

def build_state(config: RunConfig, n_instances: int) -> TrainState:
    """
    Fresh state: encoder and bank initialised from seeds derived from train.seed.
    """
    if n_instances < 1:
        raise TrainingError("dataset is empty")
    config.validate()
    config.loss.validate(n_instances)
    dtype = torch_dtype(config.train.dtype)
    encoder = build_encoder(config)
    bank = MemoryBank.random(
        n_instances,
        config.encoder.embedding_dim,
        derive_seed(config.train.seed, STREAM_BANK),
        momentum=config.loss.bank_momentum,
        dtype=dtype,
    )
    optimizer = make_optimizer(encoder, config.train.sgd_momentum, config.train.weight_decay)
    return TrainState(config=config, encoder=encoder, optimizer=optimizer, bank=bank, n_instances=n_instances)

def build_bundles(config: RunConfig, corpus: Corpus, indices: Sequence[int], seeds: Sequence[int]) -> List[ViewBundle]:
    """
    View bundles for the given instances; a worker pool keeps the order and the per-instance seeds.
    """
    def make(pair):
        index, seed = pair
        return build_view_bundle(corpus.images[index], config.views, int(index), seed)

    pairs = list(zip(indices, seeds))
    if config.train.workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=config.train.workers) as pool:
            return list(pool.map(make, pairs))
    return [make(pair) for pair in pairs]

def _stack_views(bundles: Sequence[ViewBundle], dtype: torch.dtype):
    v_p = torch.stack([to_tensor(b.v_p, dtype) for b in bundles])
    tiles = torch.stack([torch.stack([to_tensor(t, dtype) for t in b.v_d_tiles]) for b in bundles])
    v_win = None
    if all(b.v_win is not None for b in bundles):
        v_win = torch.stack([to_tensor(b.v_win, dtype) for b in bundles])
    return v_p, tiles, v_win

def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None

def train_step(state: TrainState, corpus: Corpus, indices: Sequence[int]) -> dict:
    """
    One optimisation step on the given instances; returns the metric record.
    """
    config = state.config
    wincon = config.loss.mode is ContrastMode.WINCON
    views = replace(config.views, win_enabled=wincon)
    seeds = [bundle_seed(state.seed, state.epoch, int(i)) for i in indices]
    bundles = build_bundles(replace(config, views=views), corpus, indices, seeds)
    v_p, tiles, v_win = _stack_views(bundles, state.dtype)

    state.encoder.train()
    z_p = state.encoder.encode_prior(v_p)
    z_d = state.encoder.encode_jigsaw(tiles)
    z_win = state.encoder.encode_win(v_win) if wincon else None
    output = contrastive_loss(
        z_p, z_d, list(indices), z_win, state.bank, config.loss,
        seed=derive_seed(state.seed, STREAM_NEGATIVES, state.step),
    )
    if not torch.isfinite(output.loss):
        raise NumericalError(f"non-finite loss {float(output.loss)} at step {state.step}")

    lr = cosine_lr(state.step, state.total_steps, config.train.lr_max, config.train.lr_min)
    backward(output.loss, state.encoder)
    sgd_step(state.optimizer, lr)
    state.bank.update(indices, z_p.detach())

    record = {"step": state.step, "epoch": state.epoch, "lr": lr}
    record.update({key: _finite_or_none(value) for key, value in output.to_record().items()})
    state.step += 1
    logger.debug("step %d loss %.5f lr %.3g", record["step"], record["loss"], lr)
    return record

def epoch_order(seed: int, epoch: int, n_instances: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, STREAM_SHUFFLE, epoch)).permutation(n_instances)

def train_epoch(state: TrainState, corpus: Corpus, on_step: Optional[StepHook] = None) -> TrainState:
    """
    One pass over the corpus in a seeded order; the last short batch is kept.
    """
    if len(corpus) == 0:
        raise TrainingError("dataset is empty")
    if len(corpus) != state.n_instances:
        raise TrainingError(f"bank has {state.n_instances} rows but the dataset has {len(corpus)} images")
    order = epoch_order(state.seed, state.epoch, state.n_instances)
    batch_size = state.config.train.batch_size
    losses = []
    for start in range(0, len(order), batch_size):
        record = train_step(state, corpus, [int(i) for i in order[start:start + batch_size]])
        losses.append(record["loss"])
        if on_step is not None:
            on_step(record)
    logger.info("Epoch %d/%d finished: mean loss %.4f", state.epoch + 1, state.config.train.epochs, float(np.mean(losses)))
    state.epoch += 1
    return state

def probe_indices(seed: int, n_instances: int, probe_size: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, STREAM_PROBE))
    return np.sort(rng.choice(n_instances, size=min(probe_size, n_instances), replace=False))

def snapshot_embeddings(state: TrainState, corpus: Corpus, path: Path) -> Path:
    """
    Exports z_p, z_d, z_win and the bank rows of a fixed probe subset, tagged by role and step.

    Probe views use fixed seeds, so successive snapshots differ only through the encoder and bank.
    """
    probe = probe_indices(state.seed, state.n_instances, state.config.train.probe_size)
    views = replace(state.config.views, win_enabled=True)
    seeds = [derive_seed(state.seed, STREAM_PROBE, int(i)) for i in probe]
    bundles = build_bundles(replace(state.config, views=views), corpus, probe, seeds)
    v_p, tiles, v_win = _stack_views(bundles, state.dtype)
    state.encoder.eval()
    with torch.no_grad():
        blocks = {
            ROLE_PRIOR: state.encoder.encode_prior(v_p),
            ROLE_DISTORTED: state.encoder.encode_jigsaw(tiles),
            ROLE_WIN: state.encoder.encode_win(v_win),
            ROLE_BANK: state.bank.gather(probe),
        }
    ids, labels, roles, vectors = [], [], [], []
    for role, block in blocks.items():
        ids.extend(corpus.ids[probe].tolist())
        labels.extend(corpus.labels[probe].tolist())
        roles.extend([role] * len(probe))
        vectors.append(block.to(torch.float64).numpy())
    path = write_snapshot(path, ids, labels, roles, [state.step] * len(ids), np.concatenate(vectors))
    logger.info("Wrote embedding snapshot at step %d to %s", state.step, path)
    return path

def state_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    tensors = {f"encoder.{name}": value for name, value in state.encoder.state_dict().items()}
    for name, param in state.encoder.named_parameters():
        buffer = state.optimizer.state.get(param, {}).get("momentum_buffer")
        if buffer is not None:
            tensors[f"optimizer.momentum.{name}"] = buffer
    tensors["bank.rows"] = state.bank.rows
    tensors["state.counters"] = torch.tensor([state.step, state.epoch, state.seed, state.n_instances], dtype=torch.int64)
    tensors["meta.config"] = torch.tensor(list(json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8")), dtype=torch.uint8)
    return tensors

def save_checkpoint(state: TrainState, path: Path) -> Path:
    path = write_checkpoint(path, state_tensors(state))
    logger.info("Saved checkpoint at step %d (epoch %d) to %s", state.step, state.epoch, path)
    return path

def _require(tensors: Dict[str, torch.Tensor], name: str) -> torch.Tensor:
    if name not in tensors:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    return tensors[name]

def load_checkpoint(path: Path) -> TrainState:
    """
    Rebuilds a TrainState from a checkpoint; nothing is applied until every tensor parsed.
    """
    tensors = read_checkpoint(path)
    try:
        config = RunConfig.from_dict(json.loads(bytes(_require(tensors, "meta.config").tolist()).decode("utf-8")))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable embedded config ({exc})") from exc
    counters = _require(tensors, "state.counters").tolist()
    if len(counters) != 4:
        raise CheckpointError(f"{path}: malformed state counters")
    step, epoch, seed, n_instances = (int(c) for c in counters)
    if seed != config.train.seed:
        raise CheckpointError(f"{path}: counters seed {seed} disagrees with config seed {config.train.seed}")
    rows = _require(tensors, "bank.rows")

    state = build_state(config, n_instances)
    weights = {name[len("encoder."):]: t for name, t in tensors.items() if name.startswith("encoder.")}
    try:
        state.encoder.load_state_dict(weights, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: encoder weights do not match the config ({exc})") from exc
    if tuple(rows.shape) != tuple(state.bank.rows.shape):
        raise CheckpointError(f"{path}: bank is {tuple(rows.shape)}, expected {tuple(state.bank.rows.shape)}")
    state.bank.rows = rows.clone()
    for name, param in state.encoder.named_parameters():
        buffer = tensors.get(f"optimizer.momentum.{name}")
        if buffer is not None:
            state.optimizer.state[param]["momentum_buffer"] = buffer.clone()
    state.step, state.epoch = step, epoch
    logger.info("Loaded checkpoint %s at step %d (epoch %d)", path, step, epoch)
    return state

def _append_metrics(path: Path) -> StepHook:
    def write(record: dict) -> None:
        with path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    return write

def fit(
    state: TrainState,
    corpus: Corpus,
    out_dir: Path,
    on_step: Optional[StepHook] = None,
) -> TrainState:
    """
    Runs the remaining epochs, writing metrics, periodic checkpoints and snapshots under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = state.config.train
    log_metrics = _append_metrics(out_dir / METRICS_NAME)

    def snapshot() -> None:
        snapshot_embeddings(state, corpus, out_dir / SNAPSHOT_DIR / f"snapshot_{state.step:07d}.csv")

    def hook(record: dict) -> None:
        log_metrics(record)
        if on_step is not None:
            on_step(record)
        if train.snapshot_every and state.step % train.snapshot_every == 0:
            snapshot()

    if train.snapshot_every and state.step == 0:
        snapshot()
    while not state.finished:
        train_epoch(state, corpus, hook)
        if train.checkpoint_every and state.epoch % train.checkpoint_every == 0 and not state.finished:
            save_checkpoint(state, out_dir / CHECKPOINT_DIR / f"epoch_{state.epoch:04d}.pgcw")
    if train.snapshot_every and state.step % train.snapshot_every != 0:
        snapshot()
    save_checkpoint(state, out_dir / FINAL_CHECKPOINT_NAME)
    return state

def _changed_fields(before: dict, after: dict, prefix: str = "") -> List[str]:
    changed = []
    for key in sorted(set(before) | set(after)):
        a, b = before.get(key), after.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            changed.extend(_changed_fields(a, b, f"{prefix}{key}."))
        elif a != b:
            changed.append(f"{prefix}{key}")
    return changed

def adopt_run_controls(state: TrainState, config: RunConfig) -> TrainState:
    """
    Swaps in a config for a loaded state. Only the run-control train fields may differ.
    """
    config.validate()
    changed = _changed_fields(state.config.to_dict(), config.to_dict())
    pinned = [name for name in changed if name not in {f"train.{f}" for f in RUN_CONTROL_FIELDS}]
    if pinned:
        raise TrainingError(f"cannot change {', '.join(pinned)} when resuming from a checkpoint")
    if changed:
        logger.info("Resuming with changed run controls: %s", ", ".join(changed))
    state.config = config
    return state

def resume(
    source: Union[Path, TrainState],
    corpus: Corpus,
    out_dir: Path,
    on_step: Optional[StepHook] = None,
) -> TrainState:
    """Continues a run from a checkpoint (or a state loaded from one) written at an epoch boundary."""
    state = source if isinstance(source, TrainState) else load_checkpoint(source)
    if len(corpus) != state.n_instances:
        raise TrainingError(f"checkpoint expects {state.n_instances} images, dataset has {len(corpus)}")
    return fit(state, corpus, out_dir, on_step)
