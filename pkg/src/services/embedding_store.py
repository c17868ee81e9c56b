"""
Embedding snapshot export: a header line `id,label,role,step,d` followed by one
row per vector (id, label, role tag, step, then d floats with 9 significant digits).
"""

from __future__ import annotations

import logging
import numpy as np
import pandas as pd
from pathlib import Path
from dataclasses import dataclass
from typing import Sequence
from src.constants import ROLES

logger = logging.getLogger(__name__)

HEADER = "id,label,role,step,d"
META_COLUMNS = ("id", "label", "role", "step")

class EmbeddingStoreError(RuntimeError):
    """Raised when a snapshot file cannot be read or written."""

@dataclass
class EmbeddingSnapshot:
    """
    Vectors of one snapshot with their per-row metadata.
    """

    ids: np.ndarray
    labels: np.ndarray
    roles: np.ndarray
    steps: np.ndarray
    vectors: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def role(self, tag: str) -> "EmbeddingSnapshot":
        """Rows of one role, in file order."""
        keep = self.roles == tag
        return EmbeddingSnapshot(self.ids[keep], self.labels[keep], self.roles[keep], self.steps[keep], self.vectors[keep])

def write_snapshot(
    path: Path,
    ids: Sequence[int],
    labels: Sequence[int],
    roles: Sequence[str],
    steps: Sequence[int],
    vectors: np.ndarray,
) -> Path:
    vectors = np.asarray(vectors, dtype=np.float64)
    count = len(ids)
    if vectors.ndim != 2 or vectors.shape[0] != count or not len(labels) == len(roles) == len(steps) == count:
        raise EmbeddingStoreError("ids, labels, roles, steps and vectors must describe the same rows")
    unknown = sorted(set(roles) - set(ROLES))
    if unknown:
        raise EmbeddingStoreError(f"unknown role tag(s): {', '.join(unknown)}")
    frame = pd.DataFrame({"id": list(ids), "label": list(labels), "role": list(roles), "step": list(steps)})
    floats = pd.DataFrame(vectors).map(lambda v: format(v, ".9g"))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            handle.write(HEADER + "\n")
            pd.concat([frame, floats], axis=1).to_csv(handle, header=False, index=False)
    except OSError as exc:
        raise EmbeddingStoreError(f"cannot write snapshot {path}: {exc}") from exc
    logger.debug("Wrote %d embeddings to %s", count, path)
    return path

def read_snapshot(path: Path) -> EmbeddingSnapshot:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            header = handle.readline().strip()
        if header != HEADER:
            raise EmbeddingStoreError(f"{path}: expected header {HEADER!r}, found {header!r}")
        frame = pd.read_csv(path, header=None, skiprows=1, dtype={2: str})
    except OSError as exc:
        raise EmbeddingStoreError(f"cannot read snapshot {path}: {exc}") from exc
    except (ValueError, pd.errors.ParserError) as exc:
        raise EmbeddingStoreError(f"{path}: malformed snapshot ({exc})") from exc
    if frame.shape[1] <= len(META_COLUMNS):
        raise EmbeddingStoreError(f"{path}: rows carry no vector components")
    return EmbeddingSnapshot(
        ids=frame[0].to_numpy(dtype=np.int64),
        labels=frame[1].to_numpy(dtype=np.int64),
        roles=frame[2].to_numpy(dtype=str),
        steps=frame[3].to_numpy(dtype=np.int64),
        vectors=frame.iloc[:, len(META_COLUMNS):].to_numpy(dtype=np.float64),
    )
