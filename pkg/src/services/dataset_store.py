"""
Stores image corpora on disk as PNG files plus a JSON manifest.

Labeled layout: root/class_<id>/img_<n>.png; unlabeled layout: root/img_<n>.png.
"""

from __future__ import annotations

import json
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from src.models import SynthSpec
from src.synthgen import SynthRecord, a_star_margin
from src.imaging import CropBox, RgbImage, load_image, save_image

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
UNLABELED = -1

class DatasetError(RuntimeError):
    """Raised when a corpus cannot be read or written."""

@dataclass
class Corpus:
    """
    Images in memory with their labels (-1 when unlabeled) and ground-truth boxes.
    """

    images: List[RgbImage]
    labels: np.ndarray
    ids: np.ndarray
    anomaly_boxes: List[Optional[CropBox]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return bool(len(self.labels)) and bool(np.all(self.labels >= 0))

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labeled else 0

    def subset(self, indices: Sequence[int]) -> "Corpus":
        indices = list(indices)
        boxes = [self.anomaly_boxes[i] for i in indices] if self.anomaly_boxes else []
        return Corpus(
            images=[self.images[i] for i in indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            anomaly_boxes=boxes,
        )

    @classmethod
    def from_records(cls, records: Sequence[SynthRecord], labeled: bool = True) -> "Corpus":
        return cls(
            images=[r.image for r in records],
            labels=np.array([r.label if labeled else UNLABELED for r in records], dtype=np.int64),
            ids=np.array([r.index for r in records], dtype=np.int64),
            anomaly_boxes=[r.anomaly_box for r in records],
        )

def _relative_path(record: SynthRecord, labeled: bool) -> str:
    name = f"img_{record.index:06d}.png"
    return f"class_{record.label}/{name}" if labeled else name

def write_dataset(records: Sequence[SynthRecord], spec: SynthSpec, root: Path) -> Path:
    """
    Writes every record as PNG and a manifest with labels, boxes and the generating SynthSpec.
    """
    root = Path(root)
    entries = []
    try:
        for record in records:
            relative = _relative_path(record, spec.labeled)
            save_image(record.image, root / relative)
            margin = a_star_margin(record)
            entries.append({
                "id": record.index,
                "path": relative,
                "label": record.label if spec.labeled else None,
                "anomaly_box": record.anomaly_box.to_dict() if record.anomaly_box else None,
                "distractor_boxes": [box.to_dict() for box in record.distractor_boxes],
                "a_star_margin": None if np.isnan(margin) else round(margin, 4),
            })
        manifest = root / MANIFEST_NAME
        manifest.write_text(
            json.dumps({"spec": spec.to_dict(), "records": entries}, indent=2, sort_keys=True),
            encoding="utf-8",
        )
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {root}: {exc}") from exc
    logger.info("Wrote %d images and %s", len(entries), manifest)
    return manifest

def _read_manifest(root: Path) -> Optional[dict]:
    path = root / MANIFEST_NAME
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return None
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(raw)
    except ValueError as exc:
        raise DatasetError(f"{path}: invalid manifest ({exc})") from exc

def _scan_folder(root: Path) -> Corpus:
    # no manifest: class_<id>/ sub-directories give labels, loose files are unlabeled
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images found under {root}")
    labels = []
    for path in files:
        parent = path.parent.name
        labels.append(int(parent.split("_", 1)[1]) if parent.startswith("class_") and path.parent != root else UNLABELED)
    images = [load_image(p) for p in files]
    return Corpus(images=images, labels=np.array(labels, dtype=np.int64), ids=np.arange(len(files), dtype=np.int64))

def load_dataset(root: Path) -> Corpus:
    """
    Reads a corpus written by write_dataset, or any folder of PNG/JPEG files.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    manifest = _read_manifest(root)
    try:
        if manifest is None:
            corpus = _scan_folder(root)
        else:
            records = sorted(manifest.get("records", []), key=lambda r: r["id"])
            if not records:
                raise DatasetError(f"{root / MANIFEST_NAME} lists no records")
            corpus = Corpus(
                images=[load_image(root / r["path"]) for r in records],
                labels=np.array([UNLABELED if r.get("label") is None else r["label"] for r in records], dtype=np.int64),
                ids=np.array([r["id"] for r in records], dtype=np.int64),
                anomaly_boxes=[CropBox.from_dict(r["anomaly_box"]) if r.get("anomaly_box") else None for r in records],
            )
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot load dataset from {root}: {exc}") from exc
    logger.info("Loaded %d images from %s", len(corpus), root)
    return corpus
