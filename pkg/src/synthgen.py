"""
Deterministic generator of multi-factor synthetic images with planted local anomalies.

Each image is a smooth pinkish background with benign distractors (bubbles, debris,
fluid tint) and, for classes 1-3, one small red anomaly whose location is recorded
as ground truth.
"""

from __future__ import annotations

import math
import logging
import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
from src.models import CLASS_NAMES, SynthSpec
from src.seeding import STREAM_SYNTH, derive_seed
from src.imaging import CropBox, RgbImage, box_filter, quantize, srgb_to_cielab

logger = logging.getLogger(__name__)

NORMAL, RED_BLOB, RED_RING, RED_TEXTURE = range(len(CLASS_NAMES))
MAX_ATTEMPTS = 8
GATE_RADIUS = 2

BACKGROUND_PALETTE = (
    (0.88, 0.62, 0.56),
    (0.84, 0.60, 0.48),
    (0.91, 0.70, 0.60),
    (0.82, 0.57, 0.49),
    (0.86, 0.66, 0.53),
)
BUBBLE_COLOR = (0.94, 0.92, 0.90)
DEBRIS_COLOR = (0.33, 0.27, 0.20)
FLUID_COLOR = (0.66, 0.72, 0.42)
PALE_CENTER = (0.95, 0.86, 0.80)

class SynthError(ValueError):
    """Raised for invalid generator settings or records that never pass the gate."""

@dataclass(frozen=True)
class SynthRecord:
    """
    One generated image with its label and ground-truth geometry.
    """

    image: RgbImage
    label: int
    anomaly_box: Optional[CropBox]
    distractor_boxes: Tuple[CropBox, ...] = ()
    index: int = 0

@dataclass
class ValidationReport:
    passed: bool
    margin: float = math.nan
    findings: List[str] = field(default_factory=list)

def class_counts(class_mix: Tuple[float, ...], n: int) -> List[int]:
    """
    Largest-remainder rounding of the class proportions onto n images.
    """
    raw = np.asarray(class_mix, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(raw)), key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[: n - int(counts.sum())]:
        counts[c] += 1
    return [int(c) for c in counts]

def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size]
    return xs.astype(np.float64), ys.astype(np.float64)

def _blend(canvas: np.ndarray, color, alpha: np.ndarray) -> None:
    canvas[:] = canvas * (1.0 - alpha[..., None]) + np.asarray(color) * alpha[..., None]

def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    xs, ys = _grid(size)
    base = np.asarray(BACKGROUND_PALETTE[rng.integers(len(BACKGROUND_PALETTE))])
    base = base + rng.uniform(-0.03, 0.03, size=3)
    canvas = np.broadcast_to(base, (size, size, 3)).copy()
    # low-frequency shading, a few plane waves per channel
    for channel in range(3):
        wave = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 2.0, size=2) * rng.choice([-1, 1], size=2)
            phase = rng.uniform(0, 2 * math.pi)
            wave += rng.uniform(0.005, 0.02) * np.sin(2 * math.pi * (fx * xs + fy * ys) / size + phase)
        canvas[..., channel] += wave
    # mucosal texture
    canvas += rng.normal(0.0, 0.008, size=canvas.shape)
    return canvas

def _disc_alpha(xs, ys, cx, cy, radius, soft) -> np.ndarray:
    dist = np.hypot(xs - cx, ys - cy)
    return np.clip((radius - dist) / soft + 0.5, 0.0, 1.0)

def _anomaly_color(background: np.ndarray, hard_mode: bool, rng: np.random.Generator) -> np.ndarray:
    red = np.array([rng.uniform(0.72, 0.86), rng.uniform(0.08, 0.20), rng.uniform(0.08, 0.18)])
    if hard_mode:
        strength = rng.uniform(0.4, 0.55)
        return background * (1.0 - strength) + red * strength
    return red

def _plant_anomaly(canvas: np.ndarray, label: int, hard_mode: bool, radius_range, rng) -> CropBox:
    size = canvas.shape[0]
    xs, ys = _grid(size)
    radius = int(rng.integers(radius_range[0], radius_range[1] + 1))
    cx = int(rng.integers(radius + 2, size - radius - 2))
    cy = int(rng.integers(radius + 2, size - radius - 2))
    color = _anomaly_color(canvas[cy, cx].copy(), hard_mode, rng)
    if label == RED_BLOB:
        alpha = _disc_alpha(xs, ys, cx, cy, radius, soft=3.0)
        shade = 1.0 + rng.uniform(-0.05, 0.05) * (ys - cy) / radius
        _blend(canvas, color, alpha * np.clip(shade, 0.9, 1.0))
    elif label == RED_RING:
        width = max(5, int(round(0.4 * radius)))
        outer = _disc_alpha(xs, ys, cx, cy, radius, soft=2.0)
        inner = _disc_alpha(xs, ys, cx, cy, radius - width, soft=2.0)
        _blend(canvas, color, np.clip(outer - inner, 0.0, 1.0))
        _blend(canvas, PALE_CENTER, 0.6 * inner)
    elif label == RED_TEXTURE:
        x0, y0 = cx - radius, cy - radius
        side = 2 * radius + 1
        speckle = (rng.random((side, side)) < 0.8) * rng.uniform(0.85, 1.0, size=(side, side))
        patch = canvas[y0:y0 + side, x0:x0 + side]
        _blend(patch, color, speckle)
    else:
        raise SynthError(f"label {label} has no anomaly")
    return CropBox(cx=cx, cy=cy, side=2 * radius + 1)

def _place(size: int, radius: int, avoid: Optional[CropBox], rng) -> Optional[Tuple[int, int]]:
    for _ in range(20):
        cx, cy = (int(v) for v in rng.integers(radius, size - radius, size=2))
        box = CropBox(cx=cx, cy=cy, side=2 * radius + 1)
        if avoid is None or not box.intersects(CropBox(avoid.cx, avoid.cy, avoid.side + 8)):
            return cx, cy
    return None

def _add_distractors(canvas: np.ndarray, spec: SynthSpec, avoid: Optional[CropBox], rng) -> List[CropBox]:
    size = canvas.shape[0]
    xs, ys = _grid(size)
    boxes = []
    for _ in range(int(rng.integers(spec.fluid[0], spec.fluid[1] + 1))):
        radius = int(rng.integers(size // 8, size // 4))
        spot = _place(size, radius, avoid, rng)
        if spot is not None:
            _blend(canvas, FLUID_COLOR, 0.35 * _disc_alpha(xs, ys, *spot, radius, soft=radius / 3))
            boxes.append(CropBox(spot[0], spot[1], 2 * radius + 1))
    for _ in range(int(rng.integers(spec.bubbles[0], spec.bubbles[1] + 1))):
        radius = int(rng.integers(6, 17))
        spot = _place(size, radius, avoid, rng)
        if spot is not None:
            body = _disc_alpha(xs, ys, *spot, radius, soft=1.5)
            rim = np.clip(body - _disc_alpha(xs, ys, *spot, radius - 2, soft=1.5), 0.0, 1.0)
            _blend(canvas, BUBBLE_COLOR, 0.45 * body)
            _blend(canvas, (1.0, 1.0, 1.0), 0.8 * rim)
            boxes.append(CropBox(spot[0], spot[1], 2 * radius + 1))
    for _ in range(int(rng.integers(spec.debris[0], spec.debris[1] + 1))):
        radius = int(rng.integers(5, 13))
        spot = _place(size, radius, avoid, rng)
        if spot is not None:
            _blend(canvas, DEBRIS_COLOR, 0.85 * _disc_alpha(xs, ys, *spot, radius, soft=2.0))
            boxes.append(CropBox(spot[0], spot[1], 2 * radius + 1))
    return boxes

def _illuminate(canvas: np.ndarray, rng) -> None:
    size = canvas.shape[0]
    xs, ys = _grid(size)
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    strength = rng.uniform(0.0, 0.15)
    falloff = 1.0 - strength * (np.hypot(xs - cx, ys - cy) / size) ** 2
    canvas *= falloff[..., None]

def render_record(spec: SynthSpec, index: int, label: int, attempt: int = 0) -> SynthRecord:
    rng = np.random.default_rng(derive_seed(spec.seed, STREAM_SYNTH, index, attempt))
    canvas = _background(spec.image_size, rng)
    box = None
    if label != NORMAL:
        box = _plant_anomaly(canvas, label, spec.hard_mode, spec.anomaly_radius, rng)
    distractors = _add_distractors(canvas, spec, box, rng)
    _illuminate(canvas, rng)
    image = quantize(RgbImage.clipped(canvas))
    return SynthRecord(image=image, label=label, anomaly_box=box, distractor_boxes=tuple(distractors), index=index)

def a_star_margin(record: SynthRecord, smooth_radius: int = GATE_RADIUS) -> float:
    """
    Smoothed a* maximum inside the anomaly box minus the maximum outside it
    (the box grown by the smoothing radius counts as inside).
    """
    if record.anomaly_box is None:
        return math.nan
    smoothed = box_filter(srgb_to_cielab(record.image).a, smooth_radius)
    box = record.anomaly_box
    inside = smoothed[max(box.y0, 0):box.y1, max(box.x0, 0):box.x1]
    outside = np.ones_like(smoothed, dtype=bool)
    outside[max(box.y0 - smooth_radius, 0):box.y1 + smooth_radius, max(box.x0 - smooth_radius, 0):box.x1 + smooth_radius] = False
    if inside.size == 0:
        return -math.inf
    if not outside.any():
        return math.inf
    return float(inside.max() - smoothed[outside].max())

def validate_record(record: SynthRecord, required_margin: float = 15.0, smooth_radius: int = GATE_RADIUS) -> ValidationReport:
    """
    Checks the record's invariants and that the anomaly dominates the image's a* plane.
    """
    findings = []
    height, width = record.image.height, record.image.width
    if not 0 <= record.label < len(CLASS_NAMES):
        findings.append(f"label {record.label} outside [0, {len(CLASS_NAMES)})")
    if (record.label == NORMAL) != (record.anomaly_box is None):
        findings.append("class 0 must have no anomaly box and classes 1-3 must have one")
    if record.anomaly_box is None:
        return ValidationReport(passed=not findings, findings=findings)
    if not record.anomaly_box.fits(height, width):
        findings.append("anomaly box does not lie inside the image")
    margin = a_star_margin(record, smooth_radius)
    if not margin >= required_margin:
        findings.append(f"a* margin {margin:.2f} below required {required_margin:.2f}")
    smoothed = box_filter(srgb_to_cielab(record.image).a, smooth_radius)
    y, x = divmod(int(np.argmax(smoothed)), width)
    box = record.anomaly_box
    if not (box.x0 <= x < box.x1 and box.y0 <= y < box.y1):
        findings.append(f"a* maximum at ({x}, {y}) lies outside the anomaly box")
    return ValidationReport(passed=not findings, margin=margin, findings=findings)

def generate_record(spec: SynthSpec, index: int, label: int) -> SynthRecord:
    """
    Renders one record, re-rendering with a fresh attempt seed until it passes the gate.
    """
    for attempt in range(MAX_ATTEMPTS):
        record = render_record(spec, index, label, attempt)
        report = validate_record(record, spec.required_margin)
        if report.passed:
            return record
        logger.warning("Synthetic record %d (attempt %d) rejected: %s", index, attempt, "; ".join(report.findings))
    raise SynthError(f"record {index} failed the a* gate {MAX_ATTEMPTS} times")

def generate_labels(spec: SynthSpec) -> List[int]:
    counts = class_counts(spec.class_mix, spec.n_images)
    labels = np.repeat(np.arange(len(counts)), counts)
    rng = np.random.default_rng(derive_seed(spec.seed, STREAM_SYNTH))
    return [int(v) for v in rng.permutation(labels)]

def generate_dataset(spec: SynthSpec) -> List[SynthRecord]:
    """
    Pure function of spec: the same spec always yields bit-identical records.
    """
    try:
        spec.validate()
    except ValueError as exc:
        raise SynthError(str(exc)) from exc
    labels = generate_labels(spec)
    records = [generate_record(spec, index, label) for index, label in enumerate(labels)]
    logger.info("Generated %d synthetic images (counts per class %s)", len(records), class_counts(spec.class_mix, spec.n_images))
    return records

def margin_summary(records: List[SynthRecord]) -> Dict[str, float]:
    """Distribution of the a* dominance margin over the anomaly records."""
    margins = np.array([a_star_margin(r) for r in records if r.anomaly_box is not None])
    if margins.size == 0:
        return {"count": 0}
    return {
        "count": int(margins.size),
        "min": float(margins.min()),
        "p01": float(np.percentile(margins, 1)),
        "median": float(np.median(margins)),
        "mean": float(margins.mean()),
    }
