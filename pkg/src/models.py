"""
Configuration models and value objects shared across the pretraining pipeline.
"""

from __future__ import annotations

from enum import Enum
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Tuple

DEFAULT_EMBEDDING_DIM = 128
CLASS_NAMES = ("normal", "red_blob", "red_ring", "red_texture")

class ConfigError(ValueError):
    """Raised when a configuration value or section is invalid."""

class ContrastMode(Enum):
    """
    Enumeration of the supported contrastive objectives.
    """

    PGCON = ("pgcon", "Prior-guided contrast")
    WINCON = ("wincon", "Prior-guided contrast with within-instance negatives")

    def __init__(self, code: str, label: str):
        self.code = code
        self.label = label

    @classmethod
    def from_code(cls, code: str | "ContrastMode") -> "ContrastMode":
        if isinstance(code, cls):
            return code
        normalized = (code or "").lower()
        for mode in cls:
            if mode.code == normalized:
                return mode
        raise ConfigError(f"loss.mode: unknown contrast mode {code!r}")

class PriorKind(Enum):
    """
    How the centre of the prior view is chosen.
    """

    REDNESS = ("redness", "Maximum of the smoothed a* plane")
    RANDOM = ("random", "Uniformly sampled centre (ablation)")

    def __init__(self, code: str, label: str):
        self.code = code
        self.label = label

    @classmethod
    def from_code(cls, code: str | "PriorKind") -> "PriorKind":
        if isinstance(code, cls):
            return code
        normalized = (code or "").lower()
        for kind in cls:
            if kind.code == normalized:
                return kind
        raise ConfigError(f"views.prior: unknown prior kind {code!r}")

def _check_keys(section: str, cls: type, data: Dict[str, Any]) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")

def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.code
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value

def _to_dict(obj: Any) -> Dict[str, Any]:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}

@dataclass
class SynthSpec:
    """
    Parameters of the synthetic multi-factor image corpus.
    """

    image_size: int = 240
    n_images: int = 2000
    class_mix: Tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    anomaly_radius: Tuple[int, int] = (12, 30)
    bubbles: Tuple[int, int] = (0, 2)
    debris: Tuple[int, int] = (0, 1)
    fluid: Tuple[int, int] = (0, 1)
    hard_mode: bool = False
    labeled: bool = True
    seed: int = 0

    @property
    def required_margin(self) -> float:
        return 5.0 if self.hard_mode else 15.0

    def validate(self) -> None:
        if self.image_size < 36:
            raise ConfigError("synth.image_size: must be at least 36")
        if self.n_images < 1:
            raise ConfigError("synth.n_images: must be at least 1")
        if len(self.class_mix) != len(CLASS_NAMES):
            raise ConfigError(f"synth.class_mix: expected {len(CLASS_NAMES)} proportions")
        if any(p < 0 for p in self.class_mix) or abs(sum(self.class_mix) - 1.0) > 1e-6:
            raise ConfigError(f"synth.class_mix: proportions must be non-negative and sum to 1 (got {sum(self.class_mix):g})")
        low, high = self.anomaly_radius
        if not 3 <= low <= high or high >= self.image_size / 4:
            raise ConfigError("synth.anomaly_radius: need 3 <= low <= high < image_size/4")
        for name in ("bubbles", "debris", "fluid"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"synth.{name}: need 0 <= low <= high")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "SynthSpec":
        if not data:
            return cls()
        _check_keys("synth", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            image_size=int(merged["image_size"]),
            n_images=int(merged["n_images"]),
            class_mix=tuple(float(p) for p in merged["class_mix"]),
            anomaly_radius=tuple(int(r) for r in merged["anomaly_radius"]),
            bubbles=tuple(int(v) for v in merged["bubbles"]),
            debris=tuple(int(v) for v in merged["debris"]),
            fluid=tuple(int(v) for v in merged["fluid"]),
            hard_mode=bool(merged["hard_mode"]),
            labeled=bool(merged["labeled"]),
            seed=int(merged["seed"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class ViewConfig:
    """
    Sizes and switches for prior, distorted and within-instance-negative views.
    """

    crop_size: int = 60
    view_size: int = 120
    tile_size: int = 40
    smooth_radius: int = 2
    shared_overlap: float = 0.25
    prior: PriorKind = PriorKind.REDNESS
    win_enabled: bool = True
    augment: bool = True

    def validate(self) -> None:
        if self.crop_size < 0:
            raise ConfigError("views.crop_size: must be >= 0 (0 derives it from the input size)")
        if self.view_size < 1 or self.tile_size < 1:
            raise ConfigError("views: view_size and tile_size must be positive")
        if self.smooth_radius < 0:
            raise ConfigError("views.smooth_radius: must be >= 0")
        if not 0.0 < self.shared_overlap <= 1.0:
            raise ConfigError("views.shared_overlap: must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "ViewConfig":
        if not data:
            return cls()
        _check_keys("views", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            crop_size=int(merged["crop_size"]),
            view_size=int(merged["view_size"]),
            tile_size=int(merged["tile_size"]),
            smooth_radius=int(merged["smooth_radius"]),
            shared_overlap=float(merged["shared_overlap"]),
            prior=PriorKind.from_code(merged["prior"]),
            win_enabled=bool(merged["win_enabled"]),
            augment=bool(merged["augment"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class EncoderConfig:
    """
    Shape of the TinyConv encoders f_theta and h_phi.
    """

    channels: Tuple[int, int, int] = (16, 32, 64)
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    share_trunk: bool = False
    seed: int = 0

    def validate(self) -> None:
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigError("encoder.channels: expected three positive widths")
        if self.embedding_dim < 1:
            raise ConfigError("encoder.embedding_dim: must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "EncoderConfig":
        if not data:
            return cls()
        _check_keys("encoder", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            channels=tuple(int(c) for c in merged["channels"]),
            embedding_dim=int(merged["embedding_dim"]),
            share_trunk=bool(merged["share_trunk"]),
            seed=int(merged["seed"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class LossConfig:
    """
    InfoNCE settings: temperature, term weights, negatives per term and mode.
    """

    tau: float = 0.07
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 200
    mode: ContrastMode = ContrastMode.PGCON
    bank_momentum: float = 0.5
    detach_win: bool = False

    def validate(self, n_instances: int | None = None) -> None:
        if self.tau <= 0:
            raise ConfigError("loss.tau: must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss.alpha/beta: must be >= 0")
        if self.k < 0:
            raise ConfigError("loss.k: must be >= 0")
        if self.k == 0 and self.mode is ContrastMode.PGCON:
            raise ConfigError("loss.k: PGCon needs at least one bank negative")
        if n_instances is not None and self.k > n_instances - 1:
            raise ConfigError(f"loss.k: {self.k} negatives requested but only {n_instances - 1} other instances exist")
        if not 0.0 < self.bank_momentum < 1.0:
            raise ConfigError("loss.bank_momentum: must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "LossConfig":
        if not data:
            return cls()
        _check_keys("loss", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            tau=float(merged["tau"]),
            alpha=float(merged["alpha"]),
            beta=float(merged["beta"]),
            k=int(merged["k"]),
            mode=ContrastMode.from_code(merged["mode"]),
            bank_momentum=float(merged["bank_momentum"]),
            detach_win=bool(merged["detach_win"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class TrainConfig:
    """
    Pretraining loop settings.
    """

    batch_size: int = 64
    epochs: int = 20
    lr_max: float = 0.012
    lr_min: float = 1.2e-5
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    snapshot_every: int = 0
    checkpoint_every: int = 0
    probe_size: int = 64
    workers: int = 1
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")
        if not self.lr_max > self.lr_min > 0:
            raise ConfigError("train.lr_max/lr_min: need lr_max > lr_min > 0")
        if self.workers < 1:
            raise ConfigError("train.workers: must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype: unsupported dtype {self.dtype!r}")
        if self.snapshot_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.snapshot_every/checkpoint_every: must be >= 0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "TrainConfig":
        if not data:
            return cls()
        _check_keys("train", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            batch_size=int(merged["batch_size"]),
            epochs=int(merged["epochs"]),
            lr_max=float(merged["lr_max"]),
            lr_min=float(merged["lr_min"]),
            sgd_momentum=float(merged["sgd_momentum"]),
            weight_decay=float(merged["weight_decay"]),
            snapshot_every=int(merged["snapshot_every"]),
            checkpoint_every=int(merged["checkpoint_every"]),
            probe_size=int(merged["probe_size"]),
            workers=int(merged["workers"]),
            dtype=str(merged["dtype"]),
            seed=int(merged["seed"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class EvalConfig:
    """
    Settings for zero-shot kNN and linear-probe evaluation.
    """

    knn_k: int = 290
    knn_tau: float = 0.1
    probe_epochs: int = 100
    probe_lr: float = 0.05
    probe_batch_size: int = 64
    label_fraction: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.knn_k < 1:
            raise ConfigError("eval.knn_k: must be >= 1")
        if self.knn_tau <= 0:
            raise ConfigError("eval.knn_tau: must be > 0")
        if self.probe_epochs < 1 or self.probe_batch_size < 1:
            raise ConfigError("eval.probe_epochs/probe_batch_size: must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("eval.label_fraction: must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "EvalConfig":
        if not data:
            return cls()
        _check_keys("eval", cls, data)
        merged = {**_to_dict(cls()), **data}
        return cls(
            knn_k=int(merged["knn_k"]),
            knn_tau=float(merged["knn_tau"]),
            probe_epochs=int(merged["probe_epochs"]),
            probe_lr=float(merged["probe_lr"]),
            probe_batch_size=int(merged["probe_batch_size"]),
            label_fraction=float(merged["label_fraction"]),
            seed=int(merged["seed"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)

@dataclass
class RunConfig:
    """
    Root configuration object, one section per pipeline stage.
    """

    synth: SynthSpec = field(default_factory=SynthSpec)
    views: ViewConfig = field(default_factory=ViewConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.views.validate()
        self.encoder.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()

    @classmethod
    def from_dict(cls, data: Dict[str, Any] | None) -> "RunConfig":
        if not data:
            return cls()
        _check_keys("config", cls, data)
        return cls(
            synth=SynthSpec.from_dict(data.get("synth")),
            views=ViewConfig.from_dict(data.get("views")),
            encoder=EncoderConfig.from_dict(data.get("encoder")),
            loss=LossConfig.from_dict(data.get("loss")),
            train=TrainConfig.from_dict(data.get("train")),
            eval=EvalConfig.from_dict(data.get("eval")),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "synth": self.synth.to_dict(),
            "views": self.views.to_dict(),
            "encoder": self.encoder.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }
