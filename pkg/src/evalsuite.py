"""
Evaluation of frozen encoders: zero-shot weighted kNN, linear probe,
alignment/uniformity and 2-D PCA projections of embedding sets.
"""

from __future__ import annotations

import json
import math
import logging
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pathlib import Path
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple
from scipy.special import logsumexp
from scipy.spatial.distance import pdist
from src.models import CLASS_NAMES, EvalConfig, ViewConfig
from src.imaging import to_tensor
from src.encoders import PriorGuidedEncoder
from src.seeding import STREAM_EVAL, derive_seed
from src.views import TransformKind, TransformSet, build_view_bundle, make_prior_view, prior_crop_size
from src.services.dataset_store import Corpus

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-4

class EvalError(ValueError):
    """Raised for empty or inconsistent evaluation inputs."""

@dataclass
class LabeledEmbeddingSet:
    """
    m x d unit rows with their class ids and instance ids.
    """

    vectors: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise EvalError("an embedding set needs at least one d-dimensional row")
        if not len(self.labels) == len(self.ids) == self.vectors.shape[0]:
            raise EvalError("vectors, labels and ids must have the same length")
        if np.any(self.labels < 0):
            raise EvalError("embedding set contains unlabeled rows")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise EvalError("embedding rows must be unit-norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

# --- classifiers ---------------------------------------------------------------

def weighted_knn(train: LabeledEmbeddingSet, query: np.ndarray, tau: float = 0.1, k: int = 290) -> int:
    """
    Each of the min(k, m) most similar train rows votes for its label with weight
    exp(s / tau). Similarity ties go to the lower row index, class ties to the lower id.
    """
    if len(train) == 0:
        raise EvalError("kNN needs a non-empty train set")
    if k < 1 or tau <= 0:
        raise EvalError("kNN needs k >= 1 and tau > 0")
    sims = train.vectors @ np.asarray(query, dtype=np.float64)
    top = np.argsort(-sims, kind="stable")[:min(k, len(train))]
    votes = np.bincount(train.labels[top], weights=np.exp(sims[top] / tau), minlength=train.num_classes)
    return int(np.argmax(votes))

def knn_predict(train: LabeledEmbeddingSet, queries: np.ndarray, tau: float = 0.1, k: int = 290) -> np.ndarray:
    if k > len(train):
        logger.warning("kNN k=%d capped at the train size %d", k, len(train))
    return np.array([weighted_knn(train, q, tau, k) for q in np.atleast_2d(queries)], dtype=np.int64)

@dataclass
class ProbeResult:
    best_accuracy: float
    best_epoch: int
    predictions: np.ndarray
    history: List[float] = field(default_factory=list)

def stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """
    Indices of a per-class fraction of the rows, at least one per class, in ascending order.
    """
    if not 0.0 < fraction <= 1.0:
        raise EvalError("label fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        count = max(1, int(round(fraction * len(members))))
        keep.append(rng.permutation(members)[:count])
    return np.sort(np.concatenate(keep))

def linear_probe(
    train: LabeledEmbeddingSet,
    val: LabeledEmbeddingSet,
    config: EvalConfig | None = None,
    num_classes: Optional[int] = None,
) -> ProbeResult:
    """
    Trains fc(d -> d) -> ReLU -> fc(d -> C) with softmax cross-entropy on frozen
    embeddings and reports the best validation accuracy over the epochs.
    """
    config = config or EvalConfig()
    num_classes = num_classes or max(train.num_classes, val.num_classes)
    missing = sorted(set(range(num_classes)) - set(train.labels.tolist()))
    if missing:
        raise EvalError(f"class(es) {missing} absent from the probe's train split")
    subset = stratified_subset(train.labels, config.label_fraction, derive_seed(config.seed, STREAM_EVAL, 1))
    x = torch.from_numpy(train.vectors[subset])
    y = torch.from_numpy(train.labels[subset])
    x_val = torch.from_numpy(val.vectors)
    y_val = val.labels

    d = x.shape[1]
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(config.seed, STREAM_EVAL, 2))
        head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, num_classes)).to(torch.float64)
    optimizer = torch.optim.SGD(head.parameters(), lr=config.probe_lr, momentum=0.9)
    rng = np.random.default_rng(derive_seed(config.seed, STREAM_EVAL, 3))

    history: List[float] = []
    best = ProbeResult(best_accuracy=-1.0, best_epoch=-1, predictions=np.empty(0, dtype=np.int64))
    for epoch in range(config.probe_epochs):
        head.train()
        order = torch.from_numpy(rng.permutation(len(subset)))
        for start in range(0, len(order), config.probe_batch_size):
            batch = order[start:start + config.probe_batch_size]
            optimizer.zero_grad()
            F.cross_entropy(head(x[batch]), y[batch]).backward()
            optimizer.step()
        head.eval()
        with torch.no_grad():
            predictions = head(x_val).argmax(dim=1).numpy()
        accuracy = float(np.mean(predictions == y_val))
        history.append(accuracy)
        if accuracy > best.best_accuracy:
            best = ProbeResult(best_accuracy=accuracy, best_epoch=epoch, predictions=predictions)
    best.history = history
    logger.info("Linear probe: best val accuracy %.4f at epoch %d", best.best_accuracy, best.best_epoch)
    return best

# --- embedding-space metrics -----------------------------------------------------

def alignment(u: np.ndarray, v: np.ndarray) -> float:
    """Mean squared distance between paired rows of u and v."""
    u, v = np.atleast_2d(np.asarray(u, dtype=np.float64)), np.atleast_2d(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape or u.shape[0] == 0 or u.size == 0:
        raise EvalError("alignment needs at least one pair of equally shaped vectors")
    return float(np.mean(np.sum((u - v) ** 2, axis=1)))

def uniformity(vectors: np.ndarray, t: float = 2.0) -> float:
    """
    log of the mean of exp(-t * |u - v|^2) over all unordered distinct pairs.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[0] < 2:
        raise EvalError("uniformity needs at least two vectors")
    sq = pdist(vectors, metric="sqeuclidean")
    return min(float(logsumexp(-t * sq) - math.log(sq.size)), 0.0)

def mutual_nn_pairs(embeddings: LabeledEmbeddingSet) -> List[Tuple[int, int]]:
    """
    Row pairs (i < j) that are each other's nearest neighbour and share a class.
    """
    if len(embeddings) < 2:
        return []
    sims = embeddings.vectors @ embeddings.vectors.T
    np.fill_diagonal(sims, -np.inf)
    nearest = np.argmax(sims, axis=1)
    return [
        (i, int(j)) for i, j in enumerate(nearest)
        if i < j and nearest[j] == i and embeddings.labels[i] == embeddings.labels[j]
    ]

def _power_iteration(cov: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> Tuple[np.ndarray, float]:
    vector = start / np.linalg.norm(start)
    for _ in range(max_iter):
        product = cov @ vector
        norm = np.linalg.norm(product)
        if norm == 0.0:
            return vector, 0.0
        updated = product / norm
        if np.linalg.norm(updated - vector) < tol:
            vector = updated
            break
        vector = updated
    return vector, float(vector @ cov @ vector)

def principal_components(vectors: np.ndarray, n_components: int = 2, tol: float = 1e-9, seed: int = 0, max_iter: int = 100_000):
    """
    Top principal directions by power iteration with deflation. Each direction is
    signed so that its first non-negligible loading is positive.
    """
    data = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if data.shape[0] < 2:
        raise EvalError("PCA needs at least two rows")
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (data.shape[0] - 1)
    scale = np.trace(cov)
    if scale <= 0.0 or not np.any(np.abs(centered) > 0.0):
        raise EvalError("PCA input has rank 0: all rows are identical")
    rng = np.random.default_rng(seed)
    components, variances = [], []
    residual = cov.copy()
    for _ in range(n_components):
        vector, value = _power_iteration(residual, rng.standard_normal(data.shape[1]), tol, max_iter)
        if value <= 1e-12 * scale:
            vector, value = np.zeros(data.shape[1]), 0.0
        else:
            lead = np.flatnonzero(np.abs(vector) > 1e-12)
            if lead.size and vector[lead[0]] < 0:
                vector = -vector
            residual = residual - value * np.outer(vector, vector)
        components.append(vector)
        variances.append(value)
    return np.array(components), np.array(variances), centered

def pca_2d(vectors: np.ndarray, tol: float = 1e-9, seed: int = 0) -> np.ndarray:
    """m x d rows projected onto their top two principal directions."""
    components, _, centered = principal_components(vectors, 2, tol, seed)
    return centered @ components.T

# --- reports -----------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    top1_accuracy: float
    confusion: List[List[int]]
    precision: List[float]
    recall: List[float]
    macro_precision: float
    macro_recall: float
    uniform: float
    align_class_nn: Optional[float] = None
    align_views: Optional[float] = None
    n_train: int = 0
    n_test: int = 0
    class_names: List[str] = field(default_factory=list)
    extras: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "top1_accuracy": self.top1_accuracy,
            "confusion": self.confusion,
            "precision": self.precision,
            "recall": self.recall,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "L_uniform": self.uniform,
            "L_align_class_nn": self.align_class_nn,
            "L_align_views": self.align_views,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "class_names": self.class_names,
            "extras": self.extras,
        }

    def write_json(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return matrix

def build_report(
    task: str,
    y_true: np.ndarray,
    y_pred: np.ndarray,
    test: LabeledEmbeddingSet,
    num_classes: int,
    n_train: int = 0,
    view_pairs: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    extras: Optional[dict] = None,
) -> EvalReport:
    confusion = confusion_matrix(y_true, y_pred, num_classes)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    hits = np.diag(confusion)
    precision = [float(h / p) if p else 0.0 for h, p in zip(hits, predicted)]
    recall = [float(h / a) if a else 0.0 for h, a in zip(hits, actual)]
    pairs = mutual_nn_pairs(test)
    align_nn = None
    if pairs:
        rows = np.array(pairs)
        align_nn = alignment(test.vectors[rows[:, 0]], test.vectors[rows[:, 1]])
    return EvalReport(
        task=task,
        top1_accuracy=float(np.mean(np.asarray(y_true) == np.asarray(y_pred))),
        confusion=confusion.tolist(),
        precision=precision,
        recall=recall,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        uniform=uniformity(test.vectors) if len(test) >= 2 else 0.0,
        align_class_nn=align_nn,
        align_views=alignment(*view_pairs) if view_pairs is not None else None,
        n_train=n_train,
        n_test=len(test),
        class_names=list(CLASS_NAMES[:num_classes]) if num_classes <= len(CLASS_NAMES) else [str(c) for c in range(num_classes)],
        extras=extras or {},
    )

# --- encoder-facing helpers ----------------------------------------------------------

def _encoder_dtype(encoder: PriorGuidedEncoder) -> torch.dtype:
    return next(encoder.parameters()).dtype

def embed_prior_views(
    encoder: PriorGuidedEncoder,
    corpus: Corpus,
    views: ViewConfig,
    seed: int = 0,
    batch_size: int = 64,
) -> np.ndarray:
    """
    z_p of every image from its prior crop with the identity transform.
    """
    identity = TransformSet.identity(TransformKind.PRIOR)
    dtype = _encoder_dtype(encoder)
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = []
            for offset, img in enumerate(corpus.images[start:start + batch_size]):
                view, _ = make_prior_view(
                    img,
                    prior_crop_size(min(img.height, img.width), views.crop_size),
                    derive_seed(seed, STREAM_EVAL, int(corpus.ids[start + offset])),
                    view_size=views.view_size,
                    smooth_radius=views.smooth_radius,
                    transforms=identity,
                    prior=views.prior,
                )
                batch.append(to_tensor(view, dtype))
            chunks.append(encoder.encode_prior(torch.stack(batch)).to(torch.float64).numpy())
    return np.concatenate(chunks)

def embed_view_pairs(
    encoder: PriorGuidedEncoder,
    corpus: Corpus,
    views: ViewConfig,
    seed: int = 0,
    batch_size: int = 64,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (z_p, z_d) of each image from its augmented training views.
    """
    views = replace(views, win_enabled=False)
    dtype = _encoder_dtype(encoder)
    encoder.eval()
    prior, distorted = [], []
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            bundles = [
                build_view_bundle(img, views, int(corpus.ids[start + offset]), derive_seed(seed, STREAM_EVAL, 4, int(corpus.ids[start + offset])))
                for offset, img in enumerate(corpus.images[start:start + batch_size])
            ]
            v_p = torch.stack([to_tensor(b.v_p, dtype) for b in bundles])
            tiles = torch.stack([torch.stack([to_tensor(t, dtype) for t in b.v_d_tiles]) for b in bundles])
            prior.append(encoder.encode_prior(v_p).to(torch.float64).numpy())
            distorted.append(encoder.encode_jigsaw(tiles).to(torch.float64).numpy())
    return np.concatenate(prior), np.concatenate(distorted)

def _labeled_set(encoder, corpus: Corpus, views: ViewConfig, seed: int) -> LabeledEmbeddingSet:
    if not corpus.labeled:
        raise EvalError("evaluation needs a labeled corpus")
    return LabeledEmbeddingSet(embed_prior_views(encoder, corpus, views, seed), corpus.labels, corpus.ids)

def zero_shot_eval(
    encoder: PriorGuidedEncoder,
    train_corpus: Corpus,
    test_corpus: Corpus,
    views: ViewConfig,
    config: EvalConfig | None = None,
) -> EvalReport:
    """
    Weighted kNN of each test prior-view embedding against the train embeddings.
    """
    config = config or EvalConfig()
    train = _labeled_set(encoder, train_corpus, views, config.seed)
    test = _labeled_set(encoder, test_corpus, views, config.seed)
    predictions = knn_predict(train, test.vectors, config.knn_tau, config.knn_k)
    num_classes = max(train.num_classes, test.num_classes)
    report = build_report(
        "knn", test.labels, predictions, test, num_classes,
        n_train=len(train),
        view_pairs=embed_view_pairs(encoder, test_corpus, views, config.seed),
        extras={"k": min(config.knn_k, len(train)), "tau": config.knn_tau},
    )
    logger.info("Zero-shot kNN top-1 %.4f on %d test images", report.top1_accuracy, len(test))
    return report

def linear_eval(
    encoder: PriorGuidedEncoder,
    train_corpus: Corpus,
    test_corpus: Corpus,
    views: ViewConfig,
    config: EvalConfig | None = None,
) -> EvalReport:
    """
    Linear probe on frozen prior-view embeddings, validated on the test corpus.
    """
    config = config or EvalConfig()
    train = _labeled_set(encoder, train_corpus, views, config.seed)
    test = _labeled_set(encoder, test_corpus, views, config.seed)
    num_classes = max(train.num_classes, test.num_classes)
    probe = linear_probe(train, test, config, num_classes)
    return build_report(
        "linear", test.labels, probe.predictions, test, num_classes,
        n_train=len(train),
        view_pairs=embed_view_pairs(encoder, test_corpus, views, config.seed),
        extras={"best_epoch": probe.best_epoch, "label_fraction": config.label_fraction, "history": probe.history},
    )
