"""Context-utilization detection: from-scratch L2-regularized logistic regression.

The trainable probe (:class:`AttentionProbe`) is sklearn-compatible
(fit/predict/predict_proba/get_params) but the optimization is implemented
here: deterministic full-batch gradient descent with backtracking line search.
A fitted probe is frozen into an immutable :class:`UtilizationDetector` that
binds coefficients to an explicit head layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attention import (
    AttentionSnapshot,
    ContextSpan,
    FeatureVector,
    HeadId,
    full_feature_vector,
)
from .distributions import average_ranks
from .errors import DegenerateLabels, InvalidInput, NoPositiveEvidence

L2_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)
DETECTOR_FORMAT_VERSION = 1


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _nll(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float) -> float:
    z = X @ w + b
    # mean(log(1 + e^z) - y*z), computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss + 0.5 * l2 * float(np.dot(w, w))


class AttentionProbe(BaseEstimator, ClassifierMixin):
    """Binary logistic regression with L2 penalty, trained by full-batch
    gradient descent with Armijo backtracking.

    ``l2_strength=None`` selects the penalty by k-fold cross-validated
    log-loss over a fixed grid. Fitting is bit-reproducible for a fixed
    ``random_state`` and data.
    """

    def __init__(
        self,
        l2_strength: float | None = None,
        folds: int = 5,
        max_iterations: int = 500,
        convergence_tol: float = 1e-8,
        random_state: int = 0,
    ):
        self.l2_strength = l2_strength
        self.folds = folds
        self.max_iterations = max_iterations
        self.convergence_tol = convergence_tol
        self.random_state = random_state

    def fit(self, X, y):
        if np.asarray(X).ndim == 2 and np.asarray(X).shape[1] == 0:
            raise InvalidInput("need at least one feature")
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if classes.size < 2:
            raise DegenerateLabels("need both classes present to fit")
        if not set(classes) <= {0.0, 1.0}:
            raise InvalidInput("labels must be binary 0/1")
        if X.shape[1] == 0:
            raise InvalidInput("need at least one feature")
        y = y.astype(np.float64)
        if self.l2_strength is None:
            l2 = self._select_l2(X, y)
        else:
            l2 = float(self.l2_strength)
            if l2 < 0:
                raise InvalidInput("l2_strength must be non-negative")
        w, b, hist, converged, n_iter = self._descend(X, y, l2)
        self.coef_ = w
        self.intercept_ = b
        self.l2_strength_ = l2
        self.loss_history_ = hist
        self.converged_ = converged
        self.n_iter_ = n_iter
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        if not converged:
            import warnings

            warnings.warn("gradient descent did not reach convergence_tol", RuntimeWarning)
        return self

    def _descend(self, X, y, l2):
        n, d = X.shape
        w = np.zeros(d)
        b = 0.0
        loss = _nll(X, y, w, b, l2)
        hist = [loss]
        converged = False
        it = 0
        for it in range(1, self.max_iterations + 1):
            p = _sigmoid(X @ w + b)
            gw = X.T @ (p - y) / n + l2 * w
            gb = float(np.mean(p - y))
            gnorm = math.sqrt(float(np.dot(gw, gw)) + gb * gb)
            if gnorm < self.convergence_tol:
                converged = True
                break
            step = 1.0
            g2 = gnorm * gnorm
            while step > 1e-14:
                w2 = w - step * gw
                b2 = b - step * gb
                new = _nll(X, y, w2, b2, l2)
                if new <= loss - 1e-4 * step * g2:
                    break
                step *= 0.5
            w, b, loss = w2, b2, new
            hist.append(loss)
        return w, b, hist, converged, it

    def _select_l2(self, X, y):
        rng = np.random.default_rng(self.random_state)
        n = X.shape[0]
        k = min(self.folds, n)
        if k < 2:
            raise InvalidInput("cross-validation needs folds >= 2 and enough data")
        perm = rng.permutation(n)
        folds = np.array_split(perm, k)
        best = (math.inf, math.inf)
        for l2 in L2_GRID:
            losses = []
            for f in range(k):
                val = folds[f]
                trn = np.concatenate([folds[g] for g in range(k) if g != f])
                if np.unique(y[trn]).size < 2 or val.size == 0:
                    continue
                w, b, *_ = self._descend(X[trn], y[trn], l2)
                losses.append(_nll(X[val], y[val], w, b, 0.0))
            score = float(np.mean(losses)) if losses else math.inf
            if (score, l2) < best:
                best = (score, l2)
        if not math.isfinite(best[0]):
            raise DegenerateLabels("every CV fold was single-class")
        return best[1]

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    label: int
    provenance: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInput("label must be 0 or 1")


@dataclass(frozen=True)
class TrainConfig:
    l2_strength: float | None = None  # None => k-fold CV over the fixed grid
    folds: int = 5
    max_iterations: int = 500
    convergence_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.convergence_tol <= 0:
            raise InvalidInput("convergence_tol must be positive")
        if self.folds < 2:
            raise InvalidInput("folds must be >= 2")
        if self.l2_strength is not None and self.l2_strength < 0:
            raise InvalidInput("l2_strength must be non-negative")


def layout_fingerprint(head_order: Sequence[HeadId], geometry: tuple[int, int]) -> str:
    blob = json.dumps(
        {"geometry": list(geometry), "heads": [list(h) for h in head_order]},
        separators=(",", ":"),
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class UtilizationDetector:
    """Frozen logistic probe bound to a head layout and model geometry."""

    head_order: tuple[HeadId, ...]
    coefficients: tuple[float, ...]
    bias: float
    threshold: float
    geometry: tuple[int, int]  # (num_layers, num_heads)
    layout_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "head_order", tuple(HeadId(*h) for h in self.head_order))
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "geometry", (int(self.geometry[0]), int(self.geometry[1])))
        if len(self.coefficients) != len(self.head_order):
            raise InvalidInput("coefficients and head_order must align")
        if not self.head_order:
            raise InvalidInput("head_order must be non-empty")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInput("threshold must lie in (0, 1)")
        if not self.layout_id:
            object.__setattr__(
                self, "layout_id", layout_fingerprint(self.head_order, self.geometry)
            )


def _stack(examples: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray, tuple[HeadId, ...]]:
    if len(examples) < 2:
        raise InvalidInput("need at least 2 examples")
    order = examples[0].features.head_order
    for ex in examples:
        if ex.features.head_order != order:
            raise InvalidInput("feature layout differs across examples")
    X = np.array([ex.features.values for ex in examples], dtype=np.float64)
    y = np.array([ex.label for ex in examples], dtype=np.float64)
    return X, y, order


def _infer_geometry(head_order: Sequence[HeadId]) -> tuple[int, int]:
    return (max(h.layer for h in head_order) + 1, max(h.head for h in head_order) + 1)


def train(
    examples: Sequence[LabeledExample],
    config: TrainConfig = TrainConfig(),
    geometry: tuple[int, int] | None = None,
) -> UtilizationDetector:
    """Fit a detector on labeled attention-ratio features.

    Deterministic for a fixed seed; raises :class:`DegenerateLabels` when
    only one class is present.
    """
    X, y, order = _stack(examples)
    probe = AttentionProbe(
        l2_strength=config.l2_strength,
        folds=config.folds,
        max_iterations=config.max_iterations,
        convergence_tol=config.convergence_tol,
        random_state=config.seed,
    ).fit(X, y)
    geom = geometry or _infer_geometry(order)
    fingerprint = hashlib.sha256(X.tobytes() + y.tobytes()).hexdigest()[:16]
    return UtilizationDetector(
        head_order=order,
        coefficients=tuple(float(c) for c in probe.coef_),
        bias=float(probe.intercept_),
        threshold=0.5,
        geometry=geom,
        metadata={
            "seed": config.seed,
            "l2_strength": probe.l2_strength_,
            "converged": bool(probe.converged_),
            "n_iter": int(probe.n_iter_),
            "data_fingerprint": fingerprint,
            "n_examples": len(examples),
        },
    )


def _check_layout(detector: UtilizationDetector, features: FeatureVector) -> None:
    if features.head_order != detector.head_order:
        raise InvalidInput("feature layout does not match detector layout")


def predict_proba(detector: UtilizationDetector, features: FeatureVector) -> float:
    _check_layout(detector, features)
    z = detector.bias + float(np.dot(detector.coefficients, features.values))
    return float(_sigmoid(np.array([z]))[0])


def classify(detector: UtilizationDetector, features: FeatureVector) -> int:
    return int(predict_proba(detector, features) >= detector.threshold)


def select_top_heads(detector: UtilizationDetector, k: int) -> list[HeadId]:
    """The k heads of largest |coefficient|, descending, ties by (layer, head)."""
    n = len(detector.head_order)
    if not 1 <= k <= n:
        raise InvalidInput(f"K must be in [1, {n}], got {k}")
    ranked = sorted(
        zip(detector.head_order, detector.coefficients),
        key=lambda hc: (-abs(hc[1]), hc[0]),
    )
    return [h for h, _ in ranked[:k]]


def head_weights(detector: UtilizationDetector) -> np.ndarray:
    """Coefficients clamped at zero and normalized to sum 1."""
    c = np.maximum(np.asarray(detector.coefficients, dtype=np.float64), 0.0)
    total = float(c.sum())
    if total <= 0.0:
        raise NoPositiveEvidence("no positive coefficient to derive head weights")
    return c / total


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC with average-rank tie correction."""
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both classes")
    ranks = average_ranks(np.asarray(scores, dtype=np.float64))
    return (float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(detector: UtilizationDetector, examples: Sequence[LabeledExample]) -> dict:
    """Accuracy at the detector threshold plus rank-based AUC."""
    X, y, order = _stack(examples)
    if order != detector.head_order:
        raise InvalidInput("feature layout does not match detector layout")
    z = X @ np.asarray(detector.coefficients) + detector.bias
    scores = _sigmoid(z)
    preds = (scores >= detector.threshold).astype(int)
    acc = float(np.mean(preds == y.astype(int)))
    return {"accuracy": acc, "auc": auc_score(scores, y.astype(int))}


@dataclass(frozen=True)
class DecodingRecord:
    """One recorded decode step with its context span and gold positions."""

    snapshot: AttentionSnapshot
    span: ContextSpan
    gold_positions: tuple[int, ...]
    provenance: str = ""


@dataclass(frozen=True)
class LabelingRule:
    negative_ratio: float = 1.0  # negatives sampled per positive
    seed: int = 0


def build_training_set(
    records: Iterable[DecodingRecord], rule: LabelingRule = LabelingRule()
) -> tuple[list[LabeledExample], int]:
    """Label gold-answer context positions positive, sample negatives.

    Records without gold positions contribute nothing; the skip count is
    returned alongside the examples. Sampling is seeded and deterministic.
    """
    rng = np.random.default_rng(rule.seed)
    examples: list[LabeledExample] = []
    skipped = 0
    for rec in records:
        gold = [p for p in rec.gold_positions if p in rec.span.indices]
        if not gold:
            skipped += 1
            continue
        rest = [p for p in rec.span.indices if p not in gold]
        n_neg = min(len(rest), round(rule.negative_ratio * len(gold)))
        neg = sorted(rng.choice(len(rest), size=n_neg, replace=False)) if n_neg else []
        for p in gold:
            examples.append(
                LabeledExample(full_feature_vector(rec.snapshot, rec.span, p), 1, rec.provenance)
            )
        for i in neg:
            examples.append(
                LabeledExample(
                    full_feature_vector(rec.snapshot, rec.span, rest[i]), 0, rec.provenance
                )
            )
    return examples, skipped


def save_detector(detector: UtilizationDetector, path: str | Path) -> None:
    doc = {
        "format_version": DETECTOR_FORMAT_VERSION,
        "kind": "utilization-detector",
        "layout_id": detector.layout_id,
        "geometry": {"num_layers": detector.geometry[0], "num_heads": detector.geometry[1]},
        "head_order": [[h.layer, h.head] for h in detector.head_order],
        "coefficients": list(detector.coefficients),
        "bias": detector.bias,
        "threshold": detector.threshold,
        "training": detector.metadata,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_detector(path: str | Path) -> UtilizationDetector:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != DETECTOR_FORMAT_VERSION:
        raise InvalidInput(f"unsupported detector format version {doc.get('format_version')!r}")
    return UtilizationDetector(
        head_order=tuple(HeadId(*h) for h in doc["head_order"]),
        coefficients=tuple(doc["coefficients"]),
        bias=doc["bias"],
        threshold=doc["threshold"],
        geometry=(doc["geometry"]["num_layers"], doc["geometry"]["num_heads"]),
        layout_id=doc["layout_id"],
        metadata=doc.get("training", {}),
    )


def restrict_to_heads(
    examples: Sequence[LabeledExample], heads: Sequence[HeadId]
) -> list[LabeledExample]:
    """Project every example's features onto a head subset (for top-K retraining)."""
    from .attention import project_features

    return [
        LabeledExample(project_features(ex.features, heads), ex.label, ex.provenance)
        for ex in examples
    ]
