"""Linear probing and metrics: precision/recall, PR curves and AP, mAP,
Fréchet distance between feature Gaussians, and an inception-style score.

Feature statistics come from the contrastive encoder's pooled trunk and class
posteriors from the linear probe, so the distance and score are comparable
only across runs that share an encoder.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericError, ParameterError, UndefinedMetricError
from .moco import encoder_features
from .optim import SGD
from .schedule import cosine_lr
from .tensor import Tensor

NUM_CLASSES = 4

# ---------------------------------------------------------------------------
# classification metrics


def precision_recall(preds, labels, cls: int) -> tuple[float, float]:
    """One-vs-rest precision and recall; each is 0 when its denominator is 0."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"preds {preds.shape} and labels {labels.shape} must be equal-length vectors")
    if preds.size == 0:
        raise ContractError("need at least one prediction")
    tp = int(np.sum((preds == cls) & (labels == cls)))
    predicted = int(np.sum(preds == cls))
    actual = int(np.sum(labels == cls))
    return (tp / predicted if predicted else 0.0, tp / actual if actual else 0.0)


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray  # descending scores along the ranked sweep
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pr_curve(scores, labels) -> PrCurve:
    """Ranked sweep, ties broken by original index; AP is the step-interpolated area."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    precision = tp / ranks
    recall = tp / n_pos
    # recall steps by exactly 1/n_pos at each hit and stays flat otherwise
    ap = math.fsum(precision[hits]) / n_pos
    return PrCurve(scores[order], precision, recall, ap)


def average_precision(scores, labels) -> float:
    return pr_curve(scores, labels).ap


def mean_ap(scores, labels, num_classes: int = NUM_CLASSES) -> tuple[float, list[float]]:
    """Unweighted mean of the one-vs-rest APs, plus the per-class list."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.ndim != 2 or scores.shape != (labels.size, num_classes):
        raise ContractError(f"scores must be ({labels.size}, {num_classes}), got {scores.shape}")
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise UndefinedMetricError(f"classes {missing} absent from labels")
    aps = [average_precision(scores[:, c], labels == c) for c in range(num_classes)]
    return float(np.mean(aps)), aps


# ---------------------------------------------------------------------------
# Fréchet distance


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors (columns).
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                app, aqq = float(a[p, p]), float(a[q, q])
                if abs(apq) <= 1e-18 * (abs(app) + abs(aqq)) or apq == 0.0:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericError("Jacobi eigensolver did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _clamp_eigs(w: np.ndarray, what: str) -> np.ndarray:
    if w.size and w.min() < -1e-6:
        raise NumericError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3g})")
    return np.maximum(w, 0.0)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = jacobi_eigh(a)
    return (v * np.sqrt(_clamp_eigs(w, "matrix"))) @ v.T


@dataclass(frozen=True)
class FeatureGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> FeatureGaussian:
        """Sample mean and unbiased covariance of (m, d) features, m >= 2."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ParameterError(f"need an (m >= 2, d) feature matrix, got {f.shape}")
        mu = f.mean(axis=0)
        centred = f - mu
        sigma = centred.T @ centred / (f.shape[0] - 1)
        return cls(mu, 0.5 * (sigma + sigma.T))


def frechet_distance(g1: FeatureGaussian, g2: FeatureGaussian) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    mu1, mu2 = np.atleast_1d(g1.mu), np.atleast_1d(g2.mu)
    s1, s2 = np.atleast_2d(g1.sigma), np.atleast_2d(g2.sigma)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ContractError("Gaussians differ in dimension")
    root1 = sqrtm_psd(s1)
    cross = root1 @ s2 @ root1
    w, _ = jacobi_eigh(0.5 * (cross + cross.T))
    tr_cross = float(np.sqrt(_clamp_eigs(w, "cross-covariance product")).sum())
    diff = mu1 - mu2
    fd = float(diff @ diff) + float(np.trace(s1)) + float(np.trace(s2)) - 2.0 * tr_cross
    return max(fd, 0.0)


def inception_style_score(probs) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))), with p(y) the mean posterior."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"expected an (m, classes) posterior matrix, got {p.shape}")
    if p.min() < 0 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("posterior rows must be non-negative and sum to 1")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    kl = np.maximum(terms.sum(axis=1), 0.0)
    return float(np.exp(kl.mean()))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    """Softmax classifier on standardized pooled encoder features."""

    weight: np.ndarray  # (features, classes)
    bias: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.feat_mean) / self.feat_std) @ self.weight + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def sections(self) -> dict[str, np.ndarray]:
        return {"probe/weight": self.weight, "probe/bias": self.bias, "probe/mean": self.feat_mean, "probe/std": self.feat_std}

    @classmethod
    def from_sections(cls, s: Mapping[str, np.ndarray]) -> LinearProbe:
        return cls(s["probe/weight"], s["probe/bias"], s["probe/mean"], s["probe/std"])


def extract_features(encoder: Mapping[str, np.ndarray], images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pooled trunk features in float64; the encoder is only read."""
    dtype = next(iter(encoder.values())).dtype
    parts = [encoder_features(encoder, images[i : i + chunk].astype(dtype)).numpy() for i in range(0, len(images), chunk)]
    return np.concatenate(parts).astype(np.float64) if parts else np.zeros((0, 0))


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 100,
    lr0: float = 0.1,
    seed: int = 0,
    batch: int = 64,
    num_classes: int = NUM_CLASSES,
    weight_decay: float = 0.0,
) -> LinearProbe:
    """Cross-entropy training of the probe weights on cached features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ParameterError("cannot train a probe on an empty dataset")
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-6)
    x = (features - mean) / std
    params = {"weight": np.zeros((features.shape[1], num_classes)), "bias": np.zeros(num_classes)}
    opt = SGD(params, momentum=0.9, weight_decay=weight_decay)
    per_epoch = -(-x.shape[0] // batch)
    total = epochs * per_epoch
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(x.shape[0])
        for i in range(0, x.shape[0], batch):
            idx = order[i : i + batch]
            tracked = tn.leaves(params)
            logits = Tensor(x[idx]) @ tracked["weight"] + tracked["bias"]
            grads = tn.backward(tn.softmax_cross_entropy(logits, labels[idx]), tracked)
            opt.step(params, grads, cosine_lr(step, total, lr0))
            step += 1
    return LinearProbe(params["weight"], params["bias"], mean, std)


def train_probe(
    encoder: Mapping[str, np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 100,
    lr0: float = 0.1,
    seed: int = 0,
) -> LinearProbe:
    """Frozen-encoder linear probe: pooled features -> one fully connected layer."""
    if len(images) == 0:
        raise ParameterError("cannot train a probe on an empty dataset")
    return fit_probe(extract_features(encoder, images), labels, epochs, lr0, seed)


@dataclass(frozen=True)
class ProbeReport:
    precision: list[float]
    recall: list[float]
    aps: list[float]
    map: float
    curves: list[PrCurve]
    accuracy: float


def evaluate_probe(probe: LinearProbe, features: np.ndarray, labels: Sequence[int]) -> ProbeReport:
    labels = np.asarray(labels)
    probs = probe.predict_proba(features)
    preds = probs.argmax(axis=1)
    pr = [precision_recall(preds, labels, c) for c in range(probs.shape[1])]
    curves = [pr_curve(probs[:, c], labels == c) for c in range(probs.shape[1])]
    aps = [c.ap for c in curves]
    return ProbeReport(
        precision=[p for p, _ in pr],
        recall=[r for _, r in pr],
        aps=aps,
        map=float(np.mean(aps)),
        curves=curves,
        accuracy=float(np.mean(preds == labels)),
    )
