"""Classification metrics, reconstruction quality metrics and exact t-SNE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Her2Grade
from .errors import EmptyInput, LengthMismatch, PerplexityTooHigh, ShapeMismatch, TooSmall

N_CLASSES = len(Her2Grade)
PSNR_CAP_DB = 99.0


# --------------------------------------------------------------------------
# classification

def confusion(true: Sequence, pred: Sequence, n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are true grades, columns predicted grades."""
    if len(true) != len(pred):
        raise LengthMismatch(f"{len(true)} labels vs {len(pred)} predictions")
    if len(true) == 0:
        raise EmptyInput("confusion matrix of zero samples")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[int(t), int(p)] += 1
    return cm


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_f1: float
    per_class: dict
    confusion: list
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "accuracy": _r(self.accuracy),
            "macro_precision": _r(self.macro_precision),
            "macro_recall": _r(self.macro_recall),
            "macro_f1": _r(self.macro_f1),
            "weighted_f1": _r(self.weighted_f1),
            "per_class": {k: {"precision": _r(v.precision), "recall": _r(v.recall),
                              "f1": _r(v.f1), "support": v.support}
                          for k, v in self.per_class.items()},
            "confusion": self.confusion,
            "psnr_db": None if self.psnr_db is None else _r(self.psnr_db),
            "ssim": None if self.ssim is None else _r(self.ssim),
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _r(x: float) -> float:
    return round(float(x), 8)


def _safe_div(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def prf_metrics(cm: np.ndarray) -> MetricsReport:
    """Per-class and averaged precision / recall / F1; zero on zero division."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total <= 0:
        raise EmptyInput("confusion matrix is empty")
    per_class = {}
    ps, rs, fs, support = [], [], [], []
    for k in range(cm.shape[0]):
        tp = cm[k, k]
        p = _safe_div(tp, cm[:, k].sum())
        r = _safe_div(tp, cm[k, :].sum())
        f = _safe_div(2 * p * r, p + r)
        n = int(cm[k, :].sum())
        per_class[Her2Grade(k).label if cm.shape[0] == N_CLASSES else str(k)] = ClassMetrics(p, r, f, n)
        ps.append(p)
        rs.append(r)
        fs.append(f)
        support.append(n)
    support = np.asarray(support, dtype=np.float64)
    return MetricsReport(
        accuracy=float(np.trace(cm) / total),
        macro_precision=float(np.mean(ps)),
        macro_recall=float(np.mean(rs)),
        macro_f1=float(np.mean(fs)),
        weighted_f1=float(np.dot(fs, support) / support.sum()),
        per_class=per_class,
        confusion=cm.tolist(),
    )


# --------------------------------------------------------------------------
# reconstruction quality

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return 99 dB."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * math.log10(max_value ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean single-scale SSIM over valid 11x11 Gaussian windows of the luminance."""
    a, b = _pair(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < win_size:
        raise TooSmall(f"image {x.shape} smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (win_size, win_size)), w)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx ** 2
    vy = filt(y * y) - my ** 2
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# exact t-SNE

@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_after_exaggeration: float
    kl_final: float
    kl_history: list


def _conditional_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = d2.shape[0]
    target = math.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            e = np.exp(-(di - di.min()) * beta)
            s = e.sum()
            p = e / s
            h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p
    return P


def _kl(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + _sqdist(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def _sqdist(X: np.ndarray) -> np.ndarray:
    s = np.sum(X * X, axis=1)
    return np.maximum(s[:, None] + s[None, :] - 2.0 * X @ X.T, 0.0)


def tsne_fit(features, perplexity: float = 30.0, seed: int = 0, iterations: int = 1000,
             learning_rate: float = 200.0, exaggeration: float = 12.0,
             exaggeration_iters: int = 250) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or X.shape[1] < 2:
        raise ShapeMismatch("t-SNE expects an (n, D) matrix with D >= 2")
    if 3 * perplexity >= n:
        raise PerplexityTooHigh(f"perplexity {perplexity} too high for {n} samples")
    exaggeration_iters = min(exaggeration_iters, iterations)
    P = _conditional_p(_sqdist(X), perplexity)
    P = np.maximum((P + P.T) / (2.0 * n), 1e-12)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    kl_exag = None
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sqdist(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if it + 1 == exaggeration_iters:
            kl_exag = _kl(P, Y)
        if (it + 1) % 50 == 0 or it + 1 == iterations:
            history.append((it + 1, _kl(P, Y)))
    kl_final = _kl(P, Y)
    return TsneResult(Y, kl_exag if kl_exag is not None else kl_final, kl_final, history)


def tsne_embed(features, perplexity: float = 30.0, seed: int = 0, iterations: int = 1000) -> np.ndarray:
    return tsne_fit(features, perplexity, seed, iterations).embedding
