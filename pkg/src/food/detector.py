"""OOD detection heads over score features.

The main detector is a logistic-regression neuron on the L per-layer
likelihood features plus the LLR,

    score(x) = sigmoid(sum_l w_l * F(x, l) + w_{L+1} * LLR(x) + b),

fitted by full-batch gradient descent on cross-entropy with a small L2
penalty. In-distribution rows are labeled 1 and crafted OOD rows 0, so
higher scores mean more in-distribution. Features are standardized before
fitting by default (they live on very different scales); raw mode is kept
behind a flag. A bias is included so the detector can calibrate base rates.

Baselines: max-softmax-probability on the head outputs, and a
Mahalanobis-sum scorer with one shared full covariance per layer on
average-pooled representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn.network import Network
from .scoring import spatial_pool


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DetectorModel:
    weights: np.ndarray  # (L+1,)
    bias: float
    feat_mean: np.ndarray  # (L+1,)
    feat_scale: np.ndarray  # (L+1,) > 0
    standardized: bool = True

    def to_tensors(self, prefix="detector"):
        return {
            f"{prefix}.w": self.weights,
            f"{prefix}.b": np.asarray([self.bias], dtype=np.float64),
            f"{prefix}.featmean": self.feat_mean,
            f"{prefix}.featscale": self.feat_scale,
        }

    @classmethod
    def from_tensors(cls, tensors, prefix="detector", standardized=True):
        return cls(
            weights=tensors[f"{prefix}.w"].astype(np.float64),
            bias=float(tensors[f"{prefix}.b"][0]),
            feat_mean=tensors[f"{prefix}.featmean"].astype(np.float64),
            feat_scale=tensors[f"{prefix}.featscale"].astype(np.float64),
            standardized=standardized,
        )


def _standardize_stats(rows):
    mean = rows.mean(axis=0)
    scale = np.maximum(rows.std(axis=0), 1e-8)
    return mean, scale


def fit_detector(
    in_features,
    ood_features,
    l2=1e-4,
    lr=0.5,
    max_steps=5000,
    tol=1e-6,
    standardize=True,
) -> DetectorModel:
    """Fit the logistic-regression detector.

    Full-batch gradient descent on mean cross-entropy with an L2 penalty on
    the weights (not the bias); stops on gradient norm < tol or max_steps.
    """
    xin = np.asarray(in_features, dtype=np.float64)
    xout = np.asarray(ood_features, dtype=np.float64)
    if xin.ndim != 2 or xout.ndim != 2 or xin.shape[1] != xout.shape[1]:
        raise ShapeError("feature matrices must be 2-D with equal widths")
    if xin.shape[0] < 10 or xout.shape[0] < 10:
        raise ValueError(
            f"need at least 10 rows per class, got {xin.shape[0]} in / {xout.shape[0]} ood"
        )
    x = np.vstack([xin, xout])
    y = np.concatenate([np.ones(xin.shape[0]), np.zeros(xout.shape[0])])
    if standardize:
        mean, scale = _standardize_stats(x)
    else:
        mean = np.zeros(x.shape[1])
        scale = np.ones(x.shape[1])
    xs = (x - mean) / scale
    n = xs.shape[0]
    w = np.zeros(xs.shape[1])
    b = 0.0
    for _ in range(max_steps):
        p = sigmoid(xs @ w + b)
        err = p - y
        gw = xs.T @ err / n + l2 * w
        gb = err.mean()
        if np.sqrt((gw * gw).sum() + gb * gb) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return DetectorModel(w, float(b), mean, scale, standardized=standardize)


def detector_logit(model: DetectorModel, features):
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[1] != model.weights.size:
        raise ShapeError(
            f"feature width {f.shape[1]} does not match detector width {model.weights.size}"
        )
    fs = (f - model.feat_mean) / model.feat_scale
    return fs @ model.weights + model.bias


def detector_score(model: DetectorModel, features):
    """Sigmoid detector score in (0, 1); higher = more in-distribution."""
    z = detector_logit(model, features)
    s = sigmoid(z)
    return s if np.asarray(features).ndim == 2 else float(s[0])


def msp_score(head_out):
    """Max softmax probability of one head-output vector or a batch."""
    h = np.asarray(head_out, dtype=np.float64)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] < 2:
        raise ShapeError("msp needs at least 2 class scores")
    z = h - h.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    out = p.max(axis=1)
    return float(out[0]) if single else out


@dataclass
class MdStarStats:
    """Per-layer class means and one shared, ridge-regularized full
    covariance (stored as its inverse) on average-pooled representations."""

    mus: list  # per layer: (C, d_l)
    precisions: list  # per layer: (d_l, d_l)
    arch_tag: str = ""

    def to_tensors(self):
        tensors = {}
        for l, (mu, prec) in enumerate(zip(self.mus, self.precisions), start=1):
            for c in range(mu.shape[0]):
                tensors[f"mdstar.layer{l}.class{c}.mu"] = mu[c]
            tensors[f"mdstar.layer{l}.precision"] = prec
        return tensors

    def meta(self):
        return {"layers": len(self.mus), "num_classes": int(self.mus[0].shape[0]),
                "arch_tag": self.arch_tag}

    @classmethod
    def from_tensors(cls, meta, tensors):
        mus, precisions = [], []
        for l in range(1, meta["layers"] + 1):
            mu = np.stack(
                [tensors[f"mdstar.layer{l}.class{c}.mu"] for c in range(meta["num_classes"])]
            )
            mus.append(mu.astype(np.float64))
            precisions.append(tensors[f"mdstar.layer{l}.precision"].astype(np.float64))
        return cls(mus, precisions, meta.get("arch_tag", ""))


def fit_mdstar(net: Network, dataset, ridge=1e-4, batch_size=256) -> MdStarStats:
    """Fit Mahalanobis statistics on the tapped representations.

    All taps are average-pooled. The covariance is shared across classes
    per layer and regularized as Sigma + ridge * trace(Sigma)/d * I before
    inversion.
    """
    from .scoring import _arch_tag

    labels = np.asarray(dataset.labels)
    C = net.num_classes
    pooled_all = None
    for lo in range(0, len(labels), batch_size):
        _, reps = net.forward_with_taps(dataset.images[lo : lo + batch_size])
        pooled = [spatial_pool(r, "average").astype(np.float64) for r in reps]
        if pooled_all is None:
            pooled_all = [[] for _ in pooled]
        for l, p in enumerate(pooled):
            pooled_all[l].append(p)
    pooled_all = [np.vstack(chunks) for chunks in pooled_all]
    mus, precisions = [], []
    for p in pooled_all:
        d = p.shape[1]
        mu = np.zeros((C, d))
        centered = np.empty_like(p)
        for c in range(C):
            rows = labels == c
            if not rows.any():
                raise ValueError(f"class {c} is empty while fitting Mahalanobis statistics")
            mu[c] = p[rows].mean(axis=0)
            centered[rows] = p[rows] - mu[c]
        cov = centered.T @ centered / p.shape[0]
        cov += ridge * np.trace(cov) / d * np.eye(d)
        mus.append(mu)
        precisions.append(np.linalg.inv(cov))
    return MdStarStats(mus, precisions, arch_tag=_arch_tag(net))


def mdstar_score(net: Network, stats: MdStarStats, batch):
    """Sum over layers of the best (least negative) class score
    -(v - mu_c)^T P_l (v - mu_c) on the average-pooled representations."""
    _, reps = net.forward_with_taps(batch)
    return mdstar_score_from_reps(reps, stats)


def mdstar_score_from_reps(reps, stats: MdStarStats):
    total = None
    for rep, mu, prec in zip(reps, stats.mus, stats.precisions):
        pooled = spatial_pool(rep, "average").astype(np.float64)
        layer_best = None
        for c in range(mu.shape[0]):
            diff = pooled - mu[c]
            score_c = -np.einsum("nd,nd->n", diff @ prec, diff)
            layer_best = score_c if layer_best is None else np.maximum(layer_best, score_c)
        total = layer_best if total is None else total + layer_best
    return total
