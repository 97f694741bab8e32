"""LLR statistic on head outputs and per-layer likelihood features.

The LLR of a head-output vector is the top score minus the mean of the
remaining C-1 scores. Per-layer features pool each tapped representation
spatially (max pooling on the shallow half of the taps, average pooling on
the deep half), then take the best per-class diagonal-Gaussian
log-likelihood of the pooled vector under statistics fitted on training
data.

Note on tap indexing: with taps numbered l = 1..L, the shallow half
l <= floor(L/2) is max-pooled. The tap list deliberately excludes the
pooled head input, so a network advertising L taps yields exactly L
features; the head itself contributes the LLR separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .gausshead import VAR_FLOOR
from .nn.layers import LOG_2PI
from .nn.network import HeadScore, Network


def llr(head_out):
    """LLR of one head-output vector: max entry minus the mean of the rest."""
    v = np.asarray(head_out, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ShapeError("llr needs a vector of at least 2 class scores")
    p_pred = v.max()
    p_other = (v.sum() - p_pred) / (v.size - 1)
    return float(p_pred - p_other)


def llr_batch(head_out):
    h = np.asarray(head_out, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 2:
        raise ShapeError("llr_batch needs [N, C] with C >= 2")
    p_pred = h.max(axis=1)
    p_other = (h.sum(axis=1) - p_pred) / (h.shape[1] - 1)
    return p_pred - p_other


def llr_head_grad(head_out):
    """d LLR / d head_out per row: +1 at the (first) argmax, -1/(C-1) elsewhere."""
    h = np.asarray(head_out)
    n, c = h.shape
    g = np.full_like(h, -1.0 / (c - 1), dtype=np.float64)
    g[np.arange(n), h.argmax(axis=1)] = 1.0
    return g


def llr_score() -> HeadScore:
    """LLR as a differentiable head functional (for input gradients)."""
    return HeadScore(llr_batch, llr_head_grad, name="llr")


def class_loglik_score(c: int) -> HeadScore:
    """Single class log-likelihood head functional."""

    def grad(h):
        g = np.zeros_like(h, dtype=np.float64)
        g[:, c] = 1.0
        return g

    return HeadScore(lambda h: np.asarray(h, dtype=np.float64)[:, c], grad, name=f"loglik[{c}]")


def max_logit_score() -> HeadScore:
    """Max head output (the logit behind the max-softmax score)."""

    def grad(h):
        g = np.zeros_like(h, dtype=np.float64)
        g[np.arange(h.shape[0]), np.asarray(h).argmax(axis=1)] = 1.0
        return g

    return HeadScore(lambda h: np.asarray(h, dtype=np.float64).max(axis=1), grad, name="max_logit")


def spatial_pool(rep, kind):
    """Global spatial pooling of one [ch,h,w] map or a [N,ch,h,w] batch."""
    r = np.asarray(rep)
    if r.ndim == 3:
        return spatial_pool(r[None], kind)[0]
    if r.ndim != 4 or r.shape[2] == 0 or r.shape[3] == 0:
        raise ShapeError(f"spatial_pool expects [N,ch,h,w] with h,w >= 1, got {list(r.shape)}")
    if kind == "max":
        return r.max(axis=(2, 3))
    if kind == "average":
        return r.mean(axis=(2, 3))
    raise ValueError(f"unknown pooling kind {kind!r}")


def pooling_kinds(num_taps: int, mode: str = "mixed"):
    """Pooling kind per tap: max for l <= floor(L/2), average above (mixed),
    or average everywhere."""
    if mode == "avg":
        return ["average"] * num_taps
    if mode != "mixed":
        raise ValueError(f"unknown pooling mode {mode!r}")
    half = num_taps // 2
    return ["max" if l <= half else "average" for l in range(1, num_taps + 1)]


@dataclass
class LayerGaussianStats:
    """Per-tap, per-class Gaussian statistics of pooled representations."""

    pool_kinds: list
    mus: list  # per tap: (C, ch_l) float64
    logvars: list  # per tap: (C, ch_l) float64
    arch_tag: str = ""

    @property
    def num_taps(self):
        return len(self.pool_kinds)

    def to_tensors(self):
        tensors = {}
        for l, (mu, lv) in enumerate(zip(self.mus, self.logvars), start=1):
            for c in range(mu.shape[0]):
                tensors[f"stats.layer{l}.class{c}.mu"] = mu[c]
                tensors[f"stats.layer{l}.class{c}.logvar"] = lv[c]
        return tensors

    def meta(self):
        return {"pool_kinds": self.pool_kinds, "arch_tag": self.arch_tag,
                "num_classes": int(self.mus[0].shape[0])}

    @classmethod
    def from_tensors(cls, meta, tensors):
        kinds = meta["pool_kinds"]
        num_classes = meta["num_classes"]
        mus, logvars = [], []
        for l in range(1, len(kinds) + 1):
            mu = np.stack([tensors[f"stats.layer{l}.class{c}.mu"] for c in range(num_classes)])
            lv = np.stack([tensors[f"stats.layer{l}.class{c}.logvar"] for c in range(num_classes)])
            mus.append(mu.astype(np.float64))
            logvars.append(lv.astype(np.float64))
        return cls(kinds, mus, logvars, meta.get("arch_tag", ""))


@dataclass
class ScoreVector:
    """Everything the detector sees for one sample."""

    features: np.ndarray  # (L,) per-tap likelihood features
    llr: float
    msp: float
    head_out: np.ndarray  # (C,) raw head scores


def fit_layer_stats(
    net: Network, dataset, pooling="mixed", batch_size=256, var_floor=VAR_FLOOR
) -> LayerGaussianStats:
    """Estimate per-class mean / floored diagonal variance of each pooled tap.

    Accumulates sums and squared sums in float64 over minibatches, then
    converts to population statistics per class.
    """
    kinds = pooling_kinds(net.num_taps, pooling)
    C = net.num_classes
    sums = cnts = None
    sqs = None
    labels = np.asarray(dataset.labels)
    for lo in range(0, len(labels), batch_size):
        xb = dataset.images[lo : lo + batch_size]
        yb = labels[lo : lo + batch_size]
        _, reps = net.forward_with_taps(xb)
        pooled = [spatial_pool(r, k).astype(np.float64) for r, k in zip(reps, kinds)]
        if sums is None:
            sums = [np.zeros((C, p.shape[1])) for p in pooled]
            sqs = [np.zeros((C, p.shape[1])) for p in pooled]
            cnts = np.zeros(C)
        onehot = np.zeros((len(yb), C))
        onehot[np.arange(len(yb)), yb] = 1.0
        cnts += onehot.sum(axis=0)
        for l, p in enumerate(pooled):
            sums[l] += onehot.T @ p
            sqs[l] += onehot.T @ (p * p)
    if sums is None or np.any(cnts == 0):
        empty = [c for c in range(C) if sums is None or cnts[c] == 0]
        raise ValueError(f"empty class(es) {empty} while fitting layer statistics")
    mus, logvars = [], []
    for l in range(len(kinds)):
        mu = sums[l] / cnts[:, None]
        var = np.maximum(sqs[l] / cnts[:, None] - mu * mu, var_floor)
        mus.append(mu)
        logvars.append(np.log(var))
    return LayerGaussianStats(kinds, mus, logvars, arch_tag=_arch_tag(net))


def _arch_tag(net: Network) -> str:
    import hashlib
    import json

    blob = json.dumps(net.descriptor(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _pooled_loglik(pooled, mu, logvar):
    """(N, C) diagonal-Gaussian log-likelihoods of pooled rows."""
    inv_var = np.exp(-logvar)
    diff = pooled[:, None, :] - mu[None, :, :]
    quad = (diff * diff * inv_var[None]).sum(axis=2)
    return -0.5 * pooled.shape[1] * LOG_2PI - 0.5 * logvar.sum(axis=1)[None, :] - 0.5 * quad


def layer_features(net: Network, stats: LayerGaussianStats, batch):
    """Feature matrix (N, L): best class log-likelihood per pooled tap."""
    if stats.num_taps != net.num_taps:
        raise ShapeError(
            f"stats carry {stats.num_taps} taps but network has {net.num_taps}"
        )
    if stats.arch_tag and stats.arch_tag != _arch_tag(net):
        raise ShapeError("layer statistics were fitted on a different architecture")
    _, reps = net.forward_with_taps(batch)
    return _features_from_reps(reps, stats)


def _features_from_reps(reps, stats: LayerGaussianStats):
    cols = []
    for rep, kind, mu, lv in zip(reps, stats.pool_kinds, stats.mus, stats.logvars):
        pooled = spatial_pool(rep, kind).astype(np.float64)
        if pooled.shape[1] != mu.shape[1]:
            raise ShapeError(
                f"pooled width {pooled.shape[1]} does not match statistics width {mu.shape[1]}"
            )
        cols.append(_pooled_loglik(pooled, mu, lv).max(axis=1))
    return np.stack(cols, axis=1)
