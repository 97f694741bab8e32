"""Artificial out-of-distribution sample crafting.

Samples from a held-out in-distribution split are pushed down the LLR
surface by iterated gradient descent with elementwise clipping to the valid
input range:

    x_art <- clip(x_art - epsilon * d LLR / d x)      (repeat)

Each sample takes at least one step; iteration stops once its LLR falls to
the threshold or the iteration cap is hit. The threshold is the lower-tail
nearest-rank percentile of the in-distribution LLR values (default: the
value with at most 5% of in-distribution LLRs below it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError
from .nn.network import Network
from .scoring import llr_batch, llr_score


def compute_thres(llr_values, percentile=95.0, tail="lower"):
    """Nearest-rank LLR threshold from in-distribution values.

    ``tail="lower"`` (the default) keeps ``percentile`` percent of the
    values above the threshold: sort ascending and take the 1-based element
    ceil((100 - percentile)/100 * n). ``tail="upper"`` instead returns the
    plain nearest-rank ``percentile`` quantile (the alternative reading;
    not recommended).
    """
    vals = np.sort(np.asarray(llr_values, dtype=np.float64))
    n = vals.size
    if n < 20:
        raise ValueError(f"need at least 20 LLR values to set a threshold, got {n}")
    if not 0.0 < percentile < 100.0:
        raise ValueError("percentile must be in (0, 100)")
    if tail not in ("lower", "upper"):
        raise ValueError(f"unknown tail {tail!r}")
    frac = (100.0 - percentile) if tail == "lower" else percentile
    k = max(1, math.ceil(frac * n / 100.0 - 1e-9))
    return float(vals[k - 1])


@dataclass
class CraftConfig:
    epsilon: float = 0.01
    max_iter: int = 10
    thres: float = 0.0
    clip_lo: float = 0.0
    clip_hi: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.clip_lo >= self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


@dataclass
class CraftReport:
    """Per-sample crafting trace."""

    iterations: np.ndarray  # steps actually taken, <= max_iter
    initial_llr: np.ndarray
    final_llr: np.ndarray
    reached_thres: np.ndarray  # bool: final LLR <= thres
    thres: float
    failed: list = field(default_factory=list)  # indices stopped by non-finite gradients

    def summary(self):
        n = self.iterations.size
        ok = self.reached_thres
        return {
            "samples": int(n),
            "reached_thres": int(ok.sum()),
            "reached_fraction": float(ok.mean()) if n else 0.0,
            "mean_iterations": float(self.iterations.mean()) if n else 0.0,
            "mean_initial_llr": float(self.initial_llr.mean()) if n else 0.0,
            "mean_final_llr": float(self.final_llr.mean()) if n else 0.0,
            "thres": self.thres,
            "failed": list(self.failed),
        }


def _gradients(net, xs, score, raise_on_nonfinite):
    """LLR input gradients with optional per-sample error containment.

    Returns (grads, bad_row_indices); bad rows carry zero gradients.
    """
    try:
        return net.input_gradient(xs, score), np.zeros(0, dtype=np.int64)
    except NonFiniteError:
        if raise_on_nonfinite:
            raise
    grads = np.zeros_like(xs)
    bad = []
    for j in range(xs.shape[0]):
        try:
            grads[j] = net.input_gradient(xs[j : j + 1], score)[0]
        except NonFiniteError:
            bad.append(j)
    return grads, np.asarray(bad, dtype=np.int64)


def _craft_masked(net, batch, cfg, raise_on_nonfinite):
    score = llr_score()
    x_art = np.clip(np.asarray(batch, dtype=net.dtype), cfg.clip_lo, cfg.clip_hi)
    n = x_art.shape[0]
    initial = llr_batch(net.forward(x_art)) if n else np.zeros(0)
    final = initial.copy()
    iterations = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    failed = []
    for _ in range(cfg.max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        grad, bad = _gradients(net, x_art[idx], score, raise_on_nonfinite)
        if bad.size:
            failed.extend(int(i) for i in idx[bad])
            active[idx[bad]] = False
            good = np.setdiff1d(np.arange(idx.size), bad)
            idx, grad = idx[good], grad[good]
            if idx.size == 0:
                continue
        x_art[idx] = np.clip(
            x_art[idx] - cfg.epsilon * grad.astype(x_art.dtype), cfg.clip_lo, cfg.clip_hi
        )
        iterations[idx] += 1
        cur = llr_batch(net.forward(x_art[idx]))
        final[idx] = cur
        active[idx[cur <= cfg.thres]] = False
    report = CraftReport(
        iterations=iterations,
        initial_llr=initial,
        final_llr=final,
        reached_thres=final <= cfg.thres,
        thres=cfg.thres,
        failed=sorted(failed),
    )
    return x_art, report


def craft(net: Network, x, cfg: CraftConfig):
    """Craft artificial OOD samples from one sample or a batch.

    Samples are stepped independently; the batch form is an exact
    vectorization of the single-sample loop. Raises on non-finite
    gradients; use ``craft_batch`` for error containment over a dataset.
    """
    x = np.asarray(x)
    single = x.ndim == len(net.input_shape)
    batch = x[None] if single else x
    x_art, report = _craft_masked(net, batch, cfg, raise_on_nonfinite=True)
    return (x_art[0], report) if single else (x_art, report)


def craft_batch(net: Network, dataset, cfg: CraftConfig):
    """Craft a whole dataset. Samples whose gradient turns non-finite are
    frozen at their last valid state and listed in ``report.failed``; the
    rest of the batch continues. Returns (crafted_images, report)."""
    x_art, report = _craft_masked(net, dataset.images, cfg, raise_on_nonfinite=False)
    return x_art, report
