"""Gaussian final layer: likelihood scoring, statistical initialization, and
the fine-tuning objective.

The head's C outputs are per-class diagonal-covariance Gaussian
log-likelihoods of the penultimate representation. It is initialized from
per-class sample statistics of that representation and then fine-tuned with
softmax cross-entropy plus a likelihood-maximization regularizer:

    loss = CE(softmax(out), y) + lam * R_ML,   R_ML = -(1/m) sum_i out[i, y_i]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .nn.layers import GaussianHead, LOG_2PI
from .nn.network import Network
from .rng import Rng

VAR_FLOOR = 1e-6


def log_gaussian(x, mu, var_diag):
    """Diagonal-covariance Gaussian log-density of a single vector.

    Returns -d/2 log(2 pi) - 1/2 sum_j log var_j - 1/2 sum_j (x_j-mu_j)^2/var_j.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var_diag, dtype=np.float64)
    if x.shape != mu.shape or x.shape != var.shape:
        raise ShapeError("x, mu, var_diag must share one shape")
    if np.any(var <= 0):
        raise ValueError("variance entries must be positive")
    d = x.size
    return float(
        -0.5 * d * LOG_2PI - 0.5 * np.log(var).sum() - 0.5 * ((x - mu) ** 2 / var).sum()
    )


def class_stats(reps, labels, num_classes, var_floor=VAR_FLOOR):
    """Per-class mean and floored population-variance diagonal.

    Returns (means, variances) with shape (C, d) each. Every class needs at
    least two samples; an all-constant feature lands on the floor.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    mus = np.zeros((num_classes, reps.shape[1]))
    vars = np.zeros_like(mus)
    for c in range(num_classes):
        rows = reps[labels == c]
        if rows.shape[0] < 2:
            raise ValueError(f"class {c} has {rows.shape[0]} samples; need at least 2")
        mus[c] = rows.mean(axis=0)
        vars[c] = np.maximum(rows.var(axis=0), var_floor)
    return mus, vars


def init_head_from_data(reps, labels, num_classes, var_floor=VAR_FLOOR) -> GaussianHead:
    """Build a GaussianHead from penultimate representations of labeled data."""
    mus, vars = class_stats(reps, labels, num_classes, var_floor)
    head = GaussianHead(reps.shape[1], num_classes)
    head.mu.data = mus.astype(head.mu.data.dtype)
    head.logvar.data = np.log(vars).astype(head.logvar.data.dtype)
    return head


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def head_loss(head_out, labels, lam):
    """Mean cross-entropy of the softmaxed head outputs plus lam * R_ML."""
    loss, _ = head_loss_and_grad(head_out, labels, lam)
    return loss


def head_loss_and_grad(head_out, labels, lam):
    head_out = np.asarray(head_out, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = head_out.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    logp = _log_softmax(head_out)
    rows = np.arange(n)
    ce = -logp[rows, labels].mean()
    r_ml = -head_out[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    if lam:
        grad[rows, labels] -= lam / n
    return float(ce + lam * r_ml), grad


@dataclass
class HeadLossConfig:
    """Fine-tuning settings. ``lam=None`` selects from ``lambda_grid`` by
    final validation loss."""

    lam: float | None = None
    lambda_grid: tuple = (0.01, 0.1, 1.0)
    epochs: int = 15
    lr: float = 1e-4
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    batch_size: int = 64
    var_floor: float = VAR_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")


class RmsProp:
    """Elementwise RMSprop: cache = a*cache + (1-a)*g^2; p -= lr*g/(sqrt(cache)+eps)."""

    def __init__(self, params, lr, alpha=0.99, eps=1e-8):
        self.params = params
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.cache = [np.zeros_like(p.data) for _, p in params]

    def step(self):
        for (name, p), cache in zip(self.params, self.cache):
            cache *= self.alpha
            cache += (1 - self.alpha) * p.grad * p.grad
            p.data -= (self.lr * p.grad / (np.sqrt(cache) + self.eps)).astype(
                p.data.dtype
            )


def validation_loss(net: Network, dataset, lam, batch_size=256):
    total, n = 0.0, 0
    for lo in range(0, len(dataset.labels), batch_size):
        xb = dataset.images[lo : lo + batch_size]
        yb = dataset.labels[lo : lo + batch_size]
        out = net.forward(xb, train=False)
        total += head_loss(out, yb, lam) * len(yb)
        n += len(yb)
    return total / n


def _finetune_once(net, train_ds, val_ds, lam, cfg: HeadLossConfig):
    rng = Rng(cfg.seed).spawn(0xF17E)
    opt = RmsProp(net.trainable_params(), cfg.lr, cfg.rms_alpha, cfg.rms_eps)
    logvar_floor = math.log(cfg.var_floor)
    head: GaussianHead = net.head

    best_val = validation_loss(net, val_ds, lam)
    best_state = net.state_arrays()
    prev_val = best_val
    history = [best_val]

    n = len(train_ds.labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = train_ds.images[idx]
            yb = train_ds.labels[idx]
            net.zero_grads()
            loss = net.loss_and_param_grads(
                xb, lambda out: head_loss_and_grad(out, yb, lam)
            )
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch + 1} (lambda={lam})"
                )
            opt.step()
            np.maximum(head.logvar.data, logvar_floor, out=head.logvar.data)
        val = validation_loss(net, val_ds, lam)
        if not math.isfinite(val):
            raise DivergenceError(
                f"non-finite validation loss at epoch {epoch + 1} (lambda={lam})"
            )
        history.append(val)
        if val > prev_val:
            break
        prev_val = val
        if val < best_val:
            best_val = val
            best_state = net.state_arrays()
    net.load_state_arrays(best_state)
    return best_val, history


def finetune(net: Network, train_ds, val_ds, cfg: HeadLossConfig):
    """Fine-tune a network whose head is an initialized GaussianHead.

    Runs at most ``cfg.epochs`` epochs and stops at the first epoch whose
    validation loss exceeds the previous one; the returned network carries
    the best-validation parameters. When ``cfg.lam`` is None each value in
    ``cfg.lambda_grid`` is fine-tuned independently and the best final
    validation loss wins.

    Returns (net, info) where info records the chosen lambda and the
    per-epoch validation losses.
    """
    if not isinstance(net.head, GaussianHead):
        raise ValueError("finetune requires a Gaussian head (run init first)")
    candidates = [cfg.lam] if cfg.lam is not None else list(cfg.lambda_grid)
    best = None
    for lam in candidates:
        trial = net.clone()
        val, history = _finetune_once(trial, train_ds, val_ds, lam, cfg)
        if best is None or val < best[0]:
            best = (val, lam, trial, history)
    val, lam, trial_net, history = best
    info = {"lambda": lam, "val_loss": val, "val_history": history}
    return trial_net, info
