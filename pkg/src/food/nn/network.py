"""Network: an ordered layer stack with named representation taps.

A tap is a (name, layer_index) pair; the output of that layer is exported
as an internal representation during ``forward_with_taps``. Taps may not
point at the penultimate layer (the head's input) or the head itself.
"""

from __future__ import annotations

import copy
import os

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .layers import Layer

DEBUG_ENV = "FOOD_DEBUG"


class HeadScore:
    """A scalar-per-sample functional of the head outputs.

    ``value(head_out)`` returns shape (N,), ``grad(head_out)`` the per-sample
    derivative with shape (N, C). Used as the target of input-space
    gradients.
    """

    def __init__(self, value_fn, grad_fn, name="score"):
        self._value, self._grad = value_fn, grad_fn
        self.name = name

    def value(self, head_out):
        return self._value(head_out)

    def grad(self, head_out):
        return self._grad(head_out)


class Network:
    def __init__(self, layers, taps, num_classes, input_shape, debug=None):
        self.layers = list(layers)
        self.taps = [(str(n), int(i)) for n, i in taps]
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.dtype = np.float32
        self.debug = bool(int(os.environ.get(DEBUG_ENV, "0"))) if debug is None else debug
        for _, idx in self.taps:
            if idx >= len(self.layers) - 2:
                raise ValueError(
                    "taps must exclude the penultimate layer and the head"
                )

    # ---- structure -------------------------------------------------------

    @property
    def num_taps(self):
        return len(self.taps)

    @property
    def head(self) -> Layer:
        return self.layers[-1]

    def replace_head(self, new_head: Layer):
        new_head.set_dtype(self.dtype)
        self.layers[-1] = new_head

    def descriptor(self):
        return {
            "layers": [l.descriptor() for l in self.layers],
            "taps": [[n, i] for n, i in self.taps],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    def params(self):
        """All parameters as (qualified_name, Param) pairs."""
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{local}", p) for local, p in layer.param_items())
        return out

    def trainable_params(self):
        return [(n, p) for n, p in self.params() if p.trainable]

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def set_dtype(self, dtype):
        self.dtype = np.dtype(dtype).type
        for layer in self.layers:
            layer.set_dtype(dtype)
        return self

    def clone(self):
        return copy.deepcopy(self)

    def state_arrays(self):
        """Snapshot of all parameter arrays (copies), for best-epoch restore."""
        return {name: p.data.copy() for name, p in self.params()}

    def load_state_arrays(self, state):
        for name, p in self.params():
            p.data[...] = state[name]

    # ---- execution -------------------------------------------------------

    def _check_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {list(x.shape)} does not match input shape "
                f"[N, {', '.join(map(str, self.input_shape))}]"
            )
        return x

    def _run(self, x, train, ctxs=None, collect_taps=False, upto=None):
        tap_idx = {i: n for n, i in self.taps}
        reps = [] if collect_taps else None
        end = len(self.layers) if upto is None else upto
        for i in range(end):
            layer = self.layers[i]
            ctx = None
            if ctxs is not None:
                ctx = {}
                ctxs.append(ctx)
            x = layer.forward(x, train=train, ctx=ctx)
            if self.debug and not np.all(np.isfinite(x)):
                raise NonFiniteError(
                    f"non-finite activation after layer {i} ({layer.kind})"
                )
            if collect_taps and i in tap_idx:
                reps.append(x)
        return x, reps

    def forward(self, batch, train=False):
        """Head outputs [N, C] for a batch [N, *input_shape]."""
        x = self._check_batch(batch)
        out, _ = self._run(x, train)
        return out

    def forward_with_taps(self, batch, train=False):
        """Head outputs plus the tap representations, in tap order."""
        x = self._check_batch(batch)
        out, reps = self._run(x, train, collect_taps=True)
        return out, reps

    def penultimate(self, batch, train=False):
        """Input of the head layer (the penultimate representation)."""
        x = self._check_batch(batch)
        out, _ = self._run(x, train, upto=len(self.layers) - 1)
        return out

    def input_gradient(self, batch, score: HeadScore):
        """d score / d input, evaluated per sample; same shape as the batch.

        Runs in inference mode and does not touch parameter gradients.
        """
        x = self._check_batch(batch)
        ctxs = []
        head_out, _ = self._run(x, False, ctxs=ctxs)
        g = np.asarray(score.grad(head_out), dtype=head_out.dtype)
        if g.shape != head_out.shape:
            raise ShapeError(
                f"score gradient shape {list(g.shape)} != head output shape "
                f"{list(head_out.shape)}"
            )
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(ctxs[i], g, accum=False)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite input gradient")
        return g

    def loss_and_param_grads(self, batch, loss_fn, train=True):
        """Accumulate d loss / d params for a scalar loss over the batch.

        ``loss_fn(head_out)`` must return ``(loss, dloss_dhead)``. Gradients
        are added into each Param's ``grad``; call ``zero_grads`` first when
        a fresh gradient is wanted.
        """
        x = self._check_batch(batch)
        ctxs = []
        head_out, _ = self._run(x, train, ctxs=ctxs)
        loss, g = loss_fn(head_out)
        g = np.asarray(g, dtype=head_out.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(ctxs[i], g, accum=True)
        return float(loss)


def backward_params(net: Network, batch, loss_fn):
    """Gradients of a scalar loss with respect to every trainable parameter.

    Returns {qualified_name: gradient array} for a single fresh backward
    pass (train-mode statistics, matching the training path).
    """
    net.zero_grads()
    net.loss_and_param_grads(batch, loss_fn, train=True)
    return {name: p.grad.copy() for name, p in net.trainable_params()}
