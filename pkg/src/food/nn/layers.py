"""Layer set for the small CPU network engine.

Every layer implements the same three-call contract:

    out = layer.forward(x, train=..., ctx=...)   # ctx: dict to fill, or None
    grad_in = layer.backward(ctx, grad_out, accum=...)
    layer.param_items() -> [(local_name, Param), ...]

Forward never mutates layer state except batch-norm running statistics in
train mode, so inference on a shared network is thread-safe. All per-call
intermediates live in the caller-supplied ctx dict. ``backward`` with
``accum=True`` adds parameter gradients into ``Param.grad``; with
``accum=False`` it only propagates the input gradient (used for
input-space gradients during sample crafting).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError

LOG_2PI = math.log(2.0 * math.pi)


class Param:
    """A named parameter array with its gradient accumulator."""

    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def set_dtype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


class Layer:
    kind = "?"

    def forward(self, x, train=False, ctx=None):
        raise NotImplementedError

    def backward(self, ctx, grad_out, accum=True):
        raise NotImplementedError

    def param_items(self):
        return []

    def descriptor(self):
        return {"kind": self.kind}

    def set_dtype(self, dtype):
        for _, p in self.param_items():
            p.set_dtype(dtype)

    def zero_grads(self):
        for _, p in self.param_items():
            p.grad[...] = 0.0


class Normalize(Layer):
    """Fixed per-channel (x - mean) / std as the first layer, so the raw
    input domain stays [0, 1] for crafting-time clipping."""

    kind = "normalize"

    def __init__(self, mean, std):
        self.mean = Param(np.asarray(mean, dtype=np.float32), trainable=False)
        self.std = Param(np.asarray(std, dtype=np.float32), trainable=False)
        if np.any(self.std.data <= 0):
            raise ValueError("normalize std must be positive")

    def forward(self, x, train=False, ctx=None):
        m = self.mean.data.reshape(1, -1, 1, 1)
        s = self.std.data.reshape(1, -1, 1, 1)
        return (x - m) / s

    def backward(self, ctx, grad_out, accum=True):
        return grad_out / self.std.data.reshape(1, -1, 1, 1)

    def param_items(self):
        return [("mean", self.mean), ("std", self.std)]

    def descriptor(self):
        return {"kind": self.kind, "channels": int(self.mean.data.shape[0])}


class Conv2d(Layer):
    """2-D convolution (cross-correlation), square kernel, zero padding.

    Forward and both backward passes are written as k*k loops over kernel
    offsets, each a single BLAS contraction, so no im2col buffer is kept.
    """

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, ksize=3, stride=1, pad=1):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.pad = ksize, stride, pad
        self.w = Param(np.zeros((out_ch, in_ch, ksize, ksize), dtype=np.float32))
        self.b = Param(np.zeros(out_ch, dtype=np.float32))

    def init_params(self, rng):
        # He-normal fan-in init
        fan_in = self.in_ch * self.ksize * self.ksize
        scale = math.sqrt(2.0 / fan_in)
        self.w.data = rng.normal(self.w.data.shape, std=scale).astype(self.w.data.dtype)
        self.b.data[...] = 0.0

    def _out_hw(self, h, w):
        k, s, p = self.ksize, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv2d expects [N,{self.in_ch},H,W], got {list(x.shape)}"
            )
        k, s, p = self.ksize, self.stride, self.pad
        n, _, h, w = x.shape
        oh, ow = self._out_hw(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        acc = np.zeros((n, oh, ow, self.out_ch), dtype=x.dtype)
        wd = self.w.data
        for ki in range(k):
            for kj in range(k):
                xs = xp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
                acc += np.tensordot(xs, wd[:, :, ki, kj], axes=([1], [1]))
        out = acc.transpose(0, 3, 1, 2) + self.b.data.reshape(1, -1, 1, 1)
        if ctx is not None:
            ctx["xp"] = xp
            ctx["in_hw"] = (h, w)
        return np.ascontiguousarray(out)

    def backward(self, ctx, grad_out, accum=True):
        k, s, p = self.ksize, self.stride, self.pad
        xp = ctx["xp"]
        h, w = ctx["in_hw"]
        n, _, oh, ow = grad_out.shape
        wd = self.w.data
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                # (N,OH,OW,C) contribution of this kernel offset
                t = np.tensordot(grad_out, wd[:, :, ki, kj], axes=([1], [0]))
                dxp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += t.transpose(
                    0, 3, 1, 2
                )
                if accum:
                    xs = xp[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
                    self.w.grad[:, :, ki, kj] += np.tensordot(
                        grad_out, xs, axes=([0, 2, 3], [0, 2, 3])
                    )
        if accum:
            self.b.grad += grad_out.sum(axis=(0, 2, 3))
        return dxp[:, :, p : p + h, p : p + w] if p else dxp

    def param_items(self):
        return [("w", self.w), ("b", self.b)]

    def descriptor(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "ksize": self.ksize,
            "stride": self.stride,
            "pad": self.pad,
        }


class BatchNorm(Layer):
    """Batch normalization over (N, H, W) per channel (or (N,) for 2-D input).

    Train mode normalizes with batch statistics (population variance) and
    updates running statistics; eval mode uses the stored running values.
    """

    kind = "batchnorm"

    def __init__(self, ch, momentum=0.1, eps=1e-5):
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(ch, dtype=np.float32))
        self.beta = Param(np.zeros(ch, dtype=np.float32))
        self.running_mean = Param(np.zeros(ch, dtype=np.float32), trainable=False)
        self.running_var = Param(np.ones(ch, dtype=np.float32), trainable=False)

    @staticmethod
    def _bshape(x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def forward(self, x, train=False, ctx=None):
        if x.shape[1] != self.ch:
            raise ShapeError(f"batchnorm expects {self.ch} channels, got {x.shape[1]}")
        bs = self._bshape(x)
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data + m * mu).astype(
                self.running_mean.data.dtype
            )
            self.running_var.data = ((1 - m) * self.running_var.data + m * var).astype(
                self.running_var.data.dtype
            )
        else:
            mu = self.running_mean.data
            var = self.running_var.data
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bs)) * inv_std.reshape(bs)
        out = self.gamma.data.reshape(bs) * xhat + self.beta.data.reshape(bs)
        if ctx is not None:
            ctx.update(train=train, xhat=xhat, inv_std=inv_std, axes=axes, bs=bs)
            if train:
                ctx["xc"] = x - mu.reshape(bs)
        return out.astype(x.dtype)

    def backward(self, ctx, grad_out, accum=True):
        bs, axes = ctx["bs"], ctx["axes"]
        inv_std = ctx["inv_std"].reshape(bs)
        if accum:
            self.gamma.grad += (grad_out * ctx["xhat"]).sum(axis=axes)
            self.beta.grad += grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.data.reshape(bs)
        if not ctx["train"]:
            return dxhat * inv_std
        xc = ctx["xc"]
        m = float(np.prod([grad_out.shape[a] for a in axes]))
        dvar = (dxhat * xc).sum(axis=axes, keepdims=True) * (-0.5) * inv_std**3
        dmu = -(dxhat * inv_std).sum(axis=axes, keepdims=True) - dvar * 2.0 * xc.mean(
            axis=axes, keepdims=True
        )
        return dxhat * inv_std + dvar * 2.0 * xc / m + dmu / m

    def param_items(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def descriptor(self):
        return {"kind": self.kind, "ch": self.ch, "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, ctx=None):
        if ctx is not None:
            ctx["mask"] = x > 0
        return np.maximum(x, 0)

    def backward(self, ctx, grad_out, accum=True):
        return grad_out * ctx["mask"]


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = Param(np.zeros((in_dim, out_dim), dtype=np.float32))
        self.b = Param(np.zeros(out_dim, dtype=np.float32))

    def init_params(self, rng):
        scale = math.sqrt(2.0 / self.in_dim)
        self.w.data = rng.normal(self.w.data.shape, std=scale).astype(self.w.data.dtype)
        self.b.data[...] = 0.0

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects [N,{self.in_dim}], got {list(x.shape)}")
        if ctx is not None:
            ctx["x"] = x
        return x @ self.w.data + self.b.data

    def backward(self, ctx, grad_out, accum=True):
        if accum:
            self.w.grad += ctx["x"].T @ grad_out
            self.b.grad += grad_out.sum(axis=0)
        return grad_out @ self.w.data.T

    def param_items(self):
        return [("w", self.w), ("b", self.b)]

    def descriptor(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 4:
            raise ShapeError(f"gap expects 4-D input, got {list(x.shape)}")
        if ctx is not None:
            ctx["hw"] = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, ctx, grad_out, accum=True):
        h, w = ctx["hw"]
        scale = 1.0 / (h * w)
        return np.broadcast_to(
            grad_out[:, :, None, None] * scale, grad_out.shape + (h, w)
        ).astype(grad_out.dtype)


class Residual(Layer):
    """Two 3x3 conv+BN stages with a (projected) identity shortcut and final
    ReLU; the first conv carries the stride."""

    kind = "residual"

    def __init__(self, in_ch, out_ch, stride=1):
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1)
        self.bn2 = BatchNorm(out_ch)
        self.project = stride != 1 or in_ch != out_ch
        if self.project:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0)
            self.projbn = BatchNorm(out_ch)

    def _subs(self):
        subs = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.project:
            subs += [("proj", self.proj), ("projbn", self.projbn)]
        return subs

    def init_params(self, rng):
        self.conv1.init_params(rng)
        self.conv2.init_params(rng)
        if self.project:
            self.proj.init_params(rng)

    def forward(self, x, train=False, ctx=None):
        sub = {name: {} for name, _ in self._subs()} if ctx is not None else None

        def c(name):
            return sub[name] if sub is not None else None

        a = self.bn1.forward(self.conv1.forward(x, train, c("conv1")), train, c("bn1"))
        relu_mask = a > 0
        h = self.bn2.forward(
            self.conv2.forward(np.maximum(a, 0), train, c("conv2")), train, c("bn2")
        )
        if self.project:
            idn = self.projbn.forward(self.proj.forward(x, train, c("proj")), train, c("projbn"))
        else:
            idn = x
        pre = h + idn
        if ctx is not None:
            ctx["sub"] = sub
            ctx["relu_mask"] = relu_mask
            ctx["out_mask"] = pre > 0
        return np.maximum(pre, 0)

    def backward(self, ctx, grad_out, accum=True):
        sub = ctx["sub"]
        g = grad_out * ctx["out_mask"]
        gb = self.conv2.backward(
            sub["conv2"], self.bn2.backward(sub["bn2"], g, accum), accum
        )
        gb *= ctx["relu_mask"]
        gx = self.conv1.backward(
            sub["conv1"], self.bn1.backward(sub["bn1"], gb, accum), accum
        )
        if self.project:
            gx = gx + self.proj.backward(
                sub["proj"], self.projbn.backward(sub["projbn"], g, accum), accum
            )
        else:
            gx = gx + g
        return gx

    def param_items(self):
        items = []
        for name, sub in self._subs():
            items.extend((f"{name}.{local}", p) for local, p in sub.param_items())
        return items

    def descriptor(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "stride": self.stride,
        }


class GaussianHead(Layer):
    """Final layer scoring each class as a diagonal-covariance Gaussian
    log-likelihood of its input vector.

    Output row: out[c] = -d/2 log(2 pi) - 1/2 sum_j logvar[c,j]
                          - 1/2 sum_j (x_j - mu[c,j])^2 / exp(logvar[c,j]).

    The covariance is parameterized through its elementwise log so it stays
    positive under gradient updates.
    """

    kind = "gaussian_head"

    def __init__(self, in_dim, num_classes):
        self.in_dim, self.num_classes = in_dim, num_classes
        self.mu = Param(np.zeros((num_classes, in_dim), dtype=np.float32))
        self.logvar = Param(np.zeros((num_classes, in_dim), dtype=np.float32))

    def forward(self, x, train=False, ctx=None):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"gaussian head expects [N,{self.in_dim}], got {list(x.shape)}"
            )
        inv_var = np.exp(-self.logvar.data)
        diff = x[:, None, :] - self.mu.data[None, :, :]
        quad = (diff * diff * inv_var[None, :, :]).sum(axis=2)
        out = (
            -0.5 * self.in_dim * LOG_2PI
            - 0.5 * self.logvar.data.sum(axis=1)[None, :]
            - 0.5 * quad
        )
        if ctx is not None:
            ctx["diff"] = diff
            ctx["inv_var"] = inv_var
        return out.astype(x.dtype)

    def backward(self, ctx, grad_out, accum=True):
        diff, inv_var = ctx["diff"], ctx["inv_var"]
        scaled = diff * inv_var[None, :, :]  # (N,C,d)
        dx = -np.einsum("nc,ncd->nd", grad_out, scaled)
        if accum:
            self.mu.grad += np.einsum("nc,ncd->cd", grad_out, scaled)
            self.logvar.grad += np.einsum(
                "nc,ncd->cd", grad_out, 0.5 * (diff * scaled - 1.0)
            )
        return dx.astype(grad_out.dtype)

    def param_items(self):
        return [("mu", self.mu), ("logvar", self.logvar)]

    def descriptor(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "num_classes": self.num_classes}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Normalize, Conv2d, BatchNorm, ReLU, Dense, GlobalAvgPool, Residual, GaussianHead)
}


def layer_from_descriptor(desc: dict) -> Layer:
    kind = desc.get("kind")
    if kind == "normalize":
        ch = desc["channels"]
        return Normalize(np.zeros(ch, dtype=np.float32), np.ones(ch, dtype=np.float32))
    if kind == "conv2d":
        return Conv2d(desc["in_ch"], desc["out_ch"], desc["ksize"], desc["stride"], desc["pad"])
    if kind == "batchnorm":
        return BatchNorm(desc["ch"], desc.get("momentum", 0.1), desc.get("eps", 1e-5))
    if kind == "relu":
        return ReLU()
    if kind == "dense":
        return Dense(desc["in_dim"], desc["out_dim"])
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "residual":
        return Residual(desc["in_ch"], desc["out_ch"], desc["stride"])
    if kind == "gaussian_head":
        return GaussianHead(desc["in_dim"], desc["num_classes"])
    raise ValueError(f"unknown layer kind {kind!r}")
