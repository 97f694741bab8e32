"""Binary checkpoint files.

Layout, all integers little-endian:

    8 bytes   magic "FOODCKPT"
    u32       version (currently 1)
    u32       tensor count
    per tensor:
        u16   name length, then name bytes (utf-8)
        u8    dtype code (0 = float32, 1 = float64)
        u8    rank
        u32   dims, one per axis
        raw   little-endian payload, row-major
    JSON metadata blob (utf-8) until end of file

Tensors are written in sorted name order so identical contents produce
identical bytes. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import CheckpointError
from .layers import GaussianHead, layer_from_descriptor
from .network import Network

MAGIC = b"FOODCKPT"
VERSION = 1

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_file(path, tensors: dict, metadata: dict):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        f.write(json.dumps(metadata, sort_keys=True).encode("utf-8"))


def read_file(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:8]!r}")
    off = 8
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = {}
    name = "<header>"
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            dt = _CODE_DTYPES.get(code)
            if dt is None:
                raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
            nbytes = int(np.prod(dims)) * dt.itemsize if rank else dt.itemsize
            payload = raw[off : off + nbytes]
            if len(payload) < nbytes:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint while reading tensor {name!r}") from exc
    meta_blob = raw[off:]
    try:
        metadata = json.loads(meta_blob.decode("utf-8")) if meta_blob else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata blob in {path}") from exc
    return tensors, metadata


def net_to_tensors(net: Network) -> dict:
    """Flatten network parameters to named tensors.

    The Gaussian head expands to one tensor per class: ``head.mu.{c}`` and
    ``head.logvar.{c}``.
    """
    tensors = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, GaussianHead):
            for c in range(layer.num_classes):
                tensors[f"head.mu.{c}"] = layer.mu.data[c]
                tensors[f"head.logvar.{c}"] = layer.logvar.data[c]
        else:
            for local, p in layer.param_items():
                tensors[f"layers.{i}.{local}"] = p.data
    return tensors


def net_from_tensors(desc: dict, tensors: dict) -> Network:
    layers = [layer_from_descriptor(d) for d in desc["layers"]]
    net = Network(layers, desc["taps"], desc["num_classes"], desc["input_shape"])
    for i, layer in enumerate(net.layers):
        if isinstance(layer, GaussianHead):
            for c in range(layer.num_classes):
                for attr, tag in ((layer.mu, "mu"), (layer.logvar, "logvar")):
                    key = f"head.{tag}.{c}"
                    if key not in tensors:
                        raise CheckpointError(f"checkpoint is missing tensor {key!r}")
                    attr.data[c] = tensors[key].astype(attr.data.dtype)
        else:
            for local, p in layer.param_items():
                key = f"layers.{i}.{local}"
                if key not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor {key!r}")
                arr = tensors[key]
                if arr.shape != p.data.shape:
                    raise CheckpointError(
                        f"tensor {key!r} has shape {list(arr.shape)}, expected {list(p.data.shape)}"
                    )
                p.data = arr.astype(p.data.dtype)
                p.grad = np.zeros_like(p.data)
    return net


def save_checkpoint(net: Network, path, extra_tensors=None, metadata=None):
    tensors = net_to_tensors(net)
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {"arch": net.descriptor()}
    if metadata:
        meta.update(metadata)
    write_file(path, tensors, meta)


def load_checkpoint(path) -> Network:
    tensors, meta = read_file(path)
    if "arch" not in meta:
        raise CheckpointError(f"checkpoint {path} has no architecture descriptor")
    return net_from_tensors(meta["arch"], tensors)
