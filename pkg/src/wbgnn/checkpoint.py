"""Binary "WBNN" checkpoints for scheduler and precoder modules.

Layout (little-endian): magic, version, 4-byte variant tag, sub-network
count, module parameter (K' or N_RF), flags; per sub-network its layer
count and per-layer (in, out, matrices, hidden); then every weight matrix
as f64 in declaration order; then normalization mean/var of hidden layers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .precoder import PrecoderGNN
from .scheduler import Scheduler

MAGIC = b"WBNN"
VERSION = 1
_HEAD = struct.Struct("<4sI4sIII")
_LAYER = struct.Struct("<IIII")


class CheckpointError(IOError):
    pass


def _modules(obj):
    if isinstance(obj, Scheduler):
        return obj.variant.encode(), obj.nets, obj.k_sched, 0
    if isinstance(obj, PrecoderGNN):
        return b"prec", [obj], obj.n_rf, int(obj.attention)
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def to_bytes(obj) -> bytes:
    tag, nets, param, flags = _modules(obj)
    parts = [_HEAD.pack(MAGIC, VERSION, tag, len(nets), param, flags)]
    for net in nets:
        parts.append(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            parts.append(_LAYER.pack(layer.c_in, layer.c_out, len(layer.weights), int(layer.hidden)))
    for net in nets:
        for layer in net.layers:
            for w in layer.weights:
                parts.append(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
    for net in nets:
        for layer in net.layers:
            if layer.hidden:
                parts.append(np.ascontiguousarray(layer.norm.mean, dtype="<f8").tobytes())
                parts.append(np.ascontiguousarray(layer.norm.var, dtype="<f8").tobytes())
    return b"".join(parts)


def save(obj, path) -> None:
    Path(path).write_bytes(to_bytes(obj))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def unpack(self, st: struct.Struct):
        if self.pos + st.size > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = st.unpack_from(self.blob, self.pos)
        self.pos += st.size
        return out

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) * 8
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = np.frombuffer(self.blob, dtype="<f8", count=n // 8, offset=self.pos).astype(np.float64)
        self.pos += n
        return out.reshape(shape)


def from_bytes(blob: bytes):
    r = _Reader(blob)
    magic, version, tag, n_sub, param, flags = r.unpack(_HEAD)
    if magic != MAGIC:
        raise CheckpointError("not a WBNN checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    specs = []
    for _ in range(n_sub):
        (n_layers,) = r.unpack(struct.Struct("<I"))
        specs.append([r.unpack(_LAYER) for _ in range(n_layers)])
    widths = [[s[0][0]] + [layer[1] for layer in s] for s in specs]
    rng = np.random.default_rng(0)
    if tag == b"prec":
        obj = PrecoderGNN(widths[0], param, rng, attention=bool(flags))
        nets = [obj]
    elif tag in (b"ngnn", b"sgnn"):
        obj = Scheduler(tag.decode(), param, widths[0], rng)
        nets = obj.nets
        if len(nets) != n_sub:
            raise CheckpointError("sub-network count does not match variant")
    else:
        raise CheckpointError(f"unknown variant tag {tag!r}")
    for net, spec in zip(nets, specs):
        for layer, (c_in, c_out, n_mats, hidden) in zip(net.layers, spec):
            if (layer.c_in, layer.c_out, len(layer.weights), int(layer.hidden)) != (c_in, c_out, n_mats, hidden):
                raise CheckpointError("layer layout mismatch")
    for net in nets:
        for layer in net.layers:
            for w in layer.weights:
                w.data = r.floats(w.shape)
    for net in nets:
        for layer in net.layers:
            if layer.hidden:
                layer.norm.mean = r.floats((layer.c_out,))
                layer.norm.var = r.floats((layer.c_out,))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return obj


def load(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
