"""Decoder weights: per-level encoders, SDF head and mask head.

Layout (row-vector convention, ``y = x @ W + b``)::

    enc{s}.w1 (D+3, H)  enc{s}.b1 (H,)      for s in 0..S-1
    enc{s}.w2 (H, H)    enc{s}.b2 (H,)
    enc{s}.w3 (H, H)    enc{s}.b3 (H,)
    sdf.w1    (H, H)    sdf.b1    (H,)
    sdf.w2    (H, 1)    sdf.b2    (1,)
    mask.w1   (H, H)    mask.b1   (H,)
    mask.w2   (H, 1)    mask.b2   (1,)

Each encoder is a two-layer residual MLP ``h1 = act(x W1 + b1)``,
``h2 = h1 + act(h1 W2 + b2)``, ``out = h2 W3 + b3``; the encoder output width
equals the hidden width ``H``. ``act`` is softplus.

Binary format (little-endian)::

    b"NKSF" | u32 version | u32 S | u32 D | u32 H | f64 sdf_scale
    then every array above, float64, row-major, in the order listed
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ParseError, UnsupportedFormat

MAGIC = b"NKSF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_grad(z):
    # derivative of softplus is the logistic function
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def layout(S, D, H):
    shapes = []
    for s in range(S):
        shapes += [
            (f"enc{s}.w1", (D + 3, H)),
            (f"enc{s}.b1", (H,)),
            (f"enc{s}.w2", (H, H)),
            (f"enc{s}.b2", (H,)),
            (f"enc{s}.w3", (H, H)),
            (f"enc{s}.b3", (H,)),
        ]
    for head in ("sdf", "mask"):
        shapes += [
            (f"{head}.w1", (H, H)),
            (f"{head}.b1", (H,)),
            (f"{head}.w2", (H, 1)),
            (f"{head}.b2", (1,)),
        ]
    return shapes


@dataclass
class DecoderParams:
    S: int
    D: int
    hidden: int
    arrays: dict
    sdf_scale: float = 0.5

    def __post_init__(self):
        for name, shape in layout(self.S, self.D, self.hidden):
            arr = self.arrays.get(name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise ValueError(f"{name}: expected shape {shape}, got {got}")

    @classmethod
    def init(cls, S, D, hidden=32, seed=0, sdf_scale=0.5, out_gain=0.2):
        # head output layers start small: a full-scale start makes the field
        # steep and saturated, and training then flattens it instead of fitting
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in layout(S, D, hidden):
            if len(shape) == 1:
                arrays[name] = np.zeros(shape)
            else:
                std = 1.0 / np.sqrt(shape[0])
                if name.endswith(".w2") and not name.startswith("enc"):
                    std *= out_gain
                arrays[name] = rng.normal(0.0, std, size=shape)
        return cls(S, D, hidden, arrays, sdf_scale)

    @property
    def names(self):
        return [n for n, _ in layout(self.S, self.D, self.hidden)]

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return DecoderParams(self.S, self.D, self.hidden, {k: v.copy() for k, v in self.arrays.items()}, self.sdf_scale)

    def flat(self):
        return np.concatenate([self.arrays[n].ravel() for n in self.names])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        arrays, at = {}, 0
        for name, shape in layout(self.S, self.D, self.hidden):
            size = int(np.prod(shape))
            arrays[name] = vec[at : at + size].reshape(shape).copy()
            at += size
        if at != vec.size:
            raise ValueError("flat vector length does not match the layout")
        return DecoderParams(self.S, self.D, self.hidden, arrays, self.sdf_scale)

    def encoder(self, s):
        return Encoder(self, s)

    # -- serialization -------------------------------------------------

    def to_bytes(self):
        head = _HEADER.pack(MAGIC, VERSION, self.S, self.D, self.hidden, self.sdf_scale)
        body = b"".join(np.ascontiguousarray(self.arrays[n], dtype="<f8").tobytes() for n in self.names)
        return head + body

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size:
            raise ParseError("decoder file shorter than its header")
        magic, version, S, D, H, scale = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise UnsupportedFormat(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise UnsupportedFormat(f"unsupported decoder version {version}")
        at = _HEADER.size
        arrays = {}
        for name, shape in layout(S, D, H):
            count = int(np.prod(shape))
            end = at + 8 * count
            if end > len(data):
                raise ParseError(f"truncated decoder file while reading {name}")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=at).reshape(shape).astype(np.float64)
            at = end
        if at != len(data):
            raise ParseError(f"{len(data) - at} trailing bytes after decoder weights")
        return cls(S, D, H, arrays, scale)

    def save(self, path):
        from ..io import atomic_write

        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_text(self):
        doc = {
            "format": "NKSF",
            "version": VERSION,
            "S": self.S,
            "D": self.D,
            "hidden": self.hidden,
            "sdf_scale": self.sdf_scale,
            "arrays": {n: {"shape": list(self.arrays[n].shape), "values": self.arrays[n].ravel().tolist()} for n in self.names},
        }
        return json.dumps(doc, indent=1)


class Encoder:
    """View of one level's encoder inside a :class:`DecoderParams`."""

    def __init__(self, params: DecoderParams, s):
        a = params.arrays
        self.level = s
        self.w1, self.b1 = a[f"enc{s}.w1"], a[f"enc{s}.b1"]
        self.w2, self.b2 = a[f"enc{s}.w2"], a[f"enc{s}.b2"]
        self.w3, self.b3 = a[f"enc{s}.w3"], a[f"enc{s}.b3"]

    def forward(self, x):
        z1 = x @ self.w1 + self.b1
        h1 = softplus(z1)
        z2 = h1 @ self.w2 + self.b2
        h2 = h1 + softplus(z2)
        out = h2 @ self.w3 + self.b3
        return out, (x, z1, h1, z2, h2)

    def __call__(self, x):
        return self.forward(np.asarray(x, dtype=np.float64))[0]

    def backward(self, cache, dout, grads):
        x, z1, h1, z2, h2 = cache
        s = self.level
        grads[f"enc{s}.w3"] += h2.T @ dout
        grads[f"enc{s}.b3"] += dout.sum(axis=0)
        dh2 = dout @ self.w3.T
        dz2 = dh2 * softplus_grad(z2)
        grads[f"enc{s}.w2"] += h1.T @ dz2
        grads[f"enc{s}.b2"] += dz2.sum(axis=0)
        dh1 = dh2 + dz2 @ self.w2.T
        dz1 = dh1 * softplus_grad(z1)
        grads[f"enc{s}.w1"] += x.T @ dz1
        grads[f"enc{s}.b1"] += dz1.sum(axis=0)


def head_forward(params: DecoderParams, name, feat):
    a = params.arrays
    z = feat @ a[f"{name}.w1"] + a[f"{name}.b1"]
    h = softplus(z)
    u = (h @ a[f"{name}.w2"] + a[f"{name}.b2"])[:, 0]
    return u, (feat, z, h)


def head_backward(params: DecoderParams, name, cache, du, grads):
    """Backprop ``du`` (d loss / d head output, shape (M,)); returns d feat."""
    a = params.arrays
    feat, z, h = cache
    du = du[:, None]
    grads[f"{name}.w2"] += h.T @ du
    grads[f"{name}.b2"] += du.sum(axis=0)
    dz = (du @ a[f"{name}.w2"].T) * softplus_grad(z)
    grads[f"{name}.w1"] += feat.T @ dz
    grads[f"{name}.b1"] += dz.sum(axis=0)
    return dz @ a[f"{name}.w1"].T


def zero_grads(params: DecoderParams):
    return {n: np.zeros_like(v) for n, v in params.arrays.items()}
