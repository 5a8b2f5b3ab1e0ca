"""FSRW weights files.

Layout (all integers little-endian u32, all reals little-endian float64)::

    b"FSRW" | version | layer count
    per layer:   tag length | ASCII kind tag | array count
    per array:   ndim | dims... | raw data (C order)

Only layers that own parameters are written, in network traversal order.
"""

from __future__ import annotations

import struct

import numpy as np

from .layers import Network

MAGIC = b"FSRW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def dumps_weights(net: Network) -> bytes:
    leaves = [leaf for leaf in net.leaves() if leaf.params]
    out = [MAGIC, struct.pack("<II", VERSION, len(leaves))]
    for leaf in leaves:
        tag = leaf.kind.encode("ascii")
        out.append(struct.pack("<I", len(tag)) + tag + struct.pack("<I", len(leaf.params)))
        for p in leaf.params:
            out.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def loads_weights(data: bytes) -> list[tuple[str, list[np.ndarray]]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError("truncated weights file")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightsFormatError("bad magic")
    version, n_layers = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    layers = []
    for _ in range(n_layers):
        (tlen,) = struct.unpack("<I", take(4))
        kind = take(tlen).decode("ascii")
        (n_arr,) = struct.unpack("<I", take(4))
        arrays = []
        for _ in range(n_arr):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays.append(np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64))
        layers.append((kind, arrays))
    if pos != len(view):
        raise WeightsFormatError("trailing bytes after last layer")
    return layers


def load_into(net: Network, data: bytes) -> None:
    layers = loads_weights(data)
    leaves = [leaf for leaf in net.leaves() if leaf.params]
    if len(layers) != len(leaves):
        raise WeightsFormatError(f"file has {len(layers)} layers, network has {len(leaves)}")
    for (kind, arrays), leaf in zip(layers, leaves):
        if kind != leaf.kind or len(arrays) != len(leaf.params):
            raise WeightsFormatError(f"layer mismatch: file {kind}, network {leaf.kind}")
        for p, a in zip(leaf.params, arrays):
            if p.shape != a.shape:
                raise WeightsFormatError(f"shape mismatch {a.shape} vs {p.shape}")
            p[...] = a
