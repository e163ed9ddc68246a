"""Single-file binary checkpoints: magic, JSON header, little-endian f32 payload.

Layout: 8 magic bytes "NTCKPT<version>\\0", a little-endian uint32 header
length, the UTF-8 JSON header, then every parameter tensor in layer order
(canonical key order per kind) as raw little-endian float32. Round trips are
bit-exact regardless of host endianness.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, PayloadLengthMismatch, VersionUnsupported
from .network import LayerKind, LayerSpec, Network, PARAM_ORDER, check_specs

MAGIC_PREFIX = b"NTCKPT"
VERSION = b"1"
MAGIC = MAGIC_PREFIX + VERSION + b"\x00"


def _param_shapes(spec: LayerSpec) -> list[tuple[str, tuple[int, ...]]]:
    if spec.kind is LayerKind.LINEAR:
        fin, fout = spec.dims
        return [("weight", (fout, fin)), ("bias", (fout,))]
    if spec.kind is LayerKind.CONV2D:
        cin, cout, kh, kw, _, _ = spec.dims
        return [("weight", (cout, cin, kh, kw)), ("bias", (cout,))]
    if spec.kind is LayerKind.BATCHNORM2D:
        c = spec.dims[0]
        return [(key, (c,)) for key in PARAM_ORDER[LayerKind.BATCHNORM2D]]
    return []


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Write the network plus optional metadata (seed, epoch, metrics...)."""
    header = {
        "arch": [s.as_dict() for s in net.specs],
        "arch_id": net.arch_id,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for spec, params in zip(net.specs, net.params):
            for key in PARAM_ORDER.get(spec.kind, ()):
                fh.write(np.ascontiguousarray(params[key], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Network, dict]:
    """Read a checkpoint; returns (network, header dict)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC_PREFIX):
        raise BadMagic(f"{path}: not a checkpoint file")
    version = blob[len(MAGIC_PREFIX) : len(MAGIC) ]
    if version != VERSION + b"\x00":
        raise VersionUnsupported(f"{path}: unsupported checkpoint version {version!r}")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise PayloadLengthMismatch(f"{path}: header cut short")
    header = json.loads(blob[12 : 12 + header_len].decode())
    specs = [LayerSpec.from_dict(d) for d in header["arch"]]
    check_specs(specs)
    payload = blob[12 + header_len :]

    expected = sum(
        int(np.prod(shape)) for s in specs for _, shape in _param_shapes(s)) * 4
    if len(payload) != expected:
        raise PayloadLengthMismatch(
            f"{path}: payload {len(payload)} bytes, architecture implies {expected}")

    params: list[dict] = []
    offset = 0
    for spec in specs:
        p = {}
        for key, shape in _param_shapes(spec):
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            p[key] = arr.astype(np.float32, copy=True).reshape(shape)
            offset += count * 4
        params.append(p)
    net = Network(specs, params)
    if net.arch_id != header["arch_id"]:
        raise PayloadLengthMismatch(f"{path}: header arch_id does not match the layer list")
    return net, header
