"""Checkpoint files.

Layout (all header text is ASCII, one record per line, ``\\n`` terminated)::

    MNN-CHECKPOINT
    version 1
    input_sigma <float.hex>
    layers <N>
    layer <in> <out> <kind> <sigma float.hex> <cov 0|1> [<v_th> <v_res> <t_ref> <leak>]
    ... (N layer lines; kind is heaviside, relu, lif or readout; LIF
         parameters follow only for kind lif, also as float.hex)
    payload <total byte count>
    <binary payload>

The payload holds, for each layer in order, W (out x in, row-major) then
b (out), as little-endian IEEE-754 float64.  Floats in the header are written
with ``float.hex`` so every value round-trips bit for bit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .activations import ActivationKind, LifParams
from .network import LayerSpec, MnnModel

MAGIC = "MNN-CHECKPOINT"
VERSION = 1
_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed checkpoint; the message names the section that failed."""


class UnsupportedVersionError(CheckpointError):
    pass


def _hex(x: float) -> str:
    return float(x).hex()


def dumps(model: MnnModel) -> bytes:
    lines = [MAGIC, f"version {VERSION}", f"input_sigma {_hex(model.input_sigma)}",
             f"layers {len(model.specs)}"]
    for s in model.specs:
        kind = "readout" if s.kind is None else s.kind.tag
        row = f"layer {s.in_dim} {s.out_dim} {kind} {_hex(s.sigma)} {int(s.covariance_enabled)}"
        if s.kind is not None and s.kind.lif is not None:
            p = s.kind.lif
            row += " " + " ".join(_hex(v) for v in (p.v_th, p.v_res, p.t_ref, p.leak))
        lines.append(row)
    payload = b"".join(np.ascontiguousarray(a, dtype=_F8).tobytes()
                       for a in model.params())
    lines.append(f"payload {len(payload)}")
    return ("\n".join(lines) + "\n").encode("ascii") + payload


def save_model(model: MnnModel, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def line(self, section: str) -> list[str]:
        end = self.blob.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"{section}: unexpected end of file")
        try:
            text = self.blob[self.pos:end].decode("ascii")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{section}: header is not ASCII") from e
        self.pos = end + 1
        return text.split()


def _field(fields, key, section, n=1):
    if not fields or fields[0] != key or len(fields) != n + 1:
        raise CheckpointError(f"{section}: expected '{key}' record, got {' '.join(fields)!r}")
    return fields[1:]


def _float(tok: str, section: str) -> float:
    try:
        return float.fromhex(tok)
    except ValueError as e:
        raise CheckpointError(f"{section}: bad number {tok!r}") from e


def _int(tok: str, section: str) -> int:
    try:
        return int(tok)
    except ValueError as e:
        raise CheckpointError(f"{section}: bad integer {tok!r}") from e


def _layer(fields, k) -> LayerSpec:
    section = f"layer table (row {k})"
    if not fields or fields[0] != "layer" or len(fields) not in (6, 10):
        raise CheckpointError(f"{section}: malformed record {' '.join(fields)!r}")
    n_in, n_out = _int(fields[1], section), _int(fields[2], section)
    tag, sigma, cov = fields[3], _float(fields[4], section), fields[5]
    if cov not in ("0", "1"):
        raise CheckpointError(f"{section}: covariance flag must be 0 or 1")
    if tag == "readout":
        kind = None
    elif tag == "lif":
        if len(fields) != 10:
            raise CheckpointError(f"{section}: LIF layer without parameters")
        kind = ActivationKind("lif", LifParams(*(_float(t, section) for t in fields[6:])))
    elif tag in ("heaviside", "relu") and len(fields) == 6:
        kind = ActivationKind(tag)
    else:
        raise CheckpointError(f"{section}: unknown activation {tag!r}")
    try:
        return LayerSpec(n_in, n_out, kind, sigma, cov == "1")
    except ValueError as e:
        raise CheckpointError(f"{section}: {e}") from e


def loads(blob: bytes) -> MnnModel:
    r = _Reader(blob)
    if r.line("magic") != [MAGIC]:
        raise CheckpointError("magic: not an MNN checkpoint")
    (v,) = _field(r.line("version"), "version", "version")
    if _int(v, "version") != VERSION:
        raise UnsupportedVersionError(f"version: unsupported checkpoint version {v} "
                                      f"(this build reads version {VERSION})")
    (sig,) = _field(r.line("input_sigma"), "input_sigma", "input_sigma")
    input_sigma = _float(sig, "input_sigma")
    (n,) = _field(r.line("layers"), "layers", "layers")
    specs = [_layer(r.line("layer table"), k) for k in range(_int(n, "layers"))]
    (size,) = _field(r.line("payload"), "payload", "payload header")
    size = _int(size, "payload header")
    need = 8 * sum(s.out_dim * (s.in_dim + 1) for s in specs)
    if size != need:
        raise CheckpointError(f"payload header: declares {size} bytes, layer table needs {need}")
    data = blob[r.pos:]
    if len(data) != size:
        raise CheckpointError(f"payload: expected {size} bytes, found {len(data)} (truncated?)")
    flat = np.frombuffer(data, dtype=_F8).astype(float)
    weights, biases, at = [], [], 0
    for s in specs:
        weights.append(flat[at:at + s.out_dim * s.in_dim].reshape(s.out_dim, s.in_dim))
        at += s.out_dim * s.in_dim
        biases.append(flat[at:at + s.out_dim].copy())
        at += s.out_dim
    try:
        return MnnModel(specs, weights, biases, input_sigma)
    except ValueError as e:
        raise CheckpointError(f"model: {e}") from e


def load_model(path) -> MnnModel:
    return loads(Path(path).read_bytes())
