"""Tensor files and calibration trace directories.

Two on-disk formats are supported:

* a strict NPY subset (little-endian float32, C order, 1-D/2-D/4-D,
  format versions 1.0 and 2.0); anything else is rejected rather than
  coerced;
* ``.exq`` packed exponential tensors::

      magic   4s   b"EXQT"
      version u16  1
      bits    u8   exponent bitwidth n in [3, 7]
      ndim    u8
      base, scale, offset   3 x f64
      dims    ndim x u64
      payload ceil(size * (n + 1) / 8) bytes, codes packed LSB first

  Each element code holds the exponent field in its low ``n`` bits and the
  sign bit (1 = negative) above it.  All header fields are little-endian.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MalformedHeader,
    NonFiniteValue,
    TraceIOError,
    TruncatedPayload,
    UnsupportedDtype,
    VersionMismatch,
)
from .expquant import QuantParams, QuantizedTensor
from .tensor import Tensor, first_nonfinite

NPY_NDIMS = (1, 2, 4)
EXQ_MAGIC = b"EXQT"
EXQ_VERSION = 1
_EXQ_HEAD = struct.Struct("<4sHBB3d")
_DIM = struct.Struct("<Q")

MANIFEST = "manifest.json"


# --------------------------------------------------------------------- NPY

def _read_npy(fp) -> np.ndarray:
    try:
        major, minor = np.lib.format.read_magic(fp)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None
    if (major, minor) == (1, 0):
        reader = np.lib.format.read_array_header_1_0
    elif (major, minor) == (2, 0):
        reader = np.lib.format.read_array_header_2_0
    else:
        raise MalformedHeader(f"unsupported NPY version {major}.{minor}")
    try:
        shape, fortran, dtype = reader(fp)
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(str(exc)) from None
    if dtype != np.dtype("<f4"):
        raise UnsupportedDtype(f"expected little-endian float32, got {dtype.str}")
    if fortran:
        raise UnsupportedDtype("fortran-order arrays are not supported")
    if len(shape) not in NPY_NDIMS:
        raise MalformedHeader(f"only 1-D, 2-D and 4-D arrays are supported, got {len(shape)}-D")
    count = math.prod(shape)
    raw = fp.read(count * 4)
    if len(raw) != count * 4:
        raise TruncatedPayload(f"expected {count * 4} data bytes, got {len(raw)}")
    if fp.read(1):
        raise MalformedHeader("trailing bytes after array data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


def load_tensor(path, name=None) -> Tensor:
    path = Path(path)
    try:
        with open(path, "rb") as fp:
            arr = _read_npy(fp)
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc
    idx = first_nonfinite(arr)
    if idx is not None:
        raise NonFiniteValue(idx, float(arr.reshape(-1)[idx]))
    return Tensor(arr, name=path.stem if name is None else name)


def tensor_to_npy_bytes(t) -> bytes:
    arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
    if arr.ndim not in NPY_NDIMS:
        raise MalformedHeader(f"only 1-D, 2-D and 4-D arrays are supported, got {arr.ndim}-D")
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def save_tensor(t, path) -> None:
    _write_bytes(path, tensor_to_npy_bytes(t))


def _write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------- EXQ

def payload_nbytes(count: int, bits: int) -> int:
    return (count * (bits + 1) + 7) // 8


def pack_codes(codes: np.ndarray, width: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size == 0:
        return b""
    bits = (codes[:, None] >> np.arange(width, dtype=np.uint8)) & 1
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, count: int, width: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[: count * width].reshape(count, width)
    weights = (1 << np.arange(width)).astype(np.uint8)
    return (bits * weights).sum(axis=1).astype(np.uint8)


def quantized_to_bytes(qt: QuantizedTensor) -> bytes:
    p = qt.params
    head = _EXQ_HEAD.pack(EXQ_MAGIC, EXQ_VERSION, p.bits, len(qt.shape),
                          float(p.base), float(p.scale), float(p.offset))
    dims = b"".join(_DIM.pack(d) for d in qt.shape)
    return head + dims + pack_codes(qt.packed_codes(), p.bits + 1)


def quantized_from_bytes(data: bytes, name="") -> QuantizedTensor:
    if len(data) < _EXQ_HEAD.size:
        raise MalformedHeader("file shorter than the .exq header")
    magic, version, bits, ndim, base, scale, offset = _EXQ_HEAD.unpack_from(data)
    if magic != EXQ_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if version != EXQ_VERSION:
        raise VersionMismatch(f"expected .exq version {EXQ_VERSION}, got {version}")
    if not 3 <= bits <= 7:
        raise MalformedHeader(f"bitwidth {bits} outside [3, 7]")
    pos = _EXQ_HEAD.size
    if len(data) < pos + ndim * _DIM.size:
        raise MalformedHeader("truncated shape block")
    shape = tuple(_DIM.unpack_from(data, pos + k * _DIM.size)[0] for k in range(ndim))
    pos += ndim * _DIM.size
    count = math.prod(shape)
    need = payload_nbytes(count, bits)
    payload = data[pos:]
    if len(payload) < need:
        raise TruncatedPayload(f"expected {need} payload bytes, got {len(payload)}")
    if len(payload) > need:
        raise MalformedHeader(f"{len(payload) - need} trailing bytes after payload")
    try:
        params = QuantParams(base=base, bits=bits, scale=scale, offset=offset)
    except ValueError as exc:
        raise MalformedHeader(f"invalid codec parameters: {exc}") from None
    codes = unpack_codes(payload, count, bits + 1)
    try:
        return QuantizedTensor.from_packed_codes(codes, shape, params, name=name)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None


def save_quantized(qt: QuantizedTensor, path) -> None:
    _write_bytes(path, quantized_to_bytes(qt))


def load_quantized(path) -> QuantizedTensor:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc
    return quantized_from_bytes(data, name=path.stem)


def params_only(params: QuantParams, name="") -> QuantizedTensor:
    """An empty ``.exq`` record carrying only codec parameters."""
    empty = np.zeros(0, dtype=np.uint8)
    return QuantizedTensor(params, empty.astype(np.int8), empty, name=name)


# ------------------------------------------------------------------ traces

@dataclass
class LayerTrace:
    name: str
    kind: str
    weights: Tensor
    activations: list[Tensor] = field(default_factory=list)

    def pooled_activations(self) -> np.ndarray:
        """All activation samples concatenated into one flat array."""
        if not self.activations:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([a.flat for a in self.activations])


def write_traces(out_dir, layers, sample_ids) -> dict:
    """Write ``layers`` (LayerTrace list) in the trace directory layout.

    Returns the manifest dict that is also stored as ``manifest.json``.
    """
    out_dir = Path(out_dir)
    entries = []
    for layer in layers:
        if len(layer.activations) != len(sample_ids):
            raise ValueError(f"layer {layer.name}: activation count != sample count")
        wrel = f"{layer.name}/weights.npy"
        save_tensor(layer.weights, out_dir / wrel)
        arels = []
        for sid, act in zip(sample_ids, layer.activations):
            rel = f"{layer.name}/act_{sid}.npy"
            save_tensor(act, out_dir / rel)
            arels.append(rel)
        entries.append({"name": layer.name, "kind": layer.kind,
                        "weights": wrel, "activations": arels})
    manifest = {"layers": entries, "samples": [str(s) for s in sample_ids]}
    _write_bytes(out_dir / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def read_manifest(trace_dir) -> dict:
    path = Path(trace_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise TraceIOError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: {exc}") from None
    layers = manifest.get("layers")
    if not isinstance(layers, list) or not layers:
        raise MalformedHeader(f"{path}: 'layers' must be a nonempty list")
    for entry in layers:
        if entry.get("kind") not in ("fc", "conv"):
            raise MalformedHeader(f"{path}: layer kind must be 'fc' or 'conv', got {entry.get('kind')!r}")
        if "name" not in entry or "weights" not in entry:
            raise MalformedHeader(f"{path}: layer entries need 'name' and 'weights'")
    return manifest


def load_traces(trace_dir) -> list[LayerTrace]:
    trace_dir = Path(trace_dir)
    manifest = read_manifest(trace_dir)
    out = []
    for entry in manifest["layers"]:
        w = load_tensor(trace_dir / entry["weights"], name=f"{entry['name']}.weights")
        acts = [load_tensor(trace_dir / rel) for rel in entry.get("activations", [])]
        out.append(LayerTrace(entry["name"], entry["kind"], w, acts))
    return out


def default_output_dir() -> Path:
    return Path(os.environ.get("ADAPTEXP_OUTPUT_DIR", "."))
