"""Exponential codec.

A nonzero value ``x`` is represented as ``sign(x) * (scale * base**i + offset)``
with an integer exponent ``i`` in ``[r_min, r_max]``.  On the wire every
element is a sign bit plus an ``n``-bit exponent field ``f``; ``f == 0`` is the
reserved zero code and ``f = i + 2**(n-1)`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_bits, check_tensor, nonzero_magnitudes
from .errors import BaseOutOfRange, DegenerateTensor, ShapeMismatch, ZeroReference
from .tensor import Tensor

MIN_BITS = 3
MAX_BITS = 7


def exponent_range(bits: int) -> tuple[int, int]:
    half = 2 ** (bits - 1) - 1
    return -half, half


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor codec parameters (base, bitwidth, scale, offset)."""

    base: float
    bits: int
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        check_bits(self.bits)
        if not self.base > 0 or self.base == 1:
            raise BaseOutOfRange(f"base must be positive and != 1, got {self.base!r}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale!r}")

    @property
    def r_min(self) -> int:
        return -(2 ** (self.bits - 1) - 1)

    @property
    def r_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def bias(self) -> int:
        """Offset between exponent ``i`` and stored field ``f``."""
        return 2 ** (self.bits - 1)

    @property
    def n_levels(self) -> int:
        return 2**self.bits - 1

    def exponents(self) -> np.ndarray:
        return np.arange(self.r_min, self.r_max + 1)

    def levels(self) -> np.ndarray:
        """Positive representable magnitudes, ascending in exponent."""
        i = self.exponents().astype(np.float64)
        return self.scale * np.power(float(self.base), i) + self.offset

    def to_dict(self) -> dict:
        return {"base": float(self.base), "bits": int(self.bits),
                "scale": float(self.scale), "offset": float(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(base=float(d["base"]), bits=int(d["bits"]),
                   scale=float(d["scale"]), offset=float(d["offset"]))


class Code(NamedTuple):
    sign: int   # -1, 0 or +1
    field: int  # 0 is the zero code

    @property
    def is_zero(self) -> bool:
        return self.field == 0


ZERO_CODE = Code(0, 0)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Sign and exponent-field arrays plus the codec that produced them."""

    params: QuantParams
    signs: np.ndarray   # int8 in {-1, 0, 1}
    fields: np.ndarray  # uint8 in [0, 2**n - 1]
    name: str = ""

    def __post_init__(self):
        signs = np.array(self.signs, dtype=np.int8, order="C", copy=True)
        fields = np.array(self.fields, dtype=np.uint8, order="C", copy=True)
        if signs.shape != fields.shape:
            raise ShapeMismatch(f"signs {signs.shape} vs fields {fields.shape}")
        if fields.size and int(fields.max()) > self.params.n_levels:
            raise ValueError("exponent field exceeds bitwidth")
        zero = fields == 0
        if np.any(signs[zero] != 0) or np.any(signs[~zero] == 0):
            raise ValueError("sign must be 0 exactly for zero codes")
        signs.setflags(write=False)
        fields.setflags(write=False)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "fields", fields)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.fields.shape)

    @property
    def size(self) -> int:
        return int(self.fields.size)

    @property
    def exponents(self) -> np.ndarray:
        """Signed exponents ``i``; entries under the zero code are meaningless."""
        return self.fields.astype(np.int32) - self.params.bias

    def code(self, index) -> Code:
        return Code(int(self.signs[index]), int(self.fields[index]))

    def packed_codes(self) -> np.ndarray:
        """``(n+1)``-bit element codes: exponent field in the low bits, sign bit on top."""
        neg = (self.signs < 0).astype(np.uint8)
        return (self.fields | (neg << self.params.bits)).reshape(-1)

    @classmethod
    def from_packed_codes(cls, codes, shape, params: QuantParams, name="") -> "QuantizedTensor":
        codes = np.asarray(codes, dtype=np.uint8).reshape(shape)
        fields = codes & np.uint8(2**params.bits - 1)
        neg = (codes >> params.bits) & 1
        signs = np.where(fields == 0, 0, np.where(neg == 1, -1, 1))
        return cls(params, signs, fields, name=name)

    def equals(self, other: "QuantizedTensor") -> bool:
        return (self.params == other.params and self.shape == other.shape
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.fields, other.fields))


def clip(i: int, r_min: int, r_max: int) -> int:
    if r_min > r_max:
        raise ValueError("r_min must not exceed r_max")
    return min(max(i, r_min), r_max)


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    whole = np.trunc(v)
    frac = v - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(v), 0.0)


def _exponent_index(mag: np.ndarray, p: QuantParams) -> np.ndarray:
    """Clipped integer exponents for strictly positive magnitudes."""
    arg = (mag - float(p.offset)) / float(p.scale)
    out = np.full(mag.shape, p.r_min, dtype=np.int64)
    ok = arg > 0
    if np.any(ok):
        raw = round_half_away(np.log(arg[ok]) / np.log(float(p.base)))
        out[ok] = np.clip(raw, p.r_min, p.r_max).astype(np.int64)
    return out


def quantize_array(x, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise codec: returns ``(signs, fields)`` arrays shaped like ``x``."""
    x = np.asarray(x, dtype=np.float64)
    signs = np.sign(x).astype(np.int8)
    fields = np.zeros(x.shape, dtype=np.uint8)
    nz = signs != 0
    if np.any(nz):
        fields[nz] = (_exponent_index(np.abs(x[nz]), p) + p.bias).astype(np.uint8)
    return signs, fields


def dequantize_array(signs, fields, p: QuantParams) -> np.ndarray:
    fields = np.asarray(fields)
    i = fields.astype(np.float64) - p.bias
    mag = float(p.scale) * np.power(float(p.base), i) + float(p.offset)
    return np.where(fields == 0, 0.0, np.asarray(signs, dtype=np.float64) * mag)


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize, in float64."""
    return dequantize_array(*quantize_array(x, p), p)


def quantize_value(x: float, p: QuantParams) -> Code:
    if x == 0:
        return ZERO_CODE
    signs, fields = quantize_array(np.array([x]), p)
    return Code(int(signs[0]), int(fields[0]))


def dequantize_value(c: Code, p: QuantParams):
    """Plain Python arithmetic, so exact ``Fraction`` parameters stay exact."""
    sign, field = c
    if field == 0:
        return p.scale * 0  # zero of the parameters' number type
    i = field - p.bias
    return sign * (p.scale * p.base**i + p.offset)


def fsr_scale(max_mag: float, base: float, bits: int) -> float:
    _, r_max = exponent_range(bits)
    return max_mag / base**r_max


def fsr_offset(min_mag: float, scale: float, base: float, bits: int) -> float:
    """Offset placing the lowest level half a step above ``min_mag``'s rounding edge."""
    r_min, _ = exponent_range(bits)
    return min_mag - scale * base ** (r_min - 0.5)


def params_for_base(t, base: float, bits: int) -> QuantParams:
    """Full-scale-range scale and min-anchored offset for a given base."""
    mags = nonzero_magnitudes(t)
    if mags.size == 0:
        raise DegenerateTensor("tensor has no nonzero elements")
    scale = fsr_scale(float(mags.max()), base, bits)
    offset = fsr_offset(float(mags.min()), scale, base, bits)
    return QuantParams(base=base, bits=bits, scale=scale, offset=offset)


def init_params(t, bits: int) -> QuantParams:
    """Initial codec covering the tensor's full magnitude range."""
    check_bits(bits)
    mags = nonzero_magnitudes(t)
    if mags.size == 0:
        raise DegenerateTensor("tensor has no nonzero elements")
    max_mag = float(mags.max())
    if max_mag <= 1.0:
        raise BaseOutOfRange(
            f"max magnitude {max_mag!r} <= 1 gives a base <= 1; pre-scale the tensor")
    _, r_max = exponent_range(bits)
    base = max_mag ** (1.0 / r_max)
    if base <= 1.0:
        raise BaseOutOfRange(f"computed base {base!r} <= 1")
    return params_for_base(mags, base, bits)


def rmae(approx, ref) -> float:
    """Relative mean absolute error ``sum|approx - ref| / sum|ref|``."""
    a = np.asarray(approx, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if a.shape != r.shape:
        raise ShapeMismatch(f"approx {a.shape} vs ref {r.shape}")
    denom = np.abs(r).sum()
    if denom == 0:
        raise ZeroReference("sum of |ref| is zero")
    return float(np.abs(a - r).sum() / denom)


def quantization_error(t, p: QuantParams) -> float:
    x = np.asarray(t, dtype=np.float64)
    return rmae(fake_quantize(x, p), x)


def quantize_tensor(t, p: QuantParams) -> QuantizedTensor:
    arr = check_tensor(t)
    signs, fields = quantize_array(arr, p)
    return QuantizedTensor(p, signs, fields, name=getattr(t, "name", ""))


def dequantize_tensor(qt: QuantizedTensor) -> Tensor:
    vals = dequantize_array(qt.signs, qt.fields, qt.params)
    return Tensor(vals.astype(np.float32), name=qt.name)
