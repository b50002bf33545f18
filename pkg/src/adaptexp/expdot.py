"""Dot products in the exponential domain by counting exponents.

With ``A = S_A (a_A b**i + c_A)`` and ``W = S_W (a_W b**j + c_W)`` the sum of
products splits into four terms,

    a_A a_W  sum s b**(i+j)  +  a_W c_A  sum s b**j
  + a_A c_W  sum s b**i      +  c_A c_W  sum s,

where ``s = S_A S_W``.  Each sum only needs signed occurrence counts per
exponent (or exponent sum), so no multiplications happen until the final
weighting by precomputed powers of the base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import BaseMismatch, BitwidthMismatch, ShapeMismatch
from .expquant import Code, QuantizedTensor, dequantize_array, dequantize_value, exponent_range
from .tensor import Tensor

INT8_MAX = 127
_CHUNK = 1 << 21


def ac1_size(bits: int) -> int:
    return 2 ** (bits + 1) - 3


def ac_size(bits: int) -> int:
    return 2**bits - 1


@dataclass(frozen=True)
class TermCoefficients:
    c1: float
    c2: float
    c3: float
    c4: float
    base: float
    bits: int

    @classmethod
    def from_params(cls, act_params, w_params) -> "TermCoefficients":
        if act_params.bits != w_params.bits:
            raise BitwidthMismatch(f"activation bits {act_params.bits} != weight bits {w_params.bits}")
        if act_params.base != w_params.base:
            raise BaseMismatch(f"activation base {act_params.base!r} != weight base {w_params.base!r}")
        aa, ba = act_params.scale, act_params.offset
        aw, bw = w_params.scale, w_params.offset
        return cls(aa * aw, aw * ba, aa * bw, ba * bw, act_params.base, act_params.bits)

    def sum_powers(self) -> list:
        """Powers of the base for every reachable exponent sum (the base lookup table)."""
        r_min, r_max = exponent_range(self.bits)
        return [self.base**s for s in range(2 * r_min, 2 * r_max + 1)]


class CounterSet:
    """Signed counters for one output neuron.

    ``ac1`` is indexed by exponent sum offset by ``-2 * r_min``; ``ac2`` by the
    weight exponent and ``ac3`` by the activation exponent, both offset by
    ``-r_min``.  With ``audit=True`` the running peak of any counter is tracked.
    """

    def __init__(self, bits: int, audit: bool = False):
        self.bits = bits
        self.r_min, self.r_max = exponent_range(bits)
        self.audit = audit
        self.reset()

    def reset(self):
        self.ac1 = np.zeros(ac1_size(self.bits), dtype=np.int32)
        self.ac2 = np.zeros(ac_size(self.bits), dtype=np.int32)
        self.ac3 = np.zeros(ac_size(self.bits), dtype=np.int32)
        self.sign_acc = 0
        self.pairs = 0
        self.peak = 0

    def _exponent(self, code: Code) -> int:
        if not 0 <= code.field <= ac_size(self.bits):
            raise BitwidthMismatch(f"field {code.field} does not fit {self.bits} bits")
        return code.field - 2 ** (self.bits - 1)

    def accumulate(self, a_code, w_code) -> None:
        a_code = Code(int(a_code[0]), int(a_code[1]))
        w_code = Code(int(w_code[0]), int(w_code[1]))
        i_a = self._exponent(a_code)
        i_w = self._exponent(w_code)
        if a_code.field == 0 or w_code.field == 0:
            return
        s = a_code.sign * w_code.sign
        k1 = i_a + i_w - 2 * self.r_min
        self.ac1[k1] += s
        self.ac2[i_w - self.r_min] += s
        self.ac3[i_a - self.r_min] += s
        self.sign_acc += s
        self.pairs += 1
        if self.audit:
            self.peak = max(self.peak, abs(int(self.ac1[k1])), abs(int(self.ac2[i_w - self.r_min])),
                            abs(int(self.ac3[i_a - self.r_min])))

    def accumulate_tensors(self, a_q: QuantizedTensor, w_q: QuantizedTensor) -> None:
        for q in (a_q, w_q):
            if q.params.bits != self.bits:
                raise BitwidthMismatch(f"tensor bits {q.params.bits} != counter bits {self.bits}")
        if a_q.size != w_q.size:
            raise ShapeMismatch(f"lengths differ: {a_q.size} vs {w_q.size}")
        for a, w in zip(zip(a_q.signs.reshape(-1), a_q.fields.reshape(-1)),
                        zip(w_q.signs.reshape(-1), w_q.fields.reshape(-1))):
            self.accumulate((int(a[0]), int(a[1])), (int(w[0]), int(w[1])))

    def count1(self, exp_sum: int) -> int:
        return int(self.ac1[exp_sum - 2 * self.r_min])

    def count2(self, w_exp: int) -> int:
        return int(self.ac2[w_exp - self.r_min])

    def count3(self, a_exp: int) -> int:
        return int(self.ac3[a_exp - self.r_min])

    def max_abs(self) -> int:
        return int(max(np.abs(self.ac1).max(), np.abs(self.ac2).max(), np.abs(self.ac3).max()))

    def fits_int8(self) -> bool:
        return max(self.peak, self.max_abs()) <= INT8_MAX

    def is_empty(self) -> bool:
        return not (self.ac1.any() or self.ac2.any() or self.ac3.any() or self.sign_acc)


def finalize(cs: CounterSet, coeffs: TermCoefficients):
    """Weight counts by base powers and combine the four terms.

    Plain Python arithmetic: ``Fraction`` coefficients give an exact result.
    """
    if cs.bits != coeffs.bits:
        raise BitwidthMismatch(f"counter bits {cs.bits} != coefficient bits {coeffs.bits}")
    blut = coeffs.sum_powers()
    single = blut[-cs.r_min: -cs.r_min + ac_size(cs.bits)]  # b**r_min .. b**r_max
    t1 = sum(int(c) * p for c, p in zip(cs.ac1, blut) if c)
    t2 = sum(int(c) * p for c, p in zip(cs.ac2, single) if c)
    t3 = sum(int(c) * p for c, p in zip(cs.ac3, single) if c)
    return coeffs.c1 * t1 + coeffs.c2 * t2 + coeffs.c3 * t3 + coeffs.c4 * cs.sign_acc


def oracle_dot(a_q: QuantizedTensor, w_q: QuantizedTensor):
    """Brute-force reference: dequantize every element and sum the products."""
    if a_q.size != w_q.size:
        raise ShapeMismatch(f"lengths differ: {a_q.size} vs {w_q.size}")
    if a_q.params.bits != w_q.params.bits:
        raise BitwidthMismatch("bitwidths differ")
    if a_q.params.base != w_q.params.base:
        raise BaseMismatch("bases differ")
    prods = [
        dequantize_value(Code(int(sa), int(fa)), a_q.params) * dequantize_value(Code(int(sw), int(fw)), w_q.params)
        for sa, fa, sw, fw in zip(a_q.signs.reshape(-1), a_q.fields.reshape(-1),
                                  w_q.signs.reshape(-1), w_q.fields.reshape(-1))
    ]
    if any(isinstance(p, Fraction) for p in prods):
        return sum(prods, Fraction(0))
    return math.fsum(prods)


def counting_dot(a_q: QuantizedTensor, w_q: QuantizedTensor, audit: bool = False):
    """Counting-engine dot product of two equal-length quantized tensors."""
    coeffs = TermCoefficients.from_params(a_q.params, w_q.params)
    cs = CounterSet(coeffs.bits, audit=audit)
    cs.accumulate_tensors(a_q, w_q)
    return finalize(cs, coeffs), cs


# -------------------------------------------------------- precomputation

@dataclass(frozen=True)
class WeightTerms:
    term2: float
    term4: float


def precompute_weight_terms(w_q: QuantizedTensor, coeffs: TermCoefficients) -> WeightTerms:
    """Weight-only terms 2 and 4, valid when every activation is strictly positive."""
    nz = w_q.fields.reshape(-1) != 0
    s = w_q.signs.reshape(-1)[nz].astype(np.float64)
    i = w_q.exponents.reshape(-1)[nz].astype(np.float64)
    term2 = coeffs.c2 * float(np.sum(s * np.power(float(coeffs.base), i)))
    term4 = coeffs.c4 * float(np.sum(s))
    return WeightTerms(term2, term4)


def precompute_applicable(a_q: QuantizedTensor) -> bool:
    """True when activations are dense and positive (no zero or negative codes)."""
    return bool(np.all(a_q.signs == 1))


@dataclass(frozen=True)
class DotResult:
    value: float
    used_precomputed: bool
    counters: CounterSet


def exp_dot(a_q: QuantizedTensor, w_q: QuantizedTensor,
            weight_terms: Optional[WeightTerms] = None) -> DotResult:
    """Dot product, taking the precomputed weight terms when the guard allows it."""
    coeffs = TermCoefficients.from_params(a_q.params, w_q.params)
    cs = CounterSet(coeffs.bits)
    cs.accumulate_tensors(a_q, w_q)
    if weight_terms is None or not precompute_applicable(a_q):
        return DotResult(finalize(cs, coeffs), False, cs)
    online = finalize(cs, TermCoefficients(coeffs.c1, 0.0, coeffs.c3, 0.0, coeffs.base, coeffs.bits))
    return DotResult(online + weight_terms.term2 + weight_terms.term4, True, cs)


# ------------------------------------------------------------ batched path

@dataclass
class BatchCounters:
    """Counters for a (batch, out) grid of neurons."""

    ac1: np.ndarray       # (B, out, 2**(n+1) - 3)
    ac2: np.ndarray       # (B, out, 2**n - 1)
    ac3: np.ndarray
    sign_acc: np.ndarray  # (B, out)

    def max_abs(self) -> int:
        if self.ac1.size == 0:
            return 0
        return int(max(np.abs(self.ac1).max(), np.abs(self.ac2).max(), np.abs(self.ac3).max()))


def _check_pair(w_q: QuantizedTensor, a_q: QuantizedTensor):
    if w_q.params.bits != a_q.params.bits:
        raise BitwidthMismatch(f"weight bits {w_q.params.bits} != activation bits {a_q.params.bits}")
    if len(w_q.shape) != 2:
        raise ShapeMismatch(f"weights must be 2-D, got shape {w_q.shape}")
    if a_q.shape[-1] != w_q.shape[1]:
        raise ShapeMismatch(f"inner dimensions differ: {w_q.shape} x {a_q.shape}")


def _iter_counts(w_q: QuantizedTensor, a_q: QuantizedTensor):
    """Yield ``(lo, hi, BatchCounters)`` over row chunks of the activation batch."""
    _check_pair(w_q, a_q)
    n = w_q.params.bits
    r_min, _ = exponent_range(n)
    L1, L = ac1_size(n), ac_size(n)
    out_dim, in_dim = w_q.shape
    a_s = a_q.signs.reshape(-1, in_dim).astype(np.int64)
    a_e = a_q.exponents.reshape(-1, in_dim).astype(np.int64)
    w_s = w_q.signs.astype(np.int64)
    w_e = w_q.exponents.astype(np.int64)
    batch = a_s.shape[0]
    rows = max(1, _CHUNK // max(1, out_dim * max(in_dim, L1)))
    cells = np.arange(out_dim)[None, :, None]
    for lo in range(0, batch, rows):
        hi = min(batch, lo + rows)
        m = (hi - lo) * out_dim
        sigma = a_s[lo:hi, None, :] * w_s[None, :, :]
        nz = sigma != 0
        neuron = np.broadcast_to(np.arange(hi - lo)[:, None, None] * out_dim + cells, sigma.shape)[nz]
        sig = sigma[nz]
        ea = np.broadcast_to(a_e[lo:hi, None, :], sigma.shape)[nz]
        ew = np.broadcast_to(w_e[None, :, :], sigma.shape)[nz]

        def count(idx, width):
            c = np.bincount(neuron * width + idx, weights=sig, minlength=m * width)
            return c.reshape(hi - lo, out_dim, width).astype(np.int64)

        ac1 = count(ea + ew - 2 * r_min, L1)
        yield lo, hi, BatchCounters(ac1, count(ew - r_min, L), count(ea - r_min, L), ac1.sum(axis=2))


def count_batch(w_q: QuantizedTensor, a_q: QuantizedTensor) -> BatchCounters:
    """Counters for every (activation row, weight row) pair.

    ``a_q`` is 1-D (one input vector) or 2-D (a batch of input vectors).
    """
    parts = [c for _, _, c in _iter_counts(w_q, a_q)]
    if not parts:
        n = w_q.params.bits
        z = lambda w: np.zeros((0, w_q.shape[0], w), dtype=np.int64)
        return BatchCounters(z(ac1_size(n)), z(ac_size(n)), z(ac_size(n)), np.zeros((0, w_q.shape[0]), np.int64))
    return BatchCounters(*(np.concatenate([getattr(c, k) for c in parts])
                           for k in ("ac1", "ac2", "ac3", "sign_acc")))


def finalize_batch(counters: BatchCounters, coeffs: TermCoefficients) -> np.ndarray:
    blut = np.array(coeffs.sum_powers(), dtype=np.float64)
    r_min, _ = exponent_range(coeffs.bits)
    single = blut[-r_min: -r_min + ac_size(coeffs.bits)]
    return (coeffs.c1 * (counters.ac1 @ blut) + coeffs.c2 * (counters.ac2 @ single)
            + coeffs.c3 * (counters.ac3 @ single) + coeffs.c4 * counters.sign_acc)


def quantized_matvec(w_q: QuantizedTensor, a_q: QuantizedTensor, return_counters: bool = False):
    """``W @ a`` with one counter set per output neuron.

    A 2-D ``a_q`` of shape (batch, in) yields a (batch, out) result.
    """
    coeffs = TermCoefficients.from_params(a_q.params, w_q.params)
    if return_counters:
        counters = count_batch(w_q, a_q)
        out = finalize_batch(counters, coeffs)
    else:
        _check_pair(w_q, a_q)
        out = np.zeros((int(np.prod(a_q.shape[:-1], dtype=np.int64)), w_q.shape[0]))
        for lo, hi, c in _iter_counts(w_q, a_q):
            out[lo:hi] = finalize_batch(c, coeffs)
    if len(a_q.shape) == 1:
        out = out[0]
    result = Tensor(out.astype(np.float32))
    if return_counters:
        return result, counters
    return result


def oracle_matvec(w_q: QuantizedTensor, a_q: QuantizedTensor) -> np.ndarray:
    """Float64 reference ``W @ a`` over dequantized values."""
    _check_pair(w_q, a_q)
    w = dequantize_array(w_q.signs, w_q.fields, w_q.params)
    a = dequantize_array(a_q.signs, a_q.fields, a_q.params)
    return a @ w.T


# ------------------------------------------------------------------ audit

@dataclass(frozen=True)
class CounterAudit:
    max_final: int
    max_running: int

    @property
    def max_abs(self) -> int:
        return max(self.max_final, self.max_running)

    @property
    def fits_int8(self) -> bool:
        return self.max_abs <= INT8_MAX


def _running_peak(keys: np.ndarray, sigma: np.ndarray) -> int:
    if keys.size == 0:
        return 0
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    cs = np.cumsum(sigma[order])
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
    before = np.r_[0, cs[:-1]][starts]
    group = np.cumsum(np.r_[True, k[1:] != k[:-1]]) - 1
    return int(np.abs(cs - before[group]).max())


def audit_counters(w_q: QuantizedTensor, a_q: QuantizedTensor) -> CounterAudit:
    """Peak absolute value of any array counter, final and while streaming.

    Pairs stream in input order; the running peak is what 8-bit hardware
    counters would need to hold at any moment.
    """
    max_final = max((c.max_abs() for _, _, c in _iter_counts(w_q, a_q)), default=0)
    n = w_q.params.bits
    r_min, _ = exponent_range(n)
    out_dim, in_dim = w_q.shape
    a_s = a_q.signs.reshape(-1, in_dim).astype(np.int64)
    a_e = a_q.exponents.reshape(-1, in_dim).astype(np.int64)
    peak = 0
    rows = max(1, _CHUNK // max(1, out_dim * in_dim))
    for lo in range(0, a_s.shape[0], rows):
        hi = min(a_s.shape[0], lo + rows)
        sigma = a_s[lo:hi, None, :] * w_q.signs.astype(np.int64)[None]
        shape = sigma.shape
        nz = sigma != 0
        neuron = np.broadcast_to(np.arange((hi - lo) * out_dim).reshape(hi - lo, out_dim, 1), shape)[nz]
        ea = np.broadcast_to(a_e[lo:hi, None, :], shape)[nz]
        ew = np.broadcast_to(w_q.exponents.astype(np.int64)[None], shape)[nz]
        sig = sigma[nz]
        span = ac1_size(n)
        for bins in (ea + ew - 2 * r_min, ew - r_min, ea - r_min):
            peak = max(peak, _running_peak(neuron * span + bins, sig))
    return CounterAudit(max_final, peak)
