"""Offline search for per-layer exponential codec parameters.

Per tensor, a hill climb over the base in fixed steps of ``epsilon``
(starting from the full-scale-range initialization) minimizes the relative
mean absolute error.  Per layer, the bitwidth is raised from 3 to 7 bits until
both tensors meet their error thresholds; the partner tensor of a layer reuses
the base found for the start tensor.  Per network, the weight threshold is
relaxed step by step while the accuracy loss stays below the bound.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._validation import check_bits, check_fraction, nonzero_magnitudes
from .distfit import DEFAULT_BINS, StartTensor, select_start_tensor
from .errors import ConfigError, DegenerateTensor, EvaluatorFailure, NonPositiveMean
from .expquant import QuantParams, init_params, params_for_base, quantization_error


@dataclass(frozen=True)
class SearchConfig:
    thr_w_init: float = 0.01
    thr_w_step: float = 0.01
    thr_w_max: float = 0.5
    max_accuracy_loss: float = 0.01
    epsilon: float = 0.01
    n_min: int = 3
    n_max: int = 7
    first_layer_factor: float = 0.1
    bins: int = DEFAULT_BINS
    max_steps: int = 10_000

    def __post_init__(self):
        for name in ("thr_w_init", "thr_w_step", "thr_w_max", "max_accuracy_loss",
                     "epsilon", "first_layer_factor"):
            check_fraction(getattr(self, name), name)
        check_bits(self.n_min)
        check_bits(self.n_max)
        if self.n_min > self.n_max:
            raise ConfigError("n_min must not exceed n_max")
        if self.bins < 1 or self.max_steps < 1:
            raise ConfigError("bins and max_steps must be positive")

    @property
    def n_range(self) -> range:
        return range(self.n_min, self.n_max + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SearchConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------ per tensor

@dataclass(frozen=True)
class BaseSearchResult:
    params: QuantParams
    rmae: float
    init_params: QuantParams
    init_rmae: float
    steps: int          # accepted moves after the direction probe
    direction: int      # +1, -1, or 0 when the initialization was kept
    prescale_exp: int   # tensor was searched as t * 2**prescale_exp

    @property
    def base(self):
        return self.params.base

    @property
    def scale(self):
        return self.params.scale

    @property
    def offset(self):
        return self.params.offset


def prescale_exponent(max_mag: float) -> int:
    """Smallest ``k >= 0`` with ``max_mag * 2**k > 1``."""
    if max_mag > 1.0:
        return 0
    return int(math.floor(-math.log2(max_mag))) + 1


def _unscale(p: QuantParams, k: int) -> QuantParams:
    if k == 0:
        return p
    f = 2.0**-k
    return QuantParams(base=p.base, bits=p.bits, scale=p.scale * f, offset=p.offset * f)


def search_optimal_base(t, n: int, cfg: Optional[SearchConfig] = None) -> BaseSearchResult:
    """Hill-climb the base from its full-scale-range initialization.

    Termination is guaranteed by ``cfg.max_steps``; in practice the error stops
    decreasing long before.
    """
    cfg = cfg or SearchConfig()
    check_bits(n)
    x = np.asarray(t, dtype=np.float64)
    mags = nonzero_magnitudes(x)
    if mags.size == 0:
        raise DegenerateTensor("tensor has no nonzero elements")
    k = prescale_exponent(float(mags.max()))
    xs = x * 2.0**k
    scaled_mags = mags * 2.0**k

    def err(b):
        if not b > 1.0:
            return math.inf, None
        p = params_for_base(scaled_mags, b, n)
        return quantization_error(xs, p), p

    p0 = init_params(scaled_mags, n)
    init_err = quantization_error(xs, p0)
    eps = cfg.epsilon
    inc_err, inc_p = err(p0.base + eps)
    dec_err, dec_p = err(p0.base - eps)

    # ties favour keeping the current base, then increasing
    if inc_err < init_err and inc_err <= dec_err:
        direction, cur_err, cur = 1, inc_err, inc_p
    elif dec_err < init_err:
        direction, cur_err, cur = -1, dec_err, dec_p
    else:
        direction, cur_err, cur = 0, init_err, p0

    steps = 0
    if direction:
        step = direction * eps
        while steps < cfg.max_steps:
            new_err, new_p = err(cur.base + step)
            if new_err < cur_err:
                cur_err, cur = new_err, new_p
                steps += 1
            else:
                break

    final = _unscale(cur, k)
    init_orig = _unscale(p0, k)
    # quantization commutes with power-of-two scaling, so errors carry over
    return BaseSearchResult(final, cur_err, init_orig, init_err, steps, direction, k)


@dataclass(frozen=True)
class PartnerParams:
    params: QuantParams
    rmae: float

    @property
    def scale(self):
        return self.params.scale

    @property
    def offset(self):
        return self.params.offset


def derive_partner_params(t_other, base: float, n: int) -> PartnerParams:
    """Scale and offset for the layer's other tensor under an imposed base."""
    if not base > 1:
        raise ConfigError(f"base must exceed 1, got {base!r}")
    x = np.asarray(t_other, dtype=np.float64)
    p = params_for_base(x, base, n)
    return PartnerParams(p, quantization_error(x, p))


# ------------------------------------------------------------- per layer

def scale_activation_threshold(thr_w: float, mean_act: float, mean_w: float) -> float:
    """Weight threshold scaled by the log magnitude ratio, never below ``thr_w``."""
    if not mean_act > 0 or not mean_w > 0:
        raise NonPositiveMean(f"means must be positive, got act={mean_act!r} w={mean_w!r}")
    return thr_w * max(1.0, math.log(mean_act / mean_w))


@dataclass(frozen=True)
class LayerCandidate:
    bits: int
    act_params: QuantParams
    w_params: QuantParams
    rmae_act: float
    rmae_w: float
    start: StartTensor
    base_search: BaseSearchResult

    def passes(self, thr_act: float, thr_w: float) -> bool:
        return self.rmae_act <= thr_act and self.rmae_w <= thr_w


@dataclass(frozen=True)
class LayerQuantResult:
    name: str
    bits: int
    base: float
    act_params: QuantParams
    w_params: QuantParams
    rmae_act: float
    rmae_w: float
    start: StartTensor
    thr_act: float
    thr_w: float
    threshold_unmet: bool = False
    prescale_exp: int = 0
    sob_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name, "bits": self.bits, "base": float(self.base),
            "activations": {**self.act_params.to_dict(), "rmae": self.rmae_act},
            "weights": {**self.w_params.to_dict(), "rmae": self.rmae_w},
            "start_tensor": self.start.value, "thr_act": self.thr_act, "thr_w": self.thr_w,
            "threshold_unmet": self.threshold_unmet, "prescale_exp": self.prescale_exp,
            "sob_steps": self.sob_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerQuantResult":
        return cls(
            name=d["name"], bits=int(d["bits"]), base=float(d["base"]),
            act_params=QuantParams.from_dict(d["activations"]),
            w_params=QuantParams.from_dict(d["weights"]),
            rmae_act=float(d["activations"]["rmae"]), rmae_w=float(d["weights"]["rmae"]),
            start=StartTensor(d["start_tensor"]), thr_act=float(d["thr_act"]),
            thr_w=float(d["thr_w"]), threshold_unmet=bool(d.get("threshold_unmet", False)),
            prescale_exp=int(d.get("prescale_exp", 0)), sob_steps=int(d.get("sob_steps", 0)),
        )


class LayerSearch:
    """Lazily evaluated per-bitwidth candidates for one layer.

    The candidate at a given bitwidth does not depend on the thresholds, so a
    network-level threshold loop can reuse them across iterations.
    """

    def __init__(self, acts, weights, cfg: Optional[SearchConfig] = None, name: str = "",
                 start: Optional[StartTensor] = None):
        self.cfg = cfg or SearchConfig()
        self.name = name
        self.acts = np.asarray(acts, dtype=np.float64).reshape(-1)
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        for label, arr in (("activations", self.acts), ("weights", self.weights)):
            if not np.any(arr):
                raise DegenerateTensor(f"layer {name!r}: {label} are all zero")
        self.start = start if start is not None else select_start_tensor(
            self.acts, self.weights, self.cfg.bins)
        self._cache: dict[int, LayerCandidate] = {}

    @property
    def mean_act(self) -> float:
        return float(np.abs(self.acts).mean())

    @property
    def mean_w(self) -> float:
        return float(np.abs(self.weights).mean())

    def candidate(self, n: int) -> LayerCandidate:
        if n not in self._cache:
            if self.start is StartTensor.ACTIVATIONS:
                first, other = self.acts, self.weights
            else:
                first, other = self.weights, self.acts
            sob = search_optimal_base(first, n, self.cfg)
            partner = derive_partner_params(other, sob.base, n)
            if self.start is StartTensor.ACTIVATIONS:
                ap, ae, wp, we = sob.params, sob.rmae, partner.params, partner.rmae
            else:
                ap, ae, wp, we = partner.params, partner.rmae, sob.params, sob.rmae
            self._cache[n] = LayerCandidate(n, ap, wp, ae, we, self.start, sob)
        return self._cache[n]

    def select(self, thr_act: float, thr_w: float) -> LayerQuantResult:
        chosen, unmet = None, True
        for n in self.cfg.n_range:
            chosen = self.candidate(n)
            if chosen.passes(thr_act, thr_w):
                unmet = False
                break
        return LayerQuantResult(
            name=self.name, bits=chosen.bits, base=chosen.base_search.base,
            act_params=chosen.act_params, w_params=chosen.w_params,
            rmae_act=chosen.rmae_act, rmae_w=chosen.rmae_w, start=chosen.start,
            thr_act=thr_act, thr_w=thr_w, threshold_unmet=unmet,
            prescale_exp=chosen.base_search.prescale_exp, sob_steps=chosen.base_search.steps,
        )


def search_layer(acts, weights, thr_act: float, thr_w: float,
                 cfg: Optional[SearchConfig] = None, name: str = "") -> LayerQuantResult:
    """Smallest bitwidth whose codecs meet both thresholds (7 bits flagged if none)."""
    return LayerSearch(acts, weights, cfg, name).select(thr_act, thr_w)


# ----------------------------------------------------------- compression

def _bits_of(r) -> float:
    return float(getattr(r, "bits", r))


def average_bitwidth(results: Sequence, layer_sizes: Sequence[int]) -> float:
    if not results or len(results) != len(layer_sizes):
        raise ValueError("results and layer_sizes must be nonempty and of equal length")
    sizes = np.asarray(layer_sizes, dtype=np.float64)
    bits = np.array([_bits_of(r) for r in results])
    return float((sizes * bits).sum() / sizes.sum())


def compression_ratio(results: Sequence, layer_sizes: Sequence[int], with_sign: bool = False) -> float:
    """Storage saving relative to 8 bits per element.

    ``results`` may hold LayerQuantResult objects or plain bitwidths.  With
    ``with_sign`` each element also pays for its sign bit.
    """
    avg = average_bitwidth(results, layer_sizes)
    return 1.0 - (avg + (1.0 if with_sign else 0.0)) / 8.0


# ------------------------------------------------------------- network

@dataclass
class SweepPoint:
    thr_w: float
    avg_bitwidth: float
    accuracy: float
    accuracy_loss: float

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class NetworkQuantReport:
    per_layer: list
    layer_sizes: list
    avg_bitwidth: float
    compression_ratio: float
    compression_ratio_with_sign: float
    baseline_acc: float
    quant_acc: float
    thr_w_final: Optional[float]
    feasible: bool
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def accuracy_loss(self) -> float:
        return self.baseline_acc - self.quant_acc

    def layer(self, name) -> LayerQuantResult:
        for r in self.per_layer:
            if r.name == name:
                return r
        raise KeyError(name)

    def as_mapping(self) -> dict:
        return {r.name: r for r in self.per_layer}

    def to_dict(self) -> dict:
        return {
            "per_layer": [r.to_dict() for r in self.per_layer],
            "layer_sizes": list(self.layer_sizes),
            "avg_bitwidth": self.avg_bitwidth,
            "compression_ratio": self.compression_ratio,
            "compression_ratio_with_sign": self.compression_ratio_with_sign,
            "baseline_acc": self.baseline_acc, "quant_acc": self.quant_acc,
            "accuracy_loss": self.accuracy_loss,
            "thr_w_final": self.thr_w_final, "feasible": self.feasible,
            "history": [h.to_dict() for h in self.history],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkQuantReport":
        return cls(
            per_layer=[LayerQuantResult.from_dict(x) for x in d["per_layer"]],
            layer_sizes=list(d["layer_sizes"]), avg_bitwidth=float(d["avg_bitwidth"]),
            compression_ratio=float(d["compression_ratio"]),
            compression_ratio_with_sign=float(d["compression_ratio_with_sign"]),
            baseline_acc=float(d["baseline_acc"]), quant_acc=float(d["quant_acc"]),
            thr_w_final=d.get("thr_w_final"), feasible=bool(d["feasible"]),
            history=[SweepPoint(**h) for h in d.get("history", [])],
            config=dict(d.get("config", {})),
        )


Evaluator = Callable[[Optional[dict]], float]


def _evaluate(evaluator: Evaluator, results) -> float:
    try:
        acc = float(evaluator(results))
    except Exception as exc:
        raise EvaluatorFailure(f"evaluator raised {type(exc).__name__}: {exc}") from exc
    if not 0.0 <= acc <= 1.0:
        raise EvaluatorFailure(f"evaluator returned {acc!r}, expected a value in [0, 1]")
    return acc


class NetworkSearch:
    """Per-layer searches for a whole network plus the threshold schedule."""

    def __init__(self, traces, cfg: Optional[SearchConfig] = None, n_jobs: int = 1):
        self.cfg = cfg or SearchConfig()
        self.n_jobs = max(1, int(n_jobs))
        if not traces:
            raise ValueError("need at least one quantizable layer")
        self.layers = [
            LayerSearch(tr.pooled_activations(), tr.weights.flat, self.cfg, name=tr.name)
            for tr in traces
        ]
        self.layer_sizes = [tr.weights.size for tr in traces]

    def thresholds(self, thr_w: float, index: int) -> tuple[float, float]:
        layer = self.layers[index]
        tw = thr_w * (self.cfg.first_layer_factor if index == 0 else 1.0)
        return scale_activation_threshold(tw, layer.mean_act, layer.mean_w), tw

    def configure(self, thr_w: float) -> list[LayerQuantResult]:
        def one(idx):
            ta, tw = self.thresholds(thr_w, idx)
            return self.layers[idx].select(ta, tw)

        idxs = range(len(self.layers))
        if self.n_jobs == 1:
            return [one(i) for i in idxs]
        with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
            return list(pool.map(one, idxs))

    def schedule(self):
        k = 0
        while True:
            thr = round(self.cfg.thr_w_init + k * self.cfg.thr_w_step, 12)
            if thr > self.cfg.thr_w_max + 1e-12:
                return
            yield thr
            k += 1


def _point(thr, results, sizes, acc, baseline) -> SweepPoint:
    return SweepPoint(thr, average_bitwidth(results, sizes), acc, baseline - acc)


def search_network(traces, evaluator: Evaluator, cfg: Optional[SearchConfig] = None,
                   baseline_acc: Optional[float] = None, n_jobs: int = 1) -> NetworkQuantReport:
    """Relax the weight threshold while quantized accuracy stays within bound.

    ``evaluator(None)`` must return the float baseline accuracy and
    ``evaluator({layer: LayerQuantResult})`` the quantized accuracy.
    """
    net = NetworkSearch(traces, cfg, n_jobs)
    cfg = net.cfg
    if baseline_acc is None:
        baseline_acc = _evaluate(evaluator, None)
    sizes = net.layer_sizes
    history, best, first = [], None, None
    for thr in net.schedule():
        results = net.configure(thr)
        acc = _evaluate(evaluator, {r.name: r for r in results})
        point = _point(thr, results, sizes, acc, baseline_acc)
        history.append(point)
        if first is None:
            first = (thr, results, acc)
        if point.accuracy_loss < cfg.max_accuracy_loss:
            best = (thr, results, acc)
        else:
            break
    feasible = best is not None
    thr, results, acc = best if feasible else first
    return NetworkQuantReport(
        per_layer=results, layer_sizes=sizes,
        avg_bitwidth=average_bitwidth(results, sizes),
        compression_ratio=compression_ratio(results, sizes),
        compression_ratio_with_sign=compression_ratio(results, sizes, with_sign=True),
        baseline_acc=baseline_acc, quant_acc=acc,
        thr_w_final=thr if feasible else None, feasible=feasible,
        history=history, config=cfg.to_dict(),
    )


def threshold_sweep(traces, evaluator: Evaluator, thresholds: Sequence[float],
                    cfg: Optional[SearchConfig] = None, baseline_acc: Optional[float] = None,
                    n_jobs: int = 1) -> list[SweepPoint]:
    """Accuracy loss and average bitwidth at each weight threshold (no early stop)."""
    net = NetworkSearch(traces, cfg, n_jobs)
    if baseline_acc is None:
        baseline_acc = _evaluate(evaluator, None)
    out = []
    for thr in sorted(thresholds):
        results = net.configure(thr)
        acc = _evaluate(evaluator, {r.name: r for r in results})
        out.append(_point(thr, results, net.layer_sizes, acc, baseline_acc))
    return out
