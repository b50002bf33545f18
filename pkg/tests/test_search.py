import math

import numpy as np
import pytest

from adaptexp.distfit import StartTensor
from adaptexp.errors import ConfigError, DegenerateTensor, EvaluatorFailure, NonPositiveMean
from adaptexp.expquant import params_for_base, quantization_error
from adaptexp.search import (
    LayerQuantResult,
    LayerSearch,
    NetworkQuantReport,
    SearchConfig,
    average_bitwidth,
    compression_ratio,
    derive_partner_params,
    prescale_exponent,
    scale_activation_threshold,
    search_layer,
    search_network,
    search_optimal_base,
    threshold_sweep,
)
from adaptexp.tensor import Tensor
from adaptexp.tensorio import LayerTrace


def _grid_fixture(reps=1):
    # base-2 grid for n=4 plus one magnitude that zeroes the initial offset
    vals = np.concatenate([np.tile(2.0 ** np.arange(-7, 8), reps), [2.0**-7.5]])
    return vals * np.resize([1, -1], vals.size)


def _direction_fixture(alpha=0.9):
    # levels of a base-2.5 codec at n=3; alpha < 1 puts the initial base below 2.5
    b = 2.5
    grid = alpha * b ** np.arange(-3, 4)
    return np.concatenate([np.tile(grid, 5), [alpha * b**-3.5]])


# ---------------------------------------------------------------- SOB

def test_sob_fixed_point():
    t = _grid_fixture()
    res = search_optimal_base(t, 4)
    assert res.direction == 0 and res.steps == 0
    assert res.params == res.init_params
    assert res.params.base == pytest.approx(2.0, rel=1e-12)
    assert res.rmae < 1e-4


def test_sob_direction_increases_toward_better_base():
    t = _direction_fixture()
    res = search_optimal_base(t, 3)
    b0 = res.init_params.base
    assert b0 == pytest.approx((0.9 * 2.5**3) ** (1 / 3), rel=1e-12)
    init_err = quantization_error(t, res.init_params)
    inc = quantization_error(t, params_for_base(t, b0 + 0.01, 3))
    dec = quantization_error(t, params_for_base(t, b0 - 0.01, 3))
    assert inc < init_err and inc < dec
    assert res.direction == 1
    # brute-force scan over the lattice the search walks on
    lattice = b0 + 0.01 * np.arange(0, 30)
    errs = [quantization_error(t, params_for_base(t, b, 3)) for b in lattice]
    assert res.params.base == pytest.approx(lattice[int(np.argmin(errs))], abs=1e-9)
    assert res.params.base == pytest.approx(2.5, abs=0.01)
    assert res.rmae == pytest.approx(min(errs), rel=1e-12)


def test_sob_direction_decreases():
    res = search_optimal_base(_direction_fixture(alpha=1.1), 3)
    assert res.direction == -1
    assert res.params.base < res.init_params.base
    assert res.params.base == pytest.approx(2.5, abs=0.01)


@pytest.mark.parametrize("n", range(3, 8))
def test_sob_never_worse_than_init(n):
    for seed in range(10):
        r = np.random.default_rng(seed)
        t = r.laplace(scale=10 ** r.uniform(-2, 2), size=300)
        res = search_optimal_base(t, n)
        assert res.rmae <= res.init_rmae
        assert res.steps <= 10_000
        assert quantization_error(t, res.params) == pytest.approx(res.rmae, rel=1e-9, abs=1e-12)


def test_sob_step_cap():
    t = _direction_fixture()
    res = search_optimal_base(t, 3, SearchConfig(max_steps=3))
    assert res.steps == 3


def test_sob_prescales_small_tensors():
    assert prescale_exponent(0.3) == 2
    assert prescale_exponent(1.0) == 1
    assert prescale_exponent(5.0) == 0
    t = _direction_fixture() / 64  # max 0.22, lifted above 1 by 2**3
    small = search_optimal_base(t, 3)
    big = search_optimal_base(t * 8, 3)
    assert small.prescale_exp == 3 and big.prescale_exp == 0
    assert small.params.base == big.params.base
    assert small.params.scale == pytest.approx(big.params.scale / 8, rel=1e-12)
    assert small.params.offset == pytest.approx(big.params.offset / 8, rel=1e-12)
    assert small.rmae == pytest.approx(big.rmae, rel=1e-12)


def test_sob_degenerate():
    with pytest.raises(DegenerateTensor):
        search_optimal_base(np.zeros(5), 4)


# ------------------------------------------------------------ partner

def test_partner_consistent_with_sob():
    t = np.random.default_rng(0).laplace(scale=3, size=500)
    res = search_optimal_base(t, 5)
    partner = derive_partner_params(t, res.params.base, 5)
    assert partner.scale == pytest.approx(res.params.scale, rel=1e-12)
    assert partner.offset == pytest.approx(res.params.offset, rel=1e-12)


def test_partner_scales_linearly():
    t = np.random.default_rng(1).laplace(scale=3, size=500)
    p1 = derive_partner_params(t, 1.3, 4)
    p10 = derive_partner_params(10 * t, 1.3, 4)
    assert p10.scale == pytest.approx(10 * p1.scale, rel=1e-12)
    b, m = 1.3, 10 * np.abs(t[t != 0]).min()
    assert p10.offset == pytest.approx(m - p10.scale * b ** (-7 - 0.5), rel=1e-12)


def test_partner_single_magnitude():
    c, b, n = 3.0, 1.5, 4
    partner = derive_partner_params(np.full(20, c), b, n)
    r_min, r_max = -7, 7
    alpha = c / b**r_max
    assert partner.scale == pytest.approx(alpha, rel=1e-12)
    assert partner.rmae == pytest.approx(alpha * (b**r_min - b ** (r_min - 0.5)) / c, rel=1e-9)


def test_partner_base_must_exceed_one():
    with pytest.raises(ConfigError):
        derive_partner_params(np.ones(3), 1.0, 4)


# -------------------------------------------------- activation threshold

def test_activation_threshold():
    assert scale_activation_threshold(0.05, 2.0, 2.0) == 0.05
    assert scale_activation_threshold(0.05, math.e**2, 1.0) == pytest.approx(0.1)
    assert scale_activation_threshold(0.05, math.e, 1.0) == pytest.approx(0.05)
    assert scale_activation_threshold(0.05, 1.0, 10.0) == 0.05
    with pytest.raises(NonPositiveMean):
        scale_activation_threshold(0.05, 0.0, 1.0)


# ------------------------------------------------------------ per layer

def test_layer_infinite_thresholds_pick_three_bits(rng):
    a, w = np.abs(rng.normal(size=200)), rng.normal(size=200)
    r = search_layer(a, w, math.inf, math.inf)
    assert r.bits == 3 and not r.threshold_unmet


def test_layer_zero_thresholds_flagged(rng):
    a, w = np.abs(rng.normal(size=200)), rng.normal(size=200)
    r = search_layer(a, w, 0.0, 0.0)
    assert r.bits == 7 and r.threshold_unmet


def test_layer_grid_needs_four_bits():
    t = _grid_fixture(reps=20)
    r = search_layer(t, t, 1e-6, 1e-6)
    assert r.bits == 4 and not r.threshold_unmet


def test_layer_result_is_minimal_and_shares_base(rng):
    for seed in range(8):
        g = np.random.default_rng(seed)
        a, w = np.abs(g.laplace(size=300)) * 5, g.laplace(size=300) * 0.1
        ls = LayerSearch(a, w)
        r = ls.select(0.08, 0.08)
        assert r.act_params.base == r.w_params.base == r.base
        assert r.act_params.bits == r.w_params.bits == r.bits
        if not r.threshold_unmet:
            assert r.rmae_act <= 0.08 and r.rmae_w <= 0.08
            if r.bits > 3:
                assert not ls.candidate(r.bits - 1).passes(0.08, 0.08)


def test_layer_respects_start_tensor(rng):
    a, w = np.abs(rng.normal(size=300)) * 4, rng.normal(size=300)
    for start in StartTensor:
        c = LayerSearch(a, w, start=start).candidate(4)
        lead = c.act_params if start is StartTensor.ACTIVATIONS else c.w_params
        assert lead == c.base_search.params


def test_layer_degenerate():
    with pytest.raises(DegenerateTensor):
        LayerSearch(np.zeros(4), np.ones(4))


def test_layer_result_roundtrip(rng):
    r = search_layer(np.abs(rng.normal(size=100)) + 0.1, rng.normal(size=100), 0.1, 0.1, name="x")
    assert LayerQuantResult.from_dict(r.to_dict()) == r


# ---------------------------------------------------------- compression

@pytest.mark.parametrize("avg,expected,tol", [(3.05, 0.6186, 0.001), (5.65, 0.293, 0.005), (5.78, 0.277, 0.005)])
def test_compression_published_rows(avg, expected, tol):
    assert compression_ratio([avg], [1]) == pytest.approx(expected, abs=tol)


def test_compression_arithmetic():
    assert compression_ratio([8, 8], [3, 4]) == 0.0
    assert average_bitwidth([3, 7], [10, 10]) == 5.0
    assert compression_ratio([3, 7], [10, 10]) == pytest.approx(0.375)
    assert compression_ratio([3, 7], [10, 10], with_sign=True) == pytest.approx(0.25)
    assert average_bitwidth([3, 7], [30, 10]) == 4.0


# ------------------------------------------------------------- network

def _traces(seed=0, layers=3):
    g = np.random.default_rng(seed)
    return [
        LayerTrace(f"l{i}", "fc", Tensor(g.laplace(size=(8, 16)) * 0.2),
                   [Tensor(np.abs(g.laplace(size=16)) * 3) for _ in range(4)])
        for i in range(layers)
    ]


def _first_layer(traces):
    return traces[0].pooled_activations(), traces[0].weights.flat


def test_network_constant_evaluator_runs_to_cap():
    cfg = SearchConfig(thr_w_max=0.5)
    report = search_network(_traces(), lambda r: 0.9, cfg)
    assert report.feasible
    assert report.thr_w_final == pytest.approx(0.5)
    assert len(report.history) == 50
    # the first layer's threshold tops out at a tenth of the cap
    assert all(r.bits == 3 for r in report.per_layer[1:])
    first = report.per_layer[0]
    assert first.thr_w == pytest.approx(0.05)
    assert first.bits == LayerSearch(*_first_layer(_traces())).select(first.thr_act, 0.05).bits
    bits = [p.avg_bitwidth for p in report.history]
    assert all(a >= b for a, b in zip(bits, bits[1:]))


def test_network_failing_evaluator_reports_infeasible():
    report = search_network(_traces(), lambda r: 0.9 if r is None else 0.0)
    assert not report.feasible
    assert report.thr_w_final is None
    assert len(report.history) == 1


def test_network_first_iteration_only():
    calls = []

    def ev(r):
        if r is None:
            return 0.9
        calls.append(1)
        return 0.9 if len(calls) == 1 else 0.5

    report = search_network(_traces(), ev)
    assert report.feasible and report.thr_w_final == pytest.approx(0.01)
    assert len(report.history) == 2


def test_network_first_layer_tightened():
    report = search_network(_traces(), lambda r: 0.9, SearchConfig(thr_w_max=0.05))
    first, second = report.per_layer[0], report.per_layer[1]
    assert first.thr_w == pytest.approx(0.1 * second.thr_w)


def test_network_evaluator_errors():
    def boom(r):
        raise RuntimeError("bad")

    with pytest.raises(EvaluatorFailure):
        search_network(_traces(), boom)
    with pytest.raises(EvaluatorFailure):
        search_network(_traces(), lambda r: 1.5)


def test_network_parallel_matches_serial():
    cfg = SearchConfig(thr_w_max=0.1)
    a = search_network(_traces(), lambda r: 0.9, cfg, n_jobs=1)
    b = search_network(_traces(), lambda r: 0.9, cfg, n_jobs=4)
    assert a.to_dict() == b.to_dict()


def test_report_roundtrip():
    report = search_network(_traces(), lambda r: 0.9, SearchConfig(thr_w_max=0.03))
    again = NetworkQuantReport.from_dict(report.to_dict())
    assert again.to_dict() == report.to_dict()


def test_sweep_bitwidth_monotone():
    pts = threshold_sweep(_traces(), lambda r: 0.9, [0.3, 0.01, 0.1], baseline_acc=0.9)
    assert [p.thr_w for p in pts] == [0.01, 0.1, 0.3]
    assert pts[0].avg_bitwidth >= pts[1].avg_bitwidth >= pts[2].avg_bitwidth


def test_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig.from_dict({"thr_w_init": 0.01, "nope": 1})
    with pytest.raises(ConfigError):
        SearchConfig(n_min=5, n_max=4)
    with pytest.raises(ConfigError):
        SearchConfig(n_max=8)
    assert SearchConfig.from_dict(SearchConfig().to_dict()) == SearchConfig()
