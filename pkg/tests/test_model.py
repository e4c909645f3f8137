import json
import math

import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import norm, poisson

from fitfaas import errors
from fitfaas.model import (
    RATE_FLOOR,
    DataSet,
    asimov_data,
    build_model,
    expected_rates,
    gradient,
    nll,
    observed_data,
)
from fitfaas.workspace import parse_workspace

from builders import counting, counting_doc, doc, normfactor, random_point, random_rich_doc


def ws_from(d):
    return parse_workspace(json.dumps(d))


def one_bin(samples, n=50.0, parameters=()):
    return ws_from(doc([{"name": "SR", "samples": samples}], {"SR": [n]}, parameters=parameters))


def test_parameter_ordering_and_poi():
    ws = one_bin(
        [
            {"name": "signal", "data": [10], "modifiers": [normfactor()]},
            {"name": "bkg", "data": [50], "modifiers": [{"name": "stat_SR", "type": "staterror", "data": [5]}]},
        ]
    )
    model = build_model(ws)
    assert [p.name for p in model.parameters] == ["mu", "stat_SR"]
    assert model.dimension == 2
    assert model.poi_index == 0


def test_shared_normsys():
    jes = {"name": "JES", "type": "normsys", "data": {"hi": 1.1, "lo": 0.9}}
    ws = one_bin(
        [
            {"name": "signal", "data": [10], "modifiers": [normfactor(), jes]},
            {"name": "bkg", "data": [50], "modifiers": [jes]},
        ]
    )
    model = build_model(ws)
    assert [p.name for p in model.parameters] == ["JES", "mu"]
    assert model.dimension == 2


def test_conflicting_modifier():
    ws = one_bin(
        [
            {"name": "signal", "data": [10], "modifiers": [normfactor()]},
            {"name": "bkg", "data": [50], "modifiers": [{"name": "mu", "type": "histosys", "data": {"hi_data": [55], "lo_data": [45]}}]},
        ]
    )
    with pytest.raises(errors.ConflictingModifier):
        build_model(ws)


def test_unknown_measurement_and_poi():
    ws = counting()
    with pytest.raises(errors.UnknownMeasurement):
        build_model(ws, "nope")
    bkg_only = one_bin([{"name": "bkg", "data": [50], "modifiers": []}])
    with pytest.raises(errors.UnknownPOI):
        build_model(bkg_only)
    model = build_model(bkg_only, allow_missing_poi=True)
    assert model.poi_index is None and model.dimension == 0


def test_lumi_requires_sigma():
    samples = [{"name": "signal", "data": [10], "modifiers": [normfactor(), {"name": "lumi", "type": "lumi", "data": None}]}]
    with pytest.raises(errors.InvalidParameterConfig):
        build_model(one_bin(samples))
    model = build_model(one_bin(samples, parameters=[{"name": "lumi", "auxdata": [1.0], "sigmas": [0.02]}]))
    assert model.parameter("lumi").constraint.widths == (0.02,)


def test_overrides_applied_last():
    params = [{"name": "mu", "inits": [2.0], "bounds": [[-1.0, 5.0]], "fixed": True}]
    model = build_model(ws_from(counting_doc() | {"measurements": [{"name": "m", "config": {"poi": "mu", "parameters": params}}]}))
    par = model.parameter("mu")
    assert par.init == (2.0,) and par.bounds == ((-1.0, 5.0),) and par.fixed
    assert model.fixed_mask.tolist() == [True]


@pytest.mark.parametrize(
    "params",
    [
        [{"name": "ghost", "fixed": True}],
        [{"name": "mu", "inits": [20.0]}],
        [{"name": "mu", "inits": [1.0, 2.0]}],
    ],
)
def test_bad_overrides(params):
    d = counting_doc()
    d["measurements"][0]["config"]["parameters"] = params
    with pytest.raises(errors.InvalidParameterConfig):
        build_model(ws_from(d))


def test_expected_rates_linear_mixture():
    model = build_model(counting(b=50, s=10))
    assert expected_rates(model, model.point(mu=1.0))[0].tolist() == [60.0]
    assert expected_rates(model, model.point(mu=0.0))[0].tolist() == [50.0]


def test_normsys_endpoints_exact():
    ws = one_bin([{"name": "bkg", "data": [1.0], "modifiers": [normfactor(), {"name": "a", "type": "normsys", "data": {"hi": 1.1, "lo": 0.9}}]}])
    model = build_model(ws)
    assert expected_rates(model, model.point(a=1.0))[0][0] == 1.1
    assert expected_rates(model, model.point(a=-1.0))[0][0] == 0.9
    assert expected_rates(model, model.point(a=0.0))[0][0] == 1.0


def test_histosys_piecewise_linear():
    ws = one_bin([{"name": "bkg", "data": [50.0], "modifiers": [normfactor(), {"name": "a", "type": "histosys", "data": {"hi_data": [55.0], "lo_data": [48.0]}}]}])
    model = build_model(ws)
    assert expected_rates(model, model.point(a=0.5))[0][0] == pytest.approx(52.5, abs=1e-12)
    assert expected_rates(model, model.point(a=-0.5))[0][0] == pytest.approx(49.0, abs=1e-12)


def test_nll_matches_poisson_logpmf():
    model = build_model(counting(b=50, s=10, n=50))
    data = observed_data(model, counting(b=50, s=10, n=50))
    # independent oracle: log-pmf via log-gamma
    oracle = -(50 * math.log(60.0) - 60.0 - math.lgamma(51.0))
    assert nll(model, model.point(mu=1.0), data) == pytest.approx(oracle, rel=1e-12)
    assert oracle == pytest.approx(-poisson.logpmf(50, 60), rel=1e-12)


def test_normal_constraint_at_center_adds_log_sqrt_2pi():
    base = build_model(counting(n=55))
    with_np = build_model(counting(n=55, sigma_b=5.0))
    d0 = observed_data(base, counting(n=55))
    d1 = observed_data(with_np, counting(n=55, sigma_b=5.0))
    diff = nll(with_np, with_np.point(mu=1.3), d1) - nll(base, base.point(mu=1.3), d0)
    assert diff == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)


def test_nll_invariant_under_channel_permutation():
    d = random_rich_doc(np.random.default_rng(3), n_channels=3)
    perm = json.loads(json.dumps(d))
    perm["channels"].reverse()
    m1, m2 = build_model(ws_from(d)), build_model(ws_from(perm))
    x = random_point(m1, np.random.default_rng(4))
    assert m1.labels == m2.labels
    v1 = nll(m1, x, observed_data(m1, ws_from(d)))
    v2 = nll(m2, x, observed_data(m2, ws_from(perm)))
    assert v1 == pytest.approx(v2, rel=1e-13)


def test_gradient_zero_at_analytic_mle():
    b, s, n = 50.0, 10.0, 57.0
    model = build_model(counting(b=b, s=s, n=n))
    data = observed_data(model, counting(b=b, s=s, n=n))
    g = gradient(model, model.point(mu=(n - b) / s), data)
    assert abs(g[0]) < 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        d = random_rich_doc(rng)
        model = build_model(ws_from(d))
        data = observed_data(model, ws_from(d))
        x = random_point(model, rng)
        g = gradient(model, x, data)
        for i in np.flatnonzero(~model.fixed_mask):
            h = 1e-6 * max(1.0, abs(x[i]))
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            fd = (nll(model, up, data) - nll(model, dn, data)) / (2 * h)
            assert abs(fd - g[i]) <= 1e-5 * max(abs(fd), abs(g[i]))


def test_gradient_fixed_component_is_zero():
    d = counting_doc(sigma_b=5.0)
    d["measurements"][0]["config"]["parameters"] = [{"name": "bkg_norm", "fixed": True, "inits": [0.5]}]
    model = build_model(ws_from(d))
    data = observed_data(model, ws_from(d))
    g = gradient(model, model.point(mu=2.0), data)
    assert g[model.par_slices["bkg_norm"]].tolist() == [0.0]
    assert g[model.par_slices["mu"]][0] != 0.0


def test_dimension_mismatch():
    model = build_model(counting())
    with pytest.raises(errors.DimensionMismatch):
        expected_rates(model, [1.0, 2.0])
    with pytest.raises(errors.DimensionMismatch):
        nll(model, model.init, DataSet([1.0, 2.0], []))


def test_asimov_counting():
    model = build_model(counting(b=50, s=10))
    assert asimov_data(model, model.point(mu=1.0)).main.tolist() == [60.0]


def test_asimov_zero_gradient():
    rng = np.random.default_rng(5)
    for _ in range(5):
        model = build_model(ws_from(random_rich_doc(rng)))
        x = random_point(model, rng)
        g = gradient(model, x, asimov_data(model, x))
        assert np.max(np.abs(g)) < 1e-9


def test_asimov_at_init_matches_expectation():
    model = build_model(ws_from(random_rich_doc(np.random.default_rng(2))))
    asimov = asimov_data(model, model.init)
    assert np.array_equal(asimov.main, model.expected_flat(model.init))
    assert np.array_equal(asimov.aux, model.aux_observations)


def test_staterror_width_combined_in_quadrature():
    ws = one_bin(
        [
            {"name": "a", "data": [30.0], "modifiers": [normfactor(), {"name": "st", "type": "staterror", "data": [3.0]}]},
            {"name": "b", "data": [10.0], "modifiers": [{"name": "st", "type": "staterror", "data": [4.0]}]},
        ]
    )
    model = build_model(ws)
    assert model.parameter("st").constraint.widths[0] == pytest.approx(5.0 / 40.0)


def test_shapesys_aux_counts_and_pinning():
    ws = ws_from(
        doc(
            [{"name": "SR", "samples": [
                {"name": "s", "data": [5.0, 5.0], "modifiers": [normfactor()]},
                {"name": "b", "data": [100.0, 50.0], "modifiers": [{"name": "ss", "type": "shapesys", "data": [10.0, 0.0]}]},
            ]}],
            {"SR": [100, 50]},
        )
    )
    model = build_model(ws)
    par = model.parameter("ss")
    assert par.constraint.aux_counts[0] == pytest.approx(100.0)
    assert par.pinned == (False, True)
    assert model.n_aux == 1
    assert model.fixed_mask[model.par_slices["ss"]].tolist() == [False, True]


def test_monotone_in_normfactor():
    model = build_model(ws_from(random_rich_doc(np.random.default_rng(9))))
    x = random_point(model, np.random.default_rng(10))
    lo = model.expected_flat(x)
    x2 = x.copy()
    x2[model.poi_index] += 0.1
    assert np.all(model.expected_flat(x2) > lo)


def test_interpolation_continuous_at_zero():
    ws = one_bin(
        [{"name": "b", "data": [50.0], "modifiers": [
            normfactor(),
            {"name": "n", "type": "normsys", "data": {"hi": 1.3, "lo": 0.6}},
            {"name": "h", "type": "histosys", "data": {"hi_data": [58.0], "lo_data": [41.0]}},
        ]}]
    )
    model = build_model(ws)
    for name in ("n", "h"):
        left = model.expected_flat(model.point(**{name: -1e-15}))[0]
        right = model.expected_flat(model.point(**{name: 1e-15}))[0]
        at0 = model.expected_flat(model.point(**{name: 0.0}))[0]
        assert abs(left - right) < 1e-12 and abs(at0 - right) < 1e-12


def test_nll_decomposition():
    rng = np.random.default_rng(21)
    d = random_rich_doc(rng)
    ws = ws_from(d)
    model = build_model(ws)
    data = observed_data(model, ws)
    x = random_point(model, rng)
    lam = model.expected_flat(x)
    n = data.main
    main_only = float(np.sum(lam - n * np.log(lam) + gammaln(n + 1)))
    at = x[model.aux_index]
    normal = ~model.aux_poisson
    constraint = float(-np.sum(norm.logpdf(data.aux[normal], loc=at[normal], scale=model.aux_width[normal])))
    mean = at[model.aux_poisson] * model.aux_tau[model.aux_poisson]
    a = data.aux[model.aux_poisson]
    constraint += float(np.sum(mean - a * np.log(mean) + gammaln(a + 1)))
    assert nll(model, x, data) == pytest.approx(main_only + constraint, rel=1e-12)
    # same workspace with every constrained modifier stripped: only the main term survives
    bare = json.loads(json.dumps(d))
    for ch in bare["channels"]:
        for s in ch["samples"]:
            s["modifiers"] = [m for m in s["modifiers"] if m["type"] == "normfactor"]
    bare["measurements"][0]["config"]["parameters"] = []
    bare_model = build_model(ws_from(bare))
    bare_data = DataSet(n, [])
    bare_rates = bare_model.expected_flat(bare_model.init)
    expected = float(np.sum(bare_rates - n * np.log(bare_rates) + gammaln(n + 1)))
    assert nll(bare_model, bare_model.init, bare_data) == pytest.approx(expected, rel=1e-12)


def test_rate_clamp():
    ws = one_bin([{"name": "b", "data": [10.0], "modifiers": [normfactor(), {"name": "h", "type": "histosys", "data": {"hi_data": [30.0], "lo_data": [0.0]}}]}])
    model = build_model(ws)
    for alpha in np.linspace(-5, 5, 41):
        for mu in (0.0, 0.5, 10.0):
            assert model.expected_flat(model.point(h=alpha, mu=mu)).min() >= RATE_FLOOR
    data = DataSet([3.0], [0.0])
    assert math.isfinite(nll(model, model.point(h=-5.0), data))
