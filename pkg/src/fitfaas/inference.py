"""Maximum-likelihood fits and CLs hypothesis tests on a compiled :class:`Model`.

The test statistic is the bounded profile likelihood ratio (``qtilde``):
the unconditional fit keeps the POI non-negative, and the statistic is
zero when the fitted POI exceeds the tested value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from . import errors
from .model import DataSet, Model, asimov_data

__all__ = [
    "GRAD_TOL",
    "MAX_ITER",
    "FTOL",
    "SIGMA_BAND",
    "FitResult",
    "HypotestResult",
    "fit",
    "profile_tstat",
    "hypotest_asymptotic",
    "hypotest_toys",
    "fit_uncertainties",
    "toy_generator",
]

GRAD_TOL = 1e-6
MAX_ITER = 500
FTOL = 1e-10
SIGMA_BAND = (-2, -1, 0, 1, 2)
_POLISH_STEPS = 30


@dataclass(frozen=True)
class FitResult:
    point: np.ndarray
    nll_min: float
    converged: bool
    n_evaluations: int
    termination_reason: str  # tolerance | max_iter | line_search_failure
    gradient_norm: float = 0.0

    def parameters(self, model: Model) -> dict[str, list[float]]:
        return {p.name: self.point[model.par_slices[p.name]].tolist() for p in model.parameters}


@dataclass(frozen=True)
class HypotestResult:
    cls_obs: float
    clsb_obs: float
    clb_obs: float
    cls_exp: tuple[float, ...]
    method: str
    mu_test: float
    n_toys: int | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cls_exp"] = list(self.cls_exp)
        return out


def _projected_gradient(x, g, lower, upper, free):
    pg = np.clip(x - g, lower, upper) - x
    return float(np.max(np.abs(pg[free]))) if free.any() else 0.0


_LEFT_OF_ZERO = np.nextafter(0.0, -1.0)
_MAX_ORTHANT_ROUNDS = 20


class _Objective:
    """Counts evaluations and caches the last (point, value, gradient).

    ``left`` marks kinked components confined to alpha <= 0; at exactly zero
    they are evaluated an ulp to the left so the gradient is the left-hand one.
    """

    def __init__(self, model, data, base, free):
        self.model = model
        self.data = data
        self.base = base
        self.free = free
        self.left = np.zeros(int(free.sum()), bool)
        self.n_evaluations = 0

    def full(self, xf):
        x = self.base.copy()
        x[self.free] = xf
        return x

    def __call__(self, xf):
        self.n_evaluations += 1
        shift = self.left & (xf == 0.0)
        if shift.any():
            xf = np.where(shift, _LEFT_OF_ZERO, xf)
        value, grad = self.model.nll_and_grad(self.full(xf), self.data)
        if not math.isfinite(value):
            raise errors.NonFiniteObjective(f"objective is {value}")
        return value, grad[self.free]


def _fd_hessian(obj: _Objective, xf, lo, hi):
    n = len(xf)
    hess = np.empty((n, n))
    for j in range(n):
        h = 1e-5 * max(1.0, abs(xf[j]))
        up = xf.copy()
        dn = xf.copy()
        up[j] = min(xf[j] + h, hi[j])
        dn[j] = max(xf[j] - h, lo[j])
        width = up[j] - dn[j]
        if width <= 0:
            hess[:, j] = 0.0
            hess[j, j] = 1.0
            continue
        hess[:, j] = (obj(up)[1] - obj(dn)[1]) / width
    return 0.5 * (hess + hess.T)


def _backtrack(obj: _Objective, xf, value, g, step, lo, hi):
    """Halve ``step`` until the objective drops; ``None`` if it never does.

    Near the optimum the change in value falls below rounding noise, so a
    step that keeps the value within a few ulps and shrinks the projected
    gradient is accepted too.
    """
    everywhere = np.ones(len(xf), bool)
    pg = _projected_gradient(xf, g, lo, hi, everywhere)
    noise = 4.0 * np.finfo(float).eps * max(1.0, abs(value))
    t = 1.0
    for _ in range(30):
        trial = np.clip(xf + t * step, lo, hi)
        tv, tg = obj(trial)
        if tv < value or (tv <= value + noise and _projected_gradient(trial, tg, lo, hi, everywhere) < pg):
            return trial, tv, tg
        t *= 0.5
    return None


def _polish(obj: _Objective, xf, lo, hi, grad_tol):
    """Projected Newton iterations with a finite-difference Hessian.

    Returns the final point with the objective value and gradient there.
    """
    value, g = obj(xf)
    all_free = np.ones(len(xf), bool)
    for _ in range(_POLISH_STEPS):
        if _projected_gradient(xf, g, lo, hi, all_free) <= grad_tol:
            break
        active = ~(((xf <= lo) & (g > 0)) | ((xf >= hi) & (g < 0)))
        if not active.any():
            break
        hess = _fd_hessian(obj, xf, lo, hi)[np.ix_(active, active)]
        diag = np.maximum(np.abs(np.diag(hess)), 1e-12)
        try:
            np.linalg.cholesky(hess)
            newton = -np.linalg.solve(hess, g[active])
        except np.linalg.LinAlgError:
            newton = None
        found = None
        # Newton first; a diagonally scaled gradient step if Newton makes no progress
        for direction in (newton, -g[active] / diag):
            if direction is None:
                continue
            step = np.zeros_like(xf)
            step[active] = direction
            found = _backtrack(obj, xf, value, g, step, lo, hi)
            if found is not None:
                break
        if found is None:
            break
        xf, value, g = found
    return xf, value, g


def _orthant_bounds(lo, hi, kink, left):
    blo, bhi = lo.copy(), hi.copy()
    blo[kink & ~left] = 0.0
    bhi[kink & left] = 0.0
    return blo, bhi


def _across_kink(obj: _Objective, xf, kink):
    """Slope seen when leaving each kinked component at zero towards the other side.

    Returns the descent rate available by crossing (0 where crossing does not
    help or the component is not at zero).
    """
    at = kink & (xf == 0.0)
    rate = np.zeros(len(xf))
    if not at.any():
        return rate
    saved = obj.left.copy()
    obj.left = np.where(at, ~saved, saved)
    g_other = obj(xf)[1]
    obj.left = saved
    # left side descends if its slope is positive; right side if negative
    rate[at & ~saved] = np.maximum(g_other[at & ~saved], 0.0)
    rate[at & saved] = np.maximum(-g_other[at & saved], 0.0)
    return rate


def fit(
    model: Model,
    data: DataSet,
    fixed_overrides: dict | None = None,
    init=None,
    bounds: dict | None = None,
    grad_tol: float = GRAD_TOL,
    raise_on_failure: bool = True,
) -> FitResult:
    """Minimise the NLL over non-fixed components inside their bounds.

    A first bounded quasi-Newton (L-BFGS-B) pass runs over the full box.
    The interpolated responses change slope at alpha = 0, so each such
    component is then confined to the side of zero it landed on, where the
    NLL is smooth, and L-BFGS-B plus projected Newton polishing finish
    there. A component stuck at zero whose other side still descends is
    switched over and the fit repeated.

    Args:
        fixed_overrides: ``{name: value}`` parameters held at the given value.
        init: starting point (defaults to the model's init).
        bounds: ``{name: (lo, hi)}`` replacing the model bounds for this fit.

    Raises:
        DidNotConverge: carries the best :class:`FitResult` found as ``.result``.
    """
    x0 = np.array(model.init if init is None else init, dtype=float)
    fixed = model.fixed_mask.copy()
    lower = model.lower.copy()
    upper = model.upper.copy()
    for name, (lo, hi) in (bounds or {}).items():
        if name not in model.par_slices:
            raise errors.UnknownParameter(f"no parameter named {name!r}")
        lower[model.par_slices[name]] = lo
        upper[model.par_slices[name]] = hi
    for name, value in (fixed_overrides or {}).items():
        if name not in model.par_slices:
            raise errors.UnknownParameter(f"no parameter named {name!r}")
        sl = model.par_slices[name]
        x0[sl] = value
        fixed[sl] = True
    free = ~fixed
    x0[free] = np.clip(x0[free], lower[free], upper[free])

    obj = _Objective(model, data, x0, free)
    if not free.any():
        value = obj(np.empty(0))[0]
        return FitResult(x0, value, True, obj.n_evaluations, "tolerance", 0.0)

    lo, hi = lower[free], upper[free]
    options = {"maxiter": MAX_ITER, "gtol": grad_tol, "ftol": FTOL, "maxcor": 20}
    # the NLL is continuous across the kinks, so an unrestricted pass gets close cheaply
    res = minimize(obj, x0[free], jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)), options=options)
    hit_max_iter = res.nit >= MAX_ITER
    xf = np.clip(res.x, lo, hi)
    # only kinks strictly inside the bounds matter
    kink = model.kink_mask[free] & (lo < 0.0) & (hi > 0.0)
    obj.left = kink & (xf < 0.0)
    obj.left |= _across_kink(obj, xf, kink) > 0.0
    for _ in range(_MAX_ORTHANT_ROUNDS):
        blo, bhi = _orthant_bounds(lo, hi, kink, obj.left)
        res = minimize(obj, np.clip(xf, blo, bhi), jac=True, method="L-BFGS-B", bounds=list(zip(blo, bhi)), options=options)
        hit_max_iter |= res.nit >= MAX_ITER
        xf, value, grad = _polish(obj, np.clip(res.x, blo, bhi), blo, bhi, grad_tol)
        crossing = _across_kink(obj, xf, kink)
        flip = crossing > grad_tol
        if not flip.any():
            break
        obj.left ^= flip
    gnorm = max(_projected_gradient(xf, grad, blo, bhi, np.ones(len(xf), bool)), float(np.max(crossing, initial=0.0)))
    converged = bool(gnorm <= grad_tol)
    if converged:
        reason = "tolerance"
    elif hit_max_iter:
        reason = "max_iter"
    else:
        reason = "line_search_failure"
    result = FitResult(obj.full(xf), float(value), converged, obj.n_evaluations, reason, gnorm)
    if not converged and raise_on_failure:
        raise errors.DidNotConverge(
            f"fit stopped ({reason}) with projected gradient {gnorm:.3g} > {grad_tol:g}", result=result
        )
    return result


def _require_poi(model: Model) -> str:
    if model.poi_index is None:
        raise errors.UnknownPOI(f"model has no POI parameter {model.poi_name!r}")
    return model.poi_name


def _global_fit(model: Model, data: DataSet) -> FitResult:
    poi = _require_poi(model)
    lo, hi = model.lower[model.poi_index], model.upper[model.poi_index]
    return fit(model, data, bounds={poi: (max(0.0, lo), hi)})


def profile_tstat(model: Model, data: DataSet, mu: float, _fits=None) -> float:
    """Bounded profile likelihood ratio ``qtilde`` at POI value ``mu`` (always >= 0)."""
    poi = _require_poi(model)
    best = _global_fit(model, data)
    if _fits is not None:
        _fits.append(best)
    if best.point[model.poi_index] > mu:
        return 0.0
    start = best.point.copy()
    start[model.poi_index] = mu
    cond = fit(model, data, fixed_overrides={poi: mu}, init=start)
    return max(0.0, 2.0 * (cond.nll_min - best.nll_min))


def _asimov_sqrt_q(model: Model, data: DataSet, mu: float) -> float:
    background = fit(model, data, fixed_overrides={model.poi_name: 0.0})
    q_asimov = profile_tstat(model, asimov_data(model, background.point), mu)
    if not q_asimov > 0.0:
        raise errors.DegenerateAsimov(
            f"qtilde on the background-only Asimov data is {q_asimov}; signal indistinguishable from background"
        )
    return math.sqrt(q_asimov)


def _asymptotic_pvalues(sqrt_q: float, sqrt_qa: float):
    """(clsb, clb) for qtilde in its two regimes split at q = qA."""
    if sqrt_q <= sqrt_qa:
        stat = sqrt_q - sqrt_qa
    else:
        stat = (sqrt_q * sqrt_q - sqrt_qa * sqrt_qa) / (2.0 * sqrt_qa)
    clsb = float(norm.cdf(-(stat + sqrt_qa)))
    clb = float(norm.cdf(-stat))
    return clsb, clb


def hypotest_asymptotic(model: Model, data: DataSet, mu: float) -> HypotestResult:
    """CLs at ``mu`` from the asymptotic ``qtilde`` distributions.

    The width of the POI estimator comes from the background-only Asimov
    dataset built at the conditional (POI = 0) fit to ``data``.

    Raises:
        DegenerateAsimov: the Asimov test statistic vanishes.
    """
    _require_poi(model)
    sqrt_q = math.sqrt(profile_tstat(model, data, mu))
    sqrt_qa = _asimov_sqrt_q(model, data, mu)
    clsb, clb = _asymptotic_pvalues(sqrt_q, sqrt_qa)
    # N-sigma quantile of the background-only estimator; CLs rises with N
    expected = tuple(float(norm.cdf(n - sqrt_qa) / norm.cdf(n)) for n in SIGMA_BAND)
    return HypotestResult(
        cls_obs=clsb / clb,
        clsb_obs=clsb,
        clb_obs=clb,
        cls_exp=expected,
        method="asymptotic",
        mu_test=float(mu),
    )


def toy_generator(seed: int, toy_index: int, hypothesis: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, toy, hypothesis); order-independent."""
    counter = np.array([0, toy_index, hypothesis, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=seed, counter=counter))


def _sample_toy(model: Model, lam, aux_mean, rng) -> DataSet:
    main = rng.poisson(lam).astype(float)
    if model.n_aux:
        aux = np.where(
            model.aux_poisson,
            rng.poisson(np.where(model.aux_poisson, aux_mean, 0.0)),
            aux_mean + model.aux_width * rng.standard_normal(model.n_aux),
        )
    else:
        aux = np.empty(0)
    return DataSet(main, aux)


def _toy_statistics(model, mu, point, n_toys, seed, hypothesis, cache):
    lam = model.expected_flat(point)
    at = point[model.aux_index]
    aux_mean = np.where(model.aux_poisson, at * model.aux_tau, at)
    out = np.empty(n_toys)
    for i in range(n_toys):
        toy = _sample_toy(model, lam, aux_mean, toy_generator(seed, i, hypothesis))
        key = toy.key()
        q = cache.get(key)
        if q is None:
            q = cache[key] = profile_tstat(model, toy, mu)
        out[i] = q
    return out


def _tail(stats, threshold):
    # relative slack absorbs optimizer round-off between identical datasets
    return float(np.mean(stats >= threshold - 1e-9 * max(1.0, abs(threshold))))


def hypotest_toys(model: Model, data: DataSet, mu: float, n_toys: int, seed: int) -> HypotestResult:
    """CLs at ``mu`` from pseudo-experiments.

    Toys are thrown under signal+background (POI = ``mu``) and background-only
    (POI = 0) with nuisances at their conditional MLEs on ``data``.
    Datasets that repeat (common for low-count models) reuse the cached
    test statistic. The result depends only on the inputs and ``seed``.

    Raises:
        ZeroDenominator: no background-only toy reaches the observed statistic.
    """
    poi = _require_poi(model)
    if n_toys < 100:
        raise ValueError("n_toys must be at least 100")
    q_obs = profile_tstat(model, data, mu)
    sb_point = fit(model, data, fixed_overrides={poi: mu}).point
    b_point = fit(model, data, fixed_overrides={poi: 0.0}).point
    cache: dict[bytes, float] = {}
    q_sb = _toy_statistics(model, mu, sb_point, n_toys, seed, 0, cache)
    q_b = _toy_statistics(model, mu, b_point, n_toys, seed, 1, cache)

    clsb = _tail(q_sb, q_obs)
    clb = _tail(q_b, q_obs)
    if clb == 0.0:
        raise errors.ZeroDenominator(f"no background-only toy reached q_obs={q_obs:.6g}")
    expected = []
    for n in SIGMA_BAND:
        # N-sigma background-only fluctuation of the estimator = upper tail of qtilde
        q_n = float(np.quantile(q_b, norm.cdf(-n)))
        b_tail = _tail(q_b, q_n)
        expected.append(_tail(q_sb, q_n) / b_tail if b_tail > 0 else 1.0)
    return HypotestResult(
        cls_obs=clsb / clb,
        clsb_obs=clsb,
        clb_obs=clb,
        cls_exp=tuple(expected),
        method="toys",
        mu_test=float(mu),
        n_toys=int(n_toys),
    )


def fit_uncertainties(model: Model, data: DataSet, result: FitResult) -> dict[str, float]:
    """Square roots of the diagonal of the inverse finite-difference Hessian.

    Returns ``{component label: sigma}`` for non-fixed components only.

    Raises:
        SingularHessian: the Hessian is not positive definite.
    """
    if not result.converged:
        raise errors.DidNotConverge("uncertainties need a converged fit", result=result)
    free = ~model.fixed_mask
    x = np.asarray(result.point, dtype=float)
    idx = np.flatnonzero(free)
    n = len(idx)
    hess = np.empty((n, n))
    for col, j in enumerate(idx):
        h = 1e-5 * max(1.0, abs(x[j]))
        up = x.copy()
        dn = x.copy()
        up[j] += h
        dn[j] -= h
        gu = model.nll_and_grad(up, data)[1]
        gd = model.nll_and_grad(dn, data)[1]
        hess[:, col] = (gu[idx] - gd[idx]) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    try:
        np.linalg.cholesky(hess)
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise errors.SingularHessian(f"Hessian not positive definite: {exc}") from exc
    diag = np.diag(cov)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise errors.SingularHessian("non-positive variance on the diagonal")
    return {model.labels[j]: float(math.sqrt(diag[col])) for col, j in enumerate(idx)}
