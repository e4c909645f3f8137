"""Compile a workspace into an evaluable binned likelihood.

Expected rate per bin::

    rate = sum over samples of (nominal + histosys deltas) * product of multiplicative factors

clamped below at ``RATE_FLOOR``. The negative log-likelihood keeps all
normalisation constants (log-gamma terms) so its value is absolute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, xlogy

from . import errors
from .workspace import HistoSysData, NormSysData, Workspace

__all__ = [
    "RATE_FLOOR",
    "Constraint",
    "Parameter",
    "DataSet",
    "Model",
    "build_model",
    "expected_rates",
    "nll",
    "gradient",
    "asimov_data",
    "observed_data",
]

RATE_FLOOR = 1e-10
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# modifier kinds allowed to share one parameter name
_FAMILY = {
    "normfactor": "normfactor",
    "lumi": "lumi",
    "normsys": "alpha",
    "histosys": "alpha",
    "shapesys": "shapesys",
    "staterror": "staterror",
}


@dataclass(frozen=True)
class Constraint:
    kind: str = "none"  # none | normal | poisson_gamma
    centers: tuple[float, ...] = ()
    widths: tuple[float, ...] = ()
    aux_counts: tuple[float, ...] = ()


@dataclass(frozen=True)
class Parameter:
    name: str
    n_components: int
    init: tuple[float, ...]
    bounds: tuple[tuple[float, float], ...]
    fixed: bool = False
    constraint: Constraint = field(default_factory=Constraint)
    # components carrying no uncertainty: held at init and left unconstrained
    pinned: tuple[bool, ...] = ()
    kind: str = ""

    def component_labels(self) -> list[str]:
        if self.n_components == 1:
            return [self.name]
        return [f"{self.name}[{i}]" for i in range(self.n_components)]


class DataSet:
    """Observed main-measurement counts (flattened over channels) plus auxiliary data."""

    __slots__ = ("main", "aux", "_constant")

    def __init__(self, main, aux):
        self.main = np.array(main, dtype=float)
        self.aux = np.array(aux, dtype=float)
        self.main.setflags(write=False)
        self.aux.setflags(write=False)
        self._constant = None

    def constant(self, poisson_aux_mask):
        """Data-only part of the Poisson terms: sum of n - n ln n + lnGamma(n+1)."""
        if self._constant is None:
            counts = np.concatenate([self.main, self.aux[poisson_aux_mask]])
            self._constant = float(np.sum(counts - xlogy(counts, counts) + gammaln(counts + 1.0)))
        return self._constant

    def key(self) -> bytes:
        return self.main.tobytes() + b"|" + self.aux.tobytes()

    def __eq__(self, other):
        return (
            isinstance(other, DataSet)
            and np.array_equal(self.main, other.main)
            and np.array_equal(self.aux, other.aux)
        )

    def __repr__(self):
        return f"DataSet(main={self.main.tolist()}, aux={self.aux.tolist()})"


@dataclass
class _Sample:
    channel: str
    name: str
    bins: slice
    nominal: np.ndarray
    # ("scalar", index) | ("normsys", index, ln_hi, ln_lo) | ("perbin", start)
    factors: list = field(default_factory=list)
    # (index, up_delta, down_delta)
    deltas: list = field(default_factory=list)


class Model:
    """A compiled likelihood. Immutable after :func:`build_model` returns it."""

    def __init__(self, parameters, poi_name, channels, samples):
        self.parameters = tuple(parameters)
        self.poi_name = poi_name
        self.channel_names = tuple(name for name, _ in channels)
        self.channel_bins = tuple(n for _, n in channels)
        offsets = np.cumsum((0,) + self.channel_bins)
        self.channel_slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
        self.n_bins = int(offsets[-1])
        self.samples = tuple(samples)

        self.par_slices = {}
        start = 0
        for par in self.parameters:
            self.par_slices[par.name] = slice(start, start + par.n_components)
            start += par.n_components
        self.dimension = start
        self.poi_index = self.par_slices[poi_name].start if poi_name in self.par_slices else None

        self.init = np.array([v for p in self.parameters for v in p.init], dtype=float)
        bounds = np.array([b for p in self.parameters for b in p.bounds], dtype=float).reshape(-1, 2)
        self.lower = bounds[:, 0].copy()
        self.upper = bounds[:, 1].copy()
        self.fixed_mask = np.array(
            [p.fixed or (p.pinned[i] if p.pinned else False) for p in self.parameters for i in range(p.n_components)],
            dtype=bool,
        )
        self.labels = tuple(lbl for p in self.parameters for lbl in p.component_labels())
        # alpha-type responses change slope at zero
        self.kink_mask = np.array([p.kind == "alpha" for p in self.parameters for _ in range(p.n_components)], dtype=bool)

        aux_index, aux_poisson, aux_width, aux_tau, aux_center = [], [], [], [], []
        for par in self.parameters:
            c = par.constraint
            if c.kind == "none":
                continue
            base = self.par_slices[par.name].start
            for i in range(par.n_components):
                if par.pinned and par.pinned[i]:
                    continue
                aux_index.append(base + i)
                if c.kind == "normal":
                    aux_poisson.append(False)
                    aux_width.append(c.widths[i])
                    aux_tau.append(1.0)
                    aux_center.append(c.centers[i])
                else:
                    aux_poisson.append(True)
                    aux_width.append(1.0)
                    aux_tau.append(c.aux_counts[i])
                    aux_center.append(c.aux_counts[i])
        self.aux_index = np.array(aux_index, dtype=int)
        self.aux_poisson = np.array(aux_poisson, dtype=bool)
        self.aux_width = np.array(aux_width, dtype=float)
        self.aux_tau = np.array(aux_tau, dtype=float)
        self.aux_observations = np.array(aux_center, dtype=float)
        self._aux_normal = ~self.aux_poisson
        self._normal_log_norm = float(np.sum(np.log(self.aux_width[self._aux_normal]) + _LOG_SQRT_2PI))

        for arr in (self.init, self.lower, self.upper, self.fixed_mask, self.kink_mask, self.aux_index,
                    self.aux_poisson, self.aux_width, self.aux_tau, self.aux_observations):
            arr.setflags(write=False)

    @property
    def n_aux(self) -> int:
        return len(self.aux_index)

    def parameter(self, name: str) -> Parameter:
        for par in self.parameters:
            if par.name == name:
                return par
        raise errors.UnknownParameter(f"no parameter named {name!r}")

    def point(self, **values) -> np.ndarray:
        """Init point with selected parameters replaced (scalars or per-component sequences)."""
        out = self.init.copy()
        for name, value in values.items():
            if name not in self.par_slices:
                raise errors.UnknownParameter(f"no parameter named {name!r}")
            out[self.par_slices[name]] = value
        return out

    def split(self, flat) -> list[np.ndarray]:
        flat = np.asarray(flat)
        return [flat[s] for s in self.channel_slices]

    def __repr__(self):
        return (
            f"Model(channels={list(self.channel_names)}, dimension={self.dimension}, "
            f"poi={self.poi_name!r}, n_aux={self.n_aux})"
        )

    # ------------------------------------------------------------------
    # evaluation

    def _check(self, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dimension,):
            raise errors.DimensionMismatch(
                f"parameter point has shape {point.shape}, expected ({self.dimension},)"
            )
        if not np.all(np.isfinite(point)):
            raise errors.NonFiniteResult("parameter point has non-finite entries")
        return point

    def _check_data(self, data: DataSet):
        if data.main.shape != (self.n_bins,) or data.aux.shape != (self.n_aux,):
            raise errors.DimensionMismatch(
                f"data shapes main={data.main.shape} aux={data.aux.shape}, "
                f"expected ({self.n_bins},) and ({self.n_aux},)"
            )

    def _sample_terms(self, sample: _Sample, theta):
        """Return (additive part, list of factor arrays, list of factor derivatives)."""
        n = sample.nominal.shape[0]
        base = sample.nominal.copy()
        for idx, up, down in sample.deltas:
            alpha = theta[idx]
            base += alpha * (up if alpha >= 0 else down)
        factors, dfactors = [], []
        for spec in sample.factors:
            tag = spec[0]
            if tag == "scalar":
                value = theta[spec[1]]
                factors.append(np.full(n, value))
                dfactors.append(1.0)
            elif tag == "normsys":
                alpha = theta[spec[1]]
                slope = spec[2] if alpha >= 0 else -spec[3]
                value = math.exp(alpha * slope)
                factors.append(np.full(n, value))
                dfactors.append(value * slope)
            else:
                start = spec[1]
                factors.append(theta[start:start + n].copy())
                dfactors.append(1.0)
        return base, factors, dfactors

    def rates_raw(self, point) -> np.ndarray:
        theta = self._check(point)
        total = np.zeros(self.n_bins)
        for sample in self.samples:
            base, factors, _ = self._sample_terms(sample, theta)
            rate = base
            for f in factors:
                rate = rate * f
            total[sample.bins] += rate
        return total

    def expected_flat(self, point) -> np.ndarray:
        return np.maximum(self.rates_raw(point), RATE_FLOOR)

    def nll(self, point, data: DataSet) -> float:
        return self.nll_and_grad(point, data, with_grad=False)[0]

    def nll_and_grad(self, point, data: DataSet, with_grad=True):
        theta = self._check(point)
        self._check_data(data)
        n = data.main

        total = np.zeros(self.n_bins)
        parts = []
        for sample in self.samples:
            base, factors, dfactors = self._sample_terms(sample, theta)
            product = base.copy()
            for f in factors:
                product *= f
            total[sample.bins] += product
            parts.append((sample, base, factors, dfactors))
        clamped = total < RATE_FLOOR
        lam = np.where(clamped, RATE_FLOOR, total)
        # lam - n ln lam = (lam - n - n ln(lam/n)) + (n - n ln n); the bracket stays small
        value = float(np.sum(_deviance_terms(lam, n)))

        aux = data.aux
        at = theta[self.aux_index]
        normal = self._aux_normal
        pois = self.aux_poisson
        if normal.any():
            w = self.aux_width[normal]
            value += float(np.sum((at[normal] - aux[normal]) ** 2 / (2.0 * w * w))) + self._normal_log_norm
        if pois.any():
            mean = np.maximum(at[pois] * self.aux_tau[pois], RATE_FLOOR)
            value += float(np.sum(_deviance_terms(mean, aux[pois])))
        value += data.constant(pois)
        if not math.isfinite(value):
            raise errors.NonFiniteResult(f"negative log-likelihood is {value}")
        if not with_grad:
            return value, None

        grad = np.zeros(self.dimension)
        dl = np.where(clamped, 0.0, 1.0 - n / lam)
        for sample, base, factors, dfactors in parts:
            g = dl[sample.bins]
            k = len(factors)
            # products of all factors except the k-th, via prefix/suffix products
            prefix = [np.ones_like(base)]
            for f in factors:
                prefix.append(prefix[-1] * f)
            suffix = np.ones_like(base)
            without = [None] * k
            for i in range(k - 1, -1, -1):
                without[i] = prefix[i] * suffix
                suffix = suffix * factors[i]
            full = prefix[-1]
            for i, spec in enumerate(sample.factors):
                contrib = g * base * without[i] * dfactors[i]
                if spec[0] == "perbin":
                    start = spec[1]
                    grad[start:start + len(contrib)] += contrib
                else:
                    grad[spec[1]] += float(np.sum(contrib))
            for idx, up, down in sample.deltas:
                slope = up if theta[idx] >= 0 else down
                grad[idx] += float(np.sum(g * full * slope))

        if normal.any():
            w = self.aux_width[normal]
            np.add.at(grad, self.aux_index[normal], (at[normal] - aux[normal]) / (w * w))
        if pois.any():
            tau = self.aux_tau[pois]
            gamma = at[pois]
            live = gamma * tau > RATE_FLOOR
            dg = np.where(live, tau - aux[pois] / np.where(live, gamma, 1.0), 0.0)
            np.add.at(grad, self.aux_index[pois], dg)
        grad[self.fixed_mask] = 0.0
        if not np.all(np.isfinite(grad)):
            raise errors.NonFiniteResult("gradient has non-finite entries")
        return value, grad


def _deviance_terms(lam, n):
    ratio = lam / np.where(n > 0, n, 1.0)
    return lam - n - xlogy(n, ratio)


# ---------------------------------------------------------------------------
# build


def _defaults(kind, n):
    """init, bounds for a fresh parameter of the given modifier family."""
    if kind in ("normfactor", "lumi"):
        return [1.0], [(0.0, 10.0)]
    if kind == "alpha":
        return [0.0], [(-5.0, 5.0)]
    return [1.0] * n, [(1e-10, 10.0)] * n


def build_model(ws: Workspace, measurement: str | None = None, allow_missing_poi: bool = False) -> Model:
    """Compile ``ws`` under the named measurement (first one when ``None``).

    Parameters are ordered by name; per-bin parameters keep bin order. Modifiers
    with the same name share a parameter (normsys and histosys may share).

    Raises:
        UnknownMeasurement: no such measurement.
        UnknownPOI: the POI is not a normfactor in the model and
            ``allow_missing_poi`` is false.
        ConflictingModifier: one name used with incompatible kinds or shapes.
        InvalidParameterConfig: bad measurement overrides or missing lumi width.
    """
    meas = ws.measurement(measurement)

    family: dict[str, str] = {}
    size: dict[str, int] = {}
    # per-bin accumulators: name -> [sum nominal, sum delta^2]
    perbin_acc: dict[str, list] = {}
    for ch in ws.channels:
        for sample in ch.samples:
            nom = np.array(sample.data, dtype=float)
            for mod in sample.modifiers:
                fam = _FAMILY[mod.kind]
                n = ch.n_bins if fam in ("shapesys", "staterror") else 1
                if mod.name in family and (family[mod.name] != fam or size[mod.name] != n):
                    raise errors.ConflictingModifier(
                        f"modifier {mod.name!r} used as {family[mod.name]} ({size[mod.name]} components) "
                        f"and as {mod.kind} ({n} components) in channel {ch.name!r}"
                    )
                family[mod.name] = fam
                size[mod.name] = n
                if fam in ("shapesys", "staterror"):
                    acc = perbin_acc.setdefault(mod.name, [np.zeros(n), np.zeros(n)])
                    acc[0] += nom
                    acc[1] += np.asarray(mod.data, dtype=float) ** 2

    overrides = {p.name: p for p in meas.parameters}
    unknown = sorted(set(overrides) - set(family))
    if unknown:
        raise errors.InvalidParameterConfig(f"measurement {meas.name!r} configures unknown parameters {unknown}")

    parameters = []
    for name in sorted(family):
        fam = family[name]
        n = size[name]
        init, bounds = _defaults(fam, n)
        pinned = ()
        fixed = False
        cfg = overrides.get(name)
        if fam == "normfactor":
            constraint = Constraint()
        elif fam == "alpha":
            constraint = Constraint("normal", centers=(0.0,), widths=(1.0,))
        elif fam == "lumi":
            if cfg is None or not cfg.sigmas:
                raise errors.InvalidParameterConfig(f"lumi parameter {name!r} needs 'sigmas' in the measurement")
            center = cfg.auxdata[0] if cfg.auxdata else 1.0
            init = [center]
            constraint = Constraint("normal", centers=(center,), widths=(cfg.sigmas[0],))
        else:
            nom_sum, var_sum = perbin_acc[name]
            delta = np.sqrt(var_sum)
            live = (delta > 0) & (nom_sum > 0)
            pinned = tuple(bool(not x) for x in live)
            safe_nom = np.where(live, nom_sum, 1.0)
            safe_delta = np.where(live, delta, 1.0)
            if fam == "staterror":
                widths = tuple(float(x) for x in np.where(live, safe_delta / safe_nom, 1.0))
                constraint = Constraint("normal", centers=(1.0,) * n, widths=widths)
            else:
                tau = tuple(float(x) for x in np.where(live, (safe_nom / safe_delta) ** 2, 1.0))
                constraint = Constraint("poisson_gamma", aux_counts=tau)

        if cfg is not None:
            init, bounds, fixed, constraint = _apply_override(name, n, init, bounds, fixed, constraint, cfg)
        for i, (v, (lo, hi)) in enumerate(zip(init, bounds)):
            if not lo <= v <= hi:
                raise errors.InvalidParameterConfig(f"{name}[{i}] init {v} outside bounds ({lo}, {hi})")
        parameters.append(
            Parameter(
                name=name,
                n_components=n,
                init=tuple(float(v) for v in init),
                bounds=tuple((float(lo), float(hi)) for lo, hi in bounds),
                fixed=fixed,
                constraint=constraint,
                pinned=pinned,
                kind=fam,
            )
        )

    if meas.poi not in family:
        if not allow_missing_poi:
            raise errors.UnknownPOI(f"POI {meas.poi!r} is not a modifier in the workspace")
    elif family[meas.poi] != "normfactor":
        raise errors.UnknownPOI(f"POI {meas.poi!r} must be a normfactor, found {family[meas.poi]}")

    starts = {}
    offset = 0
    for par in parameters:
        starts[par.name] = offset
        offset += par.n_components

    channels = []
    samples = []
    bin_offset = 0
    for ch in ws.channels:
        n = ch.n_bins
        bins = slice(bin_offset, bin_offset + n)
        channels.append((ch.name, n))
        for sample in ch.samples:
            nom = np.array(sample.data, dtype=float)
            compiled = _Sample(channel=ch.name, name=sample.name, bins=bins, nominal=nom)
            for mod in sample.modifiers:
                idx = starts[mod.name]
                if mod.kind in ("normfactor", "lumi"):
                    compiled.factors.append(("scalar", idx))
                elif mod.kind == "normsys":
                    data: NormSysData = mod.data
                    compiled.factors.append(("normsys", idx, math.log(data.hi), math.log(data.lo)))
                elif mod.kind == "histosys":
                    data: HistoSysData = mod.data
                    up = np.array(data.hi_data) - nom
                    down = nom - np.array(data.lo_data)
                    compiled.deltas.append((idx, up, down))
                else:
                    compiled.factors.append(("perbin", idx))
            samples.append(compiled)
        bin_offset += n

    return Model(parameters, meas.poi, channels, samples)


def _apply_override(name, n, init, bounds, fixed, constraint, cfg):
    def check_len(values, what):
        if len(values) != n:
            raise errors.InvalidParameterConfig(f"{name}: {what} has {len(values)} entries, expected {n}")

    if cfg.inits is not None:
        check_len(cfg.inits, "inits")
        init = list(cfg.inits)
    if cfg.bounds is not None:
        check_len(cfg.bounds, "bounds")
        bounds = list(cfg.bounds)
    if cfg.fixed is not None:
        fixed = bool(cfg.fixed)
    if constraint.kind == "normal":
        centers, widths = constraint.centers, constraint.widths
        if cfg.auxdata is not None:
            check_len(cfg.auxdata, "auxdata")
            centers = tuple(cfg.auxdata)
        if cfg.sigmas is not None:
            check_len(cfg.sigmas, "sigmas")
            widths = tuple(cfg.sigmas)
        constraint = Constraint("normal", centers=centers, widths=widths)
    elif constraint.kind == "poisson_gamma" and cfg.auxdata is not None:
        check_len(cfg.auxdata, "auxdata")
        constraint = Constraint("poisson_gamma", aux_counts=tuple(cfg.auxdata))
    return init, bounds, fixed, constraint


# ---------------------------------------------------------------------------
# functional surface


def expected_rates(model: Model, point) -> list[np.ndarray]:
    """Per-channel expected rates at ``point``."""
    return model.split(model.expected_flat(point))


def nll(model: Model, point, data: DataSet) -> float:
    return model.nll(point, data)


def gradient(model: Model, point, data: DataSet) -> np.ndarray:
    """Analytic gradient of :func:`nll`; fixed components report exactly 0."""
    return model.nll_and_grad(point, data)[1]


def asimov_data(model: Model, point) -> DataSet:
    theta = model._check(point)
    main = model.expected_flat(theta)
    at = theta[model.aux_index]
    aux = np.where(model.aux_poisson, at * model.aux_tau, at)
    return DataSet(main, aux)


def observed_data(model: Model, ws: Workspace) -> DataSet:
    """Observations from the workspace plus the model's nominal auxiliary data."""
    main = np.concatenate([np.asarray(ws.observations[name], dtype=float) for name in model.channel_names])
    return DataSet(main, model.aux_observations)
