"""Maximum marginal-likelihood estimation, standard errors and intervals."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import PchipInterpolator

from .marginal import GroupBlock, InnerModeError, Integration, group_marginals, total
from .model import (
    Dataset,
    ModelSpec,
    ParamVector,
    from_report,
    report_jacobian,
    to_report,
)

log = logging.getLogger(__name__)

GTOL = 1e-5
FTOL = 1e-10
CONVERGED_GRAD = 1e-4
GRAD_STEP = 1e-6


class DegenerateDataError(ValueError):
    pass


@dataclass
class FitResult:
    spec: ModelSpec
    theta_hat: ParamVector
    loglik: float
    hessian: np.ndarray
    std_errors: dict[str, float]
    converged: bool
    grad_norm: float
    n_obs: int
    n_groups: int
    method: str
    settings: Integration
    iterations: int
    data_hash: str = ""
    message: str = ""
    hessian_note: str = ""

    @property
    def names(self) -> tuple[str, ...]:
        return self.spec.names

    @property
    def estimates(self) -> dict[str, float]:
        return self.theta_hat.report(self.spec)

    @property
    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.hessian)

    def raw_std_errors(self) -> np.ndarray:
        """Delta-method standard errors on the unconstrained scale."""
        flat = self.theta_hat.pack()
        jac = np.array([report_jacobian(r, v) for r, v in zip(self.spec.raw_names, flat)])
        se = np.array([self.std_errors[n] for n in self.names])
        return se / np.abs(jac)

    def variance_components(self) -> dict[str, float]:
        """Implied variances ``1/tau2`` for every precision parameter."""
        return {
            f"var({n})": 1.0 / v
            for n, v in self.estimates.items()
            if n.startswith("tau2")
        }


# ---------------------------------------------------------------------------
# objective plumbing


class Objective:
    """Negative marginal log-likelihood on the unconstrained scale."""

    def __init__(self, data: Dataset, spec: ModelSpec, settings: Integration, block=None):
        self.spec = spec
        self.settings = settings
        self.block = block if block is not None else GroupBlock(data, spec)
        self.evaluations = 0

    def loglik(self, flat) -> float:
        self.evaluations += 1
        theta = ParamVector.unpack(np.asarray(flat, dtype=float), self.spec)
        try:
            with np.errstate(all="ignore"):
                value = total(group_marginals(self.block, theta, self.settings))
        except (InnerModeError, np.linalg.LinAlgError, FloatingPointError):
            return -math.inf
        return value if math.isfinite(value) else -math.inf

    def __call__(self, flat) -> float:
        return -self.loglik(flat)


def central_gradient(f: Callable, x: np.ndarray, rel_step: float = GRAD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel_step * max(1.0, abs(x[k]))
        up, dn = x.copy(), x.copy()
        up[k] += h
        dn[k] -= h
        g[k] = (f(up) - f(dn)) / (2.0 * h)
    return g


def numerical_hessian(
    objective: Callable, x, rel_step: float = 1e-4, min_step: float = 1e-4, steps=None
) -> np.ndarray:
    """Central second differences, symmetrised.

    The step for coordinate ``k`` is ``max(min_step, rel_step * |x_k|)``
    unless ``steps`` gives them explicitly.

    Raises
    ------
    FloatingPointError
        If any entry is not finite; the message lists the coordinates.
    """
    x = np.asarray(x, dtype=float)
    d = x.size
    h = np.maximum(min_step, rel_step * np.abs(x)) if steps is None else np.asarray(steps)
    f0 = objective(x)
    H = np.empty((d, d))

    def at(shifts):
        z = x.copy()
        for k, s in shifts:
            z[k] += s * h[k]
        return objective(z)

    for i in range(d):
        H[i, i] = (at([(i, 1)]) - 2.0 * f0 + at([(i, -1)])) / h[i] ** 2
        for j in range(i):
            H[i, j] = (
                at([(i, 1), (j, 1)])
                - at([(i, 1), (j, -1)])
                - at([(i, -1), (j, 1)])
                + at([(i, -1), (j, -1)])
            ) / (4.0 * h[i] * h[j])
            H[j, i] = H[i, j]
    H = 0.5 * (H + H.T)
    bad = np.argwhere(~np.isfinite(H))
    if bad.size:
        raise FloatingPointError(f"non-finite Hessian entries at {bad.tolist()}")
    return H


def _is_spd(H) -> bool:
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return False
    return True


def nearest_spd(H, floor: float = 1e-10) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(w, floor * max(1.0, np.abs(w).max()))
    return (V * w) @ V.T


def reporting_objective(objective: Objective) -> Callable:
    """Negative log-likelihood as a function of reporting-scale parameters."""
    raw_names = objective.spec.raw_names

    def f(r):
        try:
            flat = np.array([from_report(n, v) for n, v in zip(raw_names, r)])
        except ValueError:
            return math.inf
        return objective(flat)

    return f


def _reporting_steps(raw_names, r, step):
    """Per-coordinate steps kept inside each parameter's domain."""
    h = np.maximum(step, step * np.abs(r))
    for k, n in enumerate(raw_names):
        if n == "atanh_rho":
            h[k] = min(h[k], (1.0 - abs(r[k])) / 3.0)
        elif n == "log_phi" or n.startswith("logvar"):
            h[k] = min(h[k], r[k] / 3.0)
    return h


def objective_hessian(
    objective: Objective, theta: ParamVector, scale: str = "reporting", step: float = 1e-4
):
    """Hessian of the negative log-likelihood at ``theta`` on either scale."""
    flat = theta.pack()
    if scale == "unconstrained":
        return numerical_hessian(objective, flat, rel_step=step, min_step=step)
    if scale != "reporting":
        raise ValueError("scale must be 'reporting' or 'unconstrained'")
    names = objective.spec.raw_names
    r = np.array([to_report(n, v) for n, v in zip(names, flat)])
    return numerical_hessian(
        reporting_objective(objective), r, steps=_reporting_steps(names, r, step)
    )


def _reporting_hessian(objective: Objective, theta: ParamVector):
    note = ""
    H = objective_hessian(objective, theta)
    if not _is_spd(H):
        H = objective_hessian(objective, theta, step=1e-5)
        note = "recomputed with smaller steps"
    if not _is_spd(H):
        warnings.warn("Hessian at the optimum is not positive definite; projecting", RuntimeWarning)
        H = nearest_spd(H)
        note = "projected to nearest SPD matrix"
    return H, note


# ---------------------------------------------------------------------------
# optimisation


class _Stop:
    def __init__(self):
        self.last = None

    def __call__(self, intermediate_result):
        f = intermediate_result.fun
        if self.last is not None and abs(self.last - f) <= FTOL * max(1.0, abs(f)):
            raise StopIteration
        self.last = f


def bfgs(objective: Callable, x0, maxiter: int = 500):
    """Minimise ``objective`` with BFGS and a central-difference gradient.

    Returns ``(x, fun, iterations, message)``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.size == 0:
        return x0, objective(x0), 0, "no free parameters"

    def grad(x):
        g = central_gradient(objective, x)
        return np.where(np.isfinite(g), g, 0.0)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            objective,
            x0,
            jac=grad,
            method="BFGS",
            callback=_Stop(),
            options={"gtol": GTOL, "norm": np.inf, "maxiter": maxiter},
        )
    return np.asarray(res.x, dtype=float), float(res.fun), int(res.nit), str(res.message)


def newton_polish(objective: Callable, x, tol: float = GTOL, max_steps: int = 5):
    """Newton steps with a numerical Hessian until ``max|grad| < tol``.

    BFGS can stop on a flat objective while the gradient along stiff
    coordinates is still above tolerance; a few exact-curvature steps fix
    that.  Returns ``(x, max|grad|)``.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x, 0.0
    f = objective(x)
    g = central_gradient(objective, x)
    for _ in range(max_steps):
        if not np.all(np.isfinite(g)) or np.abs(g).max() < tol:
            break
        H = numerical_hessian(objective, x)
        if _is_spd(H):
            step = -np.linalg.solve(H, g)
        else:
            step = -np.linalg.solve(nearest_spd(H, 1e-6), g)
        for _ in range(30):
            trial = x + step
            ft = objective(trial)
            if math.isfinite(ft) and ft <= f + 1e-12 * max(1.0, abs(f)):
                break
            step *= 0.5
        else:
            break
        x, f = trial, ft
        g = central_gradient(objective, x)
    return x, float(np.abs(g).max())


def auto_init(data: Dataset, spec: ModelSpec) -> ParamVector:
    """Regression of the link-transformed response for ``beta``; fixed
    defaults for the rest (phi = 10, variances 0.1, correlation 0)."""
    X = data.columns_matrix(spec.covariates)
    yt = spec.link.apply(np.clip(data.y, 1e-6, 1 - 1e-6))
    beta, *_ = np.linalg.lstsq(X, yt, rcond=None)
    cov = [0.0 if n == "atanh_rho" else math.log(0.1) for n in spec.random.raw_names]
    return ParamVector(beta, math.log(10.0), cov)


def check_data(data: Dataset, spec: ModelSpec) -> None:
    need = spec.p + len(spec.random.raw_names) + 1
    if len(data) < need:
        raise DegenerateDataError(f"{len(data)} observations; the model needs at least {need}")
    data.columns_matrix(spec.covariates)
    if spec.random.kind == "nested" and data.subgroup is None:
        raise DegenerateDataError("nested random effects need a subgroup column")


def fit(
    data: Dataset,
    spec: ModelSpec,
    init: ParamVector | None = None,
    method: str = "laplace",
    settings: Integration | None = None,
    hessian: bool = True,
) -> FitResult:
    """Maximise the marginal likelihood by BFGS on the unconstrained scale.

    Standard errors come from a numerical Hessian of the negative
    log-likelihood taken directly on the reporting scale.
    """
    check_data(data, spec)
    if settings is None:
        settings = Integration(method=method)
    elif settings.method != method:
        settings = Integration(method, settings.nodes, settings.points)
    obj = Objective(data, spec, settings)
    x0 = (init or auto_init(data, spec)).pack()
    if not math.isfinite(obj(x0)):
        x0 = auto_init(data, spec).pack()
    x, fun, nit, message = bfgs(obj, x0)
    x, gnorm = newton_polish(obj, x)
    theta = ParamVector.unpack(x, spec)
    loglik = obj.loglik(x)
    converged = math.isfinite(loglik) and gnorm < CONVERGED_GRAD
    if not converged:
        log.warning("fit did not converge: %s (max |grad| = %.3g)", message, gnorm)
    names = spec.names
    if hessian and math.isfinite(loglik):
        H, note = _reporting_hessian(obj, theta)
        with np.errstate(invalid="ignore"):
            se = np.sqrt(np.diag(np.linalg.inv(H)))
    else:
        H, note = np.full((len(names), len(names)), np.nan), "not computed"
        se = np.full(len(names), np.nan)
    return FitResult(
        spec=spec,
        theta_hat=theta,
        loglik=loglik,
        hessian=H,
        std_errors=dict(zip(names, map(float, se))),
        converged=converged,
        grad_norm=gnorm,
        n_obs=len(data),
        n_groups=data.n_groups,
        method=settings.method,
        settings=settings,
        iterations=nit,
        data_hash=data.fingerprint(),
        message=message,
        hessian_note=note,
    )


def nested_init(prev: FitResult, spec: ModelSpec, data: Dataset) -> ParamVector:
    """Start values for ``spec`` reusing estimates of a smaller fitted model."""
    base = auto_init(data, spec)
    old = dict(zip(prev.spec.raw_names, prev.theta_hat.pack()))
    flat = [old.get(n, v) for n, v in zip(spec.raw_names, base.pack())]
    return ParamVector.unpack(np.array(flat), spec)


def fit_sequence(data: Dataset, specs: Sequence[ModelSpec], **kw) -> list[FitResult]:
    """Fit a list of models, warm-starting each from its predecessor."""
    fits: list[FitResult] = []
    for spec in specs:
        init = nested_init(fits[-1], spec, data) if fits else None
        fits.append(fit(data, spec, init=init, **kw))
    return fits


# ---------------------------------------------------------------------------
# intervals


def _z(level: float) -> float:
    return float(stats.norm.ppf(0.5 + level / 2.0))


def wald_interval(fit: FitResult, param: str, level: float = 0.95) -> tuple[float, float]:
    est = fit.estimates[param]
    half = _z(level) * fit.std_errors[param]
    return est - half, est + half


@dataclass
class ProfileTrace:
    param: str
    raw_name: str
    grid_raw: np.ndarray
    profile: np.ndarray
    loglik_max: float
    level: float
    lower: float
    upper: float
    lower_open: bool = False
    upper_open: bool = False
    raw_lower: float = math.nan
    raw_upper: float = math.nan
    others: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def grid(self) -> np.ndarray:
        """Grid on the reporting scale."""
        return np.array([to_report(self.raw_name, v) for v in self.grid_raw])

    @property
    def deviance(self) -> np.ndarray:
        return 2.0 * (self.loglik_max - self.profile)


def _crossing(xs, dev, crit):
    """First crossing of ``dev = crit`` moving away from ``xs[0]``.

    ``xs`` is ordered outward from the optimum; monotone cubic interpolation
    between the bracketing grid points.
    """
    above = np.flatnonzero(dev >= crit)
    if above.size == 0:
        return None
    j = above[0]
    if j == 0:
        return float(xs[0])
    sign = 1.0 if xs[-1] > xs[0] else -1.0
    t = sign * (np.asarray(xs) - xs[0])
    # enforce monotonicity the interpolant relies on
    d = np.maximum.accumulate(np.asarray(dev[: j + 1], dtype=float))
    keep = np.r_[True, np.diff(t[: j + 1]) > 0]
    interp = PchipInterpolator(t[: j + 1][keep], d[keep])
    lo, hi = t[j - 1], t[j]
    if interp(lo) >= crit:
        root = lo
    else:
        root = optimize.brentq(lambda s: float(interp(s)) - crit, lo, hi, xtol=1e-12)
    return float(xs[0] + sign * root)


def profile_core(
    loglik: Callable,
    x_hat,
    index: int,
    se: float,
    level: float = 0.95,
    grid_points: int = 21,
    span: float = 4.0,
    max_extend: int = 3,
    loglik_max: float | None = None,
    bound: float = 30.0,
):
    """Profile ``loglik`` over coordinate ``index`` around the optimum ``x_hat``.

    Returns ``(grid, profile, others, raw_lower, raw_upper, lower_open, upper_open)``
    on the unconstrained scale.  Each side is extended by half a grid at a
    time, up to ``max_extend`` times, until the cutoff is bracketed.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    crit = float(stats.chi2.ppf(level, 1))
    lmax = loglik(x_hat) if loglik_max is None else loglik_max
    if not (se > 0 and math.isfinite(se)):
        se = 0.1 * max(1.0, abs(x_hat[index]))
    half = (grid_points - 1) // 2
    step = span * se / max(half, 1)
    free = [k for k in range(x_hat.size) if k != index]

    def solve(value, start):
        def negll(sub):
            z = np.empty_like(x_hat)
            z[index] = value
            z[free] = sub
            return -loglik(z)

        sub, fun, *_ = bfgs(negll, start)
        if not math.isfinite(fun) and len(free):
            return None, -math.inf
        z = np.empty_like(x_hat)
        z[index] = value
        z[free] = sub
        return z, -fun

    sides = {}
    opens = {}
    for sign in (+1.0, -1.0):
        xs, vals, rest = [x_hat[index]], [lmax], [x_hat[free]]
        start = x_hat[free]
        n_target = half
        extensions = 0
        is_open = False
        while True:
            while len(xs) - 1 < n_target:
                v = x_hat[index] + sign * step * len(xs)
                if abs(v - x_hat[index]) > bound:
                    is_open = True
                    break
                z, ll = solve(v, start)
                if z is None:
                    is_open = True
                    break
                xs.append(v)
                vals.append(ll)
                rest.append(z[free])
                start = z[free]
            dev = 2.0 * (lmax - np.array(vals))
            if is_open or dev.max() >= crit:
                break
            if extensions >= max_extend:
                is_open = True
                break
            extensions += 1
            n_target += max(1, half // 2)
        sides[sign] = (np.array(xs), np.array(vals), np.array(rest))
        dev = 2.0 * (lmax - sides[sign][1])
        opens[sign] = dev.max() < crit
    up_x, up_v, up_r = sides[+1.0]
    dn_x, dn_v, dn_r = sides[-1.0]
    upper = _crossing(up_x, 2.0 * (lmax - up_v), crit)
    lower = _crossing(dn_x, 2.0 * (lmax - dn_v), crit)
    grid = np.r_[dn_x[::-1], up_x[1:]]
    prof = np.r_[dn_v[::-1], up_v[1:]]
    others = np.vstack([dn_r[::-1], up_r[1:]]) if free else np.zeros((grid.size, 0))
    return (
        grid,
        prof,
        others,
        -math.inf if lower is None else lower,
        math.inf if upper is None else upper,
        opens[-1.0],
        opens[+1.0],
    )


_DOMAIN = {"log_phi": (0.0, math.inf), "atanh_rho": (-1.0, 1.0)}


def _report_limit(raw_name, raw_value):
    if math.isfinite(raw_value):
        return to_report(raw_name, raw_value)
    if raw_name.startswith("logvar"):
        return 0.0 if raw_value > 0 else math.inf
    lo, hi = _DOMAIN.get(raw_name, (-math.inf, math.inf))
    return hi if raw_value > 0 else lo


def profile_ci(
    data: Dataset,
    spec: ModelSpec,
    fit: FitResult,
    param: str,
    level: float = 0.95,
    grid_points: int = 21,
    span: float = 4.0,
    max_extend: int = 3,
) -> ProfileTrace:
    """Profile-likelihood interval for one parameter.

    The grid lives on the unconstrained scale of ``param`` (log for phi,
    log-variance for precisions); endpoints are mapped back to the
    reporting scale, swapping them when the map is decreasing.
    """
    names = spec.names
    if param not in names:
        raise KeyError(f"unknown parameter {param!r}; expected one of {names}")
    k = names.index(param)
    raw_name = spec.raw_names[k]
    obj = Objective(data, spec, fit.settings)
    se = float(fit.raw_std_errors()[k])
    grid, prof, others, rlo, rhi, lo_open, hi_open = profile_core(
        obj.loglik,
        fit.theta_hat.pack(),
        k,
        se,
        level=level,
        grid_points=grid_points,
        span=span,
        max_extend=max_extend,
        loglik_max=fit.loglik,
    )
    a, b = _report_limit(raw_name, rlo), _report_limit(raw_name, rhi)
    decreasing = raw_name.startswith("logvar")
    if decreasing:
        a, b = b, a
        lo_open, hi_open = hi_open, lo_open
    return ProfileTrace(
        param=param,
        raw_name=raw_name,
        grid_raw=grid,
        profile=prof,
        loglik_max=fit.loglik,
        level=level,
        lower=a,
        upper=b,
        lower_open=lo_open,
        upper_open=hi_open,
        raw_lower=rlo,
        raw_upper=rhi,
        others=others,
    )


# ---------------------------------------------------------------------------
# model comparison


@dataclass
class Comparison:
    models: list[str]
    params: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    logliks: np.ndarray
    tests: list[dict]

    def rows(self):
        """Table rows: one per parameter, then the maximised log-likelihood."""
        for i, p in enumerate(self.params):
            yield p, self.estimates[i].tolist()
        yield "loglik", self.logliks.tolist()


def is_nested(small: ModelSpec, big: ModelSpec) -> bool:
    return (
        small.link == big.link
        and set(small.covariates) <= set(big.covariates)
        and small.random.terms <= big.random.terms
    )


def model_compare(fits: Sequence[FitResult], labels: Sequence[str] | None = None) -> Comparison:
    """Side-by-side estimates with likelihood-ratio tests for nested pairs."""
    if not fits:
        raise ValueError("nothing to compare")
    hashes = {f.data_hash for f in fits}
    if len(hashes) > 1:
        raise ValueError("fits were computed on different datasets")
    labels = list(labels or [f"model{i + 1}" for i in range(len(fits))])
    params: list[str] = []
    for f in fits:
        params += [n for n in f.names if n not in params]
    est = np.full((len(params), len(fits)), np.nan)
    se = np.full_like(est, np.nan)
    for j, f in enumerate(fits):
        for n, v in f.estimates.items():
            est[params.index(n), j] = v
            se[params.index(n), j] = f.std_errors.get(n, np.nan)
    lls = np.array([f.loglik for f in fits])
    tests = []
    for i, a in enumerate(fits):
        for j, b in enumerate(fits):
            if i >= j:
                continue
            small, big = (a, b) if a.spec.n_params <= b.spec.n_params else (b, a)
            si, bi = (i, j) if small is a else (j, i)
            if not is_nested(small.spec, big.spec):
                continue
            stat = 2.0 * (big.loglik - small.loglik)
            df = big.spec.n_params - small.spec.n_params
            pval = float(stats.chi2.sf(max(stat, 0.0), df)) if df > 0 else math.nan
            tests.append(
                {"small": labels[si], "big": labels[bi], "lr": stat, "df": df, "p_value": pval}
            )
    return Comparison(labels, params, est, se, lls, tests)
