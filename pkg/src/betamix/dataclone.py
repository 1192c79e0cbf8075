"""Data cloning: MCMC on a K-times replicated dataset.

With the likelihood raised to the power ``K`` the posterior mean approaches
the MLE and ``K`` times the posterior variance approaches its asymptotic
variance.  If the model is not identifiable, posterior variance along the
aliased directions stops shrinking; :func:`identifiability` turns that into
a verdict.

The sampler is Metropolis-within-Gibbs over the unconstrained parameters and
one latent random-effect vector per cloned group:

* all regression coefficients jointly, with a proposal covariance learned
  during burn-in; each group's random effect is moved against the step by
  the group-level projection of the covariates so the two do not fight;
* ``log phi`` and each covariance coordinate as scalar random walks;
* every cloned group's random effect, proposed independently and accepted
  group by group;
* a shift move trading a fixed coefficient against the random effects that
  duplicate its column (``x beta + z b`` is unchanged, so only priors enter);
* for a rank-deficient design, moves along the null space of ``X``, where
  again only the prior changes.

Proposal scales adapt during burn-in only and are frozen afterwards.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .estimator import auto_init
from .marginal import GroupBlock, InnerModeError, inner_mode
from .model import Dataset, ModelSpec, ParamVector, to_report

K_DEFAULT = (1, 5, 10, 20, 30, 40, 50)
SLOPE_WINDOW = (-1.5, -0.6)
LAMBDA_BAR = 1.1
RHAT_BAR = 1.1

_BATCH = 25


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Priors:
    """Independent priors; gamma distributions use shape/rate."""

    beta_mean: float = 0.0
    beta_precision: float = 0.001
    phi_shape: float = 1.0
    phi_rate: float = 0.001
    tau2_shape: float = 1.0
    tau2_rate: float = 0.001

    def log_density(self, spec: ModelSpec, flat) -> float:
        """Log prior density of the unconstrained parameters (Jacobians included)."""
        flat = np.asarray(flat, dtype=float)
        total = 0.0
        for name, v in zip(spec.raw_names, flat):
            if name == "log_phi":
                total += _log_gamma(math.exp(v), self.phi_shape, self.phi_rate) + v
            elif name.startswith("logvar"):
                total += _log_gamma(math.exp(-v), self.tau2_shape, self.tau2_rate) - v
            elif name == "atanh_rho":
                t = math.tanh(v)
                total += math.log(0.5) + math.log1p(-t * t) if abs(t) < 1 else -math.inf
            else:
                total += (
                    0.5 * math.log(self.beta_precision / (2.0 * math.pi))
                    - 0.5 * self.beta_precision * (v - self.beta_mean) ** 2
                )
        return total

    def draw(self, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
        out = []
        for name in spec.raw_names:
            if name == "log_phi":
                out.append(math.log(rng.gamma(self.phi_shape, 1.0 / self.phi_rate)))
            elif name.startswith("logvar"):
                out.append(-math.log(rng.gamma(self.tau2_shape, 1.0 / self.tau2_rate)))
            elif name == "atanh_rho":
                out.append(math.atanh(rng.uniform(-0.99, 0.99)))
            else:
                out.append(rng.normal(self.beta_mean, 1.0 / math.sqrt(self.beta_precision)))
        return np.array(out)


def _log_gamma(x, shape, rate):
    if not (x > 0 and math.isfinite(x)):
        return -math.inf
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * math.log(x) - rate * x


def clone_dataset(data: Dataset, K: int) -> Dataset:
    """Replicate every group ``K`` times under distinct group labels."""
    if K < 1 or int(K) != K:
        raise ValueError(f"clone count must be a positive integer, got {K!r}")
    K = int(K)
    if K == 1:
        return data
    labels = np.concatenate([np.char.add(data.group, f"#{c + 1}") for c in range(K)])
    return Dataset(
        y=np.tile(data.y, K),
        X=np.tile(data.X, (K, 1)),
        columns=data.columns,
        group=labels,
        subgroup=None if data.subgroup is None else np.tile(data.subgroup, K),
        dropped=data.dropped,
        schema=data.schema,
    )


@dataclass
class CloneRun:
    K: int
    names: tuple[str, ...]
    raw_names: tuple[str, ...]
    draws: np.ndarray
    raw_draws: np.ndarray
    acceptance: dict[str, float]
    burnin: int
    seed: int | None
    posterior_means: dict[str, float] = field(init=False)
    posterior_vars: dict[str, float] = field(init=False)
    rhat: dict[str, float] = field(init=False)
    largest_eigenvalue: float = field(init=False)

    def __post_init__(self):
        pooled = self.draws.reshape(-1, self.draws.shape[-1])
        self.posterior_means = dict(zip(self.names, pooled.mean(axis=0).tolist()))
        var = pooled.var(axis=0, ddof=1) if pooled.shape[0] > 1 else np.zeros(pooled.shape[1])
        self.posterior_vars = dict(zip(self.names, var.tolist()))
        self.rhat = dict(zip(self.names, gelman_rubin(self.draws).tolist()))
        raw = self.raw_draws.reshape(-1, self.raw_draws.shape[-1])
        self.largest_eigenvalue = float(np.linalg.eigvalsh(np.atleast_2d(np.cov(raw.T)))[-1])

    @property
    def raw_cov(self) -> np.ndarray:
        raw = self.raw_draws.reshape(-1, self.raw_draws.shape[-1])
        return np.atleast_2d(np.cov(raw.T))

    @property
    def unhealthy(self) -> list[str]:
        return [n for n, r in self.rhat.items() if not r < RHAT_BAR]


def gelman_rubin(draws: np.ndarray) -> np.ndarray:
    """Potential scale reduction factor per parameter; draws are (chains, n, d)."""
    m, n, d = draws.shape
    if m < 2 or n < 2:
        return np.full(d, np.nan)
    means = draws.mean(axis=1)
    w = draws.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * w + b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_hat / w)
    return np.where(w > 0, r, 1.0)


class _Target:
    """Unnormalised log posterior pieces on a cloned dataset."""

    def __init__(self, block: GroupBlock, priors: Priors):
        self.block = block
        self.spec = block.spec
        self.priors = priors
        self.p = self.spec.p
        self.q = block.q

    def mu(self, beta, B):
        return self.spec.link.inverse(self.block._eta(self.block.X @ beta, B))

    def loglik_records(self, mu, phi):
        b = self.block
        a = mu * phi
        return (
            special.gammaln(phi)
            - special.gammaln(a)
            - special.gammaln(phi - a)
            + (a - 1.0) * b.logy
            + (phi - a - 1.0) * b.log1my
        )

    def prior_b(self, cov_raw, B):
        """Per-group ``log N(b_i; 0, Sigma)``."""
        if self.q == 0:
            return np.zeros(B.shape[0])
        prec, logdet = self.spec.random.precision(cov_raw, self.block.n_sub)
        quad = np.einsum("gi,ij,gj->g", B, prec, B)
        return -0.5 * (self.q * math.log(2.0 * math.pi) + logdet + quad)


def _shift_directions(block: GroupBlock) -> list[tuple[int, np.ndarray]]:
    """Fixed columns reproduced exactly by the random design: ``Z s = X[:, k]``."""
    out = []
    if block.q == 0:
        return out
    for k in range(block.X.shape[1]):
        s, *_ = np.linalg.lstsq(block.Z, block.X[:, k], rcond=None)
        if np.allclose(block.Z @ s, block.X[:, k], atol=1e-10) and np.any(np.abs(s) > 1e-12):
            out.append((k, s))
    return out


def _null_directions(X: np.ndarray) -> np.ndarray:
    """Unit vectors ``v`` with ``X v = 0`` (aliased coefficient contrasts)."""
    if X.shape[0] < X.shape[1]:
        X = np.vstack([X, np.zeros((X.shape[1] - X.shape[0], X.shape[1]))])
    _, sv, vt = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(sv > 1e-10 * max(sv.max(initial=0.0), 1.0)))
    return vt[rank:]


def _group_projection(block: GroupBlock) -> np.ndarray:
    """Per-group least-squares ``S_i`` with ``Z_i S_i ~ X_i``; shape (G, q, p).

    Moving ``beta`` by ``d`` and every ``b_i`` by ``-S_i d`` keeps the
    group-level part of the linear predictor in place, which lets the
    coefficient block move without dragging the latent effects behind it.
    """
    G, q, p = block.n_groups, block.q, block.X.shape[1]
    S = np.zeros((G, q, p))
    if q == 0:
        return S
    ends = np.r_[block.starts[1:], block.X.shape[0]]
    for g, (a, e) in enumerate(zip(block.starts, ends)):
        S[g] = np.linalg.lstsq(block.Z[a:e], block.X[a:e], rcond=None)[0]
    return S


def _adapt(log_scale, rate, target, batch_no):
    return log_scale + 2.0 * (rate - target) / (1.0 + batch_no) ** 0.3


def _run_chain(target: _Target, x0, B0, iters, burnin, rng, K):
    spec = target.spec
    p = target.p
    raw_names = spec.raw_names
    d = len(raw_names)
    G = target.block.n_groups
    q = target.q
    starts = target.block.starts
    gidx = target.block.gidx
    priors = target.priors
    shifts = _shift_directions(target.block)
    proj = _group_projection(target.block)
    null = _null_directions(target.block.X)

    x = np.array(x0, dtype=float)
    B = np.array(B0, dtype=float)
    mu = target.mu(x[:p], B)
    ll = target.loglik_records(mu, math.exp(x[p]))
    pb = target.prior_b(x[p + 1 :], B)
    lp_theta = priors.log_density(spec, x)

    # proposal state
    beta_cov = np.eye(p) * (0.01**2 / K)
    beta_chol = np.linalg.cholesky(beta_cov)
    log_s = {"beta": math.log(2.38 / math.sqrt(p))}
    scalar_idx = list(range(p, d))
    for k in scalar_idx:
        log_s[raw_names[k]] = math.log(0.1 / math.sqrt(K))
    for k, _ in shifts:
        log_s[f"shift:{raw_names[k]}"] = math.log(0.05 / math.sqrt(K))
    for j in range(len(null)):
        log_s[f"null:{j}"] = -0.5 * math.log(priors.beta_precision)
    b_log_s = np.full(G, math.log(0.1 / math.sqrt(K)))
    acc = {key: 0 for key in log_s}
    acc["b"] = 0
    b_acc = np.zeros(G)
    tried = {key: 0 for key in acc}

    keep = iters - burnin
    raw_out = np.empty((keep, d))
    history = np.empty((iters, p))
    batch_no = 0

    def accept(log_ratio):
        return math.log(rng.uniform()) < log_ratio if math.isfinite(log_ratio) else False

    for it in range(iters):
        # regression coefficients
        prop = x.copy()
        step = math.exp(log_s["beta"]) * (beta_chol @ rng.standard_normal(p))
        prop[:p] = x[:p] + step
        B_new = B - proj @ step if q else B
        mu_new = target.mu(prop[:p], B_new)
        ll_new = target.loglik_records(mu_new, math.exp(x[p]))
        pb_new = target.prior_b(x[p + 1 :], B_new)
        lp_new = priors.log_density(spec, prop)
        tried["beta"] += 1
        with np.errstate(invalid="ignore"):
            ratio = float(ll_new.sum() - ll.sum() + pb_new.sum() - pb.sum()) + lp_new - lp_theta
        if accept(ratio):
            x, B, mu, ll, pb, lp_theta = prop, B_new, mu_new, ll_new, pb_new, lp_new
            acc["beta"] += 1

        # dispersion and covariance coordinates
        for k in scalar_idx:
            name = raw_names[k]
            prop = x.copy()
            prop[k] += math.exp(log_s[name]) * rng.standard_normal()
            lp_new = priors.log_density(spec, prop)
            tried[name] += 1
            if not math.isfinite(lp_new):
                continue
            if k == p:
                ll_new = target.loglik_records(mu, math.exp(prop[p]))
                ratio = float(ll_new.sum() - ll.sum()) + lp_new - lp_theta
                if accept(ratio):
                    x, ll, lp_theta = prop, ll_new, lp_new
                    acc[name] += 1
            else:
                pb_new = target.prior_b(prop[p + 1 :], B)
                ratio = float(pb_new.sum() - pb.sum()) + lp_new - lp_theta
                if accept(ratio):
                    x, pb, lp_theta = prop, pb_new, lp_new
                    acc[name] += 1

        # shift moves: x beta + z b is invariant
        for k, s in shifts:
            key = f"shift:{raw_names[k]}"
            delta = math.exp(log_s[key]) * rng.standard_normal()
            prop = x.copy()
            prop[k] += delta
            B_new = B - delta * s
            pb_new = target.prior_b(prop[p + 1 :], B_new)
            lp_new = priors.log_density(spec, prop)
            tried[key] += 1
            ratio = float(pb_new.sum() - pb.sum()) + lp_new - lp_theta
            if accept(ratio):
                x, B, pb, lp_theta = prop, B_new, pb_new, lp_new
                acc[key] += 1

        # aliased contrasts: the likelihood is flat along them
        for j, v in enumerate(null):
            key = f"null:{j}"
            prop = x.copy()
            prop[:p] += math.exp(log_s[key]) * rng.standard_normal() * v
            lp_new = priors.log_density(spec, prop)
            tried[key] += 1
            if accept(lp_new - lp_theta):
                x, lp_theta = prop, lp_new
                acc[key] += 1

        # latent effects, one independent proposal per cloned group
        if q:
            B_new = B + np.exp(b_log_s)[:, None] * rng.standard_normal((G, q))
            mu_new = target.mu(x[:p], B_new)
            ll_new = target.loglik_records(mu_new, math.exp(x[p]))
            pb_new = target.prior_b(x[p + 1 :], B_new)
            with np.errstate(invalid="ignore"):
                ratio = (
                    np.add.reduceat(ll_new, starts) - np.add.reduceat(ll, starts) + pb_new - pb
                )
            ratio = np.where(np.isfinite(ratio), ratio, -np.inf)
            ok = np.log(rng.uniform(size=G)) < ratio
            B = np.where(ok[:, None], B_new, B)
            pb = np.where(ok, pb_new, pb)
            rec = ok[gidx]
            mu = np.where(rec, mu_new, mu)
            ll = np.where(rec, ll_new, ll)
            b_acc += ok
            acc["b"] += int(ok.sum())
            tried["b"] += G

        history[it] = x[:p]
        if it >= burnin:
            raw_out[it - burnin] = x
        elif (it + 1) % _BATCH == 0:
            # adaptation, burn-in only
            for key in log_s:
                rate = acc[key] / max(tried[key], 1)
                goal = 0.25 if key == "beta" else 0.35
                log_s[key] = _adapt(log_s[key], rate, goal, batch_no)
            if q:
                b_log_s = _adapt(b_log_s, b_acc / _BATCH, 0.3, batch_no)
            if it + 1 >= 4 * _BATCH and p > 0:
                recent = history[(it + 1) // 2 : it + 1]
                cov = np.atleast_2d(np.cov(recent.T)) if recent.shape[0] > p + 1 else beta_cov
                if len(null):
                    # null-space moves cover those directions
                    keep_rows = np.eye(p) - null.T @ null
                    cov = keep_rows @ cov @ keep_rows
                cov = cov + 1e-12 * np.eye(p) + 1e-6 * np.diag(np.diag(cov))
                try:
                    beta_chol = np.linalg.cholesky(cov)
                    beta_cov = cov
                    log_s["beta"] = max(log_s["beta"], math.log(0.5 / math.sqrt(p)))
                except np.linalg.LinAlgError:
                    pass
            batch_no += 1
            acc = {key: 0 for key in acc}
            tried = {key: 0 for key in tried}
            b_acc[:] = 0
        if it + 1 == burnin:
            acc = {key: 0 for key in acc}
            tried = {key: 0 for key in tried}
            b_acc[:] = 0

    rates = {key: acc[key] / tried[key] for key in acc if tried[key]}
    return raw_out, rates


def _initial_state(target, spec, priors, rng, init, K):
    """Jittered start around ``init`` with latent effects at their modes."""
    block = target.block
    for attempt in range(11):
        if attempt == 0:
            x = init.pack() + rng.normal(0.0, 0.05, size=spec.n_params) / math.sqrt(K)
        else:
            x = priors.draw(spec, rng)
        theta = ParamVector.unpack(x, spec)
        try:
            B = inner_mode(block, theta, warm_start=False).b_hat
        except InnerModeError:
            B = np.zeros((block.n_groups, block.q))
        mu = target.mu(theta.beta, B)
        lp = (
            target.loglik_records(mu, theta.phi).sum()
            + target.prior_b(theta.cov_raw, B).sum()
            + priors.log_density(spec, x)
        )
        if math.isfinite(lp):
            return x, B
    raise SamplerError("non-finite log posterior at every initial value tried")


def dc_sample(
    data: Dataset,
    spec: ModelSpec,
    K: int,
    priors: Priors | None = None,
    chains: int = 3,
    iters: int = 3000,
    burnin: int = 1000,
    seed: int | None = None,
    init: ParamVector | None = None,
) -> CloneRun:
    """Sample the posterior of the ``K``-times cloned model.

    ``iters`` counts every iteration of a chain, burn-in included; the
    ``iters - burnin`` later ones are kept.  A missing ``seed`` is an error
    because runs must be reproducible.
    """
    if seed is None:
        raise ValueError("dc_sample needs an explicit seed")
    if not 0 <= burnin < iters:
        raise ValueError("need 0 <= burnin < iters")
    priors = priors or Priors()
    block = GroupBlock(clone_dataset(data, K), spec)
    target = _Target(block, priors)
    start = init or auto_init(data, spec)
    seeds = np.random.SeedSequence(seed).spawn(chains)
    raw, rates = [], []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        x0, B0 = _initial_state(target, spec, priors, rng, start, K)
        out, acc = _run_chain(target, x0, B0, iters, burnin, rng, K)
        raw.append(out)
        rates.append(acc)
    raw_draws = np.stack(raw)
    draws = np.vectorize(to_report, otypes=[float])(
        np.array(spec.raw_names)[None, None, :], raw_draws
    )
    acceptance = {key: float(np.mean([r[key] for r in rates])) for key in rates[0]}
    run = CloneRun(
        K=int(K),
        names=spec.names,
        raw_names=spec.raw_names,
        draws=draws,
        raw_draws=raw_draws,
        acceptance=acceptance,
        burnin=burnin,
        seed=seed,
    )
    if run.unhealthy:
        warnings.warn(
            f"K={K}: R-hat >= {RHAT_BAR} for {', '.join(run.unhealthy)}", RuntimeWarning
        )
    return run


def dc_estimates(run: CloneRun) -> tuple[dict[str, float], dict[str, float]]:
    """Pooled posterior means and ``sqrt(K * posterior variance)``."""
    est = dict(run.posterior_means)
    se = {n: math.sqrt(run.K * max(v, 0.0)) for n, v in run.posterior_vars.items()}
    return est, se


@dataclass
class DCDiagnostics:
    K: list[int]
    raw_names: tuple[str, ...]
    scaled_variance: np.ndarray
    lambda_max: np.ndarray
    slopes: dict[str, float]
    lambda_slope: float
    identifiable: bool
    runs: dict[int, CloneRun] = field(repr=False, default_factory=dict)

    def rows(self):
        for i, k in enumerate(self.K):
            for j, name in enumerate(self.raw_names):
                yield k, name, float(self.scaled_variance[i, j]), float(self.lambda_max[i])


def _loglog_slope(K, values):
    k = np.log(np.asarray(K, dtype=float))
    v = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(k, v, 1)[0])


def diagnose(runs: dict[int, CloneRun]) -> DCDiagnostics:
    """Scaled variances, relative largest eigenvalues and the verdict.

    Everything is computed on the unconstrained scale.  ``lambda_max(K)`` is
    the largest eigenvalue of the K-clone posterior covariance after
    standardising by the K = 1 posterior standard deviations.
    """
    K = sorted(runs)
    if K[0] != 1:
        raise ValueError("clone schedule must contain K = 1")
    base = runs[1]
    names = base.raw_names
    var1 = np.diag(base.raw_cov)
    scale = 1.0 / np.sqrt(np.where(var1 > 0, var1, np.nan))
    s = np.array([np.diag(runs[k].raw_cov) / var1 for k in K])
    lam = np.array(
        [np.linalg.eigvalsh(runs[k].raw_cov * np.outer(scale, scale))[-1] for k in K]
    )
    slopes = {n: _loglog_slope(K, s[:, j]) for j, n in enumerate(names)}
    lam_slope = _loglog_slope(K, lam)
    lo, hi = SLOPE_WINDOW
    verdict = all(lo <= v <= hi for v in slopes.values()) and lam_slope < 0
    return DCDiagnostics(K, names, s, lam, slopes, lam_slope, bool(verdict), dict(runs))


def identifiability(
    data: Dataset,
    spec: ModelSpec,
    priors: Priors | None = None,
    K_list: Sequence[int] = K_DEFAULT,
    chains: int = 3,
    iters: int = 3000,
    burnin: int = 1000,
    seed: int = 0,
    init: ParamVector | None = None,
) -> DCDiagnostics:
    K_list = [int(k) for k in K_list]
    if K_list != sorted(K_list) or K_list[0] != 1:
        raise ValueError("K_list must be ascending and start at 1")
    runs = {}
    for k in K_list:
        sub_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        runs[k] = dc_sample(data, spec, k, priors, chains, iters, burnin, sub_seed, init)
    return diagnose(runs)


def write_chains_csv(run: CloneRun, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", *run.names])
        for c in range(run.draws.shape[0]):
            for i in range(run.draws.shape[1]):
                w.writerow([c + 1, run.burnin + i + 1, *(f"{v:.10g}" for v in run.draws[c, i])])


def write_diagnostics_csv(diag: DCDiagnostics, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "parameter", "scaled_variance", "lambda_max"])
        for k, name, s, lam in diag.rows():
            w.writerow([k, name, f"{s:.6g}", f"{lam:.6g}"])
