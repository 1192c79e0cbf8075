"""Marginal log-likelihood of beta mixed models.

For group ``i`` the integrand is ``exp(h(b))`` with

    h(b) = sum_j log f(y_ij | mu_ij(b), phi) + log N(b; 0, Sigma).

All three integration rules are centred at the mode ``b_hat`` of ``h`` and
scaled by a square root of the inverse negative Hessian there:

* Laplace: ``h(b_hat) + q/2 log(2 pi) - 1/2 log det(-H)``;
* adaptive Gauss-Hermite: product rule on probabilists' Hermite nodes
  (a one-node rule is the Laplace approximation);
* quasi-Monte Carlo: importance sampling from ``N(b_hat, -H^-1)`` driven by
  a shifted unscrambled Sobol sequence.

Work is vectorised across groups; records are stored sorted by group label.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import special
from scipy.stats import qmc

from .beta import logpdf
from .model import Dataset, ModelSpec, ParamVector

LOG2PI = math.log(2.0 * math.pi)
METHODS = ("laplace", "aghq", "qmc")
MAX_NODES = 10**6
PRUNE_WEIGHT = 1e-10
_CHUNK = 2_000_000


class InnerModeError(RuntimeError):
    """Newton search for the random-effect mode failed for some group."""


class CapacityError(ValueError):
    """Quadrature grid larger than the supported product-rule capacity."""


@dataclass(frozen=True)
class Integration:
    method: str = "laplace"
    nodes: int = 15
    points: int = 4096

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown integration method {self.method!r}")


@dataclass
class InnerSolution:
    """Per-group modes, negative Hessians ``H = -d2h`` and ``h`` at the modes."""

    b_hat: np.ndarray
    neg_hessian: np.ndarray
    h_at_mode: np.ndarray
    chol: np.ndarray
    iterations: int

    @property
    def log_det(self) -> np.ndarray:
        """``log det(-H)`` per group."""
        if self.chol.shape[-1] == 0:
            return np.zeros(self.b_hat.shape[0])
        return 2.0 * np.log(np.diagonal(self.chol, axis1=-2, axis2=-1)).sum(axis=-1)

    def scale(self) -> np.ndarray:
        """Square roots ``L`` with ``L L^T = (-H)^-1`` (one per group)."""
        q = self.chol.shape[-1]
        eye = np.broadcast_to(np.eye(q), self.chol.shape)
        return np.swapaxes(np.linalg.solve(self.chol, eye), -1, -2)


class GroupBlock:
    """Records of one or more groups prepared for marginal-likelihood work.

    Records are reordered canonically (group label, then subgroup, then
    covariates and response) so results do not depend on input order.
    The last inner solution is kept as a warm start for the next one.
    """

    def __init__(self, data: Dataset, spec: ModelSpec):
        X, Z = spec.design(data)
        labels, gidx = np.unique(data.group, return_inverse=True)
        keys = [data.y, *X.T[::-1]]
        if data.subgroup is not None:
            keys.append(np.unique(data.subgroup, return_inverse=True)[1])
        keys.append(gidx)
        order = np.lexsort(keys)
        self.spec = spec
        self.labels = labels
        self.y = data.y[order]
        self.logy = np.log(self.y)
        self.log1my = np.log1p(-self.y)
        self.X = np.ascontiguousarray(X[order])
        self.Z = np.ascontiguousarray(Z[order])
        self.gidx = gidx[order]
        self.starts = np.flatnonzero(np.r_[True, np.diff(self.gidx) != 0])
        self.counts = np.diff(np.r_[self.starts, self.gidx.size])
        self.n_sub = spec.n_sub(data)
        self.q = self.Z.shape[1]
        self.warm: np.ndarray | None = None

    @property
    def n_groups(self) -> int:
        return self.labels.size

    @property
    def n_obs(self) -> int:
        return self.y.size

    def params(self, theta: ParamVector):
        if theta.beta.shape != (self.spec.p,):
            raise ValueError(f"expected {self.spec.p} coefficients, got {theta.beta.size}")
        if theta.cov_raw.shape != (len(self.spec.random.raw_names),):
            raise ValueError("covariance parameters do not match the model")
        prec, logdet = self.spec.random.precision(theta.cov_raw, self.n_sub)
        return theta.beta, theta.phi, prec, logdet

    # -- pointwise pieces -------------------------------------------------

    def _loglik_records(self, eta, phi):
        mu = self.spec.link.inverse(eta)
        a = mu * phi
        b = phi - a
        return (
            special.gammaln(phi)
            - special.gammaln(a)
            - special.gammaln(b)
            + (a - 1.0) * self.logy
            + (b - 1.0) * self.log1my
        )

    def _eta(self, xb, B):
        """Linear predictor for random effects ``B`` of shape (..., G, q)."""
        if self.q == 0:
            return np.broadcast_to(xb, B.shape[:-2] + xb.shape)
        return xb + np.einsum("nq,...nq->...n", self.Z, B[..., self.gidx, :])

    def _sum_groups(self, values):
        return np.add.reduceat(values, self.starts, axis=-1)

    def h(self, xb, phi, prec, logdet, B):
        cond = self._sum_groups(self._loglik_records(self._eta(xb, B), phi))
        if self.q == 0:
            return cond
        quad = np.einsum("...gi,ij,...gj->...g", B, prec, B)
        return cond - 0.5 * (self.q * LOG2PI + logdet + quad)

    def grad_hess(self, xb, phi, prec, B):
        eta = self._eta(xb, B)
        mu = self.spec.link.inverse(eta)
        a = mu * phi
        b = phi - a
        d1 = phi * (self.logy - self.log1my - special.digamma(a) + special.digamma(b))
        d2 = -(phi**2) * (special.polygamma(1, a) + special.polygamma(1, b))
        m1, m2 = self.spec.link.inverse_derivs(eta, mu)
        l1 = d1 * m1
        l2 = d2 * m1 * m1 + d1 * m2
        Z = self.Z
        grad = np.add.reduceat(Z * l1[:, None], self.starts, axis=0) - B @ prec
        outer = Z[:, :, None] * Z[:, None, :] * l2[:, None, None]
        neg_h = prec - np.add.reduceat(outer, self.starts, axis=0)
        return grad, neg_h


def conditional_loglik(block: GroupBlock, beta, phi: float, b) -> np.ndarray:
    """Per-group ``sum_j log f(y_ij | mu_ij(b), phi)``.

    ``b`` has shape ``(n_groups, q)``; a flat length-``q`` vector is
    broadcast to every group.
    """
    beta = np.asarray(beta, dtype=float)
    B = np.broadcast_to(np.asarray(b, dtype=float).reshape(-1, block.q), (block.n_groups, block.q))
    eta = block._eta(block.X @ beta, B)
    return block._sum_groups(block._loglik_records(eta, float(phi)))


def _spd_factor(neg_h):
    """Cholesky factors with ridge escalation; returns (chol, ok mask)."""
    G, q, _ = neg_h.shape
    chol = np.zeros_like(neg_h)
    ok = np.zeros(G, dtype=bool)
    eig_min = np.linalg.eigvalsh(neg_h)[:, 0] if G else np.zeros(0)
    good = eig_min > 0
    if good.any():
        chol[good] = np.linalg.cholesky(neg_h[good])
        ok[good] = True
    ridge = 1e-8
    while not ok.all() and ridge <= 1e-2 * (1 + 1e-9):
        todo = np.flatnonzero(~ok)
        trial = neg_h[todo] + ridge * np.eye(q)
        fixed = np.linalg.eigvalsh(trial)[:, 0] > 0
        if fixed.any():
            chol[todo[fixed]] = np.linalg.cholesky(trial[fixed])
            ok[todo[fixed]] = True
        ridge *= 10.0
    return chol, ok


def inner_mode(
    block: GroupBlock,
    theta: ParamVector,
    tol: float = 1e-8,
    max_iter: int = 50,
    warm_start: bool = True,
) -> InnerSolution:
    """Maximise ``h`` for every group by damped Newton iterations.

    Raises
    ------
    InnerModeError
        When some group fails to reach ``max|grad| < tol`` in ``max_iter``
        iterations or ends with a negative Hessian that is not positive
        definite even after ridge regularisation.
    """
    beta, phi, prec, logdet = block.params(theta)
    xb = block.X @ beta
    G, q = block.n_groups, block.q
    if q == 0:
        h0 = block.h(xb, phi, prec, logdet, np.zeros((G, 0)))
        return InnerSolution(np.zeros((G, 0)), np.zeros((G, 0, 0)), h0, np.zeros((G, 0, 0)), 0)

    if warm_start and block.warm is not None and block.warm.shape == (G, q):
        B = block.warm.copy()
        if not np.all(np.isfinite(B)):
            B = np.zeros((G, q))
    else:
        B = np.zeros((G, q))
    h = block.h(xb, phi, prec, logdet, B)
    if warm_start and not np.all(np.isfinite(h)):
        B = np.zeros((G, q))
        h = block.h(xb, phi, prec, logdet, B)

    def newton_step(grad, neg_h, mask):
        step = np.zeros((G, q))
        chol, ok = _spd_factor(neg_h[mask])
        idx = np.flatnonzero(mask)
        if ok.any():
            c = chol[ok]
            g = grad[idx[ok]][..., None]
            step[idx[ok]] = np.linalg.solve(
                np.swapaxes(c, -1, -2), np.linalg.solve(c, g)
            )[..., 0]
        if (~ok).any():
            # no usable curvature: scaled gradient ascent, the line search decides
            scale = np.abs(np.diagonal(neg_h[idx[~ok]], axis1=1, axis2=2)).max(axis=1)
            step[idx[~ok]] = grad[idx[~ok]] / np.maximum(scale, 1.0)[:, None]
        return step

    def line_search(step, mask):
        nonlocal B, h
        t = np.where(mask, 1.0, 0.0)
        pending = mask.copy()
        for _ in range(40):
            trial = B + t[:, None] * step
            h_new = block.h(xb, phi, prec, logdet, trial)
            accept = pending & np.isfinite(h_new) & (h_new >= h - 1e-12 * (1.0 + np.abs(h)))
            B = np.where(accept[:, None], trial, B)
            h = np.where(accept, h_new, h)
            pending &= ~accept
            if not pending.any():
                break
            t = np.where(pending, 0.5 * t, 0.0)
        return pending

    it = 0
    stalled = np.zeros(G, dtype=bool)
    for it in range(1, max_iter + 1):
        grad, neg_h = block.grad_hess(xb, phi, prec, B)
        active = (np.abs(grad).max(axis=1) >= tol) & ~stalled
        if not active.any():
            break
        step = newton_step(grad, neg_h, active)
        stalled |= line_search(step, active)
    # polishing step: quadratic convergence takes the gradient to round-off
    grad, neg_h = block.grad_hess(xb, phi, prec, B)
    everyone = np.ones(G, dtype=bool)
    line_search(newton_step(grad, neg_h, everyone), everyone)
    grad, neg_h = block.grad_hess(xb, phi, prec, B)

    gnorm = np.abs(grad).max(axis=1)
    bad = gnorm >= np.where(stalled, max(tol, 1e-6), tol)
    if bad.any():
        labels = ", ".join(map(str, block.labels[bad][:5]))
        raise InnerModeError(
            f"random-effect mode did not converge for group(s) {labels}: "
            f"max |gradient| = {gnorm[bad].max():.3g} after {it} iterations"
        )
    chol, ok = _spd_factor(neg_h)
    if not ok.all():
        labels = ", ".join(map(str, block.labels[~ok][:5]))
        raise InnerModeError(f"negative Hessian not positive definite for group(s) {labels}")
    if warm_start:
        block.warm = B.copy()
    return InnerSolution(B, neg_h, h, chol, it)


def laplace_marginal(block: GroupBlock, theta: ParamVector, sol: InnerSolution | None = None):
    """Per-group Laplace approximation of the log marginal density."""
    sol = sol or inner_mode(block, theta)
    return sol.h_at_mode + 0.5 * block.q * LOG2PI - 0.5 * sol.log_det


@lru_cache(maxsize=64)
def _hermite_grid(nodes_per_dim: int, q: int):
    if nodes_per_dim < 1:
        raise ValueError("nodes_per_dim must be >= 1")
    if nodes_per_dim % 2 == 0:
        raise ValueError("nodes_per_dim must be odd so the mode is a node")
    if nodes_per_dim**q > MAX_NODES:
        raise CapacityError(
            f"{nodes_per_dim}^{q} = {nodes_per_dim**q} quadrature nodes exceeds {MAX_NODES}"
        )
    x, w = hermegauss(nodes_per_dim)
    logw1 = np.log(w / math.sqrt(2.0 * math.pi))
    idx = np.array(list(itertools.product(range(nodes_per_dim), repeat=q)), dtype=int)
    idx = idx.reshape(-1, q)
    z = x[idx]
    logw = logw1[idx].sum(axis=1)
    if q > 2:
        keep = logw >= math.log(PRUNE_WEIGHT)
        z, logw = z[keep], logw[keep]
    z.setflags(write=False)
    logw.setflags(write=False)
    return z, logw


@lru_cache(maxsize=64)
def _sobol_normal(n_points: int, q: int):
    m = max(0, math.ceil(math.log2(n_points)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = qmc.Sobol(q, scramble=False).random(n_points)
    # centre the net inside the open cube so the inverse cdf stays finite
    z = special.ndtri(u + 0.5 / 2**m)
    logw = np.full(n_points, -math.log(n_points))
    z.setflags(write=False)
    logw.setflags(write=False)
    return z, logw


def _rule_marginal(block, theta, z, logw, sol):
    beta, phi, prec, logdet = block.params(theta)
    xb = block.X @ beta
    L = sol.scale()
    base = logw + 0.5 * np.einsum("mq,mq->m", z, z)
    chunk = max(1, _CHUNK // max(block.n_obs, 1))
    acc = np.full(block.n_groups, -np.inf)
    for s in range(0, z.shape[0], chunk):
        zc = z[s : s + chunk]
        B = sol.b_hat[None] + np.einsum("gij,mj->mgi", L, zc)
        terms = block.h(xb, phi, prec, logdet, B) + base[s : s + chunk, None]
        acc = np.logaddexp(acc, special.logsumexp(terms, axis=0))
    return acc + 0.5 * block.q * LOG2PI - 0.5 * sol.log_det


def aghq_marginal(block: GroupBlock, theta: ParamVector, nodes_per_dim: int = 15, sol=None):
    """Per-group adaptive Gauss-Hermite log marginal density.

    For ``q > 2`` the product grid is pruned of nodes whose joint weight is
    below 1e-10.
    """
    z, logw = _hermite_grid(int(nodes_per_dim), block.q)
    sol = sol or inner_mode(block, theta)
    if block.q == 0:
        return sol.h_at_mode
    return _rule_marginal(block, theta, z, logw, sol)


def qmc_marginal(block: GroupBlock, theta: ParamVector, n_points: int = 4096, sol=None):
    """Per-group quasi-Monte Carlo importance estimate of the log marginal density."""
    if n_points < 16:
        raise ValueError("n_points must be at least 16")
    sol = sol or inner_mode(block, theta)
    if block.q == 0:
        return sol.h_at_mode
    z, logw = _sobol_normal(int(n_points), block.q)
    return _rule_marginal(block, theta, z, logw, sol)


def group_marginals(block: GroupBlock, theta: ParamVector, settings: Integration | None = None):
    settings = settings or Integration()
    sol = inner_mode(block, theta)
    if settings.method == "laplace" or block.q == 0:  # nothing to integrate
        return laplace_marginal(block, theta, sol)
    if settings.method == "aghq":
        return aghq_marginal(block, theta, settings.nodes, sol)
    return qmc_marginal(block, theta, settings.points, sol)


def total(values) -> float:
    """Order-independent reduction of per-group values."""
    return math.fsum(np.asarray(values, dtype=float).tolist())


def marginal_loglik(
    data: Dataset,
    spec: ModelSpec,
    theta: ParamVector,
    method: str = "laplace",
    settings: Integration | dict | None = None,
) -> float:
    """Total marginal log-likelihood, summed over groups in label order."""
    if isinstance(settings, dict):
        settings = Integration(method=method, **settings)
    elif settings is None:
        settings = Integration(method=method)
    elif settings.method != method:
        settings = Integration(method, settings.nodes, settings.points)
    block = GroupBlock(data, spec)
    return total(group_marginals(block, theta, settings))


def fixed_effects_loglik(data: Dataset, spec: ModelSpec, beta, phi) -> float:
    """Plain beta-regression log-likelihood ignoring any random effects."""
    X = data.columns_matrix(spec.covariates)
    mu = spec.link.inverse(X @ np.asarray(beta, dtype=float))
    return total(logpdf(data.y, mu, float(phi)))
