"""Empirical-Bayes random effects and response-scale scenario predictions."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .beta import Link
from .estimator import FitResult
from .marginal import GroupBlock, InnerModeError, inner_mode
from .model import INTERCEPT, Dataset, ModelSpec, ParamVector


@dataclass
class GroupPrediction:
    """Posterior mode of one group's random effect at the fitted parameters.

    ``records`` index the group's rows in the dataset and ``fitted`` holds
    the conditional means ``g^-1(x beta + z b_hat)`` for those rows.
    """

    group: str
    b_hat: np.ndarray
    curvature: np.ndarray
    records: np.ndarray
    fitted: np.ndarray
    converged: bool = True
    message: str = ""


def _solve_groups(block: GroupBlock, theta: ParamVector):
    """Modes for every group; a failing batch is retried group by group."""
    try:
        sol = inner_mode(block, theta, warm_start=False)
        ok = np.ones(block.n_groups, dtype=bool)
        return sol.b_hat, sol.neg_hessian, ok, [""] * block.n_groups
    except InnerModeError:
        pass
    G, q = block.n_groups, block.q
    b_hat = np.full((G, q), np.nan)
    curv = np.full((G, q, q), np.nan)
    ok = np.zeros(G, dtype=bool)
    notes = [""] * G
    for g in range(G):
        sub = _single_group(block, g)
        try:
            sol = inner_mode(sub, theta, warm_start=False)
        except InnerModeError as exc:
            notes[g] = str(exc)
            continue
        b_hat[g], curv[g], ok[g] = sol.b_hat[0], sol.neg_hessian[0], True
    return b_hat, curv, ok, notes


def _single_group(block: GroupBlock, g: int) -> GroupBlock:
    a = block.starts[g]
    e = a + block.counts[g]
    sub = object.__new__(GroupBlock)
    sub.__dict__.update(block.__dict__)
    for name in ("y", "logy", "log1my", "X", "Z"):
        setattr(sub, name, getattr(block, name)[a:e])
    sub.gidx = np.zeros(e - a, dtype=int)
    sub.starts = np.array([0])
    sub.counts = np.array([e - a])
    sub.labels = block.labels[g : g + 1]
    sub.warm = None
    return sub


def predict_random_effects(
    fit: FitResult, data: Dataset, spec: ModelSpec | None = None
) -> list[GroupPrediction]:
    """Empirical-Bayes modes ``b_hat_i`` with the MLEs plugged in.

    Groups whose Newton search fails are returned with ``converged=False``
    and NaN effects, and a warning names them.
    """
    spec = spec or fit.spec
    if spec != fit.spec:
        raise ValueError("spec does not match the fitted model")
    theta = fit.theta_hat
    block = GroupBlock(data, spec)
    b_hat, curv, ok, notes = _solve_groups(block, theta)

    X, Z = spec.design(data)
    labels, gidx = np.unique(data.group, return_inverse=True)
    if not np.array_equal(labels, block.labels):
        raise RuntimeError("group labels out of step")
    eta = X @ theta.beta
    if block.q:
        eta = eta + np.einsum("nq,nq->n", Z, b_hat[gidx])
    mu = spec.link.inverse(eta)

    out = []
    for g, label in enumerate(labels):
        rows = np.flatnonzero(gidx == g)
        out.append(
            GroupPrediction(
                group=str(label),
                b_hat=b_hat[g].copy(),
                curvature=curv[g].copy(),
                records=rows,
                fitted=np.asarray(mu[rows], dtype=float),
                converged=bool(ok[g]),
                message=notes[g],
            )
        )
    failed = [p.group for p in out if not p.converged]
    if failed:
        warnings.warn(f"random-effect mode failed for group(s) {', '.join(failed)}", RuntimeWarning)
    return out


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Scenario:
    """Covariate values (unnamed covariates are zero, the intercept is one)
    plus an optional random effect and subgroup code."""

    name: str
    values: Mapping[str, float] = field(default_factory=dict)
    b: tuple[float, ...] | None = None
    sub_code: int | None = None

    def vector(self, covariates: Sequence[str]) -> np.ndarray:
        unknown = set(self.values) - set(covariates)
        if unknown:
            raise ValueError(f"scenario {self.name!r} sets unknown covariates {sorted(unknown)}")
        default = {INTERCEPT: 1.0}
        return np.array([float(self.values.get(c, default.get(c, 0.0))) for c in covariates])


def _resolve(fit_or_beta, link):
    if isinstance(fit_or_beta, FitResult):
        return fit_or_beta.theta_hat.beta, fit_or_beta.spec.link, fit_or_beta.spec
    return np.asarray(fit_or_beta, dtype=float).reshape(-1), Link(link) if isinstance(link, str) else link, None


def predict_scenario(
    fit_or_beta,
    x,
    b=None,
    z=None,
    link: Link | str = "logit",
    sub_code: int | None = None,
    n_sub: int = 0,
) -> float:
    """Mean response ``g^-1(x beta + z b)`` for one covariate scenario.

    ``fit_or_beta`` is a fitted model or a bare coefficient vector (then
    ``link`` applies).  ``b`` defaults to zero, the population-level
    prediction.  With a fit, ``z`` is built from the model's random design
    unless given.
    """
    beta, link_obj, spec = _resolve(fit_or_beta, link)
    if isinstance(x, Scenario):
        if spec is None:
            raise ValueError("named scenarios need a fitted model")
        b = x.b if b is None else b
        sub_code = x.sub_code if sub_code is None else sub_code
        x = x.vector(spec.covariates)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != beta.shape:
        raise ValueError(f"expected {beta.size} covariate values, got {x.size}")
    eta = float(x @ beta)
    if b is not None:
        b = np.asarray(b, dtype=float).reshape(-1)
        if z is None:
            if spec is None:
                raise ValueError("a random effect without a fit needs its design row z")
            z = spec.z_row(x, sub_code, n_sub)
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.shape != b.shape:
            raise ValueError(f"random effect has length {b.size}, design row has {z.size}")
        eta += float(z @ b)
    return float(link_obj.inverse(eta))


def percent_difference(fit_or_beta, scenario_a, scenario_b, link: Link | str = "logit") -> float:
    """``100 (mu_a - mu_b) / mu_b``.

    Scenarios are covariate vectors, :class:`Scenario` objects or ``(x, b)``
    pairs.
    """

    def mu(s):
        if isinstance(s, tuple) and len(s) == 2 and not np.isscalar(s[0]):
            return predict_scenario(fit_or_beta, s[0], b=s[1], link=link)
        return predict_scenario(fit_or_beta, s, link=link)

    ma, mb = mu(scenario_a), mu(scenario_b)
    return 100.0 * (ma - mb) / mb


@dataclass(frozen=True)
class ScenarioRow:
    scenario: str
    group: str
    mu: float
    mu_population: float
    percent_vs_population: float


def scenario_report(
    fit: FitResult,
    scenarios: Sequence[Scenario],
    predictions: Sequence[GroupPrediction] = (),
) -> list[ScenarioRow]:
    """Scenario-by-group grid of predicted means.

    Each scenario is evaluated at ``b = 0`` (group ``"(population)"``) and
    at every group's ``b_hat``; the percent difference is taken against the
    population value of the same scenario.
    """
    rows = []
    for s in scenarios:
        base = predict_scenario(fit, s.vector(fit.spec.covariates))
        rows.append(ScenarioRow(s.name, "(population)", base, base, 0.0))
        for pred in predictions:
            if not pred.converged:
                continue
            mu = predict_scenario(fit, s, b=pred.b_hat)
            rows.append(ScenarioRow(s.name, pred.group, mu, base, 100.0 * (mu - base) / base))
    return rows


def write_effects_csv(predictions: Sequence[GroupPrediction], path) -> None:
    """One row per record: group, effect components and fitted mean."""
    q = max((p.b_hat.size for p in predictions), default=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "record", *(f"b{j + 1}" for j in range(q)), "fitted"])
        for p in predictions:
            for r, mu in zip(p.records, p.fitted):
                w.writerow([p.group, int(r) + 1, *(f"{v:.10g}" for v in p.b_hat), f"{mu:.10g}"])


def write_scenarios_csv(rows: Sequence[ScenarioRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "group", "mu", "mu_population", "percent_vs_population"])
        for r in rows:
            w.writerow(
                [r.scenario, r.group, f"{r.mu:.6g}", f"{r.mu_population:.6g}", f"{r.percent_vs_population:.6g}"]
            )
