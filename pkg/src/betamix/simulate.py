"""Synthetic data from beta mixed models.

Two presets mimic the shapes of the motivating studies: a worker life-quality
survey (9 regional groups, about 365 firms, firm size and centred log income)
and a water-quality monitoring design (16 plants x 4 quarters x 3 locations).
Their default truths are the published Laplace estimates of the chosen model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    INTERCEPT,
    Dataset,
    ModelSpec,
    ParamVector,
    RandomEffects,
    Schema,
    cov_matrix,
)

IQVT_COLUMNS = (INTERCEPT, "medium", "small", "income")
IQA_COLUMNS = (INTERCEPT, "reservoir", "downstream", "q2", "q3", "q4")

IQVT_SCHEMA = Schema("y", IQVT_COLUMNS[1:], "unit")
IQA_SCHEMA = Schema("y", IQA_COLUMNS[1:], "plant", subgroup="quarter")


def iqvt_models() -> list[ModelSpec]:
    """Models 1-5: null, +size, +income, +random intercept, +random income slope."""
    return [
        ModelSpec((INTERCEPT,)),
        ModelSpec(IQVT_COLUMNS[:3]),
        ModelSpec(IQVT_COLUMNS),
        ModelSpec(IQVT_COLUMNS, RandomEffects("intercept")),
        ModelSpec(IQVT_COLUMNS, RandomEffects("intercept_slope", slope="income")),
    ]


def iqa_models() -> list[ModelSpec]:
    """Models 1-6: null, +location, +quarter, +plant effect, +quarter-within-plant
    effect only, both random terms."""
    return [
        ModelSpec((INTERCEPT,)),
        ModelSpec(IQA_COLUMNS[:3]),
        ModelSpec(IQA_COLUMNS),
        ModelSpec(IQA_COLUMNS, RandomEffects("intercept")),
        ModelSpec(IQA_COLUMNS, RandomEffects("nested", group_term=False)),
        ModelSpec(IQA_COLUMNS, RandomEffects("nested")),
    ]


# published Laplace estimates, reporting scale
IQVT_TRUTH = {
    4: [0.40, -0.07, -0.13, 0.47, 94.19, 62.36],
    5: [0.40, -0.07, -0.13, 0.47, 94.19, 62.35, 51480.17, 0.85],
}
IQA_TRUTH = {
    5: [1.15, 0.24, 0.15, 0.22, 0.32, 0.06, 42.19, 11.19],
    6: [1.15, 0.24, 0.16, 0.22, 0.32, 0.06, 42.20, 43.54, 15.04],
}


def iqvt_truth(model: int = 4) -> tuple[ModelSpec, ParamVector]:
    spec = iqvt_models()[model - 1]
    return spec, ParamVector.from_report(spec, IQVT_TRUTH[model])


def iqa_truth(model: int = 5) -> tuple[ModelSpec, ParamVector]:
    spec = iqa_models()[model - 1]
    return spec, ParamVector.from_report(spec, IQA_TRUTH[model])


@dataclass(frozen=True)
class SimDesign:
    """What to simulate.

    ``preset`` is ``"iqvt"``, ``"iqa"`` or ``"custom"``; a custom design takes
    its covariates and grouping from ``template`` (responses ignored).
    ``spec``/``theta`` default to the preset's published model.
    """

    preset: str = "iqvt"
    seed: int = 0
    spec: ModelSpec | None = None
    theta: ParamVector | None = None
    n_missing: int | None = None
    n_groups: int | None = None
    n_units: int = 365
    template: Dataset | None = None
    size_probs: tuple[float, float, float] = field(default=(0.3, 0.35, 0.35))

    def resolved(self) -> tuple[ModelSpec, ParamVector]:
        if self.spec is not None:
            if self.theta is None:
                raise ValueError("a custom spec needs theta")
            return self.spec, self.theta
        if self.preset == "iqvt":
            return iqvt_truth(4)
        if self.preset == "iqa":
            return iqa_truth(5)
        raise ValueError("custom designs need spec and theta")


def _iqvt_covariates(rng, n_groups, n_units, probs):
    sizes = np.full(n_groups, n_units // n_groups)
    sizes[: n_units % n_groups] += 1
    group = np.repeat([f"UF{i + 1:02d}" for i in range(n_groups)], sizes)
    cat = rng.choice(3, size=n_units, p=np.asarray(probs) / sum(probs))
    income = rng.uniform(-1.0, 1.0, size=n_units)
    X = np.column_stack([np.ones(n_units), cat == 1, cat == 2, income]).astype(float)
    return X, IQVT_COLUMNS, group, None, IQVT_SCHEMA


def _iqa_covariates(n_groups):
    rows, groups, subs = [], [], []
    for j in range(n_groups):
        for t in range(4):
            for loc in range(3):
                rows.append([1.0, loc == 1, loc == 2, t == 1, t == 2, t == 3])
                groups.append(f"P{j + 1:02d}")
                subs.append(f"Q{t + 1}")
    return np.array(rows, dtype=float), IQA_COLUMNS, np.array(groups), np.array(subs), IQA_SCHEMA


def _beta_variates(rng, mu, phi):
    """Beta draws as a ratio of gamma variates, redrawn until strictly inside (0, 1)."""
    a, b = mu * phi, (1.0 - mu) * phi
    y = np.empty_like(mu)
    todo = np.arange(mu.size)
    for _ in range(100):
        ga = rng.standard_gamma(a[todo])
        gb = rng.standard_gamma(b[todo])
        with np.errstate(invalid="ignore", divide="ignore"):
            draw = ga / (ga + gb)
        y[todo] = draw
        ok = (draw > 0.0) & (draw < 1.0)
        todo = todo[~ok]
        if todo.size == 0:
            return y
    raise FloatingPointError("could not draw beta variates strictly inside (0, 1)")


def simulate(design: SimDesign) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Draw a dataset and the latent random effects that generated it.

    ``b_i ~ N(0, Sigma)`` per group, ``mu_ij = g^-1(x_ij beta + z_ij b_i)``
    and ``y_ij ~ Beta(mu_ij phi, (1 - mu_ij) phi)``.  Deterministic under
    ``design.seed``.
    """
    spec, theta = design.resolved()
    rng = np.random.default_rng(design.seed)
    if design.preset == "iqvt":
        X, cols, group, sub, schema = _iqvt_covariates(
            rng, design.n_groups or 9, design.n_units, design.size_probs
        )
        n_missing = design.n_missing or 0
    elif design.preset == "iqa":
        X, cols, group, sub, schema = _iqa_covariates(design.n_groups or 16)
        n_missing = 2 if design.n_missing is None else design.n_missing
    elif design.template is not None:
        t = design.template
        X, cols, group, sub, schema = t.X, t.columns, t.group, t.subgroup, t.schema
        n_missing = design.n_missing or 0
    else:
        raise ValueError("custom designs need a template dataset")

    skeleton = Dataset(np.full(len(group), 0.5), X, cols, group, sub, schema=schema)
    Xm, Z = spec.design(skeleton)
    labels, gidx = np.unique(skeleton.group, return_inverse=True)
    n_sub = spec.n_sub(skeleton)
    cov = spec.random.structure(theta.cov_raw, n_sub)
    _, L = cov_matrix(cov)
    q = Z.shape[1]
    B = rng.standard_normal((labels.size, q)) @ L.T if q else np.zeros((labels.size, 0))
    eta = Xm @ theta.beta + (np.einsum("nq,nq->n", Z, B[gidx]) if q else 0.0)
    mu = spec.link.inverse(eta)
    y = _beta_variates(rng, mu, theta.phi)

    keep = np.ones(y.size, dtype=bool)
    if n_missing:
        if n_missing >= y.size:
            raise ValueError("more missing responses than records")
        keep[rng.choice(y.size, size=n_missing, replace=False)] = False
    data = Dataset(
        y=y[keep],
        X=X[keep],
        columns=cols,
        group=group[keep],
        subgroup=None if sub is None else sub[keep],
        dropped=int((~keep).sum()),
        schema=schema,
    )
    return data, {str(g): B[i].copy() for i, g in enumerate(labels)}
