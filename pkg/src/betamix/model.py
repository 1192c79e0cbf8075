"""Model description, covariance structures, parameter packing and datasets.

Random-effect scale parameters follow the precision convention: a ``tau2``
value is the reciprocal of a variance.  Correlated intercept/slope effects
use ``Sigma = [[1/tau2_1, rho/(tau_1 tau_2)], [rho/(tau_1 tau_2), 1/tau2_2]]``
so ``rho`` is a correlation.

Optimisation happens on an unconstrained scale: ``log phi``, log-variances
(``-log tau2``) and ``atanh rho``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .beta import Link

INTERCEPT = "(Intercept)"
COV_KINDS = ("none", "intercept", "intercept_slope", "nested")


class DataError(ValueError):
    """Raised for malformed or out-of-support input data."""


# ---------------------------------------------------------------------------
# covariance structures with values


@dataclass(frozen=True)
class Intercept:
    tau2: float

    def __post_init__(self):
        _check_precision("tau2", self.tau2)


@dataclass(frozen=True)
class InterceptSlope:
    tau2_1: float
    tau2_2: float
    rho: float = 0.0

    def __post_init__(self):
        _check_precision("tau2_1", self.tau2_1)
        _check_precision("tau2_2", self.tau2_2)
        if not (math.isfinite(self.rho) and -1.0 < self.rho < 1.0):
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho!r}")


@dataclass(frozen=True)
class Nested:
    """Group effect plus ``T`` independent subgroup effects.

    Either precision may be ``None`` to drop that term.
    """

    tau2_U: float | None
    tau2_UT: float | None
    T: int

    def __post_init__(self):
        if self.tau2_U is None and self.tau2_UT is None:
            raise ValueError("nested structure needs at least one term")
        if self.tau2_U is not None:
            _check_precision("tau2_U", self.tau2_U)
        if self.tau2_UT is not None:
            _check_precision("tau2_UT", self.tau2_UT)
            if self.T < 1:
                raise ValueError("nested structure needs T >= 1 subgroups")


CovStructure = Intercept | InterceptSlope | Nested | None


def _check_precision(name, value):
    if not (math.isfinite(value) and value > 0.0):
        raise ValueError(f"{name} must be a finite positive precision, got {value!r}")


def cov_matrix(cov: CovStructure) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Sigma, L)`` with ``L`` the lower Cholesky factor of ``Sigma``."""
    if cov is None:
        sigma = np.zeros((0, 0))
    elif isinstance(cov, Intercept):
        sigma = np.array([[1.0 / cov.tau2]])
    elif isinstance(cov, InterceptSlope):
        off = cov.rho / math.sqrt(cov.tau2_1 * cov.tau2_2)
        sigma = np.array([[1.0 / cov.tau2_1, off], [off, 1.0 / cov.tau2_2]])
    elif isinstance(cov, Nested):
        diag = []
        if cov.tau2_U is not None:
            diag.append(1.0 / cov.tau2_U)
        if cov.tau2_UT is not None:
            diag.extend([1.0 / cov.tau2_UT] * cov.T)
        sigma = np.diag(diag)
    else:
        raise TypeError(f"not a covariance structure: {cov!r}")
    return sigma, np.linalg.cholesky(sigma) if sigma.size else sigma.copy()


# ---------------------------------------------------------------------------
# structural description (no values)


@dataclass(frozen=True)
class RandomEffects:
    """Which random effects a model carries.

    ``slope`` names the covariate column receiving a random slope for
    ``intercept_slope``.  ``group_term`` / ``sub_term`` select the plant-level
    and quarter-within-plant terms of a ``nested`` structure.
    """

    kind: str = "none"
    slope: str | None = None
    group_term: bool = True
    sub_term: bool = True

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.kind == "intercept_slope" and not self.slope:
            raise ValueError("intercept_slope needs a slope covariate")
        if self.kind == "nested" and not (self.group_term or self.sub_term):
            raise ValueError("nested structure needs at least one term")

    @property
    def raw_names(self) -> tuple[str, ...]:
        if self.kind == "intercept":
            return ("logvar",)
        if self.kind == "intercept_slope":
            return ("logvar_1", "logvar_2", "atanh_rho")
        if self.kind == "nested":
            return (("logvar_U",) if self.group_term else ()) + (
                ("logvar_UT",) if self.sub_term else ()
            )
        return ()

    @property
    def report_names(self) -> tuple[str, ...]:
        return tuple(_RAW_TO_REPORT[n] for n in self.raw_names)

    @property
    def terms(self) -> frozenset[str]:
        """Canonical random terms, used to decide model nesting."""
        if self.kind == "intercept":
            return frozenset({"group"})
        if self.kind == "intercept_slope":
            return frozenset({"group", f"slope:{self.slope}"})
        if self.kind == "nested":
            return frozenset(
                (["group"] if self.group_term else []) + (["sub"] if self.sub_term else [])
            )
        return frozenset()

    def dim(self, n_sub: int = 0) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "intercept":
            return 1
        if self.kind == "intercept_slope":
            return 2
        return int(self.group_term) + (n_sub if self.sub_term else 0)

    def structure(self, cov_raw, n_sub: int = 0) -> CovStructure:
        cov_raw = np.asarray(cov_raw, dtype=float)
        if self.kind == "none":
            return None
        if self.kind == "intercept":
            return Intercept(math.exp(-cov_raw[0]))
        if self.kind == "intercept_slope":
            return InterceptSlope(
                math.exp(-cov_raw[0]), math.exp(-cov_raw[1]), math.tanh(cov_raw[2])
            )
        it = iter(cov_raw)
        tu = math.exp(-next(it)) if self.group_term else None
        tut = math.exp(-next(it)) if self.sub_term else None
        return Nested(tu, tut, n_sub)

    def precision(self, cov_raw, n_sub: int = 0) -> tuple[np.ndarray, float]:
        """Precision matrix ``inv(Sigma)`` and ``log det Sigma``."""
        cov_raw = np.asarray(cov_raw, dtype=float)
        if self.kind == "none":
            return np.zeros((0, 0)), 0.0
        if self.kind == "intercept_slope":
            v1, v2 = math.exp(cov_raw[0]), math.exp(cov_raw[1])
            rho = math.tanh(cov_raw[2])
            det = v1 * v2 * (1.0 - rho * rho)
            off = rho * math.sqrt(v1 * v2)
            prec = np.array([[v2, -off], [-off, v1]]) / det
            return prec, math.log(det)
        logvars = []
        if self.kind == "intercept":
            logvars = [cov_raw[0]]
        else:
            it = iter(cov_raw)
            if self.group_term:
                logvars.append(next(it))
            if self.sub_term:
                logvars.extend([next(it)] * n_sub)
        logvars = np.asarray(logvars, dtype=float)
        return np.diag(np.exp(-logvars)), float(logvars.sum())


_RAW_TO_REPORT = {
    "logvar": "tau2",
    "logvar_1": "tau2_1",
    "logvar_2": "tau2_2",
    "atanh_rho": "rho",
    "logvar_U": "tau2_U",
    "logvar_UT": "tau2_UT",
    "log_phi": "phi",
}


def to_report(raw_name: str, value: float) -> float:
    """Map one unconstrained coordinate onto its reporting scale."""
    if raw_name == "log_phi":
        return math.exp(value)
    if raw_name.startswith("logvar"):
        return math.exp(-value)
    if raw_name == "atanh_rho":
        return math.tanh(value)
    return float(value)


def from_report(raw_name: str, value: float) -> float:
    if raw_name == "log_phi":
        return math.log(value)
    if raw_name.startswith("logvar"):
        return -math.log(value)
    if raw_name == "atanh_rho":
        return math.atanh(value)
    return float(value)


def report_jacobian(raw_name: str, value: float) -> float:
    """d(reporting value) / d(unconstrained value) at ``value``."""
    if raw_name == "log_phi":
        return math.exp(value)
    if raw_name.startswith("logvar"):
        return -math.exp(-value)
    if raw_name == "atanh_rho":
        return 1.0 - math.tanh(value) ** 2
    return 1.0


@dataclass(frozen=True)
class ModelSpec:
    """Fixed covariates (dataset column names), random effects and link."""

    covariates: tuple[str, ...]
    random: RandomEffects = field(default_factory=RandomEffects)
    link: Link = field(default_factory=Link)

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates:
            raise ValueError("a model needs at least one fixed covariate")
        if isinstance(self.link, str):
            object.__setattr__(self, "link", Link(self.link))

    @property
    def p(self) -> int:
        return len(self.covariates)

    @property
    def raw_names(self) -> tuple[str, ...]:
        return self.covariates + ("log_phi",) + self.random.raw_names

    @property
    def names(self) -> tuple[str, ...]:
        """Parameter names on the reporting scale."""
        return self.covariates + ("phi",) + self.random.report_names

    @property
    def n_params(self) -> int:
        return len(self.raw_names)

    def z_row(self, x: Sequence[float], sub_code: int | None = None, n_sub: int = 0):
        """Random-effects design row for one record (``x`` in model columns)."""
        r = self.random
        if r.kind == "none":
            return np.zeros(0)
        if r.kind == "intercept":
            return np.ones(1)
        if r.kind == "intercept_slope":
            return np.array([1.0, float(x[self.covariates.index(r.slope)])])
        if r.sub_term and sub_code is None:
            raise ValueError("nested structure needs the record's subgroup code")
        row = [1.0] if r.group_term else []
        if r.sub_term:
            row.extend(1.0 if t == sub_code else 0.0 for t in range(n_sub))
        return np.array(row)

    def design(self, data: "Dataset") -> tuple[np.ndarray, np.ndarray]:
        """Fixed design ``X`` (model columns) and random design ``Z``."""
        X = data.columns_matrix(self.covariates)
        r = self.random
        n = len(data)
        if r.kind == "none":
            Z = np.zeros((n, 0))
        elif r.kind == "intercept":
            Z = np.ones((n, 1))
        elif r.kind == "intercept_slope":
            Z = np.column_stack([np.ones(n), data.columns_matrix([r.slope])[:, 0]])
        else:
            parts = [np.ones((n, 1))] if r.group_term else []
            if r.sub_term:
                codes, levels = data.subgroup_codes()
                parts.append(np.eye(len(levels))[codes])
            Z = np.hstack(parts)
        return X, Z

    def n_sub(self, data: "Dataset") -> int:
        if self.random.kind != "nested" or not self.random.sub_term:
            return 0
        return len(data.subgroup_codes()[1])


@dataclass(frozen=True, eq=False)
class ParamVector:
    beta: np.ndarray
    log_phi: float
    cov_raw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "beta", np.array(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "cov_raw", np.array(self.cov_raw, dtype=float).reshape(-1))
        object.__setattr__(self, "log_phi", float(self.log_phi))

    @property
    def phi(self) -> float:
        return math.exp(self.log_phi)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.log_phi], self.cov_raw])

    @classmethod
    def unpack(cls, flat, spec: ModelSpec) -> "ParamVector":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {flat.shape}")
        p = spec.p
        return cls(flat[:p].copy(), float(flat[p]), flat[p + 1 :].copy())

    def report(self, spec: ModelSpec) -> dict[str, float]:
        """Parameters on the reporting scale keyed by name."""
        flat = self.pack()
        return {
            name: to_report(raw, v) for name, raw, v in zip(spec.names, spec.raw_names, flat)
        }

    @classmethod
    def from_report(cls, spec: ModelSpec, values) -> "ParamVector":
        if isinstance(values, dict):
            missing = set(spec.names) - set(values)
            if missing:
                raise ValueError(f"missing parameter values: {sorted(missing)}")
            values = [values[n] for n in spec.names]
        flat = [from_report(raw, float(v)) for raw, v in zip(spec.raw_names, values)]
        return cls.unpack(np.array(flat), spec)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        a, b = self.pack(), other.pack()
        return a.shape == b.shape and bool(np.array_equal(a, b))

    def __repr__(self):
        return f"ParamVector(beta={self.beta.tolist()}, log_phi={self.log_phi}, cov_raw={self.cov_raw.tolist()})"


def linear_predictor(spec: ModelSpec, beta, b, x, sub_code=None, n_sub: int = 0):
    """Return ``(eta, mu)`` for one record with covariates ``x``."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if x.shape != (spec.p,) or beta.shape != (spec.p,):
        raise ValueError(f"expected {spec.p} covariates and coefficients")
    z = spec.z_row(x, sub_code, n_sub)
    if z.shape != b.shape:
        raise ValueError(f"random effect has length {b.size}, design row has {z.size}")
    eta = float(x @ beta + z @ b)
    return eta, float(spec.link.inverse(eta))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Schema:
    response: str
    covariates: tuple[str, ...]
    group: str
    subgroup: str | None = None
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


class Record(NamedTuple):
    y: float
    x: np.ndarray
    group_id: str
    subgroup_id: str | None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses in (0, 1), a fixed-covariate matrix and grouping labels."""

    y: np.ndarray
    X: np.ndarray
    columns: tuple[str, ...]
    group: np.ndarray
    subgroup: np.ndarray | None = None
    dropped: int = 0
    schema: Schema | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError("covariate matrix must have one row per response")
        if len(self.columns) != X.shape[1]:
            raise DataError("column names do not match the covariate matrix")
        bad = np.flatnonzero(~((y > 0.0) & (y < 1.0)))
        if bad.size:
            raise DataError(f"response at record {bad[0] + 1} is {y[bad[0]]!r}, outside (0, 1)")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite covariate value")
        group = np.asarray(self.group, dtype=str)
        if group.shape != y.shape:
            raise DataError("group labels must have one entry per response")
        sub = self.subgroup
        if sub is not None:
            sub = np.asarray(sub, dtype=str)
            if sub.shape != y.shape:
                raise DataError("subgroup labels must have one entry per response")
            sub.setflags(write=False)
        for arr in (y, X, group):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "subgroup", sub)
        object.__setattr__(self, "columns", tuple(self.columns))

    def __len__(self):
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def groups(self) -> np.ndarray:
        return np.unique(self.group)

    @property
    def n_groups(self) -> int:
        return self.groups.size

    def records(self) -> Iterator[Record]:
        for i in range(len(self)):
            sub = None if self.subgroup is None else str(self.subgroup[i])
            yield Record(float(self.y[i]), self.X[i].copy(), str(self.group[i]), sub)

    def columns_matrix(self, names: Sequence[str]) -> np.ndarray:
        try:
            idx = [self.columns.index(n) for n in names]
        except ValueError as exc:
            raise DataError(f"unknown covariate column: {exc}") from None
        return self.X[:, idx]

    def subgroup_codes(self) -> tuple[np.ndarray, np.ndarray]:
        if self.subgroup is None:
            raise DataError("dataset has no subgroup column")
        levels, codes = np.unique(self.subgroup, return_inverse=True)
        return codes, levels

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha1()
        h.update(self.y.tobytes())
        h.update(self.X.tobytes())
        h.update("\x00".join(self.group.tolist()).encode())
        if self.subgroup is not None:
            h.update("\x00".join(self.subgroup.tolist()).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_sub = (self.subgroup is None and other.subgroup is None) or (
            self.subgroup is not None
            and other.subgroup is not None
            and np.array_equal(self.subgroup, other.subgroup)
        )
        return (
            self.columns == other.columns
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.group, other.group)
            and same_sub
        )


def ingest_csv(path, schema: Schema) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Rows whose response cell is empty are dropped and counted in
    ``Dataset.dropped``.  Any other invalid cell raises :class:`DataError`
    naming the data row (1-based, header excluded).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.response, schema.group, *schema.covariates]
        if schema.subgroup:
            needed.append(schema.subgroup)
        unknown = [c for c in needed if c not in header]
        if unknown:
            raise DataError(f"unknown column(s) {unknown} in {path}")
        ys, xs, gs, ss = [], [], [], []
        dropped = 0
        for row_no, row in enumerate(reader, start=1):
            cell = (row[schema.response] or "").strip()
            if cell == "" or cell.upper() == "NA":
                dropped += 1
                continue
            try:
                y = float(cell)
                x = [float(row[c]) for c in schema.covariates]
            except (TypeError, ValueError):
                raise DataError(f"row {row_no}: non-numeric value") from None
            if not (0.0 < y < 1.0):
                raise DataError(f"row {row_no}: response {cell} outside (0, 1)")
            if not all(map(math.isfinite, x)):
                raise DataError(f"row {row_no}: non-finite covariate")
            g = (row[schema.group] or "").strip()
            if not g:
                raise DataError(f"row {row_no}: empty group identifier")
            ys.append(y)
            xs.append(([1.0] if schema.intercept else []) + x)
            gs.append(g)
            if schema.subgroup:
                s = (row[schema.subgroup] or "").strip()
                if not s:
                    raise DataError(f"row {row_no}: empty subgroup identifier")
                ss.append(s)
    columns = ((INTERCEPT,) if schema.intercept else ()) + schema.covariates
    p = len(columns)
    return Dataset(
        y=np.array(ys),
        X=np.array(xs, dtype=float).reshape(len(ys), p),
        columns=columns,
        group=np.array(gs, dtype=str),
        subgroup=np.array(ss, dtype=str) if schema.subgroup else None,
        dropped=dropped,
        schema=schema,
    )


def default_schema(data: Dataset, response="y", group="group", subgroup="subgroup") -> Schema:
    covs = tuple(c for c in data.columns if c != INTERCEPT)
    return Schema(
        response=response,
        covariates=covs,
        group=group,
        subgroup=subgroup if data.subgroup is not None else None,
        intercept=INTERCEPT in data.columns,
    )


def write_csv(data: Dataset, path, schema: Schema | None = None) -> Schema:
    """Write ``data`` in the layout :func:`ingest_csv` reads; returns the schema used."""
    schema = schema or data.schema or default_schema(data)
    cols = [schema.response, *schema.covariates, schema.group]
    if schema.subgroup:
        cols.append(schema.subgroup)
    X = data.columns_matrix(schema.covariates)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(data)):
            row = [repr(float(data.y[i])), *(repr(float(v)) for v in X[i]), data.group[i]]
            if schema.subgroup:
                row.append(data.subgroup[i])
            w.writerow(row)
    return schema
