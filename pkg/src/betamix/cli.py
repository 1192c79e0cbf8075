"""Command-line front end.

Every run reads an optional JSON config, lets flags override it, and writes
reports plus a ``manifest.json`` under ``--out``::

    betamix simulate --seed 1 --out sim
    betamix fit --config sim/config.json --out fit
    betamix dc --config sim/config.json --clones 1,5,10 --seed 7 --out dc
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy

from . import dataclone, predictor
from .dataclone import SamplerError
from .estimator import (
    DegenerateDataError,
    FitResult,
    fit,
    fit_sequence,
    model_compare,
    profile_ci,
    wald_interval,
)
from .marginal import CapacityError, InnerModeError, Integration
from .model import (
    INTERCEPT,
    DataError,
    Dataset,
    ModelSpec,
    ParamVector,
    RandomEffects,
    Schema,
    ingest_csv,
    to_report,
    write_csv,
)
from .simulate import SimDesign, iqa_truth, iqvt_truth, simulate

log = logging.getLogger("betamix")

COMMANDS = ("fit", "compare", "profile", "dc", "predict", "simulate")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_OUTPUT = 5


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the config text when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class OutputError(OSError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    name: str = "model"
    covariates: list[str] = field(default_factory=list)
    intercept: bool = True
    random: str = "intercept"
    slope: str | None = None
    group_term: bool = True
    sub_term: bool = True
    link: str = "logit"

    def spec(self) -> ModelSpec:
        covs = ((INTERCEPT,) if self.intercept else ()) + tuple(self.covariates)
        random = RandomEffects(self.random, self.slope, self.group_term, self.sub_term)
        return ModelSpec(covs, random, self.link)


@dataclass
class ScenarioConfig:
    name: str = "baseline"
    values: dict[str, float] = field(default_factory=dict)


@dataclass
class SimulateConfig:
    preset: str = "iqvt"
    n_missing: int | None = None
    truth: dict[str, float] | None = None


@dataclass
class RunConfig:
    command: str = "fit"
    data: str | None = None
    out: str = "out"
    response: str = "y"
    group: str = "group"
    subgroup: str | None = None
    models: list[ModelConfig] = field(default_factory=list)
    method: str = "laplace"
    nodes: int = 15
    qmc_points: int = 4096
    level: float = 0.95
    profile_params: list[str] = field(default_factory=list)
    clones: list[int] = field(default_factory=lambda: list(dataclone.K_DEFAULT))
    chains: int = 3
    iters: int = 3000
    burnin: int = 1000
    seed: int | None = None
    scenarios: list[ScenarioConfig] = field(default_factory=list)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def schema(self) -> Schema:
        covs: list[str] = []
        for m in self.models:
            covs += [c for c in m.covariates if c not in covs]
        return Schema(self.response, tuple(covs), self.group, self.subgroup)

    def integration(self) -> Integration:
        return Integration(self.method, self.nodes, self.qmc_points)


_NESTED = {"models": ModelConfig, "scenarios": ScenarioConfig, "simulate": SimulateConfig}


def _key_line(text: str | None, key: str) -> int | None:
    if not text:
        return None
    needle = json.dumps(key)
    for no, line in enumerate(text.splitlines(), start=1):
        if needle + ":" in line.replace(" ", "") or needle in line:
            return no
    return None


def _check_type(value, annotation: str, where: str, text):
    ok = {
        "str": lambda v: isinstance(v, str),
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
    }
    base = annotation.replace(" | None", "")
    if value is None and "None" in annotation:
        return value
    if base in ok:
        if not ok[base](value):
            raise ConfigError(f"{where} must be {base}, got {value!r}", _key_line(text, where.split(".")[-1]))
        return float(value) if base == "float" else value
    if base.startswith("list["):
        inner = base[5:-1]
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list", _key_line(text, where.split(".")[-1]))
        return [_check_type(v, inner, f"{where}[{i}]", text) for i, v in enumerate(value)]
    if base.startswith("dict[str, float]"):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object", _key_line(text, where.split(".")[-1]))
        return {str(k): _check_type(v, "float", f"{where}.{k}", text) for k, v in value.items()}
    return value


def _build(cls, raw: dict, where: str, text: str | None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in fields:
            path = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown key {path!r}", _key_line(text, key))
    kwargs = {}
    for name, value in raw.items():
        path = f"{where}.{name}" if where else name
        if name in _NESTED and cls is RunConfig:
            sub = _NESTED[name]
            if name == "simulate":
                kwargs[name] = _build(sub, value, path, text)
            else:
                if not isinstance(value, list):
                    raise ConfigError(f"{path} must be a list", _key_line(text, name))
                kwargs[name] = [_build(sub, v, f"{path}[{i}]", text) for i, v in enumerate(value)]
        else:
            kwargs[name] = _check_type(value, str(fields[name].type), path, text)
    return cls(**kwargs)


def parse_config(text: str, check: bool = True) -> RunConfig:
    """Parse JSON text into a :class:`RunConfig`; unknown keys are errors.

    ``check=False`` skips the cross-field validation, for configs that
    command-line flags will still complete.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"column {exc.colno}: {exc.msg}", exc.lineno) from None
    cfg = _build(RunConfig, raw, "", text)
    if check:
        validate(cfg)
    return cfg


def canonical(cfg: RunConfig) -> str:
    """Stable textual form; ``canonical(parse_config(canonical(c))) == canonical(c)``."""
    return json.dumps(dataclasses.asdict(cfg), indent=2, ensure_ascii=False) + "\n"


def validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cfg.command!r}")
    try:
        cfg.integration()
    except ValueError as exc:
        raise ConfigError(f"method: {exc}") from None
    if cfg.nodes < 1 or cfg.qmc_points < 16:
        raise ConfigError("nodes must be >= 1 and qmc_points >= 16")
    if not 0.0 < cfg.level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    if cfg.chains < 2:
        raise ConfigError("chains must be at least 2")
    if not 0 <= cfg.burnin < cfg.iters:
        raise ConfigError("need 0 <= burnin < iters")
    if not cfg.clones or any(k < 1 for k in cfg.clones) or cfg.clones != sorted(set(cfg.clones)):
        raise ConfigError("clones must be strictly ascending positive integers")
    if cfg.command in ("dc", "simulate") and cfg.seed is None:
        raise ConfigError(f"{cfg.command} needs an explicit seed")
    if cfg.command != "simulate" and not cfg.data:
        raise ConfigError("data path missing")
    for i, m in enumerate(cfg.models):
        try:
            m.spec()
        except ValueError as exc:
            raise ConfigError(f"models[{i}]: {exc}") from None
    if cfg.simulate.preset not in ("iqvt", "iqa"):
        raise ConfigError("simulate.preset must be 'iqvt' or 'iqa'")


# ---------------------------------------------------------------------------
# output helpers


def _r6(v):
    """Six significant digits; non-finite values become null."""
    v = float(v)
    return float(f"{v:.6g}") if math.isfinite(v) else None


def _fmt(v) -> str:
    v = float(v)
    return f"{v:.6g}" if math.isfinite(v) else "NA"


class _Out:
    """Writes files under one root directory and nowhere else."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputError(f"cannot create output directory {self.root}: {exc}") from exc
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root not in p.parents:
            raise OutputError(f"refusing to write outside {self.root}: {name}")
        self.written.append(name)
        return p

    def json(self, name, obj):
        with self.path(name).open("w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, ensure_ascii=False, allow_nan=False)
            fh.write("\n")

    def csv(self, name, header, rows):
        with self.path(name).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


def _safe_name(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in s)


# ---------------------------------------------------------------------------
# subcommands


def _load(cfg: RunConfig) -> tuple[Dataset, list[ModelConfig]]:
    models = cfg.models or [_default_model(cfg)]
    schema = cfg.schema() if cfg.models else Schema(
        cfg.response, tuple(models[0].covariates), cfg.group, cfg.subgroup
    )
    return ingest_csv(cfg.data, schema), models


def _default_model(cfg: RunConfig) -> ModelConfig:
    """All non-structural columns as covariates with a random intercept."""
    try:
        with open(cfg.data, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
    except (OSError, StopIteration) as exc:
        raise DataError(f"cannot read header of {cfg.data}: {exc}") from None
    skip = {cfg.response, cfg.group, cfg.subgroup}
    return ModelConfig(covariates=[c for c in header if c not in skip])


def _fit_summary(f: FitResult, level: float) -> dict:
    params = {}
    for n in f.names:
        lo, hi = wald_interval(f, n, level)
        params[n] = {
            "estimate": _r6(f.estimates[n]),
            "std_error": _r6(f.std_errors[n]),
            "wald_lower": _r6(lo),
            "wald_upper": _r6(hi),
        }
    return {
        "method": f.method,
        "n_obs": f.n_obs,
        "n_groups": f.n_groups,
        "loglik": _r6(f.loglik),
        "converged": f.converged,
        "parameters": params,
        "variances": {k: _r6(v) for k, v in f.variance_components().items()},
        "hessian_note": f.hessian_note,
    }


def _estimates_rows(f: FitResult, level: float):
    rows = []
    for n in f.names:
        lo, hi = wald_interval(f, n, level)
        rows.append([n, _fmt(f.estimates[n]), _fmt(f.std_errors[n]), _fmt(lo), _fmt(hi)])
    for k, v in f.variance_components().items():
        rows.append([k, _fmt(v), "", "", ""])
    rows.append(["loglik", _fmt(f.loglik), "", "", ""])
    return rows


def _fit_one(cfg, data, m: ModelConfig) -> FitResult:
    f = fit(data, m.spec(), method=cfg.method, settings=cfg.integration())
    if not f.converged:
        log.warning("model %s did not converge (max |grad| %.3g)", m.name, f.grad_norm)
    return f


def cmd_fit(cfg: RunConfig, out: _Out) -> dict:
    data, models = _load(cfg)
    m = models[-1]
    f = _fit_one(cfg, data, m)
    out.csv("estimates.csv", ["parameter", "estimate", "std_error", "wald_lower", "wald_upper"],
            _estimates_rows(f, cfg.level))
    return {"model": m.name, "dropped": data.dropped, **_fit_summary(f, cfg.level)}


def cmd_compare(cfg: RunConfig, out: _Out) -> dict:
    data, models = _load(cfg)
    labels = [m.name for m in models]
    if len(set(labels)) != len(labels):
        raise ConfigError("model names must be unique for compare")
    fits = fit_sequence(data, [m.spec() for m in models], method=cfg.method,
                        settings=cfg.integration())
    cmp = model_compare(fits, labels)
    rows = []
    for i, p in enumerate(cmp.params):
        rows.append([p, *(_fmt(v) for v in cmp.estimates[i])])
        rows.append([f"se({p})", *(_fmt(v) for v in cmp.std_errors[i])])
    rows.append(["loglik", *(_fmt(v) for v in cmp.logliks)])
    out.csv("comparison.csv", ["parameter", *labels], rows)
    out.csv("tests.csv", ["small", "big", "lr", "df", "p_value"],
            [[t["small"], t["big"], _fmt(t["lr"]), t["df"], _fmt(t["p_value"])] for t in cmp.tests])
    return {
        "models": {m.name: _fit_summary(f, cfg.level) for m, f in zip(models, fits)},
        "loglik": {m.name: _r6(f.loglik) for m, f in zip(models, fits)},
        "tests": [
            {"small": t["small"], "big": t["big"], "lr": _r6(t["lr"]), "df": t["df"],
             "p_value": _r6(t["p_value"])}
            for t in cmp.tests
        ],
    }


def cmd_profile(cfg: RunConfig, out: _Out) -> dict:
    data, models = _load(cfg)
    m = models[-1]
    spec = m.spec()
    f = _fit_one(cfg, data, m)
    params = cfg.profile_params or list(spec.names)
    unknown = [p for p in params if p not in spec.names]
    if unknown:
        raise ConfigError(f"profile_params names unknown parameter(s) {unknown}")
    intervals = {}
    rows = []
    for p in params:
        tr = profile_ci(data, spec, f, p, level=cfg.level)
        order = np.argsort(tr.grid_raw)
        out.csv(
            f"profile_{_safe_name(p)}.csv",
            ["raw_value", "value", "profile_loglik", "deviance"],
            [[_fmt(tr.grid_raw[i]), _fmt(to_report(tr.raw_name, tr.grid_raw[i])),
              _fmt(tr.profile[i]), _fmt(2.0 * (tr.loglik_max - tr.profile[i]))] for i in order],
        )
        wl, wu = wald_interval(f, p, cfg.level)
        intervals[p] = {
            "estimate": _r6(f.estimates[p]),
            "wald_lower": _r6(wl),
            "wald_upper": _r6(wu),
            "profile_lower": _r6(tr.lower),
            "profile_upper": _r6(tr.upper),
            "lower_open": bool(tr.lower_open),
            "upper_open": bool(tr.upper_open),
        }
        rows.append([p, _fmt(f.estimates[p]), _fmt(wl), _fmt(wu), _fmt(tr.lower), _fmt(tr.upper),
                     int(tr.lower_open), int(tr.upper_open)])
    out.csv("intervals.csv", ["parameter", "estimate", "wald_lower", "wald_upper",
                              "profile_lower", "profile_upper", "lower_open", "upper_open"], rows)
    return {"model": m.name, "level": cfg.level, "loglik": _r6(f.loglik), "intervals": intervals}


def cmd_dc(cfg: RunConfig, out: _Out) -> dict:
    data, models = _load(cfg)
    m = models[-1]
    spec = m.spec()
    runs = {}
    per_k = {}
    for k in cfg.clones:
        sub_seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
        run = dataclone.dc_sample(data, spec, k, chains=cfg.chains, iters=cfg.iters,
                                  burnin=cfg.burnin, seed=sub_seed)
        runs[k] = run
        dataclone.write_chains_csv(run, out.path(f"chains_K{k}.csv"))
        est, se = dataclone.dc_estimates(run)
        per_k[str(k)] = {
            "estimates": {n: _r6(v) for n, v in est.items()},
            "std_errors": {n: _r6(v) for n, v in se.items()},
            "rhat": {n: _r6(v) for n, v in run.rhat.items()},
            "acceptance": {n: _r6(v) for n, v in run.acceptance.items()},
        }
    result: dict[str, Any] = {"model": m.name, "clones": cfg.clones, "runs": per_k}
    if len(cfg.clones) > 1 and cfg.clones[0] == 1:
        diag = dataclone.diagnose(runs)
        dataclone.write_diagnostics_csv(diag, out.path("diagnostics.csv"))
        result["diagnostics"] = {
            "slopes": {n: _r6(v) for n, v in diag.slopes.items()},
            "lambda_max": [_r6(v) for v in diag.lambda_max],
            "lambda_slope": _r6(diag.lambda_slope),
            "identifiable": diag.identifiable,
        }
    return result


def cmd_predict(cfg: RunConfig, out: _Out) -> dict:
    data, models = _load(cfg)
    m = models[-1]
    f = _fit_one(cfg, data, m)
    preds = predictor.predict_random_effects(f, data)
    predictor.write_effects_csv(preds, out.path("effects.csv"))
    scen = [predictor.Scenario(s.name, dict(s.values)) for s in cfg.scenarios] or [
        predictor.Scenario("baseline")
    ]
    rows = predictor.scenario_report(f, scen, preds)
    predictor.write_scenarios_csv(rows, out.path("scenarios.csv"))
    return {
        "model": m.name,
        "loglik": _r6(f.loglik),
        "effects": {p.group: [_r6(v) for v in p.b_hat] for p in preds},
        "scenarios": {
            r.scenario: _r6(r.mu) for r in rows if r.group == "(population)"
        },
        "failed_groups": [p.group for p in preds if not p.converged],
    }


def cmd_simulate(cfg: RunConfig, out: _Out) -> dict:
    sc = cfg.simulate
    spec, theta = iqvt_truth(4) if sc.preset == "iqvt" else iqa_truth(5)
    if sc.truth:
        values = theta.report(spec)
        unknown = set(sc.truth) - set(values)
        if unknown:
            raise ConfigError(f"simulate.truth names unknown parameter(s) {sorted(unknown)}")
        values.update(sc.truth)
        theta = ParamVector.from_report(spec, values)
    data, effects = simulate(SimDesign(sc.preset, seed=cfg.seed, spec=spec, theta=theta,
                                       n_missing=sc.n_missing))
    data_path = out.path("data.csv")
    schema = write_csv(data, data_path)
    q = spec.random.dim(spec.n_sub(data))
    out.csv("effects.csv", ["group", *(f"b{j + 1}" for j in range(q))],
            [[g, *(repr(float(v)) for v in b)] for g, b in effects.items()])
    covs = [c for c in spec.covariates if c != INTERCEPT]
    model = ModelConfig(
        name=f"{sc.preset}-truth", covariates=covs, random=spec.random.kind,
        slope=spec.random.slope, group_term=spec.random.group_term,
        sub_term=spec.random.sub_term, link=spec.link.tag,
    )
    fit_cfg = RunConfig(command="fit", data=str(data_path), out=cfg.out, response=schema.response,
                        group=schema.group, subgroup=schema.subgroup, models=[model])
    with out.path("config.json").open("w", encoding="utf-8") as fh:
        fh.write(canonical(fit_cfg))
    return {
        "preset": sc.preset,
        "seed": cfg.seed,
        "n_obs": len(data),
        "n_groups": data.n_groups,
        "missing": data.dropped,
        "truth": {n: _r6(v) for n, v in theta.report(spec).items()},
    }


_RUNNERS = {
    "fit": cmd_fit,
    "compare": cmd_compare,
    "profile": cmd_profile,
    "dc": cmd_dc,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def _versions() -> dict:
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "betamix": pkg}


def run(cfg: RunConfig) -> int:
    """Execute one configured run; returns the process exit status."""
    start = time.perf_counter()
    try:
        validate(cfg)
        out = _Out(cfg.out)
        summary = {"command": cfg.command, **_RUNNERS[cfg.command](cfg, out)}
        out.json("summary.json", summary)
        files = {}
        for name in sorted(set(out.written)):
            files[name] = hashlib.sha256((out.root / name).read_bytes()).hexdigest()
        out.json("manifest.json", {
            "config": dataclasses.asdict(cfg),
            "seed": cfg.seed,
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - start, 3),
            "files": files,
        })
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except (DataError, DegenerateDataError) as exc:
        return _fail(EXIT_DATA, "data error", exc)
    except (InnerModeError, CapacityError, SamplerError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numerical failure", exc)
    except OSError as exc:
        return _fail(EXIT_OUTPUT, "output error", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic line
        return _fail(EXIT_OTHER, "error", exc)
    return EXIT_OK


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(f"betamix: {kind}: {exc}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="betamix", description="Beta mixed models.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--data", help="input CSV")
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--method", choices=("laplace", "aghq", "qmc"))
    ap.add_argument("--nodes", type=int, help="AGHQ nodes per dimension")
    ap.add_argument("--qmc-points", type=int, dest="qmc_points")
    ap.add_argument("--clones", type=_int_list, help="clone schedule, e.g. 1,5,10")
    ap.add_argument("--chains", type=int)
    ap.add_argument("--iters", type=int, help="iterations per chain, burn-in included")
    ap.add_argument("--burnin", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--level", type=float, help="interval level")
    ap.add_argument("--preset", choices=("iqvt", "iqa"), help="simulation preset")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, check=False)
    else:
        cfg = RunConfig()
    cfg.command = args.command
    for name in ("data", "method", "nodes", "qmc_points", "clones", "chains", "iters",
                 "burnin", "seed", "out", "level"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.preset:
        cfg.simulate.preset = args.preset
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="betamix: %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
