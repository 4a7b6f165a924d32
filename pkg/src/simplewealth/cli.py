"""Command-line entry point: ``simplewealth run|validate|summarize``.

Configs are INI-style text: ``[section]`` headers, ``key = value`` lines and
``#`` comments. Lists are comma-separated. Unknown sections or keys are
rejected, and validation reports every problem it finds rather than the first.
See README.md for the full key reference and the CSV schemas.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._mc import DEFAULT_CHUNK, csv_text
from .convergence import (
    CONVERGENCE_HEADER,
    RESIDUAL_HEADER,
    ConvergenceConfig,
    PartitionSequenceSpec,
    ResidualConfig,
    run_freeze_convergence,
    run_log_ratio_residual,
    run_multiplicative_convergence,
)
from .market import (
    FixedJump,
    LogNormalJump,
    ModelError,
    ModelSpec,
    TimeGrid,
    TwoPointJump,
    load_fixture_table,
    returns_from_prices,
    simulate,
)
from .portfolio import (
    ConstantFraction,
    Partition,
    check_no_short_sales,
    ramp_strategy,
    target_tracking_schedule,
    wealth_additive_units,
    wealth_continuous,
    wealth_multiplicative,
)
from .utility import (
    KM_HEADER,
    SUPERMART_HEADER,
    UTILITY_HEADER,
    CRRAUtility,
    LogUtility,
    SupermartingaleFamily,
    UtilityConfig,
    run_utility_experiment,
    supermartingale_convergence_check,
)

OUTPUT_ENV = "SIMPLEWEALTH_OUTPUT"
KINDS = ("converge", "residual", "freeze", "utility-gap", "terminal", "uniform", "supermart",
         "demo-negative")
STATISTICAL = set(KINDS) - {"demo-negative"}
DEMO_HEADER = ("k", "t", "S1", "continuous", "additive", "multiplicative", "units_additive",
               "units_multiplicative", "violation")

SCHEMA = {
    "experiment": {"kind": str, "n_paths": int, "seed": int, "x": float, "chunk_size": int,
                   "timing": bool, "output": str},
    "model": {"kind": str, "mu": "floats", "sigma": "floats", "s0": "floats", "corr": "floats",
              "intensity": "floats", "jump_law": str, "jump_size": float, "jump_low": float,
              "jump_high": float, "jump_p_low": float, "jump_mean": float, "jump_std": float,
              "table": str, "prices": "floats"},
    "grid": {"horizon": float, "n_steps": int},
    "strategy": {"kind": str, "pi": "floats", "cap": float, "scale_eps": float},
    "partition": {"kind": str, "ladder": "floats"},
    "convergence": {"epsilons": "floats"},
    "residual": {"n_steps": "ints", "scale_eps": float, "intervals": int},
    "utility": {"kind": str, "gamma": float, "epsilon": float},
    "supermart": {"sigmas": "floats", "drifts": "floats", "control_sigma": float,
                  "epsilon": float, "n_steps": int, "horizon": float},
    "demo": {"rebalance": "ints"},
    "thresholds": {"epsilon": float, "target": float, "ratio_lo": float, "ratio_hi": float,
                   "control_min": float, "se_band": float},
}

_MARKET = {"experiment", "model", "grid", "strategy", "thresholds"}
SECTIONS = {
    "converge": _MARKET | {"partition", "convergence"},
    "freeze": _MARKET | {"partition", "convergence"},
    "residual": _MARKET | {"residual"},
    "utility-gap": _MARKET | {"partition", "utility"},
    "terminal": _MARKET | {"partition", "utility"},
    "uniform": _MARKET | {"partition", "utility"},
    "supermart": {"experiment", "supermart", "thresholds"},
    "demo-negative": _MARKET | {"demo"},
}

DEFAULT_THRESHOLDS = {"epsilon": 0.01, "target": 0.05, "ratio_lo": 1.5, "ratio_hi": 2.8,
                      "control_min": 0.5, "se_band": 3.0}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    kind: str
    values: dict
    base_dir: Path
    text_hash: str
    model: ModelSpec | None = None
    grid: TimeGrid | None = None
    strategy: object = None
    partitions: PartitionSequenceSpec | None = None
    thresholds: dict = field(default_factory=dict)

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    @property
    def n_paths(self) -> int:
        return self.get("experiment", "n_paths", 1000)

    @property
    def seed(self) -> int:
        return self.get("experiment", "seed", 0)

    @property
    def x(self) -> float:
        return self.get("experiment", "x", 1.0)


# ---------------------------------------------------------------------------
# parsing


def _convert(raw: str, kind):
    if kind is str:
        return raw.strip()
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind in ("floats", "ints"):
        conv = float if kind == "floats" else int
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if not items:
            raise ValueError("expected a non-empty list")
        return tuple(conv(v) for v in items)
    return kind(raw.strip())


def _read_sections(text: str) -> tuple[dict, list]:
    parser = configparser.ConfigParser(strict=True, interpolation=None,
                                       inline_comment_prefixes=("#",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        return {}, [f"duplicate key '{exc.section}.{exc.option}' at line {exc.lineno}"]
    except configparser.DuplicateSectionError as exc:
        return {}, [f"duplicate section [{exc.section}] at line {exc.lineno}"]
    except configparser.Error as exc:
        return {}, [f"malformed config: {exc}"]

    values, errors = {}, []
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                errors.append(f"unknown key '{section}.{key}'")
                continue
            try:
                values[section][key] = _convert(raw, SCHEMA[section][key])
            except ValueError as exc:
                errors.append(f"{section}.{key}: {exc}")
    return values, errors


_JUMP_KEYS = {"fixed": {"jump_size"}, "two_point": {"jump_low", "jump_high", "jump_p_low"},
              "lognormal": {"jump_mean", "jump_std"}}
_MODEL_KEYS = {
    "fixture": {"kind", "table", "prices"},
    "black_scholes": {"kind", "mu", "sigma", "s0", "corr"},
    "merton": {"kind", "mu", "sigma", "s0", "corr", "intensity", "jump_law"},
}


def _build_model(cfg: ExperimentConfig, errors: list) -> None:
    m = cfg.values.get("model")
    if m is None:
        errors.append("missing section [model]")
        return
    kind = m.get("kind", "black_scholes")
    allowed = _MODEL_KEYS.get(kind, set(m)) | _JUMP_KEYS.get(m.get("jump_law"), set())
    stray = [k for k in m if k not in allowed]
    if stray:
        errors += [f"model.{k} does not apply to model.kind = {kind}"
                   + (f" with jump_law = {m['jump_law']}" if "jump_law" in m else "") for k in stray]
        return
    try:
        if kind == "fixture":
            if "table" in m:
                grid, table = load_fixture_table(cfg.base_dir / m["table"])
                cfg.grid = grid
            elif "prices" in m:
                table = np.asarray(m["prices"])
                horizon = cfg.get("grid", "horizon", float(table.size - 1))
                cfg.grid = TimeGrid(horizon, table.size - 1)
            else:
                errors.append("model.table or model.prices is required for a fixture")
                return
            cfg.model = ModelSpec.fixture(table)
            return
        if kind not in ("black_scholes", "merton"):
            errors.append(f"model.kind: unknown model {kind!r}")
            return
        law = None
        law_kind = m.get("jump_law")
        if law_kind == "fixed":
            law = FixedJump(m["jump_size"])
        elif law_kind == "two_point":
            law = TwoPointJump(m["jump_low"], m["jump_high"], m.get("jump_p_low", 0.5))
        elif law_kind == "lognormal":
            law = LogNormalJump(m["jump_mean"], m["jump_std"])
        elif law_kind is not None:
            errors.append(f"model.jump_law: unknown law {law_kind!r}")
        mu, sigma = m.get("mu", (0.0,)), m.get("sigma", (0.0,))
        d = max(len(mu), len(sigma), len(m.get("s0", (1,))), len(m.get("intensity", (1,))))
        corr = m.get("corr")
        if corr is not None:
            if len(corr) != d * d:
                errors.append(f"model.corr: expected {d * d} entries for {d} assets")
                return
            corr = np.reshape(corr, (d, d))
        intensity = m.get("intensity", (0.0,)) if kind == "merton" else (0.0,)
        cfg.model = ModelSpec.merton(mu, sigma, s0=m.get("s0", (100.0,)), corr=corr,
                                     intensity=intensity, jump_law=law, d=d, kind=kind)
    except KeyError as exc:
        errors.append(f"model.{exc.args[0]}: required by jump_law = {m.get('jump_law')}")
    except (ModelError, ValueError, OSError) as exc:
        errors.append(f"model: {exc}")


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` carrying every problem found."""
    values, errors = _read_sections(text)
    if errors and not values:
        raise ConfigError(errors)
    kind = values.get("experiment", {}).get("kind")
    if kind is None:
        errors.append("experiment.kind is required")
    elif kind not in KINDS:
        errors.append(f"experiment.kind: unknown experiment {kind!r} (choose from {', '.join(KINDS)})")
    if kind in SECTIONS:
        errors += [f"section [{sec}] does not apply to experiment.kind = {kind}"
                   for sec in values if sec not in SECTIONS[kind]]
    cfg = ExperimentConfig(kind, values, Path(base_dir),
                           hashlib.sha256(text.encode()).hexdigest())
    cfg.thresholds = {**DEFAULT_THRESHOLDS, **values.get("thresholds", {})}

    exp = values.get("experiment", {})
    if kind in STATISTICAL and exp.get("n_paths", 1000) < 2:
        errors.append("experiment.n_paths: statistical experiments need at least 2 paths")
    if exp.get("n_paths", 1000) < 1:
        errors.append("experiment.n_paths must be positive")
    if exp.get("chunk_size", DEFAULT_CHUNK) < 1:
        errors.append("experiment.chunk_size must be positive")
    if exp.get("x", 1.0) < 0:
        errors.append("experiment.x must be nonnegative")

    if kind != "supermart":
        _build_model(cfg, errors)
        if cfg.grid is None and kind not in ("residual",):
            g = values.get("grid", {})
            try:
                cfg.grid = TimeGrid(g.get("horizon", 1.0), g.get("n_steps", 1024))
            except ValueError as exc:
                errors.append(f"grid: {exc}")
        if cfg.model is not None and cfg.grid is not None:
            try:
                cfg.model.check_grid(cfg.grid)
            except ModelError as exc:
                errors.append(f"grid.n_steps: {exc}")
        if kind == "residual" and "n_steps" in values.get("grid", {}):
            errors.append("grid.n_steps does not apply to the residual experiment; use residual.n_steps")
        if kind == "residual" and cfg.model is not None:
            horizon = cfg.get("grid", "horizon", 1.0)
            for n in cfg.get("residual", "n_steps", (512, 1024, 2048, 4096)):
                try:
                    cfg.model.check_grid(TimeGrid(horizon, n))
                except (ModelError, ValueError) as exc:
                    errors.append(f"residual.n_steps ({n}): {exc}")
        _build_strategy(cfg, errors)
    if kind in ("converge", "utility-gap", "terminal", "uniform", "freeze"):
        p = values.get("partition", {})
        default_kind = "uniform"
        try:
            cfg.partitions = PartitionSequenceSpec(p.get("kind", default_kind),
                                                   tuple(_ladder_value(v) for v in
                                                         p.get("ladder", (4, 16, 64, 256))))
        except ValueError as exc:
            errors.append(f"partition: {exc}")
        if cfg.partitions is not None and cfg.grid is not None and cfg.partitions.kind != "price":
            top = cfg.partitions.ladder[-1]
            top = 2 ** top if cfg.partitions.kind == "dyadic" else top
            if top > cfg.grid.n_steps:
                errors.append(f"partition.ladder: {top} intervals exceed grid.n_steps = {cfg.grid.n_steps}")
        if kind == "freeze" and cfg.partitions is not None and cfg.partitions.kind != "uniform":
            errors.append("partition.kind: the freeze experiment uses a uniform ladder of m values")
    for key in ("epsilons",):
        eps = cfg.get("convergence", key, ())
        if any(e <= 0 for e in eps):
            errors.append("convergence.epsilons must be positive")
    if kind in ("utility-gap", "terminal", "uniform"):
        u = values.get("utility", {})
        try:
            _utility(u)
        except ValueError as exc:
            errors.append(f"utility: {exc}")
    if kind == "supermart":
        s = values.get("supermart", {})
        if not s.get("sigmas"):
            errors.append("supermart.sigmas is required")
        if s.get("drifts") is not None and len(s["drifts"]) != len(s.get("sigmas", ())):
            errors.append("supermart.drifts must match supermart.sigmas in length")
        if any(v < 0 for v in s.get("sigmas", ()) + s.get("drifts", ())):
            errors.append("supermart: sigmas and drifts must be nonnegative")
    if kind == "demo-negative" and cfg.model is not None and cfg.model.kind != "fixture":
        errors.append("model.kind: demo-negative runs on a fixture")
    if errors:
        raise ConfigError(errors)
    return cfg


def _ladder_value(v):
    return int(v) if float(v).is_integer() else float(v)


def _utility(u: dict):
    kind = u.get("kind", "log")
    if kind == "log":
        return LogUtility()
    if kind == "crra":
        return CRRAUtility(u.get("gamma", 2.0))
    raise ValueError(f"unknown utility {kind!r}")


def _build_strategy(cfg: ExperimentConfig, errors: list) -> None:
    s = cfg.values.get("strategy", {})
    utility_kind = cfg.kind in ("utility-gap", "terminal", "uniform")
    kind = s.get("kind", "optimal" if utility_kind and "pi" not in s else "constant")
    for key in ("pi", "cap"):
        if key in s and kind != {"pi": "constant", "cap": "ramp"}[key]:
            errors.append(f"strategy.{key} does not apply to strategy.kind = {kind}")
    d = cfg.model.d if cfg.model is not None else 1
    try:
        if kind == "constant":
            pi = s.get("pi", (0.5,))
            if len(pi) == 1 and d > 1:
                pi = pi * d
            cfg.strategy = ConstantFraction(pi=tuple(pi))
        elif kind == "ramp":
            horizon = cfg.grid.horizon if cfg.grid is not None else 1.0
            cfg.strategy = ramp_strategy(s.get("cap", 0.9), horizon, d)
        elif kind == "optimal":
            if cfg.kind not in ("utility-gap", "terminal", "uniform"):
                errors.append("strategy.kind = optimal is only available for utility experiments")
            cfg.strategy = None
        else:
            errors.append(f"strategy.kind: unknown strategy {kind!r}")
            return
        eps = s.get("scale_eps", 0.0)
        if cfg.strategy is not None and eps:
            cfg.strategy = cfg.strategy.scaled(eps)
    except ValueError as exc:
        errors.append(f"strategy: {exc}")


# ---------------------------------------------------------------------------
# experiments


def _convergence_config(cfg, workers):
    return ConvergenceConfig(cfg.model, cfg.grid, cfg.strategy, cfg.partitions,
                             epsilons=cfg.get("convergence", "epsilons", (0.05, 0.01, 0.002)),
                             x=cfg.x, n_paths=cfg.n_paths, seed=cfg.seed,
                             chunk_size=cfg.get("experiment", "chunk_size", DEFAULT_CHUNK),
                             workers=workers, timing=cfg.get("experiment", "timing", False))


def _utility_config(cfg, workers):
    u = cfg.values.get("utility", {})
    return UtilityConfig(cfg.model, cfg.grid, _utility(u), cfg.partitions, x=cfg.x,
                         epsilon=u.get("epsilon", 0.01), n_paths=cfg.n_paths, seed=cfg.seed,
                         strategy=cfg.strategy,
                         chunk_size=cfg.get("experiment", "chunk_size", DEFAULT_CHUNK),
                         workers=workers)


def _demo_negative(cfg):
    rebalance = cfg.get("demo", "rebalance", (0, 2))
    n = cfg.grid.n_steps
    paths = simulate(cfg.model, cfg.grid, 1, cfg.seed)
    part = Partition.from_indices(list(rebalance) + [n], n)
    cont = wealth_continuous(cfg.x, cfg.strategy, returns_from_prices(paths))
    schedule = target_tracking_schedule(cfg.x, cfg.strategy, part, paths)
    additive = wealth_additive_units(cfg.x, schedule, paths)
    mult = wealth_multiplicative(cfg.x, cfg.strategy, part, paths)
    flagged = {v.index: v.kind for v in check_no_short_sales(schedule, paths, additive)}
    t = cfg.grid.times
    rows = []
    for k in range(n + 1):
        ua = schedule.units[0, k, 0] if k < n else None
        um = mult.units.units[0, k, 0] if k < n else None
        rows.append((k, float(t[k]), float(paths.values[0, k, 0]), float(cont.values[0, k]),
                     float(additive.values[0, k]), float(mult.values[0, k]), ua, um,
                     flagged.get(k, "")))
    return {"demo_negative.csv": csv_text(DEMO_HEADER, rows)}


def _supermart(cfg, workers):
    s = cfg.values.get("supermart", {})
    common = dict(horizon=s.get("horizon", 1.0), n_steps=s.get("n_steps", 256))
    eps = s.get("epsilon", 0.1)
    chunk = cfg.get("experiment", "chunk_size", DEFAULT_CHUNK)
    fam = SupermartingaleFamily(s["sigmas"], s.get("drifts"),
                                "drifted" if s.get("drifts") else "exponential", **common)
    rows = supermartingale_convergence_check(fam, cfg.n_paths, cfg.seed, eps, chunk, workers).rows
    if "control_sigma" in s:
        ctrl = SupermartingaleFamily((s["control_sigma"],) * len(s["sigmas"]), None, "control",
                                     **common)
        rows += supermartingale_convergence_check(ctrl, cfg.n_paths, cfg.seed, eps, chunk,
                                                  workers).rows
    return {"supermart.csv": csv_text(SUPERMART_HEADER, rows)}


def execute(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Run the experiment and return ``{file name: CSV text}``."""
    if cfg.kind == "converge":
        return {"convergence.csv": run_multiplicative_convergence(_convergence_config(cfg, workers)).to_csv()}
    if cfg.kind == "freeze":
        return {"freeze.csv": run_freeze_convergence(_convergence_config(cfg, workers)).to_csv()}
    if cfg.kind == "residual":
        r = cfg.values.get("residual", {})
        rc = ResidualConfig(cfg.model, cfg.get("grid", "horizon", 1.0),
                            r.get("n_steps", (512, 1024, 2048, 4096)), cfg.strategy,
                            scale_eps=r.get("scale_eps", 0.1), partition_intervals=r.get("intervals", 64),
                            x=cfg.x, n_paths=cfg.n_paths, seed=cfg.seed,
                            chunk_size=cfg.get("experiment", "chunk_size", DEFAULT_CHUNK),
                            workers=workers)
        return {"residual.csv": run_log_ratio_residual(rc).to_csv()}
    if cfg.kind in ("utility-gap", "terminal", "uniform"):
        primary = {"utility-gap": "gap", "terminal": "terminal", "uniform": "uniform"}[cfg.kind]
        report = run_utility_experiment(_utility_config(cfg, workers), primary)
        out = {"utility.csv": report.to_csv()}
        if primary == "terminal":
            out["km.csv"] = report.km_csv()
        return out
    if cfg.kind == "supermart":
        return _supermart(cfg, workers)
    return _demo_negative(cfg)


def wealth_table(wealth) -> str:
    """Debug export of a :class:`WealthPaths` as ``path,k,t,value`` rows."""
    t = wealth.grid.times
    rows = [(p, k, float(t[k]), float(wealth.values[p, k]))
            for p in range(wealth.values.shape[0]) for k in range(wealth.values.shape[1])]
    return csv_text(("path", "k", "t", "value"), rows)


def units_table(schedule) -> str:
    """Debug export of a :class:`UnitSchedule` as ``path,k,rebalance,theta1..thetad`` rows.

    Row ``k`` holds the units carried over the step from ``k`` to ``k + 1``.
    """
    units = schedule.units
    reb = np.broadcast_to(np.atleast_2d(schedule.rebalance), units.shape[:1] + (units.shape[1] + 1,))
    header = ("path", "k", "rebalance") + tuple(f"theta{i + 1}" for i in range(units.shape[2]))
    rows = [(p, k, bool(reb[p, k]), *map(float, units[p, k]))
            for p in range(units.shape[0]) for k in range(units.shape[1])]
    return csv_text(header, rows)


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    sub = cfg.get("experiment", "output", cfg.kind)
    root = os.environ.get(OUTPUT_ENV)
    return Path(root) / sub if root else cfg.base_dir / "results" / sub


def run(cfg: ExperimentConfig, workers: int = 1, out=None) -> int:
    """Execute and write CSVs plus ``manifest.json``; returns 0 or 2 (runtime error)."""
    out = output_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = {"config_sha256": cfg.text_hash, "version": __version__, "seed": cfg.seed,
                "kind": cfg.kind, "thresholds": cfg.thresholds, "status": "running",
                "files": [], "seconds": None}
    _write_manifest(manifest_path, manifest)
    start = time.perf_counter()
    written = []
    try:
        files = execute(cfg, workers)
        for name, text in files.items():
            target = out / name
            written.append(target)
            target.write_text(text)
    except Exception as exc:  # noqa: BLE001 - reported through the exit status
        for target in written:
            target.unlink(missing_ok=True)
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                        seconds=time.perf_counter() - start)
        _write_manifest(manifest_path, manifest)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest.update(status="done", files=[p.name for p in written],
                    seconds=time.perf_counter() - start)
    _write_manifest(manifest_path, manifest)
    return 0


# ---------------------------------------------------------------------------
# summaries


class SummaryError(ValueError):
    pass


HEADERS = {
    "converge": CONVERGENCE_HEADER, "freeze": CONVERGENCE_HEADER, "residual": RESIDUAL_HEADER,
    "utility-gap": UTILITY_HEADER, "terminal": UTILITY_HEADER, "uniform": UTILITY_HEADER,
    "supermart": SUPERMART_HEADER, "demo-negative": DEMO_HEADER,
}
FILE_KIND = {"convergence.csv": "converge", "freeze.csv": "freeze", "residual.csv": "residual",
             "utility.csv": None, "km.csv": "km", "supermart.csv": "supermart",
             "demo_negative.csv": "demo-negative"}


def _read_table(text: str, required) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SummaryError("empty CSV")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise SummaryError(f"missing column {missing[0]!r}")
    return list(reader)


def _f(v: str) -> float:
    return float(v) if v not in ("", None) else float("nan")


def _monotone_lines(rows, p_col, lo_col, hi_col, target, label):
    out = []
    ok = True
    for prev, cur in zip(rows, rows[1:]):
        if _f(cur[p_col]) > _f(prev[p_col]) and _f(cur[lo_col]) > _f(prev[hi_col]):
            ok = False
    out.append(("PASS" if ok else "FAIL") + f": monotonicity{label}")
    final = _f(rows[-1][hi_col])
    out.append(("PASS" if final < target else "FAIL")
               + f": final upper bound{label} {final:.4g} < {target}")
    return out


def summarize_csv(text: str, kind: str, thresholds=None) -> list[str]:
    """Pass/fail lines for one report; raises :class:`SummaryError` on malformed input."""
    th = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    if kind == "km":
        rows = _read_table(text, KM_HEADER)
        ok = all(_f(r["beta_p"]) <= _f(r["mid_gap"]) + 1e-12 for r in rows)
        return [("PASS" if ok else "FAIL") + ": strict-concavity bound beta_m * P[K_m] <= mid-point gap"]
    rows = _read_table(text, HEADERS[kind])
    if not rows:
        raise SummaryError("report has no rows")
    if kind in ("converge", "freeze"):
        lines = []
        for eps in sorted({r["epsilon"] for r in rows}, key=float):
            sub = [r for r in rows if r["epsilon"] == eps]
            if np.isclose(float(eps), th["epsilon"]) or len({r["epsilon"] for r in rows}) == 1:
                lines += _monotone_lines(sub, "p_hat", "ci_lo", "ci_hi", th["target"], f" (eps={eps})")
        return lines or [f"SKIP: no rows at eps={th['epsilon']}"]
    if kind == "residual":
        med = [_f(r["median_abs_residual"]) for r in rows]
        ratios = [a / b for a, b in zip(med, med[1:])]
        dec = all(b < a for a, b in zip(med, med[1:]))
        band = all(th["ratio_lo"] <= q <= th["ratio_hi"] for q in ratios)
        return [("PASS" if dec else "FAIL") + ": residual strictly decreasing",
                ("PASS" if band else "FAIL")
                + f": ratios {', '.join(f'{q:.3g}' for q in ratios)} within [{th['ratio_lo']}, {th['ratio_hi']}]"]
    if kind == "utility-gap":
        last = rows[-1]
        gaps = [abs(_f(r["gap"])) for r in rows]
        ses = [_f(r["se"]) for r in rows]
        within = gaps[-1] <= th["se_band"] * ses[-1] + 1e-12
        mono = all(b <= a + th["se_band"] * s + 1e-12 for a, b, s in zip(gaps, gaps[1:], ses[1:]))
        return [("PASS" if within else "FAIL")
                + f": finest expected utility {_f(last['eu_simple']):.6g} within "
                  f"{th['se_band']} SE of {_f(last['eu_ref']):.6g}",
                ("PASS" if mono else "FAIL") + ": gap magnitude non-increasing"]
    if kind in ("terminal", "uniform"):
        col = "term_exceed" if kind == "terminal" else "unif_exceed"
        return _monotone_lines(rows, col, "ci_lo", "ci_hi", th["target"], f" ({col})")
    if kind == "supermart":
        lines = []
        for fam in dict.fromkeys(r["family"] for r in rows):
            sub = [r for r in rows if r["family"] == fam]
            if fam == "control":
                low = min(_f(r["p_sup"]) for r in sub)
                lines.append(("PASS" if low > th["control_min"] else "FAIL")
                             + f": control sup-exceedance stays above {th['control_min']} (min {low:.3g})")
            else:
                lines += _monotone_lines(sub, "p_sup", "ci_lo", "ci_hi", th["target"], f" ({fam})")
                mono = all(r["mean_monotone"] == "true" for r in sub)
                lines.append(("PASS" if mono else "FAIL") + f": supermartingale means ({fam})")
        return lines
    last = rows[-1]
    add, mult = _f(last["additive"]), _f(last["multiplicative"])
    flagged = any(r["violation"] for r in rows)
    return [("PASS" if add < 0 else "FAIL") + f": additive terminal wealth {add:.6g} < 0",
            ("PASS" if mult >= 0 else "FAIL") + f": multiplicative terminal wealth {mult:.6g} >= 0",
            ("PASS" if flagged else "FAIL") + ": constraint violation flagged"]


def summarize(directory) -> str:
    directory = Path(directory)
    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
    thresholds = manifest.get("thresholds")
    lines = []
    for name, kind in FILE_KIND.items():
        path = directory / name
        if not path.exists():
            continue
        if kind is None:
            kind = manifest.get("kind", "utility-gap")
        lines.append(f"[{name}]")
        lines += [f"  {ln}" for ln in summarize_csv(path.read_text(), kind, thresholds)]
    if not lines:
        raise SummaryError(f"no reports found in {directory}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------


def _load(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="simplewealth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--output", default=None, help="output directory (overrides config)")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_sum = sub.add_parser("summarize", help="pass/fail summary of a results directory")
    p_sum.add_argument("directory")
    args = parser.parse_args(argv)

    if args.command == "summarize":
        try:
            print(summarize(args.directory))
        except (SummaryError, OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "validate":
        print(f"ok: {cfg.kind}")
        return 0
    return run(cfg, workers=args.workers, out=args.output)


if __name__ == "__main__":
    sys.exit(main())
