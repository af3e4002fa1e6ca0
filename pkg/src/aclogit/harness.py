"""Experiment configuration, orchestration and output files.

Configs are YAML mappings. Only ``game``, ``eta``, ``iters`` and ``seeds``
are required; every other key has a default (see :class:`ExperimentConfig`)
and unknown keys are rejected at every level::

    game: quadratic_coordination      # or {name: ..., params: {...}}
    eta: 0.05
    iters: 200000
    seeds: [0, 1, 2]

Each command returns a process exit code:

==  ==========================================
0   success
2   a seed failed during ``run``
3   configuration or I/O error
4   equilibrium solver did not converge
5   validation failure (potential, monotonicity)
==  ==========================================
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .dynamics import DynamicsConfig, integrate
from .errors import ConfigurationError, ContractError, DomainError
from .game import GameSpec, builtin, validate_potential
from .learner import Diagnostics, StepSchedule, run_many
from .logit import equilibrium_to_dict, solve_equilibria
from .measure import GridDensity

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_ERROR = 2
EXIT_CONFIG = 3
EXIT_NOT_CONVERGED = 4
EXIT_VALIDATION = 5


class ConfigSyntaxError(ConfigurationError):
    """The config text is not valid YAML."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ConfigFieldError(ConfigurationError):
    """A config value violates its constraint."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class GameConfig:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ScheduleConfig:
    a0: float = 1.0
    g0: float = 1.0
    rho_alpha: float = 1.0
    rho_gamma: float = 0.6
    n0: int = 1

    def build(self) -> StepSchedule:
        return StepSchedule(self.a0, self.g0, self.rho_alpha, self.rho_gamma, self.n0)


@dataclass
class ReferenceConfig:
    solve: bool = True
    restarts: int = 8
    tol: float = 1e-10
    damping: float = 0.5
    max_iter: int = 10_000


@dataclass
class ThresholdConfig:
    bl: float = 0.05
    pass_fraction: float = 0.9


@dataclass
class CompactConfig:
    bins: int = 512
    every: int = 1000


@dataclass
class DynamicsSection:
    h: float = 0.05
    horizon: float = 30.0
    init: str = "uniform"
    checkpoint_every: int = 1
    profiles: bool = False


@dataclass
class ValidateConfig:
    samples: int = 10_000
    tol: float = 1e-9


@dataclass
class ExperimentConfig:
    game: GameConfig
    eta: float
    iters: int
    seeds: list
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    grid: int = 256
    checkpoint_every: int = 10_000
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    bl_resolution: int = 512
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    compact: CompactConfig = field(default_factory=CompactConfig)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    output_dir: str = "out"
    workers: Optional[int] = None
    save_state: bool = False

    def build_game(self) -> GameSpec:
        try:
            return builtin(self.game.name, **self.game.params)
        except (ConfigurationError, DomainError) as exc:
            raise ConfigFieldError("game", str(exc)) from None

    def checkpoints(self) -> list[int]:
        marks = set(range(0, self.iters, self.checkpoint_every))
        marks.add(self.iters)
        return sorted(marks)


# -- parsing -----------------------------------------------------------------


def _as_int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigFieldError(name, f"expected an integer, got {v!r}")
    return int(v)


def _as_float(v, name: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigFieldError(name, f"expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ConfigFieldError(name, f"must be finite, got {v!r}")
    return float(v)


def _as_bool(v, name: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigFieldError(name, f"expected true or false, got {v!r}")
    return v


def _as_str(v, name: str) -> str:
    if not isinstance(v, str):
        raise ConfigFieldError(name, f"expected a string, got {v!r}")
    return v


# field annotations are strings under postponed evaluation
_SCALARS = {"int": _as_int, "float": _as_float, "bool": _as_bool, "str": _as_str}
_SECTIONS = {
    "schedule": ScheduleConfig,
    "reference": ReferenceConfig,
    "thresholds": ThresholdConfig,
    "compact": CompactConfig,
    "dynamics": DynamicsSection,
    "validate": ValidateConfig,
}


def _section(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigFieldError(prefix, f"expected a mapping, got {data!r}")
    kinds = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(kinds))
    if unknown:
        raise ConfigFieldError(f"{prefix}.{unknown[0]}", f"unknown key (allowed: {', '.join(kinds)})")
    out = {}
    for key, value in data.items():
        out[key] = _SCALARS[kinds[key]](value, f"{prefix}.{key}")
    return cls(**out)


def _game(data) -> GameConfig:
    if isinstance(data, str):
        return GameConfig(data, {})
    if not isinstance(data, dict):
        raise ConfigFieldError("game", "expected a builtin name or {name, params}")
    unknown = sorted(set(data) - {"name", "params"})
    if unknown:
        raise ConfigFieldError(f"game.{unknown[0]}", "unknown key (allowed: name, params)")
    if "name" not in data:
        raise ConfigFieldError("game.name", "missing")
    params = data.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigFieldError("game.params", "expected a mapping")
    return GameConfig(_as_str(data["name"], "game.name"), dict(params))


_REQUIRED = ("game", "eta", "iters", "seeds")
_TOP_SCALARS = {"eta": _as_float, "iters": _as_int, "grid": _as_int, "checkpoint_every": _as_int,
                "bl_resolution": _as_int, "output_dir": _as_str, "save_state": _as_bool}


def config_from_dict(data: Any) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping at the top level")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigFieldError(unknown[0], f"unknown key (allowed: {', '.join(sorted(allowed))})")
    for key in _REQUIRED:
        if key not in data:
            raise ConfigFieldError(key, "missing required key")
    kw: dict[str, Any] = {"game": _game(data["game"])}
    for key, value in data.items():
        if key in _TOP_SCALARS:
            kw[key] = _TOP_SCALARS[key](value, key)
        elif key in _SECTIONS:
            kw[key] = _section(_SECTIONS[key], value if value is not None else {}, key)
    seeds = data["seeds"]
    if not isinstance(seeds, list):
        raise ConfigFieldError("seeds", f"expected a list of integers, got {seeds!r}")
    kw["seeds"] = [_as_int(s, "seeds") for s in seeds]
    if data.get("workers") is not None:
        kw["workers"] = _as_int(data["workers"], "workers")
    cfg = ExperimentConfig(**kw)
    _check(cfg)
    return cfg


def _require(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigFieldError(name, message)


def _check(c: ExperimentConfig) -> None:
    _require(c.eta > 0, "eta", f"must be > 0, got {c.eta}")
    _require(c.iters >= 1, "iters", f"must be >= 1, got {c.iters}")
    _require(len(c.seeds) > 0, "seeds", "must be non-empty")
    _require(len(set(c.seeds)) == len(c.seeds), "seeds", "must be distinct")
    _require(all(s >= 0 for s in c.seeds), "seeds", "must be non-negative")
    _require(c.grid >= 16, "grid", f"must be >= 16, got {c.grid}")
    _require(c.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
    _require(c.bl_resolution >= 16, "bl_resolution", "must be >= 16")
    _require(c.workers is None or c.workers >= 1, "workers", "must be >= 1")
    try:
        c.schedule.build()
    except ConfigurationError as exc:
        raise ConfigFieldError("schedule", str(exc)) from None
    r = c.reference
    _require(r.restarts >= 1, "reference.restarts", "must be >= 1")
    _require(r.tol > 0, "reference.tol", "must be > 0")
    _require(0 < r.damping <= 1, "reference.damping", "must lie in (0, 1]")
    _require(r.max_iter >= 1, "reference.max_iter", "must be >= 1")
    t = c.thresholds
    _require(t.bl > 0, "thresholds.bl", "must be > 0")
    _require(0 <= t.pass_fraction <= 1, "thresholds.pass_fraction", "must lie in [0, 1]")
    _require(c.compact.bins == 0 or c.compact.bins >= 2, "compact.bins", "must be 0 (off) or >= 2")
    _require(c.compact.every >= 1, "compact.every", "must be >= 1")
    d = c.dynamics
    try:
        DynamicsConfig(c.eta, d.h, d.horizon, c.grid, d.checkpoint_every, d.profiles)
    except ConfigurationError as exc:
        raise ConfigFieldError("dynamics", str(exc)) from None
    _require(d.init in ("uniform", "equilibrium"), "dynamics.init", "must be 'uniform' or 'equilibrium'")
    _require(c.validate.samples >= 1, "validate.samples", "must be >= 1")
    _require(c.validate.tol > 0, "validate.tol", "must be > 0")


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None) or getattr(exc, "context_mark", None)
        line, col = (mark.line + 1, mark.column + 1) if mark is not None else (0, 0)
        raise ConfigSyntaxError(getattr(exc, "problem", None) or str(exc), line, col) from None
    return config_from_dict(data)


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def serialize(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def load_config(path, output_dir: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a config file and apply command-line overrides."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    if output_dir is not None:
        cfg.output_dir = output_dir
    if seed is not None:
        cfg.seeds = [seed]
        _check(cfg)
    return cfg


# -- files -------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def _record(seed: int, d: Diagnostics) -> dict:
    rec = d.to_dict()
    rec["seed"] = seed
    return rec


# -- run ---------------------------------------------------------------------


def _reference(config: ExperimentConfig, game: GameSpec):
    r = config.reference
    return solve_equilibria(
        game, config.eta, config.grid, r.restarts, 0, r.tol, r.damping, r.max_iter, config.bl_resolution
    )


def _run_batch(config: ExperimentConfig, seeds: Sequence[int], reference, out: Path) -> dict:
    """Run a batch of seeds as lanes of one learner; one JSONL per seed."""
    game = config.build_game()
    files = {s: open(out / f"seed_{s}.jsonl", "w") for s in seeds}

    def sink(seed, d):
        fh = files[seed]
        fh.write(_dumps(_record(seed, d)) + "\n")
        fh.flush()

    try:
        records = run_many(
            game,
            config.eta,
            config.schedule.build(),
            config.iters,
            list(seeds),
            config.checkpoints(),
            reference,
            grid=config.grid,
            compact_bins=config.compact.bins or None,
            compact_every=config.compact.every,
            bl_resolution=config.bl_resolution,
            sink=sink,
        )
    finally:
        for fh in files.values():
            fh.close()
    result = {}
    for rr in records:
        if config.save_state:
            write_json(
                out / f"seed_{rr.seed}_state.json",
                {"actors": [a.to_dict() for a in rr.actors], "critics": [c.to_dict() for c in rr.critics]},
            )
        f = rr.final
        result[rr.seed] = {"status": "ok", "final_iter": f.iter, "final_bl": f.bl_to_ref, "final_residuals": f.residuals}
    return result


def _batches(seeds: Sequence[int], workers: int) -> list[list[int]]:
    workers = max(1, min(workers, len(seeds)))
    return [list(seeds[k::workers]) for k in range(workers)]


def cmd_run(config: ExperimentConfig) -> int:
    try:
        out = _output_dir(config)
        game = config.build_game()
    except (OSError, ConfigurationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    reference = None
    if config.reference.solve:
        eq = _reference(config, game)
        reference = [c.profile for c in eq.components]
        if not eq.all_converged:
            log.warning("reference solver did not converge on every restart")
    workers = config.workers or os.cpu_count() or 1
    batches = _batches(config.seeds, workers)
    per_seed: dict[int, dict] = {}
    if len(batches) == 1:
        outcomes = [(batches[0], _guard(_run_batch, config, batches[0], reference, out))]
    else:
        with ProcessPoolExecutor(len(batches)) as pool:
            futures = [(b, pool.submit(_run_batch, config, b, reference, out)) for b in batches]
            outcomes = [(b, _result(f)) for b, f in futures]
    for batch, res in outcomes:
        if isinstance(res, BaseException):
            log.error("seeds %s failed: %s", batch, res)
            per_seed.update({s: {"status": "error", "error": repr(res)} for s in batch})
        else:
            per_seed.update(res)
    summary = _summary(config, per_seed, reference is not None, time.perf_counter() - t0)
    try:
        write_json(out / "summary.json", summary)
    except OSError as exc:
        log.error("cannot write summary: %s", exc)
        return EXIT_CONFIG
    log.info("run finished: %s", {k: summary[k] for k in ("pass_count", "passed")})
    return EXIT_RUN_ERROR if summary["errors"] else EXIT_OK


def _guard(fn, *args):
    try:
        return fn(*args)
    except (ConfigurationError, DomainError, ContractError, OSError, ArithmeticError) as exc:
        return exc


def _result(future):
    try:
        return future.result()
    except Exception as exc:  # a worker failure is reported per seed
        return exc


def _summary(config: ExperimentConfig, per_seed: dict, has_ref: bool, wall: float) -> dict:
    thr = config.thresholds
    seeds = {}
    for s in config.seeds:
        info = dict(per_seed.get(s, {"status": "error", "error": "missing"}))
        if info["status"] == "ok" and has_ref:
            info["passed"] = info["final_bl"] < thr.bl
        seeds[str(s)] = info
    ok = [v for v in seeds.values() if v["status"] == "ok"]
    passes = sum(1 for v in ok if v.get("passed"))
    return {
        "config": config_to_dict(config),
        "seeds": seeds,
        "errors": len(seeds) - len(ok),
        "pass_count": passes if has_ref else None,
        "pass_fraction": passes / len(seeds) if has_ref else None,
        "passed": (passes / len(seeds) >= thr.pass_fraction) if has_ref else None,
        "wall_s": wall,
    }


# -- equilibrium, dynamics, validation ---------------------------------------


def cmd_equilibrium(config: ExperimentConfig) -> int:
    try:
        out = _output_dir(config)
        game = config.build_game()
    except (OSError, ConfigurationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    eq = _reference(config, game)
    doc = {
        "game": config_to_dict(config)["game"],
        "eta": config.eta,
        "grid": config.grid,
        "all_converged": eq.all_converged,
        "restarts": [r.to_dict() for r in eq.results],
        "components": [equilibrium_to_dict(c, config.eta, config.grid) for c in eq.components],
    }
    try:
        write_json(out / "equilibria.json", doc)
    except OSError as exc:
        log.error("cannot write equilibria: %s", exc)
        return EXIT_CONFIG
    log.info("%d component(s), all converged: %s", len(eq.components), eq.all_converged)
    return EXIT_OK if eq.all_converged else EXIT_NOT_CONVERGED


def cmd_dynamics(config: ExperimentConfig) -> int:
    try:
        out = _output_dir(config)
        game = config.build_game()
    except (OSError, ConfigurationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    d = config.dynamics
    dc = DynamicsConfig(config.eta, d.h, d.horizon, config.grid, d.checkpoint_every, d.profiles)
    if d.init == "equilibrium":
        eq = _reference(config, game)
        start = eq.components[0].profile
    else:
        start = [GridDensity.uniform(iv, config.grid) for iv in game.intervals]
    try:
        with open(out / "dynamics.jsonl", "w") as fh:

            def sink(rec):
                fh.write(_dumps(rec) + "\n")
                fh.flush()

            traj = integrate(start, game, dc, sink)
        write_json(
            out / "dynamics_summary.json",
            {
                "violations": traj.violations,
                "monotone": traj.monotone,
                "final_residual": traj.final_residual,
                "initial_V": traj.lyapunov[0],
                "final_V": traj.lyapunov[-1],
                "steps": dc.steps,
            },
        )
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    log.info("dynamics: %d violation(s), final residual %.3e", traj.violations, traj.final_residual)
    return EXIT_OK if traj.monotone else EXIT_VALIDATION


def cmd_validate_game(config: ExperimentConfig) -> int:
    try:
        out = _output_dir(config)
        game = config.build_game()
        report = validate_potential(
            game, config.validate.samples, config.validate.tol, np.random.default_rng(config.seeds[0])
        )
        write_json(out / "validation.json", {"game": game.name, **report.to_dict()})
    except (OSError, ConfigurationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    log.info("potential residual %.3e (tol %.1e): %s", report.max_residual, report.tol,
             "pass" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_VALIDATION


COMMANDS = {
    "run": cmd_run,
    "equilibrium": cmd_equilibrium,
    "dynamics": cmd_dynamics,
    "validate-game": cmd_validate_game,
}
