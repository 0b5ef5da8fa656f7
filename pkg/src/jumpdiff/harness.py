"""Experiment configuration, RMSE-study runs, CSV/manifest output and plot data."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators, fem1d, fem2d, rng
from .coefficient import dump_coefficient_csv, probe_grid_1d, probe_grid_2d
from .jumps import dump_jsonl
from .problems import PRESET_DEFAULTS, PRESETS, PROBLEM_KEYS, SampleDraw, make_problem

log = logging.getLogger(__name__)

CSV_HEADER = ("preset", "estimator", "discretization", "L", "inv_h", "rmse", "wall_time_s",
              "M_levels", "N_levels", "eps_levels", "slope_so_far")
DISCRETIZATIONS = ("adaptive", "uniform")
DEFAULT_OUT = "jumpdiff-out"
OUT_ENV = "JUMPDIFF_OUT"
DERIVED_PREFIX = "derived_"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class ExperimentConfig:
    preset: str = "bm-uniform-1d"
    estimator: str = "mlmc"
    discretization: str = "adaptive"
    lmax: int = 5
    ref: int = 7
    reps: int = 10
    seed: int = 0
    threads: int = 1
    kappa: float = 1.0
    nu: float = 0.01
    sample_rule: str = "previous"
    n_pilot: int = 0  # 0: 100 pilot draws in 1D, 30 in 2D
    reference_discretization: str = "adaptive"
    verification: bool = False
    dump_coefficient: bool = False
    dump_mesh: bool = False
    out: str = DEFAULT_OUT
    overrides: dict = field(default_factory=dict)

    RUN_KEYS = ("preset", "estimator", "discretization", "lmax", "ref", "reps", "seed", "threads", "kappa", "nu",
                "sample_rule", "n_pilot", "reference_discretization", "verification", "dump_coefficient",
                "dump_mesh", "out")

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.estimator not in estimators.ESTIMATORS:
            raise ConfigError("estimator", f"choose from {', '.join(estimators.ESTIMATORS)}")
        for key in ("discretization", "reference_discretization"):
            if getattr(self, key) not in DISCRETIZATIONS:
                raise ConfigError(key, f"choose from {', '.join(DISCRETIZATIONS)}")
        if self.lmax < 0:
            raise ConfigError("lmax", "must be non-negative")
        if self.ref <= self.lmax:
            raise ConfigError("ref", "reference level must exceed lmax")
        if self.reps < 1:
            raise ConfigError("reps", "need at least one replication")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.threads < 1:
            raise ConfigError("threads", "must be at least 1")
        if self.sample_rule not in ("previous", "same"):
            raise ConfigError("sample_rule", "choose 'previous' or 'same'")
        if self.n_pilot and self.n_pilot < 10:
            raise ConfigError("n_pilot", "must be 0 (default) or at least 10")
        if self.kappa <= 0:
            raise ConfigError("kappa", "must be positive")
        try:
            self.problem()
        except ValueError as exc:
            raise ConfigError("overrides", str(exc)) from exc

    def problem(self):
        return make_problem(self.preset, **self.overrides)

    @property
    def stem(self) -> str:
        return f"{self.preset}_{self.estimator}_{self.discretization}"

    def resolved(self) -> dict:
        """Every key that affects results, in a stable order."""
        out = {k: getattr(self, k) for k in self.RUN_KEYS if k != "out"}
        problem_cfg = dict(PRESET_DEFAULTS[self.preset])
        problem_cfg.update(self.overrides)
        for k in sorted(problem_cfg):
            out[k] = problem_cfg[k]
        return out

    def reference_key(self) -> tuple:
        """Resolved keys that determine the reference estimate."""
        skip = ("discretization", "reps", "lmax", "threads", "verification", "dump_coefficient", "dump_mesh")
        return tuple((k, str(v)) for k, v in self.resolved().items() if k not in skip)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(str(value), 0) if isinstance(value, str) else int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            return _bool(value)
        return str(value)
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from exc


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_config(values: dict) -> ExperimentConfig:
    """Config from flat key/value pairs; unknown keys are rejected by name."""
    cfg = ExperimentConfig()
    overrides = {}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key.startswith(DERIVED_PREFIX):
            continue
        if key in ExperimentConfig.RUN_KEYS:
            setattr(cfg, key, _coerce(key, value))
        elif key in PROBLEM_KEYS:
            overrides[key] = value
        else:
            raise ConfigError(key, "unknown configuration key")
    # preset values arrive as strings from files; drop those equal to the preset default
    defaults = PRESET_DEFAULTS[cfg.preset] if cfg.preset in PRESETS else {}
    cfg.overrides = {k: v for k, v in overrides.items() if str(defaults.get(k, object())) != str(v)}
    cfg.validate()
    return cfg


def load_config(path, extra: dict | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update(extra or {})
    return build_config(values)


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or cfg.out)


def git_blob_sha1(data: bytes) -> str:
    """Content hash in the form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _join(xs) -> str:
    return ";".join(_fmt(x) for x in xs)


def format_rows(cfg: ExperimentConfig, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([cfg.preset, cfg.estimator, cfg.discretization, r.L, _fmt(r.inv_h), _fmt(r.rmse),
                    "0" if cfg.verification else f"{r.wall_time_s:.6f}",
                    _join(r.M_levels), _join(r.N_levels), _join(r.eps_levels),
                    "" if r.slope_so_far is None else _fmt(r.slope_so_far)])
    return buf.getvalue()


def format_manifest(cfg: ExperimentConfig, study=None) -> str:
    body = "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.resolved().items())
    lines = ["# jumpdiff run manifest; rerun with: jumpdiff run --config <this file>\n", body,
             f"{DERIVED_PREFIX}config_sha1 = {git_blob_sha1(body.encode('utf-8'))}\n"]
    if study is not None:
        lines.append(f"{DERIVED_PREFIX}e_h2_levels = {_join(study.pilot.e_h2)}\n")
        lines.append(f"{DERIVED_PREFIX}reference_solves = {study.reference.solves}\n")
        if len(study.rows) >= 3:
            lines.append(f"{DERIVED_PREFIX}slope = {_fmt(study.slope)}\n")
    return "".join(lines)


@dataclass
class RunResult:
    csv_path: Path
    manifest_path: Path
    study: estimators.StudyResult
    slope: float | None


_REFERENCE_CACHE: dict = {}


def _reference(cfg: ExperimentConfig, problem, pilot_ref, progress):
    """Reference estimate, shared between runs that differ only in discretization."""
    if problem.deterministic and problem.dim == 1:
        return None
    adaptive = cfg.reference_discretization == "adaptive"
    key = cfg.reference_key()
    if key not in _REFERENCE_CACHE:
        nested = cfg.estimator == "mlmc-bootstrap"
        sched = estimators.build_schedule(pilot_ref, cfg.ref, cfg.kappa, cfg.nu, problem.spectrum, problem.heights,
                                          cfg.sample_rule, nested)
        _REFERENCE_CACHE[key] = estimators.run_estimator(cfg.estimator, problem, sched, cfg.seed, 0, adaptive,
                                                         rng.REFERENCE, cfg.threads)
        if progress:
            progress(f"reference level {cfg.ref}: {_REFERENCE_CACHE[key].total_time:.1f}s")
    return _REFERENCE_CACHE[key]


def _dump_debug(cfg: ExperimentConfig, problem, schedule, out: Path) -> None:
    """Coefficient, partition and mesh of sample 0, replication 0 at level lmax."""
    dump = out / "dumps"
    dump.mkdir(parents=True, exist_ok=True)
    spec = schedule.levels[-1]
    draw = SampleDraw(problem, cfg.seed, rng.ESTIMATION, 0, rng.NO_LEVEL, 0)
    coeff = draw.coefficient(spec.N, spec.eps)
    stem = f"{cfg.stem}_L{cfg.lmax}_sample0"
    if cfg.dump_coefficient:
        grid = probe_grid_1d(draw.partition) if problem.dim == 1 else probe_grid_2d(draw.partition, 51, 21)
        dump_coefficient_csv(dump / f"{stem}_coefficient.csv", coeff, grid)
        if draw.partition is not None:
            dump_jsonl(dump / f"{stem}_partition.jsonl", [(draw.partition, coeff.heights)])
    if cfg.dump_mesh:
        mesh = problem.mesh(draw.partition, cfg.lmax, cfg.discretization == "adaptive")
        if problem.dim == 1:
            with open(dump / f"{stem}_mesh.csv", "w", encoding="utf-8", newline="\n") as fh:
                fh.write("x\n" + "".join(f"{x:.17g}\n" for x in mesh.nodes))
        else:
            fem2d.dump_mesh_csv(dump / f"{stem}_mesh", mesh)


def run_experiment(cfg: ExperimentConfig, progress=None) -> RunResult:
    """Run the RMSE study for L = 0..lmax and write CSV plus manifest."""
    cfg.validate()
    if cfg.verification:
        cfg.threads = 1
    problem = cfg.problem()
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    adaptive = cfg.discretization == "adaptive"
    n_pilot = cfg.n_pilot or (100 if problem.dim == 1 else 30)
    ref_adaptive = cfg.reference_discretization == "adaptive"
    pilot_ref = estimators.pilot_mesh_stats(problem, cfg.ref, n_pilot, ref_adaptive, cfg.seed)
    pilot = pilot_ref if ref_adaptive == adaptive else estimators.pilot_mesh_stats(problem, cfg.ref, n_pilot,
                                                                                    adaptive, cfg.seed)
    reference = _reference(cfg, problem, pilot_ref, progress)
    study = estimators.rmse_study(problem, range(cfg.lmax + 1), cfg.ref, cfg.reps, cfg.estimator, cfg.seed,
                                  adaptive, n_pilot, cfg.kappa, cfg.nu, cfg.sample_rule, cfg.threads,
                                  reference=reference, pilot=pilot, progress=progress)
    if cfg.dump_coefficient or cfg.dump_mesh:
        _dump_debug(cfg, problem, study.schedules[cfg.lmax], out)
    csv_path = out / f"{cfg.stem}.csv"
    manifest_path = out / f"{cfg.stem}.manifest.cfg"
    csv_path.write_text(format_rows(cfg, study.rows), encoding="utf-8", newline="\n")
    manifest_path.write_text(format_manifest(cfg, study), encoding="utf-8", newline="\n")
    slope = study.slope if len(study.rows) >= 3 else None
    return RunResult(csv_path, manifest_path, study, slope)


# ---------------------------------------------------------------- plot data

def read_results(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected CSV header")
    return rows


def emit_plotdata(path) -> tuple[Path, Path]:
    """Write ``<stem>.rmse_vs_invh.dat`` and ``<stem>.rmse_vs_time.dat`` next to the CSV."""
    path = Path(path)
    rows = read_results(path)
    stem = path.with_suffix("")
    a = Path(f"{stem}.rmse_vs_invh.dat")
    b = Path(f"{stem}.rmse_vs_time.dat")
    a.write_text("".join(f"{r['inv_h']} {r['rmse']}\n" for r in rows), encoding="utf-8", newline="\n")
    b.write_text("".join(f"{r['wall_time_s']} {r['rmse']}\n" for r in rows), encoding="utf-8", newline="\n")
    return a, b


# ---------------------------------------------------------------- verification

SUITES = {
    "unit": ["-m", "not slow and not acceptance"],
    "invariants": ["-m", "slow and not acceptance"],
    "acceptance": ["-m", "acceptance", "-s"],
}


def tests_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "tests"


def run_verification(suite: str, extra_args=()) -> int:
    """Run one pytest suite from the source checkout; returns the exit status."""
    if suite not in SUITES:
        raise ConfigError("suite", f"choose from {', '.join(SUITES)}")
    tests = tests_dir()
    if not tests.is_dir():
        log.error("test directory %s not found; verification needs a source checkout", tests)
        return 2
    import pytest

    return int(pytest.main([str(tests), "-q", *SUITES[suite], *extra_args]))
