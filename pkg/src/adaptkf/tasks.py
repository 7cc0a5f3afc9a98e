"""Synthetic task families: noisy linear regression and a 2-D sliding puck.

Each task carries hidden dynamics parameters and a diagonal observation-noise
variance.  Transitions expose the noiseless next state (used as the training
target) and a noise-corrupted copy (the only thing an adapter observes).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigurationError, InputError

GRAVITY = 9.81
PUCK_DT = 1e-3
PUCK_STOP_SPEED = 1e-4

REGRESSION = "regression"
PUCK = "puck"
FAMILIES = (REGRESSION, PUCK)

# (d_s, d_a) per family
DIMS = {REGRESSION: (1, 0), PUCK: (2, 2)}


def _check_range(name: str, rng_: Sequence[float]) -> tuple[float, float]:
    lo, hi = float(rng_[0]), float(rng_[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ConfigurationError(f"invalid range for {name}: ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class RegressionSpec:
    slope: tuple[float, float] = (-1.0, 1.0)
    intercept: tuple[float, float] = (-1.0, 1.0)
    x: tuple[float, float] = (-2.0, 2.0)
    noise_var_max: float = 0.3

    def validate(self) -> "RegressionSpec":
        for name in ("slope", "intercept", "x"):
            _check_range(name, getattr(self, name))
        if not self.noise_var_max >= 0:
            raise ConfigurationError("noise_var_max must be >= 0")
        return self


@dataclass(frozen=True)
class PuckSpec:
    mass: tuple[float, float] = (0.01, 0.1)
    mu_x: tuple[float, float] = (0.15, 0.95)
    mu_y_ratio: tuple[float, float] = (0.7, 1.3)
    start_offset_std: float = 0.02
    angle: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    speed: tuple[float, float] = (0.5, 3.0)
    noise_var_max: float = 0.3

    def validate(self) -> "PuckSpec":
        for name in ("mass", "mu_x", "mu_y_ratio", "angle", "speed"):
            _check_range(name, getattr(self, name))
        if self.mass[0] <= 0 or self.mu_x[0] <= 0 or self.mu_y_ratio[0] <= 0:
            raise ConfigurationError("mass and friction ranges must be strictly positive")
        if not self.start_offset_std >= 0 or not self.noise_var_max >= 0:
            raise ConfigurationError("start_offset_std and noise_var_max must be >= 0")
        return self


def default_spec(family: str):
    if family == REGRESSION:
        return RegressionSpec()
    if family == PUCK:
        return PuckSpec()
    raise ConfigurationError(f"unknown task family {family!r}")


def spec_from_dict(family: str, d: dict | None):
    base = default_spec(family)
    if not d:
        return base
    known = set(asdict(base))
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {family} spec fields: {sorted(unknown)}")
    conv = {k: (tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()}
    return replace(base, **conv).validate()


@dataclass(frozen=True)
class RegressionParams:
    slope: float
    intercept: float


@dataclass(frozen=True)
class PuckParams:
    mass: float
    mu_x: float
    mu_y: float
    start_offset: tuple[float, float]

    def __post_init__(self):
        if not (self.mass > 0 and self.mu_x > 0 and self.mu_y > 0):
            raise ConfigurationError("puck mass and friction coefficients must be > 0")


@dataclass
class TaskInstance:
    family: str
    params: RegressionParams | PuckParams
    noise_var: np.ndarray  # diagonal of the observation-noise covariance, length d_s
    seed: int = 0
    spec: RegressionSpec | PuckSpec | None = None
    condition: str = ""

    @property
    def d_s(self) -> int:
        return DIMS[self.family][0]

    @property
    def d_a(self) -> int:
        return DIMS[self.family][1]

    def describe(self) -> dict:
        return {"family": self.family, "condition": self.condition,
                "params": asdict(self.params), "noise_var": [float(v) for v in self.noise_var]}


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    s_noisy: np.ndarray


# ---------------------------------------------------------------- sampling


def sample_task(family: str, rng: np.random.Generator, spec=None, seed: int = 0,
                condition: str = "") -> TaskInstance:
    """Draw dynamics parameters and per-dimension noise variances U(0, noise_var_max)."""
    spec = (spec or default_spec(family)).validate()
    if family == REGRESSION:
        params = RegressionParams(float(rng.uniform(*spec.slope)), float(rng.uniform(*spec.intercept)))
    elif family == PUCK:
        mu_x = float(rng.uniform(*spec.mu_x))
        mu_y = float(mu_x * rng.uniform(*spec.mu_y_ratio))
        offset = rng.normal(0.0, spec.start_offset_std, size=2)
        params = PuckParams(float(rng.uniform(*spec.mass)), mu_x, mu_y,
                            (float(offset[0]), float(offset[1])))
    else:
        raise ConfigurationError(f"unknown task family {family!r}")
    d_s = DIMS[family][0]
    noise = rng.uniform(0.0, spec.noise_var_max, size=d_s) if spec.noise_var_max > 0 else np.zeros(d_s)
    return TaskInstance(family, params, noise, seed=seed, spec=spec, condition=condition)


def _noisy(s_next: np.ndarray, noise_var: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(s_next.shape)
    return s_next + eps * np.sqrt(noise_var)


def regression_transition(params: RegressionParams, x: float, noise_var, rng) -> Transition:
    y = params.slope * x + params.intercept
    s_next = np.array([y])
    return Transition(np.array([float(x)]), np.zeros(0), s_next,
                      _noisy(s_next, np.asarray(noise_var, dtype=float).reshape(1), rng))


# ---------------------------------------------------------------- puck physics


@njit(cache=True)
def _slide(x, y, vx, vy, mu_x, mu_y, dt, g, stop_speed, record):
    """Integrate an anisotropic Coulomb slide until rest.

    Velocity is advanced explicitly; position uses the average of the old and
    new velocity (exact for the piecewise-constant deceleration).  The final
    partial step stops the puck instead of letting friction reverse it.
    ``record`` (n x 4, possibly empty) receives (x, y, vx, vy) per step.
    """
    n = 0
    cap = record.shape[0]
    if cap > 0:
        record[0, 0] = x
        record[0, 1] = y
        record[0, 2] = vx
        record[0, 3] = vy
    n = 1
    while True:
        speed = math.sqrt(vx * vx + vy * vy)
        if speed < stop_speed:
            break
        ax = -g * mu_x * vx / speed
        ay = -g * mu_y * vy / speed
        acc = math.sqrt(ax * ax + ay * ay)
        if speed <= acc * dt:
            t_stop = speed / acc
            x += 0.5 * vx * t_stop
            y += 0.5 * vy * t_stop
            vx = 0.0
            vy = 0.0
        else:
            nvx = vx + ax * dt
            nvy = vy + ay * dt
            x += 0.5 * (vx + nvx) * dt
            y += 0.5 * (vy + nvy) * dt
            vx = nvx
            vy = nvy
        if n < cap:
            record[n, 0] = x
            record[n, 1] = y
            record[n, 2] = vx
            record[n, 3] = vy
        n += 1
    return x, y, n


_EMPTY = np.zeros((0, 4))


def _check_action(a) -> tuple[float, float]:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != (2,):
        raise InputError(f"puck action must be (angle, speed), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"puck action must be finite, got {a.tolist()}")
    return float(a[0]), float(a[1])


def puck_simulate(params: PuckParams, a, dt: float = PUCK_DT) -> np.ndarray:
    """Rest position of the puck hit with ``a = (angle, speed)`` from its start."""
    angle, speed = _check_action(a)
    x0, y0 = params.start_offset
    x, y, _ = _slide(x0, y0, speed * math.cos(angle), speed * math.sin(angle),
                     params.mu_x, params.mu_y, dt, GRAVITY, PUCK_STOP_SPEED, _EMPTY)
    return np.array([x, y])


def puck_trajectory(params: PuckParams, a, dt: float = PUCK_DT) -> np.ndarray:
    """Per-step (x, y, vx, vy) rows of a slide, first row the initial state."""
    angle, speed = _check_action(a)
    mu_min = min(params.mu_x, params.mu_y)
    cap = int(abs(speed) / (GRAVITY * mu_min * dt)) + 16
    buf = np.zeros((cap, 4))
    x0, y0 = params.start_offset
    _, _, n = _slide(x0, y0, speed * math.cos(angle), speed * math.sin(angle),
                     params.mu_x, params.mu_y, dt, GRAVITY, PUCK_STOP_SPEED, buf)
    return buf[:min(n, cap)]


def puck_transition(task: TaskInstance, a, rng: np.random.Generator) -> Transition:
    if task.family != PUCK:
        raise ConfigurationError(f"puck_transition needs a puck task, got {task.family!r}")
    s = np.array(task.params.start_offset, dtype=float)
    s_next = puck_simulate(task.params, a)
    return Transition(s, np.asarray(a, dtype=float).reshape(2).copy(), s_next,
                      _noisy(s_next, task.noise_var, rng))


def sample_transitions(task: TaskInstance, n: int, rng: np.random.Generator,
                       noiseless: bool = False) -> list[Transition]:
    """``n`` transitions with inputs drawn from the task's spec ranges."""
    spec = task.spec or default_spec(task.family)
    noise = np.zeros_like(task.noise_var) if noiseless else task.noise_var
    out = []
    if task.family == REGRESSION:
        xs = rng.uniform(*spec.x, size=n)
        for x in xs:
            out.append(regression_transition(task.params, float(x), noise, rng))
    else:
        angles = rng.uniform(*spec.angle, size=n)
        speeds = rng.uniform(*spec.speed, size=n)
        t = replace(task, noise_var=noise) if noiseless else task
        for ang, sp in zip(angles, speeds):
            out.append(puck_transition(t, (ang, sp), rng))
    return out


class TaskSource:
    """Training-time task distribution for one family."""

    def __init__(self, family: str, spec=None):
        self.family = family
        self.spec = (spec or default_spec(family)).validate()

    def sample(self, rng: np.random.Generator, noise_var_max: float | None = None,
               task_seed: int = 0) -> TaskInstance:
        spec = self.spec if noise_var_max is None else replace(self.spec, noise_var_max=noise_var_max)
        return sample_task(self.family, rng, spec, seed=task_seed)

    def transitions(self, task: TaskInstance, n: int, rng: np.random.Generator,
                    noiseless: bool = False) -> list[Transition]:
        return sample_transitions(task, n, rng, noiseless=noiseless)


# ---------------------------------------------------------------- eval suites

PUCK_CONDITIONS = {
    "low": {"mu_x": (0.15, 0.3), "mu_y_ratio": (1.0, 1.0)},
    "medium": {"mu_x": (0.45, 0.6), "mu_y_ratio": (1.0, 1.0)},
    "high": {"mu_x": (0.8, 0.95), "mu_y_ratio": (1.0, 1.0)},
}
REGRESSION_CONDITIONS = {"default": {}}
DEFAULT_NOISE_LEVELS = (0.0, 0.1, 0.5)


def condition_table(family: str) -> dict:
    return PUCK_CONDITIONS if family == PUCK else REGRESSION_CONDITIONS


@dataclass
class EvalCell:
    condition: str
    noise: float
    task_index: int
    task: TaskInstance
    adapt: list[Transition]
    query: list[Transition]

    @property
    def task_id(self) -> str:
        return f"{self.condition}/{self.noise:g}/{self.task_index}"


@dataclass
class EvalSuite:
    family: str
    conditions: list[str]
    noise_levels: list[float]
    n_adapt: int
    n_query: int
    seed: int
    tasks_per_cell: int
    cells: list[EvalCell] = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int]:
        return DIMS[self.family]


def cell_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def make_eval_suite(family: str, conditions: Sequence[str] | None = None,
                    noise_levels: Sequence[float] = DEFAULT_NOISE_LEVELS,
                    n_adapt: int = 100, n_query: int = 50, seed: int = 0,
                    tasks_per_cell: int = 1, spec=None) -> EvalSuite:
    """One fixed task per (condition, noise, replicate) with adaptation and query data.

    Query transitions are noiseless.  Adaptation transitions use the cell's
    noise level on every state dimension.
    """
    if n_adapt < 1 or n_query < 1 or tasks_per_cell < 1:
        raise ConfigurationError("n_adapt, n_query and tasks_per_cell must be >= 1")
    table = condition_table(family)
    conditions = list(conditions) if conditions is not None else list(table)
    base = spec or default_spec(family)
    suite = EvalSuite(family, conditions, [float(v) for v in noise_levels], n_adapt, n_query,
                      seed, tasks_per_cell)
    idx = 0
    for cond in conditions:
        if cond not in table:
            raise ConfigurationError(f"unknown condition {cond!r} for family {family!r}")
        cond_spec = replace(base, **table[cond], noise_var_max=0.0).validate()
        for noise in suite.noise_levels:
            if noise < 0:
                raise ConfigurationError("noise levels must be >= 0")
            for rep in range(tasks_per_cell):
                rng = cell_rng(seed, idx)
                task = sample_task(family, rng, cond_spec, seed=idx, condition=cond)
                task.noise_var = np.full(task.d_s, float(noise))
                adapt = sample_transitions(task, n_adapt, rng)
                query = sample_transitions(task, n_query, rng, noiseless=True)
                suite.cells.append(EvalCell(cond, float(noise), rep, task, adapt, query))
                idx += 1
    return suite


# ---------------------------------------------------------------- dataset files

DATASET_COLUMNS = ["task_id", "condition", "noise", "role", "index", "s", "a", "s_next", "s_noisy"]
DATASET_SCHEMA_VERSION = 1


def _vec(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v)


def _unvec(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split()], dtype=float)


def suite_to_csv(suite: EvalSuite) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_COLUMNS)
    for cell in suite.cells:
        for role, items in (("adapt", cell.adapt), ("query", cell.query)):
            for i, t in enumerate(items):
                w.writerow([cell.task_id, cell.condition, repr(cell.noise), role, i,
                            _vec(t.s), _vec(t.a), _vec(t.s_next), _vec(t.s_noisy)])
    return buf.getvalue()


def suite_manifest(suite: EvalSuite) -> dict:
    return {
        "schema_version": DATASET_SCHEMA_VERSION,
        "family": suite.family,
        "seed": suite.seed,
        "conditions": suite.conditions,
        "noise_levels": suite.noise_levels,
        "n_adapt": suite.n_adapt,
        "n_query": suite.n_query,
        "tasks_per_cell": suite.tasks_per_cell,
        "n_tasks": len(suite.cells),
        "n_rows": len(suite.cells) * (suite.n_adapt + suite.n_query),
        "dims": {"d_s": suite.dims[0], "d_a": suite.dims[1]},
        "tasks": [dict(cell.task.describe(), task_id=cell.task_id) for cell in suite.cells],
        "columns": DATASET_COLUMNS,
    }


def write_suite(suite: EvalSuite, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = suite_to_csv(suite)
    manifest = suite_manifest(suite)
    manifest["sha256"] = hashlib.sha256(data.encode()).hexdigest()
    csv_path, man_path = out / "dataset.csv", out / "manifest.json"
    csv_path.write_text(data)
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return csv_path, man_path


def read_suite(out_dir) -> EvalSuite:
    """Rebuild an EvalSuite from ``dataset.csv`` + ``manifest.json``."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    family = manifest["family"]
    suite = EvalSuite(family, manifest["conditions"], manifest["noise_levels"], manifest["n_adapt"],
                      manifest["n_query"], manifest["seed"], manifest["tasks_per_cell"])
    rows: dict[str, dict[str, list]] = {}
    order: list[str] = []
    with open(out / "dataset.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DATASET_COLUMNS:
            raise ConfigurationError(f"unexpected dataset columns {reader.fieldnames}")
        for r in reader:
            tid = r["task_id"]
            if tid not in rows:
                rows[tid] = {"adapt": [], "query": [], "meta": r}
                order.append(tid)
            rows[tid][r["role"]].append(Transition(_unvec(r["s"]), _unvec(r["a"]),
                                                   _unvec(r["s_next"]), _unvec(r["s_noisy"])))
    described = {t["task_id"]: t for t in manifest["tasks"]}
    for seq, tid in enumerate(order):
        meta = rows[tid]["meta"]
        d = described[tid]
        params = (RegressionParams(**d["params"]) if family == REGRESSION
                  else PuckParams(**{**d["params"], "start_offset": tuple(d["params"]["start_offset"])}))
        task = TaskInstance(family, params, np.array(d["noise_var"]), seed=seq, condition=meta["condition"])
        suite.cells.append(EvalCell(meta["condition"], float(meta["noise"]), int(tid.rsplit("/", 1)[1]),
                                    task, rows[tid]["adapt"], rows[tid]["query"]))
    return suite
