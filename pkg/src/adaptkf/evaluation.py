"""Adaptation-error curves, hidden-state PCA, silhouette scores and calibration."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import AdaptKFError, CapabilityError, ConfigurationError
from .tasks import EvalCell, EvalSuite

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (0, 1, 2, 4, 8, 12, 16, 24, 32, 48, 64, 100)

CURVE_COLUMNS = ["method", "condition", "noise", "n_samples", "mean", "std", "n"]
PCA_COLUMNS = ["method", "condition", "n_samples", "task", "pc1", "pc2"]
CALIBRATION_COLUMNS = ["method", "condition", "noise", "task", "n_samples", "predicted_spread",
                       "empirical_error"]
SILHOUETTE_COLUMNS = ["method", "n_samples", "silhouette", "n_points", "explained_pc1",
                      "explained_pc2"]


class Session(Protocol):
    method: str

    def reset(self) -> None: ...

    def observe(self, s, a, s_noisy) -> None: ...

    def predict(self, s, a) -> np.ndarray: ...


class UndefinedScoreError(AdaptKFError, ValueError):
    pass


@dataclass
class ErrorCurve:
    method: str
    condition: str
    noise: float
    points: list[tuple[int, float, float, int]] = field(default_factory=list)

    @property
    def n_samples(self) -> list[int]:
        return [p[0] for p in self.points]

    @property
    def means(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def at(self, n: int) -> float:
        for p in self.points:
            if p[0] == n:
                return p[1]
        raise KeyError(n)


@dataclass
class HiddenStateRecord:
    method: str
    condition: str
    n_samples: int
    phi: np.ndarray
    task: int = 0


@dataclass
class CalibrationRecord:
    method: str
    condition: str
    noise: float
    task: int
    n_samples: int
    predicted_spread: float
    empirical_error: float


@dataclass
class CellResult:
    """Per-task evaluation output: errors (and optionally hidden states) per checkpoint."""

    errors: np.ndarray
    hidden: list[np.ndarray] | None = None
    calibration: list[tuple[float, float]] | None = None


def check_checkpoints(checkpoints: Sequence[int], n_adapt: int) -> list[int]:
    cps = [int(c) for c in checkpoints]
    if not cps or cps[0] < 0 or any(b <= a for a, b in zip(cps, cps[1:])):
        raise ConfigurationError(f"checkpoints must be non-negative and strictly increasing: {cps}")
    if cps[-1] > n_adapt:
        raise ConfigurationError(f"checkpoint {cps[-1]} exceeds the {n_adapt} adaptation transitions")
    return cps


def _queries(cell: EvalCell):
    s = np.stack([q.s for q in cell.query])
    a = np.stack([q.a for q in cell.query]).reshape(len(cell.query), -1)
    y = np.stack([q.s_next for q in cell.query])
    return s, a, y


def run_cell(session, cell: EvalCell, checkpoints: Sequence[int], hidden: bool = False,
             calibration_samples: int = 0, seed: int = 0) -> CellResult:
    """Reset, feed adaptation transitions one by one, score held-out queries at checkpoints.

    The error at a checkpoint is the mean Euclidean distance between predicted
    and noiseless next states over the query set.
    """
    s, a, y = _queries(cell)
    if hasattr(session, "begin_task"):
        session.begin_task(cell.task)
    session.reset()
    errors = np.zeros(len(checkpoints))
    hid = [] if hidden else None
    cal = [] if calibration_samples else None
    seen = 0
    for j, k in enumerate(checkpoints):
        while seen < k:
            t = cell.adapt[seen]
            session.observe(t.s, t.a, t.s_noisy)
            seen += 1
        pred = session.predict(s, a)
        dist = np.linalg.norm(pred - y, axis=1)
        errors[j] = dist.mean()
        if hid is not None:
            hid.append(session.hidden_state())
        if cal is not None:
            draws = session.predict_with_uncertainty(s, a, calibration_samples, seed + 7919 * j)
            spread = float(draws.std(axis=0).mean())
            cal.append((spread, float(np.sqrt(np.mean(dist ** 2)))))
    return CellResult(errors, hid, cal)


def _run_cell_job(args):
    model, cell, checkpoints, hidden, cal_samples, seed = args
    return run_cell(model.session(), cell, checkpoints, hidden, cal_samples, seed)


def run_suite(model, suite: EvalSuite, checkpoints: Sequence[int], hidden: bool = False,
              calibration_samples: int = 0, jobs: int = 1, seed: int = 0) -> list[CellResult]:
    """Evaluate every cell; results are in cell order whatever ``jobs`` is."""
    cps = check_checkpoints(checkpoints, suite.n_adapt)
    if calibration_samples and not hasattr(model.session(), "predict_with_uncertainty"):
        raise CapabilityError(f"{type(model).__name__} cannot sample predictive uncertainty")
    jobs_args = [(model, cell, cps, hidden, calibration_samples, seed + i)
                 for i, cell in enumerate(suite.cells)]
    if jobs <= 1:
        return [_run_cell_job(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_job, jobs_args))


def _group(suite: EvalSuite):
    groups: dict[tuple[str, float], list[int]] = {}
    for i, cell in enumerate(suite.cells):
        groups.setdefault((cell.condition, cell.noise), []).append(i)
    return groups


def curves_from_results(method: str, suite: EvalSuite, checkpoints: Sequence[int],
                        results: list[CellResult]) -> list[ErrorCurve]:
    curves = []
    for (cond, noise), idx in _group(suite).items():
        errs = np.stack([results[i].errors for i in idx])
        pts = [(int(k), float(errs[:, j].mean()), float(errs[:, j].std()), len(idx))
               for j, k in enumerate(checkpoints)]
        curves.append(ErrorCurve(method, cond, noise, pts))
    return curves


def evaluate_adaptation(model, suite: EvalSuite, checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS,
                        jobs: int = 1, method: str | None = None) -> list[ErrorCurve]:
    """Error curves per (condition, noise), averaged over the tasks in each cell group."""
    cps = check_checkpoints(checkpoints, suite.n_adapt)
    results = run_suite(model, suite, cps, jobs=jobs)
    name = method or getattr(model.session(), "method", type(model).__name__)
    return curves_from_results(name, suite, cps, results)


def hidden_state_records(model, suite: EvalSuite, checkpoints: Sequence[int], jobs: int = 1,
                         method: str | None = None) -> list[HiddenStateRecord]:
    cps = check_checkpoints(checkpoints, suite.n_adapt)
    results = run_suite(model, suite, cps, hidden=True, jobs=jobs)
    name = method or model.session().method
    out = []
    for ti, (cell, res) in enumerate(zip(suite.cells, results)):
        for k, phi in zip(cps, res.hidden):
            out.append(HiddenStateRecord(name, cell.condition, k, phi, ti))
    return out


def calibration_report(model, suite: EvalSuite, n_mc_samples: int = 200,
                       checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS, jobs: int = 1,
                       seed: int = 0) -> list[CalibrationRecord]:
    """Monte Carlo predictive spread vs. empirical RMS error per task and checkpoint."""
    session = model.session()
    if not hasattr(session, "predict_with_uncertainty"):
        raise CapabilityError(f"{getattr(session, 'method', type(model).__name__)} adapters "
                              "cannot sample predictive uncertainty")
    cps = check_checkpoints(checkpoints, suite.n_adapt)
    results = run_suite(model, suite, cps, calibration_samples=n_mc_samples, jobs=jobs, seed=seed)
    out = []
    for ti, (cell, res) in enumerate(zip(suite.cells, results)):
        for k, (spread, err) in zip(cps, res.calibration):
            out.append(CalibrationRecord(session.method, cell.condition, cell.noise, ti, k, spread, err))
    return out


# ---------------------------------------------------------------- PCA / silhouette


@dataclass
class PcaResult:
    projections: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    labels: list[str]
    degenerate: bool = False


def pca_hidden_states(records: Sequence[HiddenStateRecord], n_components: int = 2) -> PcaResult:
    """Project hidden-state means on the top principal components.

    Components come from an eigendecomposition of the sample covariance; each
    is signed so its largest-magnitude loading is positive.
    """
    if len(records) < 2:
        raise ConfigurationError("PCA needs at least two records")
    x = np.stack([np.asarray(r.phi, dtype=float) for r in records])
    if x.shape[1] < n_components:
        raise ConfigurationError(f"hidden dimension {x.shape[1]} < n_components {n_components}")
    labels = [r.condition for r in records]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 1e-300:
        log.warning("hidden states have zero variance; returning zero projections")
        return PcaResult(np.zeros((len(x), n_components)), np.zeros(n_components),
                         np.zeros((x.shape[1], n_components)), mean, labels, degenerate=True)
    comps = evecs[:, :n_components]
    signs = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(n_components)])
    comps = comps * np.where(signs == 0, 1.0, signs)
    return PcaResult(xc @ comps, evals[:n_components] / total, comps, mean, labels)


def silhouette_samples(points: np.ndarray, labels: Sequence) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise UndefinedScoreError("silhouette needs at least two distinct labels")
    counts = {u: int(np.sum(labels == u)) for u in uniq}
    if min(counts.values()) < 2:
        raise UndefinedScoreError(f"every label needs at least two points, got {counts}")
    d = np.sqrt(np.maximum(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1), 0.0))
    n = len(points)
    a = np.zeros(n)
    b = np.full(n, np.inf)
    for u in uniq:
        mask = labels == u
        # mean distance to members of cluster u (excluding self for own cluster)
        sums = d[:, mask].sum(axis=1)
        own = mask
        a[own] = sums[own] / (counts[u] - 1)
        other = ~mask
        b[other] = np.minimum(b[other], sums[other] / counts[u])
    denom = np.maximum(a, b)
    return np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)


def cluster_separation(projections: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette over Euclidean distances in projection space, in [-1, 1]."""
    return float(silhouette_samples(projections, labels).mean())


# ---------------------------------------------------------------- tables & CSV


def _fmt(x: float) -> str:
    return repr(float(x))


def curves_to_csv(curves: Sequence[ErrorCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for c in sorted(curves, key=lambda c: (c.method, c.condition, c.noise)):
        for n, m, s, k in c.points:
            w.writerow([c.method, c.condition, _fmt(c.noise), n, _fmt(m), _fmt(s), k])
    return buf.getvalue()


def curves_from_csv(text: str) -> list[ErrorCurve]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CURVE_COLUMNS:
        raise ConfigurationError(f"unexpected error-curve columns {reader.fieldnames}")
    curves: dict[tuple, ErrorCurve] = {}
    for r in reader:
        key = (r["method"], r["condition"], float(r["noise"]))
        c = curves.setdefault(key, ErrorCurve(*key))
        c.points.append((int(r["n_samples"]), float(r["mean"]), float(r["std"]), int(r["n"])))
    return list(curves.values())


def pca_to_csv(method: str, records: Sequence[HiddenStateRecord], result: PcaResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PCA_COLUMNS)
    for r, p in zip(records, result.projections):
        w.writerow([method, r.condition, r.n_samples, r.task, _fmt(p[0]), _fmt(p[1])])
    return buf.getvalue()


def calibration_to_csv(records: Sequence[CalibrationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CALIBRATION_COLUMNS)
    for r in records:
        w.writerow([r.method, r.condition, _fmt(r.noise), r.task, r.n_samples,
                    _fmt(r.predicted_spread), _fmt(r.empirical_error)])
    return buf.getvalue()


@dataclass
class ComparisonTable:
    checkpoints: list[int]
    columns: list[str]
    means: np.ndarray  # len(checkpoints) x len(columns)
    stds: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["n_samples"]
        for c in self.columns:
            header += [f"{c}:mean", f"{c}:std"]
        w.writerow(header)
        for i, k in enumerate(self.checkpoints):
            row = [k]
            for j in range(len(self.columns)):
                row += [_fmt(self.means[i, j]), _fmt(self.stds[i, j])]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[0] != "n_samples" or (len(header) - 1) % 2:
            raise ConfigurationError("not a comparison table")
        columns = [h.rsplit(":", 1)[0] for h in header[1::2]]
        cps = [int(r[0]) for r in body]
        vals = np.array([[float(x) for x in r[1:]] for r in body]).reshape(len(body), -1)
        return cls(cps, columns, vals[:, 0::2], vals[:, 1::2])

    def to_text(self) -> str:
        widths = [max(9, len(c)) for c in self.columns]
        lines = ["n_samples  " + "  ".join(c.rjust(w) for c, w in zip(self.columns, widths))]
        for i, k in enumerate(self.checkpoints):
            cells = [f"{self.means[i, j]:.4f}±{self.stds[i, j]:.3f}".rjust(w)
                     for j, w in enumerate(widths)]
            lines.append(f"{k:>9d}  " + "  ".join(cells))
        return "\n".join(lines) + "\n"


def comparison_table(curves: Sequence[ErrorCurve]) -> ComparisonTable:
    """Rows are checkpoints; one column per (method, condition, noise), sorted."""
    if not curves:
        raise ConfigurationError("no curves to compare")
    ordered = sorted(curves, key=lambda c: (c.method, c.condition, c.noise))
    grid = ordered[0].n_samples
    for c in ordered[1:]:
        if c.n_samples != grid:
            raise ConfigurationError(
                f"checkpoint grids differ: {c.method}/{c.condition}/{c.noise:g} has {c.n_samples}, "
                f"expected {grid}")
    columns = [f"{c.method}|{c.condition}|{c.noise:g}" for c in ordered]
    means = np.array([[p[1] for p in c.points] for c in ordered]).T
    stds = np.array([[p[2] for p in c.points] for c in ordered]).T
    return ComparisonTable(list(grid), columns, means, stds)
