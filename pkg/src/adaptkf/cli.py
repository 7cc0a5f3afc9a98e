"""``adaptkf`` command line: gen-data, train, eval, analyze, compare.

Every command reads a strict JSON config, lets a few flags override scalar
fields, and writes the resolved config plus a manifest next to its outputs.
Exit codes: 0 ok, 2 invalid config, 3 I/O problem, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .errors import AdaptKFError, NumericalAbort
from .evaluation import (DEFAULT_CHECKPOINTS, SILHOUETTE_COLUMNS, UndefinedScoreError,
                         calibration_report, calibration_to_csv, cluster_separation,
                         comparison_table, curves_from_csv, curves_from_results, curves_to_csv,
                         hidden_state_records, pca_hidden_states, pca_to_csv, run_suite)
from .model import TrainConfig
from .registry import METHODS, OracleModel, build_model, load_model, save_model, train
from .tasks import (DIMS, TaskSource, make_eval_suite, read_suite, spec_from_dict,
                    write_suite)

log = logging.getLogger("adaptkf")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    sequence_length: int = Field(100, ge=1)
    outer_steps: int = Field(1000, ge=0)
    noise_var_max: float = Field(0.3, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    clip_norm: float = Field(10.0, gt=0)
    loss_ordering: Literal["pre_update", "post_update"] = "pre_update"


class EvalSection(_Strict):
    conditions: list[str] | None = None
    noise_levels: list[float] = [0.0, 0.1, 0.5]
    n_adapt: int = Field(100, ge=1)
    n_query: int = Field(50, ge=1)
    tasks_per_cell: int = Field(1, ge=1)
    seed: int = Field(1, ge=0)
    checkpoints: list[int] = list(DEFAULT_CHECKPOINTS)
    calibration_samples: int = Field(200, ge=0)
    dataset: str | None = None


class RunConfig(_Strict):
    family: Literal["regression", "puck"] = "puck"
    task_spec: dict = {}
    method: str = "kalman"
    seed: int = Field(0, ge=0)
    out: str = "runs/default"
    jobs: int = Field(1, ge=1)
    checkpoint: str | None = None
    inputs: list[str] = []
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    @field_validator("method")
    @classmethod
    def _known_method(cls, v):
        if v not in METHODS and v != "oracle":
            raise ValueError(f"unknown method {v!r}; expected one of {list(METHODS) + ['oracle']}")
        return v


class ConfigError(Exception):
    pass


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None
    try:
        spec_from_dict(cfg.family, cfg.task_spec)
    except AdaptKFError as e:
        raise ConfigError(f"task_spec: {e}") from None
    return cfg


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.model_dump(), sort_keys=True).encode()).hexdigest()


def _write_run_files(out: Path, command: str, cfg: RunConfig, outputs: dict) -> None:
    (out / "config.resolved.json").write_text(_dump(cfg.model_dump()))
    manifest = {
        "command": command,
        "code_version": __version__,
        "config": cfg.model_dump(),
        "config_sha256": _config_hash(cfg),
        "seeds": {"run": cfg.seed, "eval": cfg.eval.seed},
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(_dump(manifest))


def _suite(cfg: RunConfig):
    if cfg.eval.dataset:
        return read_suite(cfg.eval.dataset)
    e = cfg.eval
    return make_eval_suite(cfg.family, e.conditions, e.noise_levels, e.n_adapt, e.n_query, e.seed,
                           e.tasks_per_cell, spec_from_dict(cfg.family, cfg.task_spec))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    suite = _suite(cfg.model_copy(update={"eval": cfg.eval.model_copy(update={"dataset": None})}))
    csv_path, man_path = write_suite(suite, out)
    (out / "config.resolved.json").write_text(_dump(cfg.model_dump()))
    log.info("wrote %d tasks to %s", len(suite.cells), csv_path)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    if cfg.method == "oracle":
        raise ConfigError("method: the oracle stub cannot be trained")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    d_s, d_a = DIMS[cfg.family]
    model = build_model(cfg.method, d_s, d_a, seed=cfg.seed)
    tcfg = TrainConfig(cfg.train.sequence_length, cfg.train.outer_steps, cfg.seed,
                       cfg.train.noise_var_max, cfg.train.learning_rate, cfg.train.clip_norm,
                       cfg.train.loss_ordering)
    source = TaskSource(cfg.family, spec_from_dict(cfg.family, cfg.task_spec))
    try:
        result = train(model, source, tcfg)
    except NumericalAbort as e:
        (out / "abort.json").write_text(_dump({"error": str(e), "diagnostics": e.diagnostics}))
        log.error("training aborted: %s", e)
        return EXIT_NUMERIC
    ckpt = out / "checkpoint.ckpt"
    save_model(ckpt, model, {"family": cfg.family, "seed": cfg.seed, "train": cfg.train.model_dump(),
                             "task_spec": cfg.task_spec})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "task_id"])
    for step, loss, tid in zip(result.steps, result.losses, result.task_ids):
        w.writerow([step, repr(loss), tid])
    (out / "train_log.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "wall_time"])
    for step, wt in zip(result.steps, result.wall_times):
        w.writerow([step, f"{wt:.6f}"])
    (out / "timing.csv").write_text(buf.getvalue())
    _write_run_files(out, "train", cfg, {"checkpoint": _sha(ckpt),
                                         "train_log.csv": _sha(out / "train_log.csv")})
    return EXIT_OK


def _load_for_eval(cfg: RunConfig):
    if cfg.method == "oracle":
        return OracleModel()
    if not cfg.checkpoint:
        raise FileNotFoundError("no checkpoint given (set 'checkpoint' in the config)")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _ = load_model(path)
    return model


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_for_eval(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = _suite(cfg)
    cps = cfg.eval.checkpoints
    results = run_suite(model, suite, cps, jobs=cfg.jobs, seed=cfg.eval.seed)
    method = model.session().method
    curves = curves_from_results(method, suite, cps, results)
    (out / "error_curves.csv").write_text(curves_to_csv(curves))
    outputs = {"error_curves.csv": _sha(out / "error_curves.csv")}
    if hasattr(model.session(), "predict_with_uncertainty") and cfg.eval.calibration_samples:
        recs = calibration_report(model, suite, cfg.eval.calibration_samples, cps, jobs=cfg.jobs,
                                  seed=cfg.eval.seed)
        (out / "calibration.csv").write_text(calibration_to_csv(recs))
        outputs["calibration.csv"] = _sha(out / "calibration.csv")
    _write_run_files(out, "eval", cfg, outputs)
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    model = _load_for_eval(cfg)
    if not hasattr(model.session(), "hidden_state") or cfg.method.startswith("maml"):
        raise ConfigError("method: hidden-state analysis needs a kalman or lstm checkpoint")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    suite = _suite(cfg)
    if len({c.condition for c in suite.cells}) < 2:
        raise UndefinedScoreError("silhouette needs at least two conditions in the eval suite")
    cps = cfg.eval.checkpoints
    method = model.session().method
    records = hidden_state_records(model, suite, cps, jobs=cfg.jobs)
    pca = pca_hidden_states(records)
    (out / "pca_projections.csv").write_text(pca_to_csv(method, records, pca))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SILHOUETTE_COLUMNS)
    for k in cps:
        sub = [r for r in records if r.n_samples == k]
        p = pca_hidden_states(sub)
        score = 0.0 if p.degenerate else cluster_separation(p.projections, p.labels)
        w.writerow([method, k, repr(score), len(sub), repr(float(p.explained_variance_ratio[0])),
                    repr(float(p.explained_variance_ratio[1]))])
    (out / "silhouette.csv").write_text(buf.getvalue())
    _write_run_files(out, "analyze", cfg, {"pca_projections.csv": _sha(out / "pca_projections.csv"),
                                           "silhouette.csv": _sha(out / "silhouette.csv")})
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    if not cfg.inputs:
        raise ConfigError("inputs: list the error_curves.csv files (or run dirs) to compare")
    curves = []
    for item in cfg.inputs:
        p = Path(item)
        if p.is_dir():
            p = p / "error_curves.csv"
        curves.extend(curves_from_csv(p.read_text()))
    table = comparison_table(curves)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table.to_csv())
    text = table.to_text()
    (out / "comparison.txt").write_text(text)
    sys.stdout.write(text)
    _write_run_files(out, "compare", cfg, {"comparison.csv": _sha(out / "comparison.csv")})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptkf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"adaptkf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--jobs", type=int)
        p.add_argument("--method")
        p.add_argument("--checkpoint")
        if name == "compare":
            p.add_argument("inputs", nargs="*", help="error_curves.csv files or eval run dirs")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ADAPTKF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "jobs": args.jobs, "method": args.method,
                 "checkpoint": args.checkpoint}
    if getattr(args, "inputs", None):
        overrides["inputs"] = args.inputs
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"adaptkf: invalid config: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as e:
        print(f"adaptkf: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"adaptkf: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as e:
        print(f"adaptkf: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except AdaptKFError as e:
        print(f"adaptkf: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
