"""Method names -> model classes, training dispatch, and checkpoint round-trips."""

from __future__ import annotations

import numpy as np

from .baselines import (MAML_BATCH_SIZES, LstmAdapter, MamlModel, lstm_meta_train,
                        maml_meta_train)
from .errors import ConfigurationError
from .model import MetaModel, ModelDims, TrainConfig, TrainingLog, meta_train
from .nn import load_checkpoint, save_checkpoint
from .tasks import PUCK, TaskInstance, TaskSource, puck_simulate

METHODS = ("kalman", "lstm", "maml-1", "maml-4", "maml-8")


def build_model(method: str, d_s: int, d_a: int, seed: int = 0, **kwargs):
    if method == "kalman":
        return MetaModel(ModelDims(d_s, d_a), seed=seed, **kwargs)
    if method == "lstm":
        return LstmAdapter(d_s, d_a, seed=seed, **kwargs)
    if method.startswith("maml-"):
        try:
            k = int(method.split("-", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad MAML method name {method!r}") from None
        if k not in MAML_BATCH_SIZES:
            raise ConfigurationError(f"MAML batch size must be one of {MAML_BATCH_SIZES}")
        return MamlModel(d_s, d_a, batch_size=k, seed=seed, **kwargs)
    raise ConfigurationError(f"unknown method {method!r}")


def train(model, task_source: TaskSource, cfg: TrainConfig) -> TrainingLog:
    if isinstance(model, MetaModel):
        return meta_train(model, task_source, cfg)
    if isinstance(model, LstmAdapter):
        return lstm_meta_train(model, task_source, cfg)
    if isinstance(model, MamlModel):
        return maml_meta_train(model, task_source, cfg)
    raise ConfigurationError(f"cannot train {type(model).__name__}")


def save_model(path, model, extra: dict | None = None) -> None:
    header = {"model": model.config()}
    if extra:
        header.update(extra)
    save_checkpoint(path, model.params().to_arrays(), header)


def load_model(path):
    """Rebuild a trained model from a checkpoint; returns ``(model, header)``."""
    header, arrays = load_checkpoint(path)
    cfg = header["model"]
    method = cfg["method"]
    dims = cfg["dims"]
    if method == "kalman":
        model = MetaModel(ModelDims(**dims), hidden=cfg["hidden"], eps_q=cfg["eps_q"])
    elif method == "lstm":
        model = LstmAdapter(dims["d_s"], dims["d_a"], d_hidden=cfg["d_hidden"], d_phi=dims["d_phi"],
                            hidden=cfg["hidden"])
    elif method.startswith("maml-"):
        model = MamlModel(dims["d_s"], dims["d_a"], batch_size=cfg["batch_size"],
                          inner_steps=cfg["inner_steps"], hidden=cfg["hidden"],
                          query_size=cfg["query_size"])
    else:
        raise ConfigurationError(f"checkpoint has unknown method {method!r}")
    model.load_arrays(arrays)
    return model, header


class OracleModel:
    """Test hook: predicts the exact noiseless next state from the true task."""

    method = "oracle"

    def session(self) -> "OracleSession":
        return OracleSession()

    def params(self):
        from .nn import ParamSet

        return ParamSet()


class OracleSession:
    method = "oracle"
    report_stride = 1

    def __init__(self):
        self.task: TaskInstance | None = None

    def begin_task(self, task: TaskInstance) -> None:
        self.task = task

    def reset(self) -> None:
        pass

    def observe(self, s, a, s_noisy) -> None:
        pass

    def predict(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.asarray(a, dtype=float).reshape(s.shape[0], -1)
        p = self.task.params
        if self.task.family == PUCK:
            return np.stack([puck_simulate(p, ai) for ai in a])
        return p.slope * s + p.intercept
