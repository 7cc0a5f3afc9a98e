"""Kalman-filter adaptation model: measurement net -> filter -> prediction net.

A transition ``(s, a, s_noisy)`` is mapped by the measurement network to a
Gaussian estimate of the latent task vector.  The filter folds these
estimates into a belief, and the prediction network maps ``(s, a, belief
mean)`` to the next state.  Meta-training backpropagates the sequence MSE
against noiseless targets through all three blocks.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, NumericalAbort, SingularMatrixError
from .kalman import (DEFAULT_EPS_Q, VAR_FLOOR, FilterParams, GaussianBelief, Measurement,
                     predict_step, update_step)
from .nn import (AdamState, MlpConfig, ParamSet, adam_update, clip_grad_norm, init_params,
                 mlp_forward)
from .tasks import TaskSource, Transition

log = logging.getLogger(__name__)

HIDDEN = (128, 128, 128)
LATENT_DIM = 16
SAMPLE_JITTER = 1e-9
POST_UPDATE, PRE_UPDATE = "post_update", "pre_update"
LOSS_ORDERINGS = (POST_UPDATE, PRE_UPDATE)


def check_ordering(ordering: str) -> str:
    if ordering not in LOSS_ORDERINGS:
        raise ConfigurationError(f"loss ordering must be one of {LOSS_ORDERINGS}, got {ordering!r}")
    return ordering


@dataclass(frozen=True)
class ModelDims:
    d_s: int
    d_a: int
    d_z: int = LATENT_DIM
    d_phi: int = LATENT_DIM


class MetaModel:
    def __init__(self, dims: ModelDims, hidden=HIDDEN, seed: int = 0, eps_q: float = DEFAULT_EPS_Q):
        self.dims = dims
        self.hidden = tuple(hidden)
        self.measurement_cfg = MlpConfig((2 * dims.d_s + dims.d_a, *self.hidden, 2 * dims.d_z))
        self.prediction_cfg = MlpConfig((dims.d_s + dims.d_a + dims.d_phi, *self.hidden, dims.d_s))
        self.measurement_params = init_params(self.measurement_cfg, seed)
        self.prediction_params = init_params(self.prediction_cfg, seed + 1)
        self.filter = FilterParams.create(dims.d_z, dims.d_phi, seed + 2, eps_q)

    def params(self) -> ParamSet:
        p = ParamSet()
        p.merged(self.measurement_params, "measurement")
        p.merged(self.prediction_params, "prediction")
        p.merged(self.filter.params(), "filter")
        return p

    def config(self) -> dict:
        return {"method": "kalman", "dims": asdict(self.dims), "hidden": list(self.hidden),
                "eps_q": self.filter.eps_q}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(arrays) != set(params.keys()):
            raise ConfigurationError("checkpoint parameter names do not match the model")
        for name, t in params.items():
            t.set_data(arrays[name])

    # ------------------------------------------------------------ blocks

    def _measure_rows(self, s, a, s_noisy) -> tuple[Tensor, Tensor]:
        x = Tensor(np.concatenate([s, a, s_noisy], axis=1))
        if x.shape[1] != self.measurement_cfg.d_in:
            raise ConfigurationError(
                f"measurement input width {x.shape[1]}, model expects {self.measurement_cfg.d_in}")
        out = mlp_forward(self.measurement_cfg, self.measurement_params, x)
        d_z = self.dims.d_z
        mean = ad.slice_cols(out, 0, d_z)
        var = ad.add(ad.softplus(ad.slice_cols(out, d_z, 2 * d_z)), VAR_FLOOR)
        return mean, var

    def measure(self, s, a, s_noisy) -> Measurement:
        mean, var = self._measure_rows(_row(s, self.dims.d_s, "s"), _row(a, self.dims.d_a, "a"),
                                       _row(s_noisy, self.dims.d_s, "s_noisy"))
        return Measurement(mean, var)

    def _predict_rows(self, sa: np.ndarray, phi: Tensor) -> Tensor:
        if phi.shape[0] != sa.shape[0]:
            # tile the belief mean across query rows; the matmul keeps it on the graph
            phi = ad.matmul(Tensor(np.ones((sa.shape[0], 1))), phi)
        x = ad.concat_cols([Tensor(sa), phi])
        return mlp_forward(self.prediction_cfg, self.prediction_params, x)

    def predict_next(self, s, a, belief: GaussianBelief) -> Tensor:
        """Next-state prediction from the belief mean; rows of ``s``/``a`` are queries."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.asarray(a, dtype=float).reshape(s.shape[0], -1)
        if s.shape[1] != self.dims.d_s or a.shape[1] != self.dims.d_a:
            raise ConfigurationError(f"query widths ({s.shape[1]}, {a.shape[1]}) do not match "
                                     f"model dims ({self.dims.d_s}, {self.dims.d_a})")
        if belief.mean.shape != (1, self.dims.d_phi):
            raise DimensionError(f"belief mean shape {belief.mean.shape} != (1, {self.dims.d_phi})")
        return self._predict_rows(np.concatenate([s, a], axis=1), belief.mean)

    def predict_with_uncertainty(self, s, a, belief: GaussianBelief, n_samples: int,
                                 seed: int) -> np.ndarray:
        """Predictions for latent draws phi ~ N(mean, cov): (n_samples, n_queries, d_s)."""
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.asarray(a, dtype=float).reshape(s.shape[0], -1)
        phi = sample_latent(belief, n_samples, seed)
        nq = s.shape[0]
        sa = np.repeat(np.concatenate([s, a], axis=1)[None], n_samples, axis=0).reshape(n_samples * nq, -1)
        phis = np.repeat(phi, nq, axis=0)
        with ad.no_grad():
            out = mlp_forward(self.prediction_cfg, self.prediction_params,
                              Tensor(np.concatenate([sa, phis], axis=1)))
        return out.data.reshape(n_samples, nq, self.dims.d_s)

    # ------------------------------------------------------------ sequences

    def initial_belief(self) -> GaussianBelief:
        return self.filter.initial_belief()

    def run_sequence(self, transitions: list[Transition], ordering: str = PRE_UPDATE):
        """Filter through the sequence and predict every transition.

        With ``post_update`` transition i is predicted from the belief after
        its own update; with ``pre_update`` from the belief before it (the
        first one from the prior).  Returns ``(predictions, loss, beliefs)``
        where ``predictions`` is N x d_s and ``loss`` is the mean over steps of
        the squared Euclidean error against the noiseless next states.
        """
        if not transitions:
            raise ValueError("run_sequence needs at least one transition")
        check_ordering(ordering)
        s, a, s_next, s_noisy = stack_transitions(transitions)
        mu, var = self._measure_rows(s, a, s_noisy)
        fp = self.filter
        c_t = ad.transpose(fp.c_z)
        belief = fp.initial_belief()
        beliefs = []
        for i in range(len(transitions)):
            meas = Measurement(ad.row(mu, i), ad.row(var, i))
            belief = update_step(predict_step(belief, fp), meas, fp, c_t)
            beliefs.append(belief)
        means = [b.mean for b in beliefs]
        if ordering == PRE_UPDATE:
            means = [fp.initial_belief().mean] + means[:-1]
        phi = ad.concat_rows(means)
        pred = self._predict_rows(np.concatenate([s, a], axis=1), phi)
        resid = ad.sub(pred, Tensor(s_next))
        loss = ad.scale(ad.sum(ad.square(resid)), 1.0 / len(transitions))
        return pred, loss, beliefs

    def session(self) -> "AdapterSession":
        return AdapterSession(self)


def _row(v, width: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(1, -1)
    if arr.shape[1] != width:
        raise ConfigurationError(f"{name} has width {arr.shape[1]}, expected {width}")
    return arr


def stack_transitions(transitions: list[Transition]):
    s = np.stack([t.s for t in transitions])
    a = np.stack([t.a for t in transitions]).reshape(len(transitions), -1)
    s_next = np.stack([t.s_next for t in transitions])
    s_noisy = np.stack([t.s_noisy for t in transitions])
    return s, a, s_next, s_noisy


def sample_latent(belief: GaussianBelief, n_samples: int, seed: int) -> np.ndarray:
    cov = belief.cov.data
    try:
        chol = np.linalg.cholesky(cov + SAMPLE_JITTER * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        eig = float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).min())
        raise SingularMatrixError("belief covariance is not positive definite", eig) from None
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, cov.shape[0]))
    return belief.mean.data + z @ chol.T


class AdapterSession:
    """Online adaptation: the belief is updated per observation, weights never change."""

    method = "kalman"
    report_stride = 1

    def __init__(self, model: MetaModel):
        self.model = model
        self.reset()

    def reset(self) -> None:
        with ad.no_grad():
            self.belief = self.model.initial_belief()
        self.observations_seen = 0

    def observe(self, s, a, s_noisy) -> None:
        with ad.no_grad():
            meas = self.model.measure(s, a, s_noisy)
            self.observe_measurement(meas)

    def observe_measurement(self, meas: Measurement) -> None:
        with ad.no_grad():
            self.belief = update_step(predict_step(self.belief, self.model.filter), meas,
                                      self.model.filter)
        self.observations_seen += 1

    def predict(self, s, a) -> np.ndarray:
        with ad.no_grad():
            return self.model.predict_next(s, a, self.belief).data

    def predict_with_uncertainty(self, s, a, n_samples: int, seed: int) -> np.ndarray:
        return self.model.predict_with_uncertainty(s, a, self.belief, n_samples, seed)

    def hidden_state(self) -> np.ndarray:
        return self.belief.mean.data[0].copy()

    def params(self) -> ParamSet:
        return self.model.params()


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    sequence_length: int = 100
    outer_steps: int = 1000
    seed: int = 0
    noise_var_max: float = 0.3
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    loss_ordering: str = PRE_UPDATE

    def __post_init__(self):
        check_ordering(self.loss_ordering)
        if self.sequence_length < 1:
            raise ConfigurationError("sequence_length must be >= 1")
        if self.outer_steps < 0:
            raise ConfigurationError("outer_steps must be >= 0")
        if not self.noise_var_max >= 0:
            raise ConfigurationError("noise_var_max must be >= 0")


@dataclass
class TrainingLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    task_ids: list[str] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def append(self, step, loss, task_id, wall_time):
        self.steps.append(step)
        self.losses.append(loss)
        self.task_ids.append(task_id)
        self.wall_times.append(wall_time)

    def __len__(self):
        return len(self.steps)


def train_loop(params: ParamSet, step_loss, task_source: TaskSource, cfg: TrainConfig,
               n_transitions: int) -> TrainingLog:
    """Shared outer loop: sample a task, build a loss, backprop, clip, Adam.

    ``step_loss(task, transitions)`` returns a scalar Tensor on a fresh graph.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(learning_rate=cfg.learning_rate)
    out = TrainingLog()
    start = time.perf_counter()
    for step in range(cfg.outer_steps):
        task = task_source.sample(rng, cfg.noise_var_max, task_seed=step)
        transitions = task_source.transitions(task, n_transitions, rng)
        params.zero_grad()
        loss = step_loss(task, transitions)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalAbort(f"non-finite loss at step {step}",
                                 {"step": step, "task": task.describe(), "loss": repr(value)})
        ad.backward(loss)
        clip_grad_norm(params, cfg.clip_norm)
        adam_update(opt, params)
        out.append(step, value, f"{task.family}-{step}", time.perf_counter() - start)
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, value)
    return out


def meta_train(model: MetaModel, task_source: TaskSource, cfg: TrainConfig) -> TrainingLog:
    def step_loss(task, transitions):
        return model.run_sequence(transitions, cfg.loss_ordering)[1]

    return train_loop(model.params(), step_loss, task_source, cfg, cfg.sequence_length)
