"""Comparison adapters: a blackbox LSTM and first-order MAML with learned step size."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapabilityError, ConfigurationError, InsufficientDataError
from .model import (HIDDEN, LATENT_DIM, POST_UPDATE, PRE_UPDATE, TrainConfig, TrainingLog,
                    check_ordering, stack_transitions, train_loop)
from .nn import (LstmCellState, MlpConfig, ParamSet, init_lstm_params, init_params, lstm_gates,
                 lstm_step, mlp_forward)
from .tasks import TaskSource, Transition

LSTM_HIDDEN = 64
MAML_HIDDEN = (128, 128, 128, 128)
MAML_BATCH_SIZES = (1, 4, 8)
MAML_QUERY_SIZE = 32


# ---------------------------------------------------------------- LSTM


class LstmAdapter:
    """LSTM over (s, a, s_noisy) whose hidden state is read out as the task code."""

    method = "lstm"

    def __init__(self, d_s: int, d_a: int, d_hidden: int = LSTM_HIDDEN, d_phi: int = LATENT_DIM,
                 hidden=HIDDEN, seed: int = 0):
        self.d_s, self.d_a, self.d_hidden, self.d_phi = d_s, d_a, d_hidden, d_phi
        self.hidden = tuple(hidden)
        self.d_in = 2 * d_s + d_a
        self.lstm_params = init_lstm_params(self.d_in, d_hidden, seed)
        self.readout_cfg = MlpConfig((d_hidden, d_phi))
        self.readout_params = init_params(self.readout_cfg, seed + 1)
        self.prediction_cfg = MlpConfig((d_s + d_a + d_phi, *self.hidden, d_s))
        self.prediction_params = init_params(self.prediction_cfg, seed + 2)

    def params(self) -> ParamSet:
        p = ParamSet()
        p.merged(self.lstm_params, "lstm")
        p.merged(self.readout_params, "readout")
        p.merged(self.prediction_params, "prediction")
        return p

    def config(self) -> dict:
        return {"method": "lstm", "dims": {"d_s": self.d_s, "d_a": self.d_a, "d_phi": self.d_phi},
                "d_hidden": self.d_hidden, "hidden": list(self.hidden)}

    def load_arrays(self, arrays) -> None:
        _load(self.params(), arrays)

    def readout(self, h: Tensor) -> Tensor:
        return mlp_forward(self.readout_cfg, self.readout_params, h)

    def predict_rows(self, sa: np.ndarray, phi: Tensor) -> Tensor:
        if phi.shape[0] != sa.shape[0]:
            phi = ad.matmul(Tensor(np.ones((sa.shape[0], 1))), phi)
        return mlp_forward(self.prediction_cfg, self.prediction_params,
                           ad.concat_cols([Tensor(sa), phi]))

    def run_sequence(self, transitions: list[Transition], ordering: str = PRE_UPDATE):
        """Same contract as ``MetaModel.run_sequence``; returns hidden states instead of beliefs."""
        if not transitions:
            raise ValueError("run_sequence needs at least one transition")
        check_ordering(ordering)
        s, a, s_next, s_noisy = stack_transitions(transitions)
        x = Tensor(np.concatenate([s, a, s_noisy], axis=1))
        if x.shape[1] != self.d_in:
            raise ConfigurationError(f"LSTM input width {x.shape[1]}, expected {self.d_in}")
        x_proj = ad.matmul(x, dict.__getitem__(self.lstm_params, "w_x"))
        state = LstmCellState.zeros(self.d_hidden)
        hs = []
        for i in range(len(transitions)):
            state, h = lstm_gates(self.lstm_params, state, ad.row(x_proj, i))
            hs.append(h)
        rows = hs if ordering == POST_UPDATE else [LstmCellState.zeros(self.d_hidden).h] + hs[:-1]
        phi = self.readout(ad.concat_rows(rows))
        pred = self.predict_rows(np.concatenate([s, a], axis=1), phi)
        loss = ad.scale(ad.sum(ad.square(ad.sub(pred, Tensor(s_next)))), 1.0 / len(transitions))
        return pred, loss, hs

    def session(self) -> "LstmSession":
        return LstmSession(self)


class LstmSession:
    method = "lstm"
    report_stride = 1

    def __init__(self, model: LstmAdapter):
        self.model = model
        self.reset()

    def reset(self) -> None:
        self.state = LstmCellState.zeros(self.model.d_hidden)
        self.observations_seen = 0

    def observe(self, s, a, s_noisy) -> None:
        """Advance the recurrence on one noisy transition (lstm_adapt_step)."""
        x = np.concatenate([np.ravel(s), np.ravel(a), np.ravel(s_noisy)]).reshape(1, -1)
        if x.shape[1] != self.model.d_in:
            raise ConfigurationError(f"LSTM input width {x.shape[1]}, expected {self.model.d_in}")
        with ad.no_grad():
            self.state, _ = lstm_step(self.model.lstm_params, self.state, Tensor(x))
        self.observations_seen += 1

    def phi(self) -> Tensor:
        with ad.no_grad():
            return self.model.readout(self.state.h)

    def hidden_state(self) -> np.ndarray:
        return self.phi().data[0].copy()

    def predict(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.asarray(a, dtype=float).reshape(s.shape[0], -1)
        with ad.no_grad():
            return self.model.predict_rows(np.concatenate([s, a], axis=1), self.phi()).data

    def params(self) -> ParamSet:
        return self.model.params()


def lstm_meta_train(model: LstmAdapter, task_source: TaskSource, cfg: TrainConfig) -> TrainingLog:
    def step_loss(task, transitions):
        return model.run_sequence(transitions, cfg.loss_ordering)[1]

    return train_loop(model.params(), step_loss, task_source, cfg, cfg.sequence_length)


# ---------------------------------------------------------------- MAML


class MamlModel:
    """Dynamics net (s, a) -> s' adapted by gradient steps with a learned step size.

    The step size is ``softplus(alpha_raw)`` so it stays positive.
    """

    def __init__(self, d_s: int, d_a: int, batch_size: int = 1, inner_steps: int = 3,
                 hidden=MAML_HIDDEN, seed: int = 0, init_alpha: float = 0.01,
                 query_size: int = MAML_QUERY_SIZE):
        if inner_steps not in (1, 2, 3):
            raise ConfigurationError("inner_steps must be 1, 2 or 3")
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.d_s, self.d_a = d_s, d_a
        self.batch_size = batch_size
        self.inner_steps = inner_steps
        self.query_size = query_size
        self.hidden = tuple(hidden)
        self.net_cfg = MlpConfig((d_s + d_a, *self.hidden, d_s))
        self.net_params = init_params(self.net_cfg, seed)
        raw = np.log(np.expm1(init_alpha))
        self.alpha_raw = Tensor([[raw]], requires_grad=True)

    @property
    def method(self) -> str:
        return f"maml-{self.batch_size}"

    def params(self) -> ParamSet:
        p = ParamSet()
        p.merged(self.net_params, "net")
        p["alpha_raw"] = self.alpha_raw
        return p

    def config(self) -> dict:
        return {"method": self.method, "dims": {"d_s": self.d_s, "d_a": self.d_a},
                "batch_size": self.batch_size, "inner_steps": self.inner_steps,
                "hidden": list(self.hidden), "query_size": self.query_size,
                "first_order": True}

    def load_arrays(self, arrays) -> None:
        _load(self.params(), arrays)

    @property
    def alpha(self) -> float:
        with ad.no_grad():
            return ad.softplus(self.alpha_raw).item()

    def forward(self, params: ParamSet, s: np.ndarray, a: np.ndarray) -> Tensor:
        return mlp_forward(self.net_cfg, params, Tensor(np.concatenate([s, a], axis=1)))

    def batch_mse(self, params: ParamSet, s, a, target) -> Tensor:
        resid = ad.sub(self.forward(params, s, a), Tensor(target))
        return ad.scale(ad.sum(ad.square(resid)), 1.0 / s.shape[0])

    def support_gradient(self, params: ParamSet, batch: list[Transition]) -> dict[str, np.ndarray]:
        """Gradient of the support MSE (noisy targets) at the current parameter values."""
        leaves = ParamSet()
        for name, p in params.items():
            leaves[name] = Tensor(p.data, requires_grad=True)
        s, a, _, s_noisy = stack_transitions(batch)
        with ad.enable_grad():
            ad.backward(self.batch_mse(leaves, s, a, s_noisy))
        return {name: p.grad for name, p in leaves.items()}

    def inner_step(self, params: ParamSet, batch: list[Transition], alpha: Tensor) -> ParamSet:
        """theta' = theta - alpha * grad; the gradient enters as a constant (first order)."""
        grads = self.support_gradient(params, batch)
        out = ParamSet()
        for name, p in params.items():
            out[name] = ad.sub(p, ad.mul(alpha, Tensor(grads[name])))
        return out

    def session(self) -> "MamlSession":
        return MamlSession(self)


def _load(params: ParamSet, arrays) -> None:
    if set(arrays) != set(params.keys()):
        raise ConfigurationError("checkpoint parameter names do not match the model")
    for name, t in params.items():
        t.set_data(arrays[name])


def _detached(params: ParamSet) -> ParamSet:
    out = ParamSet()
    for name, p in params.items():
        out[name] = Tensor(p.data)
    return out


def maml_adapt(model: MamlModel, support: list[Transition], steps: int | None = None) -> ParamSet:
    """Adapted copy of the network parameters; the base parameters are left untouched.

    Step ``j`` uses ``support[j*k:(j+1)*k]``.  ``steps`` defaults to as many full
    batches as the support holds, capped at ``model.inner_steps``.
    """
    k = model.batch_size
    if len(support) < k:
        raise InsufficientDataError(f"MAML-{k} needs at least {k} support transitions, got {len(support)}")
    if steps is None:
        steps = min(model.inner_steps, len(support) // k)
    if steps * k > len(support):
        raise InsufficientDataError(f"{steps} steps of batch {k} need {steps * k} transitions")
    with ad.no_grad():
        alpha = ad.softplus(model.alpha_raw)
    params = _detached(model.net_params)
    for j in range(steps):
        with ad.no_grad():
            params = model.inner_step(params, support[j * k:(j + 1) * k], alpha)
    return params


class MamlSession:
    """Sequential adaptation: every ``batch_size`` new observations trigger one inner step."""

    def __init__(self, model: MamlModel):
        self.model = model
        self.method = model.method
        self.report_stride = model.batch_size
        self.reset()

    def reset(self) -> None:
        self.adapted = _detached(self.model.net_params)
        self.pending: list[Transition] = []
        self.observations_seen = 0
        self.steps_taken = 0

    def observe(self, s, a, s_noisy) -> None:
        t = Transition(np.ravel(np.asarray(s, dtype=float)), np.ravel(np.asarray(a, dtype=float)),
                       np.ravel(np.asarray(s_noisy, dtype=float)), np.ravel(np.asarray(s_noisy, dtype=float)))
        self.pending.append(t)
        self.observations_seen += 1
        if len(self.pending) == self.model.batch_size:
            with ad.no_grad():
                alpha = ad.softplus(self.model.alpha_raw)
                self.adapted = self.model.inner_step(self.adapted, self.pending, alpha)
            self.pending = []
            self.steps_taken += 1

    def predict(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.asarray(a, dtype=float).reshape(s.shape[0], -1)
        with ad.no_grad():
            return self.model.forward(self.adapted, s, a).data

    def hidden_state(self) -> np.ndarray:
        raise CapabilityError("MAML adapters have no hidden task state")

    def params(self) -> ParamSet:
        return self.model.params()


def maml_meta_train(model: MamlModel, task_source: TaskSource, cfg: TrainConfig) -> TrainingLog:
    """First-order MAML: support batches use noisy targets, the query loss noiseless ones."""
    n_support = model.batch_size * model.inner_steps

    def step_loss(task, transitions):
        support, query = transitions[:n_support], transitions[n_support:]
        alpha = ad.softplus(model.alpha_raw)
        params = model.net_params
        for j in range(model.inner_steps):
            k = model.batch_size
            params = model.inner_step(params, support[j * k:(j + 1) * k], alpha)
        s, a, s_next, _ = stack_transitions(query)
        return model.batch_mse(params, s, a, s_next)

    return train_loop(model.params(), step_loss, task_source, cfg, n_support + model.query_size)
