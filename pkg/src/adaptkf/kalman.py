"""Linear Kalman filter over the latent task vector, built from autodiff ops.

The latent vector is assumed stationary (A = I) with no control input
(B = 0); a small process noise Q = eps_q * I keeps the covariance from
collapsing.  The covariance update uses the plain ``(I - K C) P`` form followed
by explicit symmetrization.  The Joseph form
``(I - KC) P (I - KC)^T + K R K^T`` would be the numerically safer alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError
from .nn import ParamSet

VAR_FLOOR = 1e-6
DEFAULT_EPS_Q = 1e-4


@dataclass
class GaussianBelief:
    mean: Tensor  # 1 x d_phi
    cov: Tensor  # d_phi x d_phi

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def marginal_variances(self) -> np.ndarray:
        return np.diagonal(self.cov.data).copy()


@dataclass
class Measurement:
    mean: Tensor  # 1 x d_z
    var_diag: Tensor  # 1 x d_z, diagonal of the measurement covariance

    def __post_init__(self):
        if self.mean.shape != self.var_diag.shape or self.mean.shape[0] != 1:
            raise DimensionError(
                f"measurement mean {self.mean.shape} and variance {self.var_diag.shape} must be equal rows"
            )
        if not np.all(self.var_diag.data >= VAR_FLOOR):
            raise ValueError(f"measurement variances must be >= {VAR_FLOOR}")


class FilterParams:
    """Learned observation matrix C_z and initial belief; fixed A, B, Q."""

    def __init__(self, c_z: Tensor, init_mean: Tensor, init_log_var: Tensor,
                 eps_q: float = DEFAULT_EPS_Q):
        d_z, d_phi = c_z.shape
        if init_mean.shape != (1, d_phi) or init_log_var.shape != (1, d_phi):
            raise DimensionError("initial mean / log-variance must be 1 x d_phi")
        if eps_q < 0:
            raise ValueError("eps_q must be non-negative")
        self.c_z = c_z
        self.init_mean = init_mean
        self.init_log_var = init_log_var
        self.eps_q = float(eps_q)
        self.q = Tensor(self.eps_q * np.eye(d_phi))

    @classmethod
    def create(cls, d_z: int, d_phi: int, seed: int = 0, eps_q: float = DEFAULT_EPS_Q):
        rng = np.random.default_rng(seed)
        if d_z == d_phi:
            c = np.eye(d_z)
        else:
            c = rng.uniform(-1, 1, size=(d_z, d_phi)) / np.sqrt(d_phi)
        return cls(Tensor(c, requires_grad=True),
                   Tensor(np.zeros((1, d_phi)), requires_grad=True),
                   Tensor(np.zeros((1, d_phi)), requires_grad=True),
                   eps_q)

    @property
    def d_z(self) -> int:
        return self.c_z.shape[0]

    @property
    def d_phi(self) -> int:
        return self.c_z.shape[1]

    def params(self) -> ParamSet:
        p = ParamSet()
        p["c_z"] = self.c_z
        p["init_mean"] = self.init_mean
        p["init_log_var"] = self.init_log_var
        return p

    def initial_belief(self) -> GaussianBelief:
        return GaussianBelief(self.init_mean, ad.diag(ad.exp(self.init_log_var)))


def predict_step(belief: GaussianBelief, fp: FilterParams) -> GaussianBelief:
    """Time update with A = I, B = 0: mean kept, covariance inflated by Q."""
    return GaussianBelief(belief.mean, ad.symmetrize(ad.add(belief.cov, fp.q)))


def update_step(belief: GaussianBelief, meas: Measurement, fp: FilterParams,
                c_t: Tensor | None = None) -> GaussianBelief:
    """Condition the belief on one measurement.

    ``c_t`` may carry a precomputed transpose of C_z to save an op per step.
    """
    c = fp.c_z
    if meas.mean.shape[1] != c.shape[0]:
        raise DimensionError(f"measurement width {meas.mean.shape[1]} != d_z {c.shape[0]}")
    if c_t is None:
        c_t = ad.transpose(c)
    p = belief.cov
    p_ct = ad.matmul(p, c_t)
    innov_cov = ad.add(ad.matmul(c, p_ct), ad.diag(meas.var_diag))
    gain = ad.matmul(p_ct, ad.mat_inverse(innov_cov))
    innov = ad.sub(meas.mean, ad.matmul(belief.mean, c_t))
    mean = ad.add(belief.mean, ad.matmul(innov, ad.transpose(gain)))
    cov = ad.symmetrize(ad.sub(p, ad.matmul(gain, ad.matmul(c, p))))
    return GaussianBelief(mean, cov)


def filter_sequence(fp: FilterParams, measurements: list[Measurement]) -> list[GaussianBelief]:
    """Posterior belief after each measurement, starting from the learned prior."""
    if not measurements:
        return []
    belief = fp.initial_belief()
    c_t = ad.transpose(fp.c_z)
    out = []
    for meas in measurements:
        belief = update_step(predict_step(belief, fp), meas, fp, c_t)
        out.append(belief)
    return out
