"""Meta-learned dynamics adaptation with a differentiable Kalman filter over a latent task code."""

__version__ = "0.1.0"
