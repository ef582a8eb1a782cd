"""Multiplicative Gaussian channel gates for structured pruning.

Each gated layer owns a per-channel gate z = mu + eps * sigma sampled fresh
every training forward (eval uses the mean). The information-bottleneck
regularizer log(1 + mu^2/sigma^2) pushes per-channel ratios alpha toward
zero; channels with alpha below the threshold get pruned.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


class GateState:
    """Per-channel gate statistics plus the pruning threshold/temperature."""

    __slots__ = ("mu", "sigma", "alpha_th", "tau")

    def __init__(self, mu, sigma, alpha_th=1e-3, tau=1e-2, trainable=False):
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float32))
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float32))
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ContractError(
                f"mu and sigma must be equal-length vectors, got "
                f"{mu.shape} vs {sigma.shape}")
        if not np.all(sigma > 0):
            raise ContractError("sigma must be strictly positive")
        if not alpha_th > 0:
            raise ContractError(f"alpha threshold must be positive, got {alpha_th}")
        if not tau > 0:
            raise ContractError(f"temperature must be positive, got {tau}")
        self.mu = Tensor(mu, requires_grad=trainable)
        self.sigma = Tensor(sigma, requires_grad=trainable)
        self.alpha_th = float(alpha_th)
        self.tau = float(tau)

    @classmethod
    def fresh(cls, channels: int, mu_init=1.0, sigma_init=0.5, alpha_th=1e-3,
              tau=1e-2, trainable=True) -> "GateState":
        """Near-identity gates with enough noise for the information term."""
        return cls(np.full(channels, mu_init, dtype=np.float32),
                   np.full(channels, sigma_init, dtype=np.float32),
                   alpha_th=alpha_th, tau=tau, trainable=trainable)

    @property
    def channels(self) -> int:
        return self.mu.data.shape[0]

    def alpha(self) -> np.ndarray:
        """Signal-to-noise ratio mu^2/sigma^2 per channel (float64)."""
        mu = self.mu.data.astype(np.float64)
        sigma = self.sigma.data.astype(np.float64)
        return mu * mu / (sigma * sigma)

    def keep_mask(self) -> np.ndarray:
        """Boolean mask of channels that survive hard pruning."""
        return self.alpha() >= self.alpha_th

    def trainable_params(self):
        return [p for p in (self.mu, self.sigma) if p.requires_grad]

    def project(self, floor=1e-6):
        """Clamp sigma back to positive after a gradient step."""
        np.maximum(self.sigma.data, np.float32(floor), out=self.sigma.data)

    def __repr__(self):
        return (f"GateState(channels={self.channels}, "
                f"alpha_th={self.alpha_th:g}, tau={self.tau:g})")


def sample_gates(state: GateState, rng: np.random.Generator,
                 mode: str = "train") -> Tensor:
    """Draw gate values: mean plus scaled Gaussian noise in train mode, the
    mean itself in eval mode. Gradients reach mu directly and sigma through
    the noise coefficient."""
    if mode == "eval":
        return state.mu
    if mode != "train":
        raise ContractError(f"mode must be train or eval, got {mode!r}")
    eps = rng.standard_normal(state.channels).astype(np.float32)
    return state.mu + state.sigma * Tensor(eps)


def gate_forward(h: Tensor, z: Tensor) -> Tensor:
    """Scale channel i of h by z[i]; h is [N,C,...] with C on axis 1."""
    if h.data.ndim < 2:
        raise DimensionError(
            f"gated input needs a leading batch and channel axis, got "
            f"shape {h.data.shape}")
    c = z.data.shape[0] if z.data.ndim else 1
    if h.data.shape[1] != c:
        raise DimensionError(
            f"gate length {c} does not match channel count "
            f"{h.data.shape[1]} of input shape {h.data.shape}")
    shape = (1, c) + (1,) * (h.data.ndim - 2)
    return h * z.reshape(shape)


def vib_regularizer(states) -> Tensor:
    """Sum of log(1 + mu^2/sigma^2) over every gate of every state."""
    total = None
    for state in states:
        alpha = (state.mu * state.mu) / (state.sigma * state.sigma)
        term = ad.tsum(ad.log(alpha + 1.0))
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def hard_prune_ratio(state: GateState) -> float:
    """Fraction of channels whose alpha sits below the threshold."""
    return float(np.mean(state.alpha() < state.alpha_th))


def soft_prune_ratio(state: GateState, literal_sign=False) -> Tensor:
    """Sigmoid relaxation of the hard ratio, differentiable in mu and sigma.

    The default argument sign, (alpha_th - alpha)/tau, recovers the hard
    indicator as tau -> 0. literal_sign=True keeps the printed form
    (alpha - alpha_th)/tau, which tends to the complement instead.
    """
    alpha = (state.mu * state.mu) / (state.sigma * state.sigma)
    arg = alpha - state.alpha_th if literal_sign else state.alpha_th - alpha
    return ad.tmean(ad.sigmoid(arg * (1.0 / state.tau)))
