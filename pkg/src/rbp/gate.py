"""Gaussian channel gates and their divergence from the sparsity prior.

Each gated channel carries a dropout rate r in (0, 1).  The training-time
gate is a sample from N(1 - r, r(1 - r)) (the Gaussian surrogate of a
Bernoulli keep/drop gate); the prior is the near-degenerate N(0, eps^2)
that pulls unneeded channels toward an exact zero gate.  The closed-form
divergence and its derivative live here, together with the numeric
stationary-rate analysis used by the diagnostics.

Rates are optimized directly (not through a squashing reparameterization)
and hard-clamped to [RATE_CLAMP, 1 - RATE_CLAMP] after every update: under
Adam the parameter moves about one learning rate per step no matter how it
is parameterized, and only the direct walk crosses the keep/drop range
within realistic stage lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import autodiff
from .autodiff import Tensor

ACTIVE = "active"
FROZEN = "frozen"
FOLDED = "folded"

RATE_CLAMP = 1e-4


class GateLifecycleError(RuntimeError):
    """Operation not permitted for the gate's current status."""


@dataclass
class GateState:
    """Per-layer dropout rates with their prior variance and lifecycle flag."""

    layer_id: str
    rates: np.ndarray
    prior_variance: float
    status: str = ACTIVE

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64).copy()
        if self.rates.ndim != 1 or self.rates.size == 0:
            raise ValueError(f"rates must be a non-empty vector, got shape "
                             f"{self.rates.shape}")
        if not (self.prior_variance > 0):
            raise ValueError(f"prior variance must be positive, got "
                             f"{self.prior_variance}")
        if self.status not in (ACTIVE, FROZEN, FOLDED):
            raise ValueError(f"unknown gate status {self.status!r}")
        if self.status == ACTIVE:
            clamp_rates(self.rates)

    @property
    def channels(self) -> int:
        return self.rates.shape[0]


def new_gate(layer_id: str, channels: int, init_rate: float = 0.01,
             prior_variance: float = 0.025) -> GateState:
    return GateState(layer_id, np.full(channels, init_rate), prior_variance)


def clamp_rates(rates: np.ndarray) -> np.ndarray:
    """In-place clamp to [RATE_CLAMP, 1 - RATE_CLAMP]."""
    np.clip(rates, RATE_CLAMP, 1.0 - RATE_CLAMP, out=rates)
    return rates


def freeze(state: GateState) -> GateState:
    if state.status != ACTIVE:
        raise GateLifecycleError(f"cannot freeze a {state.status} gate")
    state.status = FROZEN
    return state


def sample_gate(state: GateState, noise_source) -> np.ndarray:
    """Draw one gate value per channel: 1 - r + sqrt(r(1-r)) * z.

    `noise_source` is either a numpy Generator or a pre-drawn standard
    normal vector (the counter-based stream used during training).
    """
    if state.status != ACTIVE:
        raise GateLifecycleError(f"cannot sample from a {state.status} gate")
    if isinstance(noise_source, np.random.Generator):
        z = noise_source.standard_normal(state.channels)
    else:
        z = np.asarray(noise_source, dtype=np.float64)
        if z.shape != state.rates.shape:
            raise ValueError(f"noise shape {z.shape} != rates shape {state.rates.shape}")
    r = state.rates
    return 1.0 - r + np.sqrt(r * (1.0 - r)) * z


def sample_gate_tensor(rates: Tensor, z: np.ndarray) -> Tensor:
    """Differentiable gate sample; gradients flow through mean and spread."""
    z_t = np.asarray(z, dtype=rates.dtype)
    spread = autodiff.sqrt(rates * (1.0 - rates))
    return (1.0 - rates) + spread * Tensor(z_t)


def expected_gate(state: GateState) -> np.ndarray:
    """Mean gate value, 1 - r per channel; valid for any lifecycle status."""
    return 1.0 - state.rates


def _check_rates_open_interval(r: np.ndarray, eps2: float) -> None:
    if not (eps2 > 0):
        raise ValueError(f"prior variance must be positive, got {eps2}")
    if np.any(r <= 0) or np.any(r >= 1):
        raise ValueError("dropout rates must lie strictly inside (0, 1)")


def kl_value(r: np.ndarray, eps2: float) -> np.ndarray:
    """Per-channel divergence KL(N(1-r, r(1-r)) || N(0, eps2))."""
    r = np.asarray(r, dtype=np.float64)
    _check_rates_open_interval(r, eps2)
    v = r * (1.0 - r)
    return -0.5 * np.log(v / eps2) + (1.0 - r) / (2.0 * eps2) - 0.5


def kl_term(state: GateState) -> float:
    """Total divergence of the gate's channels from the sparsity prior."""
    return float(kl_value(state.rates, state.prior_variance).sum())


def kl_gradient_value(r: np.ndarray, eps2: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    _check_rates_open_interval(r, eps2)
    return -0.5 / r + 0.5 / (1.0 - r) - 0.5 / eps2


def kl_gradient(state: GateState) -> np.ndarray:
    """d kl_term / d r, per channel, in closed form."""
    return kl_gradient_value(state.rates, state.prior_variance)


def kl_tensor(rates: Tensor, eps2: float) -> Tensor:
    """Autodiff version of kl_term for the training objective."""
    v = rates * (1.0 - rates)
    per_channel = autodiff.log(v * (1.0 / eps2)) * (-0.5) \
        + (1.0 - rates) * (1.0 / (2.0 * eps2)) - 0.5
    return autodiff.tsum(per_channel)


def stationary_rate(eps2: float) -> float:
    """Rate minimizing the single-channel divergence over (0, 1).

    Found by bracketed root-finding on the divergence derivative: the
    derivative is negative at 0.5 and diverges to +inf as r -> 1, and the
    divergence itself blows up at both ends of (0, 1), so the bracketed
    root is the unique interior minimum.  Published closed forms for this
    point disagree with each other, hence the numeric route; see
    stationary_rate_candidates for the comparison.
    """
    if not (0 < eps2 < 0.25):
        raise ValueError(f"prior variance must lie in (0, 0.25), got {eps2}")
    lo, hi = 0.5, 1.0 - 1e-14
    return float(brentq(lambda r: kl_gradient_value(np.array([r]), eps2)[0],
                        lo, hi, xtol=1e-15, rtol=8.9e-16))


@dataclass
class StationaryRateDiagnostic:
    """Numeric minimizer next to both algebraic candidates (asserting neither)."""

    prior_variance: float
    numeric: float
    # (1 - 4 eps^2 + sqrt(1 + 16 eps^4)) / 2, approx 1 - 2 eps^2
    candidate_sqrt_1_plus_16e4: float = field(default=0.0)
    # (1 - 2 eps^2 + sqrt(1 + 4 eps^4)) / 2, approx 1 - eps^2
    candidate_sqrt_1_plus_4e4: float = field(default=0.0)


def stationary_rate_candidates(eps2: float) -> StationaryRateDiagnostic:
    numeric = stationary_rate(eps2)
    a = (1.0 - 4.0 * eps2 + np.sqrt(1.0 + 16.0 * eps2 * eps2)) / 2.0
    b = (1.0 - 2.0 * eps2 + np.sqrt(1.0 + 4.0 * eps2 * eps2)) / 2.0
    return StationaryRateDiagnostic(prior_variance=eps2, numeric=numeric,
                                    candidate_sqrt_1_plus_16e4=float(a),
                                    candidate_sqrt_1_plus_4e4=float(b))
