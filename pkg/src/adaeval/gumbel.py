"""Gumbel-Max sampling, its temperature relaxation, and the straight-through
hard decision used by the gate during training.

Conventions fixed here:
  * gate logits are treated directly as log-weights of the two choices
    (index 0 = skip, index 1 = compute fine);
  * every argmax tie breaks toward index 1;
  * inference never adds noise (callers take a plain argmax of the logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .rng import SplitMix64

_U_CLAMP = 1e-12


@dataclass
class TauSchedule:
    """Per-epoch exponential temperature decay with a floor."""
    tau_start: float = 5.0
    decay: float = 0.9
    tau_min: float = 0.5

    def __post_init__(self):
        if not (self.tau_start >= self.tau_min > 0):
            raise ValueError(f"need tau_start >= tau_min > 0, got {self}")
        if not (0 < self.decay <= 1):
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(schedule.tau_min, schedule.tau_start * schedule.decay ** epoch)


@dataclass
class GumbelSample:
    """One relaxed draw: noise, logits, temperature, soft simplex point,
    and the hard bit (1 = compute fine)."""
    noise: np.ndarray
    logits: np.ndarray
    tau: float
    soft: np.ndarray
    hard_bit: int


def sample_gumbel_noise(rng: SplitMix64, batch: int | None = None) -> np.ndarray:
    """Gumbel(0,1) noise, shape (2,) or (batch, 2): -log(-log U), U in (0,1)."""
    n = 2 if batch is None else 2 * batch
    u = np.clip(rng.uniform(n), _U_CLAMP, 1.0 - _U_CLAMP)
    g = -np.log(-np.log(u))
    return g if batch is None else g.reshape(batch, 2)


def gumbel_max(log_b: np.ndarray, noise: np.ndarray) -> np.ndarray | int:
    """Argmax of perturbed log-weights; ties go to index 1 (compute fine)."""
    log_b = np.asarray(log_b, dtype=np.float64)
    z = log_b + noise
    pick = (z[..., 1] >= z[..., 0]).astype(np.int64)
    return int(pick) if pick.ndim == 0 else pick


def gumbel_softmax(log_b: ng.DiffArray, noise: np.ndarray, tau: float) -> ng.DiffArray:
    """Softmax((log_b + noise) / tau); differentiable w.r.t. log_b."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    perturbed = ng.add(log_b, ng.constant(np.broadcast_to(noise, log_b.shape)))
    return ng.softmax(ng.scalar_mul(perturbed, 1.0 / tau), axis=-1)


def straight_through(soft: ng.DiffArray) -> ng.DiffArray:
    """One-hot of argmax(soft) forward; gradients flow as if output were soft."""
    sv = soft.values
    fine = sv[..., 1] >= sv[..., 0]
    hard = np.zeros_like(sv)
    hard[..., 1] = fine
    hard[..., 0] = ~fine

    def vjp(g):
        ng._accum(soft, g)

    return ng.record_op(hard, (soft,), vjp)


def draw(rng: SplitMix64, logits: np.ndarray, tau: float) -> GumbelSample:
    """Convenience: one full relaxed draw from plain logits."""
    noise = sample_gumbel_noise(rng)
    soft = gumbel_softmax(ng.constant(logits), noise, tau).values
    return GumbelSample(noise=noise, logits=np.asarray(logits, dtype=np.float64),
                        tau=tau, soft=soft, hard_bit=int(soft[1] >= soft[0]))
