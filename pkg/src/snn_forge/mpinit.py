"""Membrane-potential initialisation from a running mean of final potentials.

Each spiking layer keeps one scalar ``mu``.  Every simulation window starts
from ``U[0] = mu``; after a training window ``mu`` moves towards the mean
final-timestep potential of the neurons that fired at least once::

    mu <- (1 - beta) * mu + beta * mu_batch

Note the convention: ``beta`` weights the *new* batch mean (default 0.9).
``mu`` is a buffer; it never receives a gradient.
"""

from dataclasses import dataclass

import numpy as np


class FrozenStateError(RuntimeError):
    pass


@dataclass
class MpInitState:
    mu: float = 0.0
    beta: float = 0.9
    enabled: bool = True
    frozen: bool = False
    silent_batches: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    def to_dict(self):
        return {"mu": float(self.mu), "beta": float(self.beta), "enabled": bool(self.enabled),
                "frozen": bool(self.frozen), "silent_batches": int(self.silent_batches)}


def init_window(mp, layer_shape, dtype=np.float64):
    """Initial membrane tensor for a new window (zeros when disabled)."""
    value = mp.mu if mp.enabled else 0.0
    return np.full(layer_shape, value, dtype=dtype)


def batch_mean_active(U_T, mask):
    """Mean of ``U_T`` over active entries, or ``None`` if the layer was silent."""
    U_T = np.asarray(U_T)
    mask = np.asarray(mask, dtype=bool)
    if U_T.shape != mask.shape:
        raise ValueError(f"shape mismatch {U_T.shape} vs {mask.shape}")
    if not mask.any():
        return None
    return float(U_T[mask].mean())


def update_running_mean(mp, mu_batch):
    """EMA update in place; ``None`` (silent layer) leaves ``mu`` unchanged."""
    if mp.frozen:
        raise FrozenStateError("running mean is frozen (inference mode)")
    if mu_batch is None:
        mp.silent_batches += 1
        return mp
    mp.mu = (1.0 - mp.beta) * mp.mu + mp.beta * float(mu_batch)
    return mp
