"""Discrete-time leaky integrate-and-fire dynamics.

Per timestep::

    M[t] = (1 - 1/tau) U[t-1] + (1/tau) I[t]      integrate
    S[t] = H(M[t] - vthr)                          fire, H(0) = 1
    U[t] = M[t] - vthr S[t]   (soft)               reset
    U[t] = M[t] (1 - S[t])    (hard)

The same functions run on plain numpy arrays (the theory lab) and on tape
nodes (training), so both paths share one implementation of the algebra.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, register_grad_fn, sigmoid, softplus
from .errors import DivergenceError
from .surrogate import SurrogateConfig, sg_argument

RESET_MODES = ("soft", "hard")


def softplus_inverse(v):
    if v <= 0:
        raise ValueError("softplus range is (0, inf)")
    return v + math.log(-math.expm1(-v))


def tau_to_logit(tau):
    """``w`` such that ``1/sigmoid(w) == tau``."""
    if tau <= 1:
        raise ValueError(f"tau must exceed 1, got {tau}")
    return -math.log(tau - 1.0)


@dataclass
class LifParams:
    """Raw per-layer neuron variables; ``tau`` and ``vthr`` are derived."""

    w_raw: float = 0.0
    k_raw: float = softplus_inverse(1.0)
    reset_mode: str = "soft"
    train_tau: bool = False
    train_vthr: bool = False

    def __post_init__(self):
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")

    @classmethod
    def from_values(cls, tau=2.0, vthr=1.0, **kwargs):
        return cls(w_raw=tau_to_logit(tau), k_raw=softplus_inverse(vthr), **kwargs)

    @property
    def tau(self):
        return reparam(self)[0]

    @property
    def vthr(self):
        return reparam(self)[1]


@dataclass
class NeuronState:
    U: object
    M: object = None
    S: object = None
    active_mask: np.ndarray = None

    @classmethod
    def initial(cls, U0):
        U0 = U0.value if isinstance(U0, Node) else np.asarray(U0)
        return cls(U=U0, active_mask=np.zeros(np.shape(U0), dtype=bool))


def reparam(params):
    """``tau = 1/sigmoid(w_raw)``, ``vthr = softplus(k_raw)``."""
    sig = 0.5 * (1.0 + math.tanh(0.5 * params.w_raw))
    vthr = float(np.logaddexp(0.0, params.k_raw))
    return 1.0 / sig, vthr


def reparam_nodes(tape, w_param, k_param):
    """Tape versions returning (1/tau, vthr) so both stay differentiable."""
    return sigmoid(tape.param(w_param)), softplus(tape.param(k_param))


def _value(v):
    return v.value if isinstance(v, Node) else v


def integrate(U_prev, I_in, inv_tau):
    """Membrane update written in terms of ``1/tau`` (array or node)."""
    return U_prev + inv_tau * (I_in - U_prev)


def membrane_update(U_prev, I_in, tau):
    if not tau > 1:
        raise ValueError(f"tau must exceed 1, got {tau}")
    if not isinstance(U_prev, Node) and not isinstance(I_in, Node):
        if np.shape(U_prev) != np.shape(I_in) and np.ndim(U_prev) and np.ndim(I_in):
            raise ValueError(f"shape mismatch {np.shape(U_prev)} vs {np.shape(I_in)}")
    return integrate(U_prev, I_in, 1.0 / tau)


def fire(M, vthr, cfg=None):
    """Heaviside spike; on a tape it becomes a custom_grad node.

    The surrogate argument used by the backward pass is kept in
    ``node.ctx["saved"]["x"]``.
    """
    vthr_val = float(_value(vthr))
    if not vthr_val > 0:
        raise ValueError(f"vthr must be positive, got {vthr_val}")
    M_val = _value(M)
    S = (M_val >= vthr_val).astype(M_val.dtype if hasattr(M_val, "dtype") else np.float64)
    if not isinstance(M, Node):
        return S
    cfg = cfg or SurrogateConfig()
    inputs = [M]
    if isinstance(vthr, Node):
        inputs.append(vthr)
    saved = {
        "x": sg_argument(cfg.scale_mode, M_val, vthr_val),
        "M": M_val,
        "vthr": vthr_val,
        "gamma": cfg.gamma,
        "need_vthr": isinstance(vthr, Node) and vthr.requires_grad,
    }
    return M.tape.custom_grad(S, cfg.grad_fn_id, saved, inputs)


def reset(M, S, vthr, mode="soft"):
    """Post-spike reset; ``S`` and ``vthr`` are constants on the backward path."""
    if mode not in RESET_MODES:
        raise ValueError(f"reset mode must be one of {RESET_MODES}, got {mode!r}")
    M_val, S_val, v = _value(M), _value(S), float(_value(vthr))
    U = M_val - v * S_val if mode == "soft" else M_val * (1.0 - S_val)
    if not isinstance(M, Node):
        return U
    return M.tape.custom_grad(U, f"reset:{mode}", {"S": S_val}, [M])


register_grad_fn("reset:soft", lambda g, saved: (g,))
register_grad_fn("reset:hard", lambda g, saved: (g * (1.0 - saved["S"]),))


def step(state, I_in, params, cfg=None, *, inv_tau=None, vthr=None, scale_output=True,
         layer=None, t=None):
    """One integrate/fire/reset step.

    ``inv_tau`` and ``vthr`` override the values derived from ``params``;
    the network passes tape nodes here so the neuron parameters train.
    Returns ``(new_state, O)`` with ``O = vthr*S`` for TrSG when
    ``scale_output`` is set, else ``O = S``.
    """
    cfg = cfg or SurrogateConfig()
    if inv_tau is None or vthr is None:
        tau_f, vthr_f = reparam(params)
        inv_tau = 1.0 / tau_f if inv_tau is None else inv_tau
        vthr = vthr_f if vthr is None else vthr
    M = integrate(state.U, I_in, inv_tau)
    if not np.all(np.isfinite(_value(M))):
        raise DivergenceError(f"non-finite membrane potential in layer {layer} at timestep {t}",
                              layer=layer, timestep=t)
    S = fire(M, vthr, cfg)
    U = reset(M, S, vthr, params.reset_mode)
    S_val = _value(S)
    mask = S_val > 0
    if state.active_mask is not None and np.shape(state.active_mask) == np.shape(mask):
        mask = state.active_mask | mask
    if cfg.scale_mode == "TrSG" and scale_output:
        O = vthr * S
    else:
        O = S
    return NeuronState(U=U, M=M, S=S, active_mask=mask), O


def absorb_threshold(next_weights, vthr):
    """Fold a TrSG threshold into the following layer: ``W <- vthr * W``."""
    if not vthr > 0:
        raise ValueError(f"vthr must be positive, got {vthr}")
    return np.asarray(next_weights) * vthr
