"""Surrogate derivatives for the spike nonlinearity and their scaling modes.

Three ways of feeding the membrane potential ``M`` and threshold ``vthr``
into a surrogate derivative ``f'``:

``AS``    absolute argument ``x = M - vthr``; ``dS/dM = f'(x)``.
``RS``    relative argument ``x = M/vthr - 1``; ``dS/dM = f'(x)/vthr``.
``TrSG``  relative argument, and the training forward emits ``O = vthr*S``
          so that ``dO/dM = f'(x)`` regardless of the threshold.

All functions here are pure and accept numpy arrays or python floats.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import register_grad_fn

SHAPES = ("rectangular", "triangular", "arctan", "sigmoid")
MODES = ("AS", "RS", "TrSG")

_MODE_ALIASES = {"as": "AS", "as-sg": "AS", "rs": "RS", "rs-sg": "RS", "trsg": "TrSG"}
_SHAPE_ALIASES = {"rect": "rectangular", "tri": "triangular", "atan": "arctan"}


def normalize_mode(mode):
    key = str(mode).lower()
    if key in _MODE_ALIASES:
        return _MODE_ALIASES[key]
    raise ValueError(f"unknown surrogate scale mode {mode!r}; expected one of {MODES}")


def normalize_shape(shape):
    key = _SHAPE_ALIASES.get(str(shape).lower(), str(shape).lower())
    if key not in SHAPES:
        raise ValueError(f"unknown surrogate shape {shape!r}; expected one of {SHAPES}")
    return key


@dataclass(frozen=True)
class SurrogateConfig:
    shape: str = "rectangular"
    scale_mode: str = "TrSG"
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", normalize_shape(self.shape))
        object.__setattr__(self, "scale_mode", normalize_mode(self.scale_mode))
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def relative(self):
        return self.scale_mode in ("RS", "TrSG")

    @property
    def grad_fn_id(self):
        return f"spike:{self.scale_mode}:{self.shape}"


def sg_argument(mode, M, vthr):
    """Surrogate argument: ``M - vthr`` (AS) or ``M/vthr - 1`` (RS, TrSG)."""
    mode = normalize_mode(mode)
    if mode == "AS":
        return np.subtract(M, vthr)
    if np.any(np.asarray(vthr) <= 0):
        raise ValueError(f"relative surrogate argument needs vthr > 0, got {vthr}")
    return np.divide(M, vthr) - 1.0


def sg_derivative(shape, x, gamma=1.0):
    shape = normalize_shape(shape)
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if shape == "rectangular":
        return np.where(np.abs(x) < gamma / 2, 1.0 / gamma, 0.0).astype(x.dtype)
    if shape == "triangular":
        return np.maximum(0.0, gamma - np.abs(x)) / gamma ** 2
    if shape == "arctan":
        return gamma / (2.0 * (1.0 + (0.5 * np.pi * gamma * x) ** 2))
    s = 0.5 * (1.0 + np.tanh(0.5 * x / gamma))
    return s * (1.0 - s) / gamma


def spike_grad_wrt_M(cfg, M, vthr):
    """d(output)/dM: of ``S`` for AS and RS, of ``O = vthr*S`` for TrSG."""
    x = sg_argument(cfg.scale_mode, M, vthr)
    fx = sg_derivative(cfg.shape, x, cfg.gamma)
    if cfg.scale_mode == "RS":
        return fx / vthr
    return fx


def spike_grad_wrt_vthr(cfg, M, vthr, S=None):
    """d(output)/dvthr at fixed ``M``.

    For TrSG the output is ``O = vthr*S``, so the product rule adds ``S``.
    """
    x = sg_argument(cfg.scale_mode, M, vthr)
    fx = sg_derivative(cfg.shape, x, cfg.gamma)
    if cfg.scale_mode == "AS":
        return -fx
    if cfg.scale_mode == "RS":
        return fx * (-np.asarray(M) / np.square(vthr))
    if S is None:
        S = (np.asarray(M) >= vthr).astype(fx.dtype)
    return S - np.asarray(M) / vthr * fx


def ratio_in_window(x, gamma):
    """Fraction of surrogate arguments with ``|x| < gamma/2``."""
    x = np.asarray(x)
    return float(np.mean(np.abs(x) < gamma / 2)) if x.size else float("nan")


# --- custom_grad backward functions ---------------------------------------
# saved: dict(x=, M=, vthr=, shape=, gamma=, mode=, need_vthr=)

def _make_spike_grad(mode, shape):
    def grad_fn(g, saved):
        fx = sg_derivative(shape, saved["x"], saved["gamma"])
        vthr = saved["vthr"]
        if mode == "AS":
            gm = g * fx
            gv = -gm if saved["need_vthr"] else None
        else:
            # the spike node itself emits S; TrSG multiplies by vthr afterwards
            gm = g * (fx / vthr)
            gv = -(gm * saved["M"]).sum() / vthr if saved["need_vthr"] else None
        return gm, gv
    return grad_fn


for _mode in MODES:
    for _shape in SHAPES:
        register_grad_fn(f"spike:{_mode}:{_shape}", _make_spike_grad(_mode, _shape))
