"""Diagonal covariance preconditioner state and its update rules.

The preconditioner tracks squared deviations of a signal (a gradient, or a
server pseudo-gradient) around a reference mean, either accumulated without
bound or as an exponential moving average. There is no bias correction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .numkit import as_vector, check_same_dim

MODES = ("accumulate", "ema")


@dataclass
class PrecondState:
    m: np.ndarray
    P: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.9
    tau: float = 1e-3
    mode: str = "ema"

    def __post_init__(self):
        self.m = as_vector(self.m, "m")
        self.P = as_vector(self.P, "P")
        check_same_dim(("m", self.m), ("P", self.P))
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 <= self.beta1 <= 1 and 0 <= self.beta2 <= 1):
            raise ContractViolation("decay rates must lie in [0, 1]")
        if not self.tau > 0:
            raise ContractViolation("tau must be positive")
        if np.any(self.P < 0):
            raise ContractViolation("preconditioner has negative entries")

    @classmethod
    def zeros(cls, dim: int, **kwargs) -> "PrecondState":
        return cls(np.zeros(dim), np.zeros(dim), **kwargs)

    def copy(self) -> "PrecondState":
        return replace(self, m=self.m.copy(), P=self.P.copy())


def moment_update(state: PrecondState, g) -> np.ndarray:
    """``m <- beta1 m + (1 - beta1) g``; stores and returns the new moment."""
    g = as_vector(g, "g")
    check_same_dim(("m", state.m), ("g", g))
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    return state.m


def diagonal_of_outer(v) -> np.ndarray:
    v = as_vector(v, "v")
    return v * v


def _deviation_sq(state: PrecondState, g, mean) -> np.ndarray:
    g, mean = as_vector(g, "g"), as_vector(mean, "mean")
    check_same_dim(("P", state.P), ("g", g), ("mean", mean))
    return diagonal_of_outer(g - mean)


def precond_accumulate(state: PrecondState, g, mean) -> np.ndarray:
    """``P <- P + (g - mean)^2``."""
    if state.mode != "accumulate":
        raise ContractViolation("precond_accumulate requires mode='accumulate'")
    state.P = state.P + _deviation_sq(state, g, mean)
    return state.P


def precond_ema(state: PrecondState, g, mean) -> np.ndarray:
    """``P <- beta2 P + (1 - beta2) (g - mean)^2``."""
    if state.mode != "ema":
        raise ContractViolation("precond_ema requires mode='ema'")
    state.P = state.beta2 * state.P + (1.0 - state.beta2) * _deviation_sq(state, g, mean)
    return state.P
