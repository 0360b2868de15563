"""Client and server update rules.

Server rules treat the aggregated client delta ``w_{i,K} - w_t`` as the
improvement direction and move along it: ``w + eta_g * scale * delta``.
Aggregation sums client vectors in ascending client-id order when given a
mapping, so results do not depend on the order clients finished in.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .numkit import adaptive_scale, as_vector, check_same_dim
from .precond import PrecondState, moment_update, precond_accumulate, precond_ema

LOCAL_KINDS = ("sgd", "sgd_momentum", "adaalter", "prefed", "basic_prefed")
SERVER_KINDS = ("average", "fedadagrad", "fedadam", "prefedopt")
NORMALIZATIONS = ("sum_only", "divide_by_K")
MOMENT_SYNC = ("zero", "carry", "average")


@dataclass(frozen=True)
class LocalOptConfig:
    kind: str = "sgd"
    eta_l: float = 0.05
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.9
    tau: float = 1e-3
    first_moment_sync: str = "zero"

    def __post_init__(self):
        if self.kind not in LOCAL_KINDS:
            raise ContractViolation(f"local optimizer must be one of {LOCAL_KINDS}")
        if not self.eta_l > 0:
            raise ContractViolation("eta_l must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")
        if self.first_moment_sync not in MOMENT_SYNC:
            raise ContractViolation(f"first_moment_sync must be one of {MOMENT_SYNC}")


@dataclass(frozen=True)
class ServerOptConfig:
    kind: str = "average"
    eta_g: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    delta_normalization: str = "sum_only"

    def __post_init__(self):
        if self.kind not in SERVER_KINDS:
            raise ContractViolation(f"server optimizer must be one of {SERVER_KINDS}")
        if self.delta_normalization not in NORMALIZATIONS:
            raise ContractViolation(f"delta_normalization must be one of {NORMALIZATIONS}")


def _safe_scale(v: np.ndarray, acc: np.ndarray, tau: float, eta: float) -> np.ndarray:
    # tau = 0 is allowed for the AdaGrad-family rules; 0/0 coordinates do not move
    if tau > 0:
        return adaptive_scale(v, acc, tau, eta)
    denom = np.sqrt(acc)
    out = np.zeros_like(v)
    np.divide(eta * v, denom, out=out, where=denom > 0)
    return out


def mean_vectors(vectors: Mapping[int, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean; a mapping is reduced in sorted-key order."""
    items = [vectors[k] for k in sorted(vectors)] if isinstance(vectors, Mapping) else list(vectors)
    if not items:
        raise ContractViolation("cannot aggregate an empty set of client vectors")
    acc = as_vector(items[0], "client vector").copy()
    for v in items[1:]:
        v = as_vector(v, "client vector")
        check_same_dim(("first", acc), ("other", v))
        acc = acc + v
    return acc / len(items)


# client rules -------------------------------------------------------------------

def sgd_step(w, g, eta_l: float) -> np.ndarray:
    w, g = as_vector(w, "w"), as_vector(g, "g")
    check_same_dim(("w", w), ("g", g))
    return w - eta_l * g


def sgd_momentum_step(w, velocity, g, eta_l: float, momentum: float) -> tuple[np.ndarray, np.ndarray]:
    w, velocity, g = as_vector(w, "w"), as_vector(velocity, "velocity"), as_vector(g, "g")
    check_same_dim(("w", w), ("velocity", velocity), ("g", g))
    velocity = momentum * velocity + g
    return w - eta_l * velocity, velocity


def adaalter_local_step(w, v_acc, g, eta_l: float, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """AdaGrad-style local step: accumulate ``g^2`` then scale by ``1/(sqrt(v)+tau)``."""
    w, v_acc, g = as_vector(w, "w"), as_vector(v_acc, "v_acc"), as_vector(g, "g")
    check_same_dim(("w", w), ("v_acc", v_acc), ("g", g))
    if np.any(v_acc < 0):
        raise ContractViolation("accumulator has negative entries")
    v_acc = v_acc + g * g
    return w - _safe_scale(g, v_acc, tau, eta_l), v_acc


def prefed_local_step(w, pstate: PrecondState, g, eta_l: float) -> tuple[np.ndarray, PrecondState]:
    """One PreFed client step.

    Updates the first moment, then the EMA of ``(g - m)^2`` around the *new*
    moment, then steps along the moment (not the raw gradient).
    """
    if pstate.mode != "ema":
        raise ContractViolation("prefed_local_step requires an ema preconditioner")
    w, g = as_vector(w, "w"), as_vector(g, "g")
    check_same_dim(("w", w), ("g", g), ("P", pstate.P))
    state = pstate.copy()
    m = moment_update(state, g)
    precond_ema(state, g, m)
    return w - adaptive_scale(m, state.P, state.tau, eta_l), state


def basic_prefed_step(ws, gs, pstates, eta_l: float, tau: float):
    """Lock-step variant that shares gradients every local iteration.

    The per-iteration mean gradient of the participating clients is the
    centre for each client's accumulated preconditioner; each client then
    steps along its own raw gradient.
    """
    if not ws:
        raise ContractViolation("basic_prefed_step needs at least one client")
    if not len(ws) == len(gs) == len(pstates):
        raise ContractViolation("weights, gradients, and states must align per client")
    mean = mean_vectors(gs)
    new_ws, new_states = [], []
    for w, g, ps in zip(ws, gs, pstates):
        w, g = as_vector(w, "w"), as_vector(g, "g")
        check_same_dim(("w", w), ("g", g), ("mean", mean))
        if ps.mode != "accumulate":
            raise ContractViolation("basic_prefed_step requires accumulate-mode preconditioners")
        ps = ps.copy()
        precond_accumulate(ps, g, mean)
        new_ws.append(w - adaptive_scale(g, ps.P, tau, eta_l))
        new_states.append(ps)
    return new_ws, new_states


# server rules -------------------------------------------------------------------

def server_average(client_weights) -> np.ndarray:
    return mean_vectors(client_weights)


def _aggregate_delta(deltas, K: int, cfg: ServerOptConfig) -> np.ndarray:
    if K < 1:
        raise ContractViolation("K must be a positive integer")
    delta = mean_vectors(deltas)
    if cfg.delta_normalization == "divide_by_K":
        delta = delta / K
    return delta


def server_fedadagrad(w_t, v_t, deltas, cfg: ServerOptConfig, K: int = 1) -> tuple[np.ndarray, np.ndarray]:
    w_t, v_t = as_vector(w_t, "w"), as_vector(v_t, "v")
    if np.any(v_t < 0):
        raise ContractViolation("accumulator has negative entries")
    delta = _aggregate_delta(deltas, K, cfg)
    check_same_dim(("w", w_t), ("v", v_t), ("delta", delta))
    v = v_t + delta * delta
    return w_t + _safe_scale(delta, v, cfg.tau, cfg.eta_g), v


def server_fedadam(w_t, m_t, v_t, deltas, cfg: ServerOptConfig, K: int = 1):
    w_t, m_t, v_t = as_vector(w_t, "w"), as_vector(m_t, "m"), as_vector(v_t, "v")
    if np.any(v_t < 0):
        raise ContractViolation("second moment has negative entries")
    delta = _aggregate_delta(deltas, K, cfg)
    check_same_dim(("w", w_t), ("m", m_t), ("v", v_t), ("delta", delta))
    m = cfg.beta1 * m_t + (1.0 - cfg.beta1) * delta
    v = cfg.beta2 * v_t + (1.0 - cfg.beta2) * delta * delta
    return w_t + _safe_scale(m, v, cfg.tau, cfg.eta_g), m, v


def server_prefedopt(w_t, pstate: PrecondState, deltas, K: int, cfg: ServerOptConfig):
    """Server-side covariance preconditioning of the aggregated delta."""
    if pstate.mode != "ema":
        raise ContractViolation("server_prefedopt requires an ema preconditioner")
    w_t = as_vector(w_t, "w")
    delta = _aggregate_delta(deltas, K, cfg)
    check_same_dim(("w", w_t), ("P", pstate.P), ("delta", delta))
    state = replace(pstate.copy(), beta1=cfg.beta1, beta2=cfg.beta2, tau=cfg.tau)
    m = moment_update(state, delta)
    precond_ema(state, delta, m)
    return w_t + adaptive_scale(delta, state.P, state.tau, cfg.eta_g), state
