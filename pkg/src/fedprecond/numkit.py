"""Deterministic numeric kernels.

Vectors are plain 1-D ``float64`` numpy arrays; symmetric matrices are 2-D
``float64`` arrays. Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, NumericFailure

SYM_TOL = 1e-12
EIG_FLOOR = 1e-12
MAX_SWEEPS = 100


def as_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {v.shape}")
    return v


def check_same_dim(*pairs: tuple[str, np.ndarray]) -> None:
    dims = {name: v.shape[-1] for name, v in pairs}
    if len(set(dims.values())) > 1:
        raise ContractViolation(f"dimension mismatch: {dims}")


def adaptive_scale(v, P, tau: float, eta: float) -> np.ndarray:
    """Return ``eta * v / (sqrt(P) + tau)`` elementwise."""
    v = as_vector(v, "v")
    P = as_vector(P, "P")
    check_same_dim(("v", v), ("P", P))
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    if np.any(P < 0):
        raise ContractViolation("preconditioner has negative entries")
    return eta * v / (np.sqrt(P) + tau)


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # circle-method tournament: n-1 rounds of n/2 disjoint pairs cover every pair once
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2 :][::-1])
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _check_symmetric(A) -> np.ndarray:
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractViolation("matrix has non-finite entries")
    if np.max(np.abs(A - A.T), initial=0.0) > SYM_TOL:
        raise ContractViolation("matrix is not symmetric")
    return 0.5 * (A + A.T)


def sym_eig(A, max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in tournament order so
    that the n/2 rotations of a round act on disjoint index pairs and can be
    applied together. Returns ``(V, eigvals)`` with eigenvalues sorted
    descending and eigenvectors in the columns of ``V``.
    """
    A = _check_symmetric(A)
    d = A.shape[0]
    if d > 256:
        raise ContractViolation(f"sym_eig supports d <= 256, got {d}")
    V = np.eye(d)
    norm = np.linalg.norm(A)
    if d == 1 or norm == 0.0:
        return V, np.diag(A).copy()

    n = d + (d % 2)
    if n != d:
        A = np.pad(A, ((0, 1), (0, 1)))
        V = np.eye(n)
    schedule = _round_robin(n)
    offdiag_mask = ~np.eye(n, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[offdiag_mask] ** 2))
        if off < 1e-12 * norm:
            break
        for p, q in schedule:
            apq = A[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            app, aqq = A[p, p], A[q, q]
            theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(
                active,
                np.sign(theta + (theta == 0)) / (np.abs(theta) + np.sqrt(1.0 + theta**2)),
                0.0,
            )
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = t * c
            # A <- J^T A J with J[p,p]=J[q,q]=c, J[p,q]=s, J[q,p]=-s
            cp, cq = A[:, p], A[:, q]
            A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
            rp, rq = A[p, :], A[q, :]
            A[p, :], A[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            A[p, q] = 0.0
            A[q, p] = 0.0
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        off = np.sqrt(np.sum(A[offdiag_mask] ** 2))
        if off >= 1e-12 * norm:
            raise NumericFailure(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")

    eigvals = np.diag(A)[:d].copy()
    V = V[:d, :d]
    order = np.argsort(-eigvals, kind="stable")
    return V[:, order], eigvals[order]


def inv_sqrtm(Sigma, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetric inverse square root ``V D^{-1/2} V^T`` with eigenvalues floored."""
    V, lam = sym_eig(Sigma)
    return (V / np.sqrt(np.maximum(lam, floor))) @ V.T


def sqrtm_psd(Sigma) -> np.ndarray:
    V, lam = sym_eig(Sigma)
    return (V * np.sqrt(np.maximum(lam, 0.0))) @ V.T


def whiten(Sigma, g) -> np.ndarray:
    """Apply ``Sigma^{-1/2}`` to ``g`` (a vector, or an ``(n, d)`` stack of row vectors)."""
    g = np.asarray(g, dtype=np.float64)
    W = inv_sqrtm(Sigma)
    if g.shape[-1] != W.shape[0]:
        raise ContractViolation(f"dimension mismatch: Sigma is {W.shape}, g is {g.shape}")
    return g @ W  # W is symmetric


def _label_words(label: str) -> tuple[int, ...]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    The stream is identified by ``(seed, label)``; :meth:`generator` builds a
    fresh numpy Generator from that pair, so two calls yield identical draws.
    """

    seed: int
    label: str = ""

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_label_words(self.label))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, label: str) -> "RngStream":
        return rng_derive(self, label)


def rng_derive(root: RngStream, label: str) -> RngStream:
    path = f"{root.label}/{label}" if root.label else label
    return RngStream(root.seed, path)
