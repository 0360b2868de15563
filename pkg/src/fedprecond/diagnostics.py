"""Statistical checks of the preconditioning machinery.

* covariance reduction: whitening the client-averaged Gaussian gradient by
  the inverse square root of the summed client covariances leaves a scaled
  identity covariance ``I / m^2``;
* noise isotropy: gradient noise whitened by the square root of the
  gradient second moment has covariance ``I - u u^T`` with ``u = P^{-1} grad F``;
* model divergence of client weights from the global model, with the
  plug-in divergence bounds for client-side and server-side preconditioning.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .dataplane import QuadClientSet
from .engine import QuadProblem, Simulation
from .errors import ConfigError, ContractViolation
from .numkit import RngStream, inv_sqrtm, sqrtm_psd, sym_eig

MC_CHUNK = 10_000


@dataclass
class CovReport:
    empirical_cov: np.ndarray
    target: np.ndarray
    max_abs_dev: float
    num_samples: int
    extra: dict = field(default_factory=dict)

    @property
    def trace_per_dim(self) -> float:
        return float(np.trace(self.empirical_cov) / self.empirical_cov.shape[0])

    def to_dict(self) -> dict:
        return {
            "type": "cov_report",
            "empirical_cov": self.empirical_cov.tolist(),
            "target": self.target.tolist(),
            "max_abs_dev": self.max_abs_dev,
            "num_samples": self.num_samples,
            "trace_per_dim": self.trace_per_dim,
            **self.extra,
        }


class _Moments:
    """Streaming first and second moments, merged in a fixed chunk order."""

    def __init__(self, d: int):
        self.n = 0
        self.s = np.zeros(d)
        self.ss = np.zeros((d, d))

    def add(self, X: np.ndarray) -> None:
        self.n += len(X)
        self.s += X.sum(axis=0)
        self.ss += X.T @ X

    def covariance(self) -> np.ndarray:
        mean = self.s / self.n
        C = self.ss / self.n - np.outer(mean, mean)
        return 0.5 * (C + C.T)


def _chunks(num_samples: int):
    start, c = 0, 0
    while start < num_samples:
        size = min(MC_CHUNK, num_samples - start)
        yield c, size
        start += size
        c += 1


def _check_psd(C: np.ndarray, name: str) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    lam = sym_eig(C)[1]
    if lam[-1] < -1e-10 * max(1.0, abs(lam[0])):
        raise ContractViolation(f"{name} is not positive semi-definite (min eigenvalue {lam[-1]:.3e})")
    return C


def covariance_reduction_mc(m: int, covs, true_grad, num_samples: int, rng: RngStream) -> CovReport:
    """Monte Carlo check that whitening the averaged client gradient gives ``I / m^2``.

    Per sample, each of the ``m`` clients draws ``g_i ~ N(true_grad, C_i)``;
    the average ``G`` is whitened with ``Sigma^{-1/2}``, ``Sigma = sum_i C_i``.
    """
    true_grad = np.asarray(true_grad, dtype=np.float64)
    d = true_grad.size
    if d > 64:
        raise ContractViolation("covariance_reduction_mc supports d <= 64")
    if len(covs) != m or m < 1:
        raise ContractViolation("need exactly one covariance per client")
    covs = [_check_psd(C, f"covariance {i}") for i, C in enumerate(covs)]
    roots = [sqrtm_psd(C) for C in covs]
    W = inv_sqrtm(sum(covs))

    mom = _Moments(d)
    for c, size in _chunks(num_samples):
        gen = rng.derive(f"chunk/{c}").generator()
        G = np.zeros((size, d))
        for R in roots:
            G += true_grad + gen.standard_normal((size, d)) @ R
        G /= m
        mom.add(G @ W)
    emp = mom.covariance()
    target = np.eye(d) / m**2
    return CovReport(emp, target, float(np.max(np.abs(emp - target))), num_samples, {"m": m, "d": d})


def sample_quadratic_gradients(quad: QuadClientSet, w, noise_std: float, size: int,
                               gen: np.random.Generator) -> np.ndarray:
    """Stochastic gradients at ``w``: a uniformly drawn client's gradient plus Gaussian noise."""
    clients = gen.integers(0, quad.m, size=size)
    G = quad.client_grads(w)[clients]
    return G + noise_std * gen.standard_normal((size, quad.dim))


def pooled_second_moment_sqrt(quad: QuadClientSet, w, noise_std: float, num_samples: int,
                              rng: RngStream) -> np.ndarray:
    """``E[g g^T]^{1/2}`` estimated from a pilot sample of stochastic gradients."""
    d = quad.dim
    ss = np.zeros((d, d))
    for c, size in _chunks(num_samples):
        X = sample_quadratic_gradients(quad, w, noise_std, size, rng.derive(f"chunk/{c}").generator())
        ss += X.T @ X
    M = ss / num_samples
    return sqrtm_psd(0.5 * (M + M.T))


def noise_isotropy(quad: QuadClientSet, w, P=None, num_samples: int = 100_000, rng: RngStream | None = None,
                   noise_std: float = 1.0) -> CovReport:
    """Empirical covariance of ``P^{-1} (g - grad F(w))`` against ``I - u u^T``."""
    w = np.asarray(w, dtype=np.float64)
    d = quad.dim
    if d > 64:
        raise ContractViolation("noise_isotropy supports d <= 64")
    rng = rng or RngStream(0)
    if P is None:
        P = pooled_second_moment_sqrt(quad, w, noise_std, num_samples, rng.derive("pilot"))
    # P is symmetric, so its inverse is V D^{-1} V^T; floor via the whitening policy
    P_inv = inv_sqrtm(np.asarray(P, dtype=np.float64) @ np.asarray(P, dtype=np.float64))
    true = quad.grad(w)
    u = P_inv @ true

    mom = _Moments(d)
    for c, size in _chunks(num_samples):
        X = sample_quadratic_gradients(quad, w, noise_std, size, rng.derive(f"chunk/{c}").generator())
        mom.add((X - true) @ P_inv)
    emp = mom.covariance()
    target = np.eye(d) - np.outer(u, u)
    return CovReport(emp, target, float(np.max(np.abs(emp - target))), num_samples,
                     {"grad_norm": float(np.linalg.norm(true))})


def model_divergence(client_weights, w_t) -> float:
    """Mean squared distance of client weights from the global weights."""
    if len(client_weights) == 0:
        raise ContractViolation("model_divergence needs at least one client")
    w_t = np.asarray(w_t, dtype=np.float64)
    D = np.asarray(client_weights, dtype=np.float64) - w_t
    return float(np.mean(np.sum(D * D, axis=1)))


def lemma1_bound(case: str, sigma_local_sq: float, sigma_global_sq: float, grad_norm_sq: float,
                 K: int, L: float, tau: float) -> float:
    """Divergence bound for client-side (``"I"``) or server-side (``"II"``) preconditioning."""
    if not L > 0 or not tau > 0:
        raise ContractViolation("L and tau must be positive")
    if K < 1 or min(sigma_local_sq, sigma_global_sq, grad_norm_sq) < 0:
        raise ContractViolation("K must be >= 1 and variance terms non-negative")
    noise = sigma_local_sq + 5 * K * sigma_global_sq
    if case == "I":
        return 5.0 / (K * L**2 * tau**2) * noise + 25.0 / (L**2 * tau**2) * grad_norm_sq
    if case == "II":
        return 5.0 / (L**2 * K) * noise + 25.0 / L**2 * grad_norm_sq
    raise ContractViolation(f"case must be 'I' or 'II', got {case!r}")


def estimate_sigma_local_sq(problem, w, num_probe: int, gen: np.random.Generator) -> float:
    """Mean over clients of the summed per-coordinate variance of minibatch
    gradients around the client's full-batch gradient."""
    per_client = []
    for i in range(problem.num_clients):
        full = problem.client_full_grad(i, w)
        dev = np.array([problem.client_grad(i, w, gen) - full for _ in range(num_probe)])
        per_client.append(np.sum(np.mean(dev * dev, axis=0)))
    return float(np.mean(per_client))


def estimate_sigma_global_sq(problem, w) -> float:
    """Summed per-coordinate variance of client full-batch gradients around the global gradient."""
    G = np.array([problem.client_full_grad(i, w) for i in range(problem.num_clients)])
    dev = G - G.mean(axis=0)
    return float(np.sum(np.mean(dev * dev, axis=0)))


@dataclass
class DivergenceTrace:
    L: float
    tau: float
    K: int
    rows: list[dict] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        return [{"type": "divergence", "L": self.L, "tau": self.tau, "K": self.K, **r} for r in self.rows]


def divergence_trace(cfg: ExperimentConfig, num_probe: int = 32) -> DivergenceTrace:
    """Run ``cfg`` on the quadratic testbed and report, per round, the observed
    divergence next to both bound values evaluated with plug-in constants.

    The observed value is the largest, over local steps, of the client-mean
    squared distance from the round's starting model. The bounds are reported,
    not asserted: the variance terms are estimates.
    """
    if cfg.data.source != "quadratic":
        raise ConfigError("divergence_trace needs data.source = 'quadratic' (exact smoothness constant)")
    sim = Simulation(cfg)
    problem: QuadProblem = sim.problem
    L = problem.quad.smoothness
    tau = cfg.local_opt.tau
    K = cfg.local_steps
    trace = DivergenceTrace(L, tau, K)
    probe_root = RngStream(cfg.seed).derive("diagnostics/probe")
    for info in sim.rounds():
        w_t = info.w_before
        gen = probe_root.derive(f"round/{info.t}").generator()
        s_l = estimate_sigma_local_sq(problem, w_t, num_probe, gen)
        s_g = estimate_sigma_global_sq(problem, w_t)
        gsq = float(np.sum(problem.quad.grad(w_t) ** 2))
        trace.rows.append({
            "round": info.t + 1,
            "divergence": info.divergence,
            "final_divergence": model_divergence([r.w for r in info.clients.values()], w_t),
            "sigma_local_sq": s_l,
            "sigma_global_sq": s_g,
            "grad_norm_sq": gsq,
            "bound_case_I": lemma1_bound("I", s_l, s_g, gsq, K, L, tau),
            "bound_case_II": lemma1_bound("II", s_l, s_g, gsq, K, L, tau),
        })
    return trace


__all__ = [
    "CovReport", "DivergenceTrace", "covariance_reduction_mc", "noise_isotropy", "model_divergence",
    "lemma1_bound", "divergence_trace", "estimate_sigma_local_sq", "estimate_sigma_global_sq",
    "pooled_second_moment_sqrt", "sample_quadratic_gradients",
]
