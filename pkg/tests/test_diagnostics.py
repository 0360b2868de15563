import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedprecond.config import config_from_dict
from fedprecond.dataplane import gen_quadratics
from fedprecond.diagnostics import (
    covariance_reduction_mc,
    divergence_trace,
    estimate_sigma_global_sq,
    lemma1_bound,
    model_divergence,
    noise_isotropy,
)
from fedprecond.engine import QuadProblem
from fedprecond.errors import ConfigError, ContractViolation
from fedprecond.numkit import RngStream


def test_covreduce_identity_m4():
    rep = covariance_reduction_mc(4, [np.eye(2)] * 4, np.zeros(2), 100_000, RngStream(0, "cov"))
    np.testing.assert_array_equal(rep.target, np.eye(2) / 16)
    assert rep.max_abs_dev <= 0.01


def test_covreduce_single_client_arbitrary_covariance():
    C = np.array([[2.0, 0.6], [0.6, 0.5]])
    rep = covariance_reduction_mc(1, [C], np.array([1.0, -3.0]), 100_000, RngStream(1))
    assert np.max(np.abs(rep.empirical_cov - np.eye(2))) <= 0.03


def test_covreduce_anisotropic():
    C = np.diag([100.0, 1.0])
    rep = covariance_reduction_mc(2, [C, C], np.zeros(2), 100_000, RngStream(2))
    assert np.max(np.abs(rep.empirical_cov - np.eye(2) / 4)) <= 0.01


def test_covreduce_deviation_shrinks_with_samples():
    # doubling the sample count four times (16x) should roughly quarter the error
    devs = []
    for n in (10_000, 160_000):
        runs = [covariance_reduction_mc(1, [np.eye(3)], np.zeros(3), n, RngStream(s)).max_abs_dev for s in range(8)]
        devs.append(np.mean(runs))
    assert devs[0] >= 2 * devs[1]


def test_covreduce_rejects_non_psd():
    with pytest.raises(ContractViolation):
        covariance_reduction_mc(1, [np.diag([1.0, -1.0])], np.zeros(2), 10_000, RngStream(0))
    with pytest.raises(ContractViolation):
        covariance_reduction_mc(2, [np.eye(2)], np.zeros(2), 10_000, RngStream(0))


def test_covreduce_reproducible():
    a = covariance_reduction_mc(2, [np.eye(2)] * 2, np.zeros(2), 20_000, RngStream(3))
    b = covariance_reduction_mc(2, [np.eye(2)] * 2, np.zeros(2), 20_000, RngStream(3))
    np.testing.assert_array_equal(a.empirical_cov, b.empirical_cov)


def test_isotropy_at_optimum_targets_identity():
    quad = gen_quadratics(8, 4, 0.1, 1.0, 1.0, RngStream(0, "q"))
    rep = noise_isotropy(quad, quad.w_star, num_samples=100_000, rng=RngStream(0, "iso"))
    np.testing.assert_allclose(rep.target, np.eye(4), atol=1e-18)
    assert rep.max_abs_dev <= 0.05


def test_isotropy_generic_point():
    quad = gen_quadratics(8, 4, 0.1, 1.0, 1.0, RngStream(0, "q"))
    w = quad.w_star + np.array([3.0, -2.0, 2.0, 1.0])
    rep = noise_isotropy(quad, w, num_samples=100_000, rng=RngStream(1, "iso"))
    assert np.linalg.norm(rep.target - np.eye(4)) > 0.3  # the gradient term matters here
    assert rep.max_abs_dev <= 0.05


def test_isotropy_identity_preconditioner_target():
    quad = gen_quadratics(3, 2, 0.5, 1.0, 0.0, RngStream(4))
    w = np.array([0.3, -0.2])
    rep = noise_isotropy(quad, w, P=np.eye(2), num_samples=10_000, rng=RngStream(4))
    g = quad.grad(w)
    np.testing.assert_allclose(rep.target, np.eye(2) - np.outer(g, g), atol=1e-15)
    # homogeneous clients: the noise is the only randomness, so Cov = noise^2 I
    np.testing.assert_allclose(rep.empirical_cov, np.eye(2), atol=0.05)


def test_model_divergence_examples():
    assert model_divergence([np.zeros(2), np.zeros(2)], np.zeros(2)) == 0.0
    assert model_divergence([np.array([1.0]), np.array([-1.0])], np.zeros(1)) == 1.0
    with pytest.raises(ContractViolation):
        model_divergence([], np.zeros(1))


def test_model_divergence_double_loop():
    rng = np.random.default_rng(0)
    ws, w_t = rng.normal(size=(5, 3)), rng.normal(size=3)
    naive = 0.0
    for w in ws:
        for j in range(3):
            naive += (w[j] - w_t[j]) ** 2
    assert model_divergence(list(ws), w_t) == pytest.approx(naive / 5, rel=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 1000), st.floats(-100, 100))
def test_model_divergence_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    ws, w_t = rng.normal(size=(4, 3)), rng.normal(size=3)
    moved = model_divergence(list(ws + shift), w_t + shift)
    assert moved == pytest.approx(model_divergence(list(ws), w_t), rel=1e-9, abs=1e-9)


def test_drift_bound_values():
    assert lemma1_bound("I", 0, 0, 0, 3, 1.0, 0.1) == 0.0
    assert lemma1_bound("I", 1.3, 0.2, 0.7, 1, 2.0, 1.0) == pytest.approx(lemma1_bound("II", 1.3, 0.2, 0.7, 1, 2.0, 1.0))
    assert lemma1_bound("I", 1.0, 1.0, 0.0, 4, 1.0, 1.0) == pytest.approx(26.25, rel=1e-15)
    # case I grows as 1/tau^2
    assert lemma1_bound("I", 1.0, 1.0, 1.0, 2, 1.0, 0.1) == pytest.approx(100 * lemma1_bound("I", 1.0, 1.0, 1.0, 2, 1.0, 1.0))


@pytest.mark.parametrize("args", [("I", 1, 1, 1, 1, 0.0, 1.0), ("I", 1, 1, 1, 1, 1.0, 0.0), ("III", 1, 1, 1, 1, 1, 1),
                                  ("II", -1, 1, 1, 1, 1, 1), ("II", 1, 1, 1, 0, 1, 1)])
def test_drift_bound_contract(args):
    with pytest.raises(ContractViolation):
        lemma1_bound(*args)


def test_sigma_global_zero_when_homogeneous():
    quad = gen_quadratics(4, 3, 0.1, 1.0, 0.0, RngStream(0))
    assert estimate_sigma_global_sq(QuadProblem(quad), quad.w_star) == 0.0


def _trace_cfg(algorithm="prefed", **over):
    raw = {
        "algorithm": algorithm,
        "data": {"source": "quadratic", "d": 4, "noise_std": 0.1},
        "num_clients": 4, "rounds": 6, "local_steps": 3, "batch_size": 1,
    }
    raw.update(over)
    return config_from_dict(raw)


@pytest.mark.parametrize("algorithm", ["prefed", "prefedopt", "fedavg"])
def test_divergence_trace_is_finite(algorithm):
    trace = divergence_trace(_trace_cfg(algorithm), num_probe=8)
    assert len(trace.rows) == 6
    for rec in trace.to_records():
        for key in ("divergence", "bound_case_I", "bound_case_II", "sigma_local_sq", "sigma_global_sq"):
            assert math.isfinite(rec[key]) and rec[key] >= 0
    assert trace.L == pytest.approx(float(np.linalg.eigvalsh(
        gen_quadratics(4, 4, 0.1, 1.0, 1.0, RngStream(0).derive("data/quadratic")).A.mean(axis=0))[-1]))


def test_divergence_trace_local_variance_tracks_noise():
    trace = divergence_trace(_trace_cfg(data={"source": "quadratic", "d": 4, "noise_std": 0.5}), num_probe=200)
    # summed per-coordinate variance of N(0, 0.25 I) in d=4 is 1
    assert np.mean([r["sigma_local_sq"] for r in trace.rows]) == pytest.approx(1.0, rel=0.1)


def test_divergence_trace_needs_quadratic():
    cfg = config_from_dict({"algorithm": "fedavg", "model": {"kind": "logreg", "input_dim": 2, "num_classes": 2},
                            "data": {"source": "blobs", "n": 100}, "num_clients": 2, "batch_size": 4})
    with pytest.raises(ConfigError):
        divergence_trace(cfg)
