import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fedprecond.errors import ContractViolation
from fedprecond.optim import (
    LocalOptConfig,
    ServerOptConfig,
    adaalter_local_step,
    basic_prefed_step,
    mean_vectors,
    prefed_local_step,
    server_average,
    server_fedadagrad,
    server_fedadam,
    server_prefedopt,
    sgd_momentum_step,
    sgd_step,
)
from fedprecond.precond import PrecondState


def arr(*xs):
    return np.array(xs, dtype=np.float64)


# sgd ------------------------------------------------------------------------------

def test_sgd_examples():
    np.testing.assert_array_equal(sgd_step(arr(1.0, 2.0), arr(0.0, 0.0), 0.3), [1.0, 2.0])
    np.testing.assert_array_equal(sgd_step(arr(1.0), arr(2.0), 0.5), [0.0])


def test_sgd_geometric_decay_on_half_square():
    w = arr(1.0)
    for k in range(1, 30):
        w = sgd_step(w, w, 0.1)  # gradient of w^2/2 is w
        assert w[0] == pytest.approx(0.9**k, rel=1e-13)


def test_sgd_dimension_mismatch():
    with pytest.raises(ContractViolation):
        sgd_step(arr(1.0, 2.0), arr(1.0), 0.1)


def test_momentum_examples():
    w, v = sgd_momentum_step(arr(1.0), arr(0.0), arr(2.0), 0.1, momentum=0.0)
    np.testing.assert_array_equal(w, sgd_step(arr(1.0), arr(2.0), 0.1))
    w, v = sgd_momentum_step(arr(1.0), arr(0.0), arr(2.0), 0.1, momentum=0.9)
    np.testing.assert_array_equal(w, sgd_step(arr(1.0), arr(2.0), 0.1))


def test_momentum_velocity_limit():
    v = arr(0.0)
    g = arr(0.7)
    for _ in range(200):
        _, v = sgd_momentum_step(arr(0.0), v, g, 0.1, 0.9)
    assert v[0] == pytest.approx(10 * 0.7, rel=1e-8)


# adaalter -------------------------------------------------------------------------

def test_adaalter_examples():
    with pytest.raises(ContractViolation):
        adaalter_local_step(arr(0.0), arr(-1.0), arr(1.0), 1.0, 1.0)
    w, v = adaalter_local_step(arr(5.0), arr(0.0), arr(3.0), 1.0, 0.0)
    assert w[0] == pytest.approx(4.0, abs=1e-15) and v[0] == 9.0
    w, v = adaalter_local_step(arr(5.0), arr(2.0), arr(0.0), 1.0, 1e-3)
    assert w[0] == 5.0 and v[0] == 2.0


def test_adaalter_two_unit_steps():
    w, v = arr(0.0), arr(0.0)
    for _ in range(2):
        w, v = adaalter_local_step(w, v, arr(1.0), 1.0, 0.0)
    assert -w[0] == pytest.approx(1 + 1 / math.sqrt(2), abs=1e-15)


def test_adaalter_matches_oracle():
    gs = [1.0, -0.5, 2.0]
    w, v = arr(0.0), arr(0.0)
    for g, (ow, ov) in zip(gs, oracles.adaalter_trace(gs, tau=1e-3, eta=1e-3)):
        w, v = adaalter_local_step(w, v, arr(g), 1e-3, 1e-3)
        assert abs(w[0] - ow) <= 1e-15 and abs(v[0] - ov) <= 1e-15


# prefed --------------------------------------------------------------------------

def test_prefed_degenerate_decays_is_scaled_sgd():
    ps = PrecondState.zeros(2, beta1=0.0, beta2=0.0, tau=0.5)
    w, ps = prefed_local_step(arr(1.0, -1.0), ps, arr(0.2, 0.4), 0.1)
    np.testing.assert_array_equal(w, sgd_step(arr(1.0, -1.0), arr(0.2, 0.4), 0.1 / 0.5))
    np.testing.assert_array_equal(ps.P, [0.0, 0.0])


def test_prefed_zero_gradient_does_not_move():
    ps = PrecondState(np.zeros(1), arr(4.0), beta2=0.9)
    w, ps = prefed_local_step(arr(3.0), ps, arr(0.0), 0.1)
    assert w[0] == 3.0
    assert ps.P[0] == pytest.approx(3.6)


def test_prefed_matches_scalar_oracle():
    gs = [1.0, 1.0, 1.0]
    w, ps = arr(0.0), PrecondState.zeros(1, beta1=0.9, beta2=0.9, tau=1e-3)
    for g, (ow, om, oP) in zip(gs, oracles.prefed_trace(gs, 0.9, 0.9, 1e-3, 1e-3)):
        w, ps = prefed_local_step(w, ps, arr(g), 1e-3)
        assert abs(w[0] - ow) <= 1e-15
        assert abs(ps.m[0] - om) <= 1e-15
        assert abs(ps.P[0] - oP) <= 1e-15


def test_prefed_step_leaves_input_state_alone():
    ps = PrecondState.zeros(1)
    prefed_local_step(arr(0.0), ps, arr(1.0), 0.1)
    assert ps.m[0] == 0.0 and ps.P[0] == 0.0


def test_prefed_requires_ema():
    with pytest.raises(ContractViolation):
        prefed_local_step(arr(0.0), PrecondState.zeros(1, mode="accumulate"), arr(1.0), 0.1)


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=10), st.floats(1e-3, 1.0))
def test_prefed_zero_decay_equivalence(gs, tau):
    w_pre, w_sgd = arr(0.5), arr(0.5)
    ps = PrecondState.zeros(1, beta1=0.0, beta2=0.0, tau=tau)
    for g in gs:
        w_pre, ps = prefed_local_step(w_pre, ps, arr(g), 0.01)
        w_sgd = sgd_step(w_sgd, arr(g), 0.01 / tau)
    np.testing.assert_allclose(w_pre, w_sgd, rtol=1e-12, atol=1e-14)


# basic prefed --------------------------------------------------------------------

def _basic_states(n):
    return [PrecondState.zeros(1, mode="accumulate") for _ in range(n)]


def test_basic_identical_gradients():
    ws, states = basic_prefed_step([arr(1.0)] * 3, [arr(0.5)] * 3, _basic_states(3), 0.1, 1.0)
    for w, s in zip(ws, states):
        assert s.P[0] == 0.0
        assert w[0] == ws[0][0]


def test_basic_symmetric_pair():
    ws, states = basic_prefed_step([arr(0.0), arr(0.0)], [arr(1.0), arr(-1.0)], _basic_states(2), 0.1, 1.0)
    assert [s.P[0] for s in states] == [1.0, 1.0]


def test_basic_matches_brute_force():
    a, b, eta, tau = [1.0, 2.0, 0.5], [0.3, -1.0, 2.0], 0.1, 0.01
    ws, states = [arr(0.0)] * 3, _basic_states(3)
    for _ in range(2):
        gs = [arr(a[i] * ws[i][0] - b[i]) for i in range(3)]
        ws, states = basic_prefed_step(ws, gs, states, eta, tau)
    ows, oPs = oracles.basic_prefed_brute_force(a, b, 0.0, 2, eta, tau)
    for i in range(3):
        assert abs(ws[i][0] - ows[i]) <= 1e-15
        assert abs(states[i].P[0] - oPs[i]) <= 1e-15


def test_basic_contract():
    with pytest.raises(ContractViolation):
        basic_prefed_step([], [], [], 0.1, 1.0)
    with pytest.raises(ContractViolation):
        basic_prefed_step([arr(0.0)], [arr(1.0, 2.0)], _basic_states(1), 0.1, 1.0)


# server ---------------------------------------------------------------------------

def test_average_examples():
    np.testing.assert_array_equal(server_average([arr(1.0, 3.0), arr(3.0, 5.0)]), [2.0, 4.0])
    np.testing.assert_array_equal(server_average([arr(0.1, 0.2)]), [0.1, 0.2])
    with pytest.raises(ContractViolation):
        server_average([])


@settings(max_examples=40)
@given(st.lists(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3), min_size=1, max_size=8),
       st.randoms(use_true_random=False))
def test_mapping_mean_is_permutation_invariant(rows, rnd):
    keyed = {i: np.array(r) for i, r in enumerate(rows)}
    items = list(keyed.items())
    rnd.shuffle(items)
    np.testing.assert_array_equal(mean_vectors(dict(items)), mean_vectors(keyed))


def test_server_rules_permutation_invariant_with_ids():
    rng = np.random.default_rng(0)
    deltas = {i: rng.normal(size=4) for i in (7, 2, 5, 0)}
    shuffled = {i: deltas[i] for i in (5, 0, 7, 2)}
    cfg = ServerOptConfig(kind="fedadam")
    a = server_fedadam(np.zeros(4), np.zeros(4), np.zeros(4), deltas, cfg)
    b = server_fedadam(np.zeros(4), np.zeros(4), np.zeros(4), shuffled, cfg)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    pcfg = ServerOptConfig(kind="prefedopt", delta_normalization="divide_by_K")
    p = PrecondState.zeros(4)
    np.testing.assert_array_equal(server_prefedopt(np.zeros(4), p, deltas, 3, pcfg)[0],
                                  server_prefedopt(np.zeros(4), p, shuffled, 3, pcfg)[0])


def test_average_after_local_sgd_is_fedavg():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=3)
    finals = []
    for _ in range(4):
        w = w0.copy()
        for _ in range(3):
            w = sgd_step(w, rng.normal(size=3), 0.1)
        finals.append(w)
    expected = (finals[0] + finals[1] + finals[2] + finals[3]) / 4
    np.testing.assert_array_equal(server_average(finals), expected)


def test_fedadagrad_examples():
    cfg = ServerOptConfig(kind="fedadagrad", eta_g=1.0, tau=1.0)
    w, v = server_fedadagrad(arr(1.0), arr(2.0), [arr(0.0)], cfg)
    assert w[0] == 1.0 and v[0] == 2.0
    w, v = server_fedadagrad(arr(0.0), arr(0.0), [arr(2.0)], cfg)
    assert w[0] == pytest.approx(2 / 3, abs=1e-15)


def test_fedadagrad_matches_oracle_tau_zero():
    cfg = ServerOptConfig(kind="fedadagrad", eta_g=0.5, tau=0.0)
    rounds = [[1.0]] * 4
    w, v = arr(0.0), arr(0.0)
    for deltas, (ow, ov) in zip(rounds, oracles.fedadagrad_trace(rounds, 0.5, 0.0)):
        w, v = server_fedadagrad(w, v, [arr(x) for x in deltas], cfg)
        assert abs(w[0] - ow) <= 1e-15 and abs(v[0] - ov) <= 1e-15
    assert w[0] == pytest.approx(0.5 * sum(1 / math.sqrt(t) for t in range(1, 5)), rel=1e-15)


def test_fedadam_degenerate_decays_is_sign_like():
    cfg = ServerOptConfig(kind="fedadam", eta_g=0.1, beta1=0.0, beta2=0.0, tau=1e-3)
    w, m, v = server_fedadam(arr(0.0, 0.0), arr(0.0, 0.0), arr(0.0, 0.0), [arr(2.0, -0.5)], cfg)
    np.testing.assert_allclose(w, [0.1 * 2 / (2 + 1e-3), -0.1 * 0.5 / (0.5 + 1e-3)], rtol=1e-15)
    w, m, v = server_fedadam(arr(1.0), arr(0.0), arr(0.0), [arr(0.0)], cfg)
    assert w[0] == 1.0


def test_fedadam_matches_oracle():
    cfg = ServerOptConfig(kind="fedadam", eta_g=0.05, beta1=0.9, beta2=0.99, tau=1e-3)
    rounds = [[0.2, -0.1], [0.3, 0.1], [-0.4, 0.05]]
    w, m, v = arr(0.0), arr(0.0), arr(0.0)
    for deltas, (ow, om, ov) in zip(rounds, oracles.fedadam_trace(rounds, 0.05, 0.9, 0.99, 1e-3)):
        w, m, v = server_fedadam(w, m, v, [arr(x) for x in deltas], cfg)
        assert max(abs(w[0] - ow), abs(m[0] - om), abs(v[0] - ov)) <= 1e-15


def test_prefedopt_zero_deltas_decay_P():
    cfg = ServerOptConfig(kind="prefedopt", beta1=0.9, beta2=0.9)
    p = PrecondState(np.zeros(1), arr(1.0))
    w, p = server_prefedopt(arr(2.0), p, [arr(0.0), arr(0.0)], 1, cfg)
    assert w[0] == 2.0 and p.P[0] == pytest.approx(0.9)


def test_prefedopt_degenerate_single_client():
    cfg = ServerOptConfig(kind="prefedopt", eta_g=0.1, beta1=0.0, beta2=0.0, tau=0.5)
    w, p = server_prefedopt(arr(0.0), PrecondState.zeros(1), [arr(0.3)], 1, cfg)
    assert p.P[0] == 0.0
    assert w[0] == pytest.approx(0.1 * 0.3 / 0.5, rel=1e-15)


@pytest.mark.parametrize("K", [1, 5])
def test_prefedopt_matches_oracle(K):
    cfg = ServerOptConfig(kind="prefedopt", eta_g=0.002, beta1=0.9, beta2=0.99, tau=1e-3,
                          delta_normalization="divide_by_K")
    rounds = [[0.5, 0.1, -0.2], [0.3, 0.4, 0.0], [-0.1, 0.2, 0.6]]
    w, p = arr(0.0), PrecondState.zeros(1)
    for deltas, (ow, om, oP) in zip(rounds, oracles.prefedopt_trace(rounds, K, 0.002, 0.9, 0.99, 1e-3)):
        w, p = server_prefedopt(w, p, [arr(x) for x in deltas], K, cfg)
        assert max(abs(w[0] - ow), abs(p.m[0] - om), abs(p.P[0] - oP)) <= 1e-15


def test_sum_only_ignores_K():
    cfg = ServerOptConfig(kind="fedadagrad", eta_g=1.0, tau=1.0)
    assert server_fedadagrad(arr(0.0), arr(0.0), [arr(2.0)], cfg, K=7)[0][0] == pytest.approx(2 / 3)


def test_server_contract():
    cfg = ServerOptConfig(kind="prefedopt")
    with pytest.raises(ContractViolation):
        server_prefedopt(arr(0.0), PrecondState.zeros(1), [arr(1.0)], 0, cfg)
    with pytest.raises(ContractViolation):
        server_fedadagrad(arr(0.0), arr(-1.0), [arr(1.0)], ServerOptConfig(kind="fedadagrad"))
    with pytest.raises(ContractViolation):
        server_fedadam(arr(0.0), arr(0.0), arr(0.0), [], ServerOptConfig(kind="fedadam"))


@pytest.mark.parametrize("kw", [{"kind": "lamb"}, {"eta_l": 0.0}, {"momentum": 1.0}, {"first_moment_sync": "both"}])
def test_local_config_contract(kw):
    with pytest.raises(ContractViolation):
        LocalOptConfig(**kw)


def test_server_config_contract():
    with pytest.raises(ContractViolation):
        ServerOptConfig(kind="yogi")
    with pytest.raises(ContractViolation):
        ServerOptConfig(delta_normalization="per_client")
