"""Discretization and selective-scan behavior against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupmamba.rng import Rng
from groupmamba.ssm import DomainError, SsmParams, ode_oracle, selective_scan, zoh_discretize
from groupmamba.tensor import Tensor, grad_check, parameter
from groupmamba.verify import _random_ssm, naive_scan_states, naive_selective_scan


def test_zoh_zero_dynamics_limit():
    a_bar, b_bar = zoh_discretize(0.0, 1.0, 0.1)
    assert float(a_bar) == 1.0
    assert abs(float(b_bar) - 0.1) < 1e-17


def test_zoh_scalar_case_against_extended_precision():
    import mpmath

    mpmath.mp.dps = 40
    a_bar, b_bar = zoh_discretize(-1.0, 1.0, 0.1)
    ref_a = float(mpmath.exp(mpmath.mpf("-0.1")))
    ref_b = float(
        (mpmath.exp(mpmath.mpf("-0.1")) - 1) / mpmath.mpf("-0.1") * mpmath.mpf("0.1")
    )
    assert abs(float(a_bar) - ref_a) < 1e-15
    assert abs(float(b_bar) - ref_b) < 1e-15
    # frozen values from the same computation
    assert abs(float(a_bar) - 0.9048374180359595) < 1e-15
    assert abs(float(b_bar) - 0.09516258196404048) < 1e-15


def test_zoh_step_to_zero_limit():
    a_bar, b_bar = zoh_discretize(-2.0, 3.0, 1e-12)
    assert abs(float(a_bar) - 1.0) < 1e-11
    assert abs(float(b_bar) - 3e-12) < 1e-22


def test_zoh_rejects_nonpositive_step():
    with pytest.raises(DomainError):
        zoh_discretize(-1.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        zoh_discretize(-1.0, 1.0, -0.5)


def test_zoh_elementwise_arrays():
    a = np.array([-1.0, -2.0])
    b = np.array([1.0, 0.5])
    delta = np.array([0.1, 0.2])
    a_bar, b_bar = zoh_discretize(a, b, delta)
    for i in range(2):
        ra, rb = zoh_discretize(a[i], b[i], delta[i])
        assert a_bar[i] == float(ra) and b_bar[i] == float(rb)


# -- selective scan -----------------------------------------------------------------


def test_scan_single_token_unrolls_by_hand():
    rng = Rng(2)
    p = _random_ssm(rng.split("p"), 2, 3)
    x = rng.split("x").normal((1, 1, 2))
    y = selective_scan(Tensor(x), p).data

    a = -np.exp(p.a_log.data)
    bc = x[0, 0] @ p.bc_weight.data
    bt, ct = bc[:3], bc[3:]
    delta = np.logaddexp(0.0, x[0, 0] @ p.dt_down.data @ p.dt_up.data + p.dt_bias.data)
    for d in range(2):
        acc = 0.0
        for n in range(3):
            a_bar, b_bar = zoh_discretize(a[d, n], bt[n], delta[d])
            acc += ct[n] * float(b_bar) * x[0, 0, d]
        acc += p.skip.data[d] * x[0, 0, d]
        assert abs(y[0, 0, d] - acc) < 1e-12


def test_scan_memoryless_when_state_decays_instantly():
    rng = Rng(3)
    p = _random_ssm(rng.split("p"), 2, 3)
    p.a_log.data = np.full((2, 3), 40.0)  # A = -e^40: a_bar underflows to 0
    x = rng.split("x").normal((1, 6, 2))
    y = selective_scan(Tensor(x), p).data
    # with no carried state each token's output only depends on itself
    for t in range(6):
        solo = selective_scan(Tensor(x[:, t : t + 1]), p).data
        assert np.abs(y[:, t] - solo[:, 0]).max() < 1e-12


def test_scan_empty_sequence():
    p = SsmParams.create(3, 4, Rng(0), dtype=np.float64)
    out = selective_scan(Tensor(np.zeros((2, 0, 3))), p)
    assert out.shape == (2, 0, 3)


def test_scan_matches_naive_recurrence_randomized():
    rng = Rng(17)
    worst = 0.0
    for case in range(30):
        r = rng.split(case)
        d = int(r.split("d").integers(1, 5))
        n = int(r.split("n").integers(1, 9))
        length = int(r.split("l").integers(1, 11))
        p = _random_ssm(r.split("p"), d, n)
        x = r.split("x").normal((2, length, d))
        got = selective_scan(Tensor(x), p).data
        want = naive_selective_scan(x, p)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-10, worst


def test_scan_skip_mode_changes_only_feedthrough():
    rng = Rng(19)
    p = _random_ssm(rng.split("p"), 3, 4)
    x = rng.split("x").normal((1, 5, 3))
    with_skip = selective_scan(Tensor(x), p).data
    skip = p.skip
    p.skip = None
    without = selective_scan(Tensor(x), p).data
    p.skip = skip
    assert np.abs((with_skip - without) - skip.data * x).max() < 1e-14


# -- continuous-time oracle -----------------------------------------------------------


def test_ode_pure_integrator():
    # A = 0, B = C = 1, constant input: y_t is the running sum of delta * x.
    p = SsmParams.create(1, 1, Rng(0), use_skip=False, dtype=np.float64)
    p.a_log.data = np.full((1, 1), -80.0)  # A = -e^-80 ~ 0
    p.bc_weight.data = np.ones((1, 2))     # B_t = C_t = x_t
    p.dt_down.data = np.zeros((1, 1))
    p.dt_up.data = np.zeros((1, 1))
    p.dt_bias.data = np.array([math.log(math.expm1(0.05))])  # delta = 0.05
    x = np.ones((1, 8, 1))
    y = ode_oracle(Tensor(x), p, substeps=32).data
    expected = 0.05 * np.arange(1, 9)
    assert np.abs(y[0, :, 0] - expected).max() < 1e-9


def test_scan_agrees_with_ode_oracle():
    rng = Rng(23)
    worst = 0.0
    for case in range(12):
        r = rng.split(case)
        d = int(r.split("d").integers(1, 4))
        n = int(r.split("n").integers(1, 6))
        length = int(r.split("l").integers(1, 8))
        p = _random_ssm(r.split("p"), d, n, use_skip=False)
        x = r.split("x").normal((1, length, d))
        got = selective_scan(Tensor(x), p).data
        want = ode_oracle(Tensor(x), p, substeps=64).data
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-6, worst


def test_ode_substep_convergence():
    rng = Rng(29)
    p = _random_ssm(rng.split("p"), 2, 4, use_skip=False)
    x = rng.split("x").normal((1, 5, 2))
    scan = selective_scan(Tensor(x), p).data
    err = [
        float(np.abs(ode_oracle(Tensor(x), p, substeps=s).data - scan).max())
        for s in (16, 32, 64)
    ]
    tol = 1e-6
    for a, b in zip(err, err[1:]):
        assert b <= a or b < tol
    assert err[-1] < tol


def test_ode_requires_min_substeps():
    p = SsmParams.create(1, 1, Rng(0), dtype=np.float64)
    with pytest.raises(DomainError):
        ode_oracle(Tensor(np.zeros((1, 1, 1))), p, substeps=8)


# -- invariants ------------------------------------------------------------------------


def test_state_bounded_by_geometric_series():
    rng = Rng(31)
    p = _random_ssm(rng.split("p"), 3, 5)
    x = rng.split("x").normal((2, 50, 3), std=2.0)
    states = naive_scan_states(x, p)

    a_log = p.a_log.data
    delta = np.logaddexp(0.0, x @ p.dt_down.data @ p.dt_up.data + p.dt_bias.data)
    z = delta[..., None] * (-np.exp(a_log))
    assert np.all(z < 0)
    a_max = float(np.exp(z).max())
    assert a_max < 1.0
    bt = x @ p.bc_weight.data[:, : p.d_state]
    phi = np.expm1(z) / z
    bx = phi * delta[..., None] * bt[:, :, None, :] * x[..., None]
    bound = float(np.abs(bx).max()) / (1.0 - a_max)
    assert float(np.abs(states).max()) <= bound * (1 + 1e-12)


def test_causality_prefix_bit_identical():
    rng = Rng(37)
    p = _random_ssm(rng.split("p"), 3, 4)
    x = rng.split("x").normal((2, 11, 3))
    base = selective_scan(Tensor(x.copy()), p).data
    for t in (0, 4, 10):
        mod = x.copy()
        mod[:, t] += 0.7
        out = selective_scan(Tensor(mod), p).data
        assert np.array_equal(base[:, :t], out[:, :t])
        assert not np.array_equal(base[:, t:], out[:, t:])


def test_scan_gradient_matches_finite_differences():
    rng = Rng(41)
    p = _random_ssm(rng.split("p"), 3, 4)
    x = parameter(rng.split("x").normal((2, 6, 3)), dtype=np.float64)
    w = rng.split("w").normal((2, 6, 3))

    def f():
        return (selective_scan(x, p) * Tensor(w)).sum()

    report = grad_check(f, [("x", x), *p.params()], eps=1e-5, samples_per_param=6, seed=41)
    assert report.ok(1e-4), report.rel_errors


def test_scan_rejects_channel_mismatch():
    from groupmamba.tensor import ShapeError

    p = SsmParams.create(3, 4, Rng(0), dtype=np.float64)
    with pytest.raises(ShapeError):
        selective_scan(Tensor(np.zeros((1, 4, 5))), p)


def test_params_invariants():
    p = SsmParams.create(8, 16, Rng(5))
    a = -np.exp(p.a_log.data)
    assert np.all(a < 0)
    assert p.dt_rank == 1
    delta0 = np.logaddexp(0.0, p.dt_bias.data.astype(np.float64))
    assert np.all(delta0 > 0.0009) and np.all(delta0 < 0.11)
    assert np.array_equal(
        p.a_log.data[0].astype(np.float64),
        np.log(np.arange(1, 17)).astype(np.float32).astype(np.float64),
    )


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_scan_deterministic(seed):
    rng = Rng(seed)
    p = _random_ssm(rng.split("p"), 2, 3)
    x = rng.split("x").normal((1, 4, 2))
    y1 = selective_scan(Tensor(x.copy()), p).data
    y2 = selective_scan(Tensor(x.copy()), p).data
    assert np.array_equal(y1, y2)
