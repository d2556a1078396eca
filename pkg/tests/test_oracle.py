"""Closed-form reference solution: quadratic-value integration, the
independent ansatz check, and the bridge back to a market model."""

import json

import numpy as np
import pytest

from riskhjb import model as M
from riskhjb import oracle as O

from conftest import BOX_1D, make_lgq_spec


def const_spec(theta=1.0, c0=0.02, ahat0=0.05):
    """x-independent coefficients: Q = q = 0 and
    k(t) = (T - t)(c0 + ahat0' K ahat0 / 2) exactly."""
    return O.LGQSpec(theta=theta, T=1.0, b0=np.array([0.0]),
                     B=np.array([[0.0]]), Lambda=np.array([[0.3, 0.0]]),
                     ahat0=np.array([ahat0]), A=np.array([[0.0]]),
                     Sigma=np.array([[0.2, 0.0]]), c0=c0, c1=np.array([0.0]))


# ---------------------------------------------------------------------------
# spec construction


def test_spec_shape_and_ellipticity_guards():
    with pytest.raises(O.OracleError):
        O.LGQSpec(theta=1.0, T=1.0, b0=np.zeros(1), B=np.zeros((2, 2)),
                  Lambda=np.array([[0.3, 0.0]]), ahat0=np.zeros(1),
                  A=np.zeros((1, 1)), Sigma=np.array([[0.2, 0.0]]),
                  c0=0.0, c1=np.zeros(1))
    with pytest.raises(O.OracleError):
        O.LGQSpec(theta=1.0, T=1.0, b0=np.zeros(1), B=np.zeros((1, 1)),
                  Lambda=np.array([[0.0, 0.0]]), ahat0=np.zeros(1),
                  A=np.zeros((1, 1)), Sigma=np.array([[0.2, 0.0]]),
                  c0=0.0, c1=np.zeros(1))
    with pytest.raises(O.OracleError):
        O.LGQSpec(theta=-1.0, T=1.0, b0=np.zeros(1), B=np.zeros((1, 1)),
                  Lambda=np.array([[0.3, 0.0]]), ahat0=np.zeros(1),
                  A=np.zeros((1, 1)), Sigma=np.array([[0.2, 0.0]]),
                  c0=0.0, c1=np.zeros(1))


def test_K_matrix():
    spec = const_spec(theta=1.0)
    assert spec.K == pytest.approx(np.array([[12.5]]))   # 1/(2 * 0.04)


# ---------------------------------------------------------------------------
# integration


def test_constant_coefficients_closed_form():
    # k(0) = T (c0 + ahat0^2 K / 2) = 0.02 + 12.5 * 0.0025 / 2 = 0.035625
    spec = const_spec()
    sol = O.riccati_solve(spec, ode_steps=4000)
    assert np.abs(sol.Q).max() <= 1e-14
    assert np.abs(sol.q).max() <= 1e-14
    assert sol.k[0] == pytest.approx(0.035625, abs=1e-12)
    x = np.array([[0.7], [-1.3]])
    assert sol.phi(0.0, x) == pytest.approx([0.035625, 0.035625], abs=1e-12)
    # h* = K ahat0 = 0.625 at every state
    assert sol.h_star(0.0, x) == pytest.approx(0.625 * np.ones((2, 1)), abs=1e-12)


def test_terminal_condition_is_zero(lgq_spec):
    sol = O.riccati_solve(lgq_spec, ode_steps=2000)
    x = np.linspace(-2.0, 2.0, 7)[:, None]
    assert np.abs(sol.phi(1.0, x)).max() <= 1e-14
    assert np.allclose(sol.phi_tilde(1.0, x), 1.0)


def test_phi_tilde_is_exponential_of_phi(lgq_spec):
    sol = O.riccati_solve(lgq_spec, ode_steps=2000)
    x = np.array([[0.4], [-0.9]])
    assert np.allclose(sol.phi_tilde(0.3, x),
                       np.exp(-lgq_spec.theta * sol.phi(0.3, x)))


def test_grad_phi_matches_finite_differences(lgq_spec):
    sol = O.riccati_solve(lgq_spec, ode_steps=2000)
    x0, eps = 0.37, 1e-6
    fd = (sol.phi(0.2, [[x0 + eps]]) - sol.phi(0.2, [[x0 - eps]])) / (2 * eps)
    assert sol.grad_phi(0.2, [[x0]])[0, 0] == pytest.approx(fd[0], abs=1e-6)


def test_ode_step_convergence(lgq_spec):
    coarse = O.riccati_solve(lgq_spec, ode_steps=500)
    fine = O.riccati_solve(lgq_spec, ode_steps=10_000)
    assert abs(coarse.k[0] - fine.k[0]) <= 1e-10
    assert np.abs(coarse.Q[0] - fine.Q[0]).max() <= 1e-10


def test_ode_steps_guard(lgq_spec):
    with pytest.raises(O.OracleError):
        O.riccati_solve(lgq_spec, ode_steps=0)


def test_runaway_coefficients_raise_blow_up():
    # an absurd state sensitivity of the excess return overflows the cap
    spec = O.LGQSpec(theta=1.0, T=1.0, b0=np.zeros(1), B=np.zeros((1, 1)),
                     Lambda=np.array([[0.3, 0.0]]), ahat0=np.zeros(1),
                     A=np.array([[1e6]]), Sigma=np.array([[0.2, 0.0]]),
                     c0=0.0, c1=np.zeros(1))
    with pytest.raises(O.BlowUp):
        O.riccati_solve(spec, ode_steps=1000)


# ---------------------------------------------------------------------------
# the independent ansatz check


def test_ansatz_residual_small_on_solution(lgq_spec):
    sol = O.riccati_solve(lgq_spec)
    assert O.verify_ansatz(lgq_spec, sol) <= 1e-6


def test_ansatz_detects_corruption(lgq_spec):
    sol = O.riccati_solve(lgq_spec)
    sol.q = sol.q + 0.01
    assert O.verify_ansatz(lgq_spec, sol) > 1e-4


# ---------------------------------------------------------------------------
# serialization


def test_solution_round_trips_through_json(tmp_path, lgq_spec):
    sol = O.riccati_solve(lgq_spec, ode_steps=200)
    path = tmp_path / "sol.json"
    sol.save_json(path)
    with open(path) as fh:
        d = json.load(fh)
    assert d["theta"] == 1.0
    assert np.allclose(np.asarray(d["Q"]), sol.Q)
    assert np.allclose(np.asarray(d["k"]), sol.k)


# ---------------------------------------------------------------------------
# market realization


def test_market_matches_spec_on_box(lgq_spec):
    mod = O.lgq_to_market(lgq_spec, BOX_1D)
    x = np.linspace(-2.0, 2.0, 9)[:, None]
    assert np.allclose(mod.factor.b(0.0, x),
                       lgq_spec.b0 + x @ lgq_spec.B.T, atol=1e-14)
    assert np.allclose(mod.assets.a0(0.0, x),
                       lgq_spec.c0 + x @ lgq_spec.c1, atol=1e-14)
    assert np.allclose(mod.ahat(0.0, x),
                       lgq_spec.ahat0 + x @ lgq_spec.A.T, atol=1e-14)
    assert np.allclose(mod.factor.Lambda(0.0, x[0]), lgq_spec.Lambda)
    assert np.allclose(mod.assets.Sigma(0.0, x[0]), lgq_spec.Sigma)


def test_market_saturates_far_outside_box(lgq_spec):
    mod = O.lgq_to_market(lgq_spec, BOX_1D)
    far = np.array([[1e4], [-1e4]])
    vals = mod.factor.b(0.0, far)
    assert np.all(np.isfinite(vals))
    assert np.abs(vals).max() < 1e3          # capped, not ~5e3


def test_market_passes_validation_and_cap(lgq_spec):
    mod = O.lgq_to_market(lgq_spec, BOX_1D, constraint_cap=12.0)
    assert M.validate_model(mod).passed
    assert np.allclose(mod.constraints.upsilon, 12.0)
    assert M.feasible_region_membership(mod, np.array([11.9]))
    assert not M.feasible_region_membership(mod, np.array([12.1]))


# ---------------------------------------------------------------------------
# dense-grid minimizer oracle


def test_brute_force_guards(lgq_spec):
    from riskhjb import hamiltonian as H
    mod3 = O.lgq_to_market(lgq_spec, BOX_1D)
    inp_bad_r = H.HamiltonianInputs(t=0.0, x=np.zeros(1), r=0.0, p=np.zeros(1))
    with pytest.raises(O.OracleError):
        O.brute_force_argmin(inp_bad_r, mod3)


def test_brute_force_matches_closed_form():
    spec = const_spec()
    mod = O.lgq_to_market(spec, BOX_1D)
    from riskhjb import hamiltonian as H
    inp = H.HamiltonianInputs(t=0.0, x=np.zeros(1), r=1.0, p=np.zeros(1))
    href = O.brute_force_argmin(inp, mod, grid_density=2000)
    assert href == pytest.approx([0.625], abs=60.0 / 2000.0)
