"""Path simulation under both measures, the normalizing density, and the
wealth-functional estimators. Exact cases (constant rate, no tilt) must come
out with zero standard error; stochastic cases are judged at 3 standard
errors with pinned seeds."""

import dataclasses

import numpy as np
import pytest

from riskhjb import grid as G
from riskhjb import hamiltonian as H
from riskhjb import model as M
from riskhjb import montecarlo as MC
from riskhjb import solver as S

from conftest import make_jump1_market, make_skew_market


# ---------------------------------------------------------------------------
# configuration


def test_sim_config_validation():
    with pytest.raises(MC.MonteCarloError):
        MC.SimConfig(paths=1, dt=0.01, seed=0)
    with pytest.raises(MC.MonteCarloError):
        MC.SimConfig(paths=100, dt=0.0, seed=0)
    with pytest.raises(MC.MonteCarloError):
        MC.SimConfig(paths=100, dt=0.01, seed=0, measure="Q")
    with pytest.raises(MC.MonteCarloError):
        MC.SimConfig(paths=101, dt=0.01, seed=0, antithetic=True)
    cfg = MC.SimConfig(paths=100, dt=0.02, seed=3)
    assert cfg.with_dt(0.01).dt == 0.01
    assert cfg.with_dt(0.01).seed == cfg.seed


def test_dt_must_resolve_horizon(lgq_market):
    cfg = MC.SimConfig(paths=100, dt=0.5, seed=0)     # T/dt = 2 < 50
    with pytest.raises(MC.MonteCarloError):
        MC.simulate_factors(lgq_market, np.zeros(1), np.zeros(1), cfg)


def test_reporting_needs_enough_paths(lgq_market):
    cfg = MC.SimConfig(paths=100, dt=0.01, seed=0, measure="Ph")
    with pytest.raises(MC.MonteCarloError):
        MC.estimate_I_tilde(lgq_market, np.zeros(1), 0.0, np.zeros(1), cfg)


# ---------------------------------------------------------------------------
# policies


def test_constant_policy_and_token():
    pol = MC.as_policy(np.array([0.3]))
    assert isinstance(pol, MC.ConstantPolicy)
    h = pol(0.5, np.zeros((7, 1)))
    assert h.shape == (7, 1) and np.all(h == 0.3)
    assert pol.token == MC.as_policy(np.array([0.3])).token
    assert pol.token != MC.as_policy(np.array([0.4])).token


def test_grid_policy_interpolates_in_space():
    lat = G.Lattice(bounds=np.array([[-2.0, 2.0]]), num_nodes=(21,),
                    num_steps=10, T=1.0)
    x = lat.points()[:, 0]
    vals = np.tile(0.2 + 0.1 * x, (11, 1))[:, :, None]
    pol = MC.GridPolicy(G.PolicyField(lattice=lat, values=vals))
    xq = np.array([[0.37], [-1.21]])
    out = pol(0.5, xq)
    assert np.allclose(out[:, 0], 0.2 + 0.1 * xq[:, 0], atol=1e-12)
    assert pol.clamped == 0


def test_grid_policy_counts_and_raises_on_exit():
    lat = G.Lattice(bounds=np.array([[-1.0, 1.0]]), num_nodes=(9,),
                    num_steps=4, T=1.0)
    field = G.PolicyField(lattice=lat, values=np.zeros((5, 9, 1)))
    pol = MC.GridPolicy(field)
    pol(0.0, np.array([[2.0], [0.0]]))
    assert pol.clamped == 1 and pol.evaluations == 2
    strict = MC.GridPolicy(field, raise_on_exit=True)
    with pytest.raises(MC.PolicyLookupOutOfDomain):
        strict(0.0, np.array([[2.0]]))


def test_grid_policy_picks_nearest_time_level():
    lat = G.Lattice(bounds=np.array([[-1.0, 1.0]]), num_nodes=(9,),
                    num_steps=2, T=1.0)                 # levels 0, 0.5, 1
    vals = np.zeros((3, 9, 1))
    vals[0], vals[1], vals[2] = 10.0, 20.0, 30.0
    pol = MC.GridPolicy(G.PolicyField(lattice=lat, values=vals))
    x = np.zeros((1, 1))
    assert pol(0.1, x)[0, 0] == 10.0
    assert pol(0.4, x)[0, 0] == 20.0
    assert pol(0.9, x)[0, 0] == 30.0


def test_callable_policy_wraps_function():
    pol = MC.as_policy(lambda t, x: 0.5 * x)
    out = pol(0.0, np.full((3, 1), 2.0))
    assert np.all(out == 1.0)


# ---------------------------------------------------------------------------
# exact simulation cases


def test_chi_is_identically_one_without_tilt(lgq_market):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=1)
    bundle = MC.simulate_factors(lgq_market, np.zeros(1), np.zeros(1), cfg)
    chi, excluded = MC.doleans_chi(bundle)
    assert excluded == 0
    assert np.all(chi == 1.0)


def test_const_rate_wealth_functional_is_exact(const_rate):
    # h = 0: log V_T = c T deterministically, so J = 0.03 with zero error
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=2)
    est = MC.estimate_J_wealth(const_rate, np.zeros(1), np.zeros(1), cfg)
    assert est.mean == pytest.approx(0.03, abs=1e-14)
    assert est.std_error == pytest.approx(0.0, abs=1e-15)


def test_const_rate_transformed_value_is_exact(const_rate):
    # g = -c along h = 0: I~ = e^{-theta c T} with zero spread
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=2, measure="Ph")
    est = MC.estimate_I_tilde(const_rate, np.zeros(1), 0.0, np.zeros(1), cfg)
    assert est.mean == pytest.approx(np.exp(-0.03), abs=1e-12)
    assert est.std_error == pytest.approx(0.0, abs=1e-15)


def test_factor_jump_compensation_preserves_mean():
    """Zero drift plus a compensated factor atom: E[X_T] = x0 exactly in the
    scheme, so the sample mean must sit within 3 standard errors."""
    mod = M.MarketModel(
        factor=M.FactorModel(n=1, b=M.constant([0.0]),
                             Lambda=M.constant([[0.1, 0.0]])),
        assets=M.AssetModel(m=1, a0=M.constant(0.0), a=M.constant([0.0]),
                            Sigma=M.constant([[0.2, 0.0]])),
        nu=M.JumpMeasure(atoms=(M.JumpAtom(weight=2.0,
                                           xi=M.constant([0.05])),)),
        constraints=M.ConstraintSet(Upsilon=np.array([[1.0, -1.0]]),
                                    upsilon=np.array([5.0, 5.0])),
        theta=1.0, T=1.0)
    cfg = MC.SimConfig(paths=50_000, dt=0.02, seed=9)
    bundle = MC.simulate_factors(mod, np.zeros(1), np.full(1, 0.7), cfg)
    se = bundle.x_final.std(ddof=1) / np.sqrt(bundle.paths)
    assert abs(bundle.x_final.mean() - 0.7) <= 3.0 * se
    assert bundle.jump_counts.mean() == pytest.approx(2.0, rel=0.05)


# ---------------------------------------------------------------------------
# the normalizing density


def test_chi_mean_one_with_jumps(jump1_market):
    mod = dataclasses.replace(jump1_market, theta=0.3)
    cfg = MC.SimConfig(paths=40_000, dt=0.02, seed=31)
    bundle = MC.simulate_factors(mod, np.array([1.5]), np.zeros(1), cfg)
    chi, excluded = MC.doleans_chi(bundle)
    assert excluded == 0
    se = chi.std(ddof=1) / np.sqrt(chi.size)
    assert abs(chi.mean() - 1.0) <= 3.0 * se
    assert se < 0.01


def test_chi_variance_matches_lognormal(lgq_market):
    # constant Sigma, constant h, no jumps: Var chi = e^{th^2 h'SS'h T} - 1
    h = np.array([1.3])
    cfg = MC.SimConfig(paths=100_000, dt=0.02, seed=13)
    bundle = MC.simulate_factors(lgq_market, h, np.zeros(1), cfg)
    chi, _ = MC.doleans_chi(bundle)
    ss = 0.06 ** 2 + 0.19 ** 2
    exact = np.exp(h[0] ** 2 * ss) - 1.0
    sample = chi.var(ddof=1)
    m4 = ((chi - chi.mean()) ** 4).mean()
    se_var = np.sqrt((m4 - sample ** 2) / chi.size)
    assert abs(sample - exact) <= 3.0 * se_var


def test_chi_requires_p_measure(lgq_market):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=1, measure="Ph")
    bundle = MC.simulate_factors(lgq_market, np.zeros(1), np.zeros(1), cfg)
    with pytest.raises(MC.MonteCarloError):
        MC.doleans_chi(bundle)


def test_crash_wall_policy_refused(jump1_market):
    # h = 5 crosses the crash wall: 1 + 5 * (-0.25) < 0.  The running
    # coefficient evaluation screens every step with the same allocation
    # the jump handler would use, so the refusal fires before any path
    # reaches a jump; the in-path wipeout error stays as a last resort.
    cfg = MC.SimConfig(paths=5000, dt=0.02, seed=4)
    with pytest.raises(H.InfeasibleControl):
        MC.simulate_factors(jump1_market, np.array([5.0]), np.zeros(1), cfg)
    assert issubclass(MC.Bankruptcy, MC.MonteCarloError)


# ---------------------------------------------------------------------------
# estimators


def test_measures_agree_on_transformed_value(jump1_market):
    h = np.array([1.2])
    eP = MC.estimate_I_tilde(jump1_market, h, 0.0, np.zeros(1),
                             MC.SimConfig(paths=60_000, dt=0.02, seed=17))
    ePh = MC.estimate_I_tilde(jump1_market, h, 0.0, np.zeros(1),
                              MC.SimConfig(paths=60_000, dt=0.02, seed=18,
                                           measure="Ph"))
    gap = abs(eP.mean - ePh.mean)
    assert gap <= 3.0 * float(np.hypot(eP.std_error, ePh.std_error))
    # the importance-weighted route is noisier than the direct one
    assert ePh.std_error < eP.std_error


def test_estimates_are_deterministic(jump1_market):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=17)
    h = np.array([1.2])
    e1 = MC.estimate_I_tilde(jump1_market, h, 0.0, np.zeros(1), cfg)
    e2 = MC.estimate_I_tilde(jump1_market, h, 0.0, np.zeros(1), cfg)
    assert e1.mean == e2.mean and e1.std_error == e2.std_error
    e3 = MC.estimate_I_tilde(jump1_market, h, 0.0, np.zeros(1),
                             MC.SimConfig(paths=2000, dt=0.02, seed=18))
    assert e3.mean != e1.mean


def test_antithetic_pairs_share_jumps(jump1_market):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=6, antithetic=True)
    bundle = MC.simulate_factors(jump1_market, np.array([0.5]), np.zeros(1),
                                 cfg)
    half = bundle.paths // 2
    assert np.array_equal(bundle.jump_counts[:half], bundle.jump_counts[half:])
    est = MC.estimate_J_wealth(jump1_market, np.array([0.5]), np.zeros(1), cfg)
    assert np.isfinite(est.mean) and est.std_error > 0.0
    # the error bar is computed over pair means, not raw paths
    assert est.paths == 1000


def test_wealth_paths_shared_across_theta(lgq_market):
    """log V is theta-free, so the same seed gives bit-identical wealth
    samples for different risk aversions (common random numbers)."""
    cfg = MC.SimConfig(paths=1000, dt=0.02, seed=3)
    b1 = MC.simulate_factors(dataclasses.replace(lgq_market, theta=0.01),
                             np.array([1.0]), np.zeros(1), cfg)
    b2 = MC.simulate_factors(dataclasses.replace(lgq_market, theta=0.02),
                             np.array([1.0]), np.zeros(1), cfg)
    assert np.array_equal(b1.log_wealth, b2.log_wealth)


def test_taylor_ratio_of_wealth_functional():
    """J(theta) = m1 - (theta/2) m2 + (theta^2/6) m3 + ... in the sample
    moments of log wealth, and the wealth sample itself is theta-free, so
    the remainder beyond the variance term scales like theta^2: its ratio
    across theta in {.01, .02} sits near 1/4 for any fixed sample."""
    mod = make_skew_market()
    cfg = MC.SimConfig(paths=20_000, dt=0.02, seed=77)
    h = np.array([1.0])
    ests = {th: MC.estimate_J_wealth(dataclasses.replace(mod, theta=th),
                                     h, np.zeros(1), cfg)
            for th in (0.01, 0.02)}
    m1 = ests[0.01].diagnostics["log_wealth_mean"]
    m2 = ests[0.01].diagnostics["log_wealth_var"]
    assert ests[0.02].diagnostics["log_wealth_mean"] == m1   # shared sample
    rem = {th: ests[th].mean - (m1 - 0.5 * th * m2) for th in (0.01, 0.02)}
    ratio = rem[0.01] / rem[0.02]
    assert 0.2 <= ratio <= 0.3


def test_estimate_serialization(const_rate):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=2)
    est = MC.estimate_J_wealth(const_rate, np.zeros(1), np.zeros(1), cfg)
    d = est.to_dict()
    assert d["paths"] == 2000 and d["measure"] == "P"
    assert isinstance(d["diagnostics"], dict)


# ---------------------------------------------------------------------------
# dynamic consistency against the lattice solution


def test_feynman_kac_record(lgq_market):
    lat = G.Lattice(bounds=np.array([[-2.0, 2.0]]), num_nodes=(41,),
                    num_steps=40, T=1.0)
    vf, pf, _ = S.policy_iteration_solve(lgq_market, lat)
    cfg = MC.SimConfig(paths=20_000, dt=0.01, seed=5, measure="Ph")
    rec = MC.verify_feynman_kac(lgq_market, vf, pf, 0.0, np.zeros(1), cfg)
    assert rec["passed"], rec
    assert abs(rec["mc_mean"] - rec["pde_value"]) <= rec["band"]
    # the band widens with observed step sensitivity, never shrinks below 3 se
    assert rec["band"] >= 3.0 * rec["mc_std_error"]
    assert rec["refinement_delta"] == abs(rec["mc_mean"] - rec["mc_mean_refined"])
    assert rec["measure"] == "Ph" and rec["seed"] == 5


def test_path_dump(tmp_path, lgq_market):
    cfg = MC.SimConfig(paths=2000, dt=0.02, seed=1)
    bundle = MC.simulate_factors(lgq_market, np.zeros(1), np.zeros(1), cfg)
    out = tmp_path / "paths.csv"
    MC.dump_paths_csv(bundle, out, limit=2000)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 2001                   # header + one row per path
    assert lines[0].split(",")[:2] == ["path", "x_final_0"]
    assert "log_wealth" in lines[0] and "jumps" in lines[0]
    # oversized dumps are refused outright rather than silently truncated
    with pytest.raises(MC.MonteCarloError):
        MC.dump_paths_csv(bundle, tmp_path / "nope.csv", limit=50)
    assert not (tmp_path / "nope.csv").exists()
