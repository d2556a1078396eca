"""Monte Carlo side of the package: simulates factors, wealth and the
change-of-measure density, and estimates the investment criteria by sample
mean.  Serves as the stochastic cross-check of the lattice solver.

Conventions
-----------
All jump atoms are compensated.  Paths are advanced by Euler-Maruyama for
the diffusion part; jump times are exact (per-atom Poisson counts plus
order statistics, which is the same law as exponential clocks) and are
inserted between grid times as extra micro-steps, so jump timing carries no
discretization bias.  The density accumulator and the log-wealth
accumulator are updated inside the same pass, which keeps the discrete
density an exact martingale for constant policies at any step size.

Measures:
  "P"   physical measure: factor drift b - sum_j lambda_j xi_j between
        jumps, every atom firing at its nominal intensity.
  "Ph"  control-tilted measure: factor drift f_a(t, x, h) between jumps;
        factor atoms keep intensity lambda_j because their asset mark is
        zero.  Atoms that only move the assets do not influence any
        functional estimated under "Ph" and are skipped.

Randomness is a counter-based Philox stream keyed by the seed with a fixed
draw order (jump structure first, then one Gaussian block per micro-step),
so identical (model, config, seed) reproduce estimates bit for bit, and
runs that differ only in theta share every path.  Antithetic pairs share
the jump structure and negate the Gaussians; standard errors are then
computed over pair averages.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import hamiltonian as ham
from .grid import Lattice, PolicyField, interpolate
from .model import MarketModel

MEASURE_P = "P"
MEASURE_PH = "Ph"


class MonteCarloError(RuntimeError):
    pass


class PolicyLookupOutOfDomain(MonteCarloError):
    """A path left the lattice box during a policy lookup.  The default
    treatment clamps the state to the box and counts the event; the error
    is raised only when a lookup object is built with raise_on_exit."""


class Bankruptcy(MonteCarloError):
    """A realized jump wiped out the portfolio (1 + h'gamma <= 0).  This
    cannot happen for feasible policies; reaching it means the policy fed
    to the simulator violated the jump constraint."""


# ---------------------------------------------------------------------------
# configuration / results


@dataclass(frozen=True)
class SimConfig:
    paths: int
    dt: float
    seed: int
    measure: str = MEASURE_P
    antithetic: bool = False

    def __post_init__(self):
        if self.paths < 2:
            raise MonteCarloError("need at least two paths")
        if self.antithetic and self.paths % 2:
            raise MonteCarloError("antithetic sampling needs an even path count")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise MonteCarloError("dt must be a positive step")
        if self.measure not in (MEASURE_P, MEASURE_PH):
            raise MonteCarloError("measure must be 'P' or 'Ph'")
        int(self.seed)

    def with_dt(self, dt) -> "SimConfig":
        return SimConfig(self.paths, float(dt), self.seed, self.measure,
                         self.antithetic)


@dataclass(frozen=True)
class SimEstimate:
    mean: float
    std_error: float
    paths: int
    measure: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error,
                "paths": self.paths, "measure": self.measure,
                "diagnostics": dict(self.diagnostics)}


@dataclass
class PathBundle:
    """Per-path terminal functionals from one simulation pass.

    log_chi and log_wealth are carried only for P-measure passes; int_g is
    the pathwise integral of the running cost g along the realized states
    under the simulated measure.  log_wealth is normalized to v0 = 1.
    """

    measure: str
    t0: float
    horizon: float
    theta: float
    x_final: np.ndarray
    int_g: np.ndarray
    log_chi: np.ndarray | None
    log_wealth: np.ndarray | None
    jump_counts: np.ndarray
    clamped_lookups: int
    total_lookups: int
    policy_token: str | None
    config: SimConfig

    @property
    def paths(self) -> int:
        return self.x_final.shape[0]

    @property
    def clamped_fraction(self) -> float:
        return self.clamped_lookups / max(self.total_lookups, 1)


# ---------------------------------------------------------------------------
# policy lookups


def _token_of(arr) -> str:
    data = np.ascontiguousarray(np.asarray(arr, dtype=float))
    return hashlib.sha256(data.tobytes()).hexdigest()[:16]


class ConstantPolicy:
    def __init__(self, h):
        self.h = np.atleast_1d(np.asarray(h, dtype=float))
        self.token = _token_of(self.h)
        self.evaluations = 0
        self.clamped = 0

    def __call__(self, t, x):
        x = np.atleast_2d(x)
        self.evaluations += x.shape[0]
        return np.broadcast_to(self.h, (x.shape[0], self.h.size))


class GridPolicy:
    """Lattice policy lookup: multilinear in the state, nearest level in
    time.  States outside the box are clamped to it and counted."""

    def __init__(self, field: PolicyField, lattice: Lattice | None = None,
                 raise_on_exit: bool = False):
        self.field = field
        self.lattice = field.lattice if lattice is None else lattice
        self.raise_on_exit = raise_on_exit
        self.token = _token_of(field.values)
        self.evaluations = 0
        self.clamped = 0

    def __call__(self, t, x):
        lat = self.lattice
        x = np.atleast_2d(np.asarray(x, dtype=float))
        npts = x.shape[0]
        self.evaluations += npts
        lo = lat.bounds[:, 0]
        hi = lat.bounds[:, 1]
        outside = np.any((x < lo) | (x > hi), axis=1)
        n_out = int(np.count_nonzero(outside))
        if n_out and self.raise_on_exit:
            raise PolicyLookupOutOfDomain(
                "%d state(s) left the lattice box" % n_out)
        self.clamped += n_out
        xc = np.clip(x, lo, hi)
        levels = np.clip(np.rint(np.asarray(t, dtype=float) / lat.dt), 0,
                         lat.num_steps).astype(int)
        levels = np.broadcast_to(levels, (npts,))
        out = np.empty((npts, self.field.m))
        for k in np.unique(levels):
            rows = np.nonzero(levels == k)[0]
            node_vals = self.field.level(int(k))
            for j in range(self.field.m):
                out[rows, j], _ = interpolate(lat, node_vals[:, j], xc[rows])
        return out


class CallablePolicy:
    def __init__(self, fn):
        self.fn = fn
        self.token = None
        self.evaluations = 0
        self.clamped = 0

    def __call__(self, t, x):
        x = np.atleast_2d(x)
        self.evaluations += x.shape[0]
        h = np.asarray(self.fn(t, x), dtype=float)
        if h.ndim == 1:
            h = np.broadcast_to(h, (x.shape[0], h.size))
        return h


def as_policy(policy):
    """Coerce the accepted policy forms to a lookup object: a constant
    allocation vector, a PolicyField, a ready lookup, or any callable
    (t, x) -> h."""
    if isinstance(policy, (ConstantPolicy, GridPolicy, CallablePolicy)):
        return policy
    if isinstance(policy, PolicyField):
        return GridPolicy(policy)
    if callable(policy):
        return CallablePolicy(policy)
    return ConstantPolicy(policy)


# ---------------------------------------------------------------------------
# jump-structure sampling


def _draw_jump_structure(rng, weights, t0, horizon, rows):
    """Exact jump times per path: Poisson count per atom, then sorted
    uniforms on [t0, T] (the order-statistics representation of the
    exponential-clock construction).  Returns (times, atom_ids) of shape
    (rows, width + 1) with an inf sentinel column, plus per-atom counts."""
    span = horizon - t0
    times_blocks = []
    id_blocks = []
    counts = np.zeros((rows, len(weights)), dtype=int)
    for j, lam in enumerate(weights):
        nj = rng.poisson(lam * span, size=rows)
        counts[:, j] = nj
        width = int(nj.max()) if rows else 0
        if width == 0:
            continue
        u = rng.random((rows, width))
        mask = np.arange(width) < nj[:, None]
        tj = np.where(mask, t0 + span * u, np.inf)
        times_blocks.append(tj)
        id_blocks.append(np.full((rows, width), j, dtype=int))
    if times_blocks:
        times = np.hstack(times_blocks)
        ids = np.hstack(id_blocks)
        order = np.argsort(times, axis=1, kind="stable")
        times = np.take_along_axis(times, order, axis=1)
        ids = np.take_along_axis(ids, order, axis=1)
    else:
        times = np.empty((rows, 0))
        ids = np.empty((rows, 0), dtype=int)
    times = np.hstack([times, np.full((rows, 1), np.inf)])
    ids = np.hstack([ids, np.full((rows, 1), -1, dtype=int)])
    return times, ids, counts


# ---------------------------------------------------------------------------
# the simulation pass


def simulate_factors(model: MarketModel, policy, x0, config: SimConfig,
                     t0: float = 0.0) -> PathBundle:
    """One synchronized pass over all paths from t0 to T.

    Each global iteration advances every live path to the nearer of its
    next grid time and its next jump time, applies the Euler diffusion
    step over that stretch, then applies the jump mark where one fired.
    The running-cost integral, the log-density and the log-wealth are
    accumulated in the same sweep with the policy evaluated at the left
    endpoint of each stretch.
    """
    theta = float(model.theta)
    horizon = float(model.T)
    if not t0 < horizon:
        raise MonteCarloError("t0 must precede the horizon")
    if config.dt > horizon / 50 * (1 + 1e-12):
        raise MonteCarloError("dt must satisfy dt <= T/50")
    under_p = config.measure == MEASURE_P
    pol = as_policy(policy)
    clamped0, total0 = pol.clamped, pol.evaluations

    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.n,):
        raise MonteCarloError("x0 must have the factor dimension")

    atoms = list(model.nu.atoms)
    if under_p:
        sim_idx = list(range(len(atoms)))
    else:
        # asset-only atoms do not move the state and no Ph-functional sees
        # them; factor atoms would need state-dependent thinning if they
        # also carried an asset mark, which validated models exclude
        for a in atoms:
            if a.moves_factors() and a.moves_assets():
                raise MonteCarloError(
                    "atoms with both marks are not supported under Ph")
        sim_idx = [j for j, a in enumerate(atoms) if a.moves_factors()]
    sim_atoms = [atoms[j] for j in sim_idx]
    sim_weights = np.array([a.weight for a in sim_atoms])
    gam_all = model.gamma_matrix()          # (J, m) over all atoms
    w_all = model.weights()

    span = horizon - t0
    nsteps = max(int(math.ceil(span / config.dt - 1e-12)), 1)
    grid_times = t0 + (span / nsteps) * np.arange(1, nsteps + 1)
    grid_times[-1] = horizon
    grid_times = np.concatenate([grid_times, [np.inf]])

    rng = np.random.Generator(np.random.Philox(int(config.seed)))
    base = config.paths // 2 if config.antithetic else config.paths
    jt, jid, counts = _draw_jump_structure(rng, sim_weights, t0, horizon, base)
    if config.antithetic:
        jt = np.vstack([jt, jt])
        jid = np.vstack([jid, jid])
        counts = np.vstack([counts, counts])

    npaths = config.paths
    rows = np.arange(npaths)
    bdim = model.brownian_dim
    x = np.broadcast_to(x0, (npaths, model.n)).copy()
    t_cur = np.full(npaths, t0)
    ptr = np.zeros(npaths, dtype=int)
    kg = np.zeros(npaths, dtype=int)
    int_g = np.zeros(npaths)
    log_chi = np.zeros(npaths) if under_p else None
    log_wealth = np.zeros(npaths) if under_p else None

    max_iter = nsteps + int(counts.sum(axis=1).max(initial=0)) + 8
    for _ in range(max_iter):
        active = t_cur < horizon - 1e-14
        if not active.any():
            break
        znorm = rng.standard_normal((base, bdim))
        if config.antithetic:
            znorm = np.vstack([znorm, -znorm])

        t_jump = jt[rows, ptr]
        t_grid = grid_times[kg]
        t_next = np.where(active, np.minimum(t_jump, t_grid), t_cur)
        delta = np.maximum(t_next - t_cur, 0.0)

        h = pol(t_cur, x)
        dw = np.sqrt(delta)[:, None] * znorm
        lam_mat = model.factor.Lambda(t_cur, x)
        if under_p:
            drift = model.factor.b(t_cur, x) - model.xi_sum(t_cur, x)
        else:
            drift = ham.f_a(t_cur, x, h, model)
        g_run = ham.g(t_cur, x, h, model)
        int_g += g_run * delta

        if under_p:
            sig = model.assets.Sigma(t_cur, x)
            hs = np.einsum("pjk,pj->pk", sig, h)         # h'Sigma, (paths, M)
            hs_dw = np.einsum("pk,pk->p", hs, dw)
            hss = np.einsum("pk,pk->p", hs, hs)
            s_atoms = h @ gam_all.T                      # (paths, J)
            big_g = -np.expm1(-theta * np.log1p(s_atoms))
            log_chi += -theta * hs_dw - 0.5 * theta ** 2 * hss * delta \
                + (big_g @ w_all) * delta
            a0_run = model.assets.a0(t_cur, x)
            ahat_run = model.ahat(t_cur, x)
            log_wealth += (a0_run + np.einsum("pj,pj->p", h, ahat_run)
                           - 0.5 * hss - (s_atoms @ w_all)) * delta + hs_dw

        x_pre = x + drift * delta[:, None] + np.einsum("pnk,pk->pn", lam_mat, dw)

        fired = active & (t_jump <= t_grid) & np.isfinite(t_jump)
        if fired.any():
            fired_ids = np.where(fired, jid[rows, ptr], -1)
            for j, atom in enumerate(sim_atoms):
                idx = np.nonzero(fired_ids == j)[0]
                if idx.size == 0:
                    continue
                if atom.moves_factors():
                    x_pre[idx] += atom.xi_at(t_next[idx], x_pre[idx], model.n)
                if under_p and atom.moves_assets():
                    s = h[idx] @ atom.gamma_vec(model.m)
                    if np.any(s <= -1.0):
                        raise Bankruptcy(
                            "a jump drove 1 + h'gamma to zero; the policy "
                            "violates the jump constraint")
                    log_chi[idx] += -theta * np.log1p(s)
                    log_wealth[idx] += np.log1p(s)
            ptr[fired] += 1
        x = x_pre
        kg[active & (t_grid <= t_jump)] += 1
        t_cur = t_next
    else:
        raise MonteCarloError("path advance failed to reach the horizon")

    jump_counts = np.zeros((npaths, len(atoms)), dtype=int)
    for jsim, jorig in enumerate(sim_idx):
        jump_counts[:, jorig] = counts[:, jsim]
    return PathBundle(
        measure=config.measure, t0=t0, horizon=horizon, theta=theta,
        x_final=x, int_g=int_g, log_chi=log_chi, log_wealth=log_wealth,
        jump_counts=jump_counts,
        clamped_lookups=pol.clamped - clamped0,
        total_lookups=pol.evaluations - total0,
        policy_token=pol.token, config=config)


# ---------------------------------------------------------------------------
# estimators


def doleans_chi(bundle: PathBundle, policy=None, model: MarketModel | None = None):
    """Per-path change-of-measure density at the horizon.

    Returns (chi, excluded): the finite per-path values and the count of
    overflowed paths that were dropped.  The bundle must come from a
    P-measure pass; when the policy or model is supplied it is checked
    against the pass that produced the bundle.
    """
    if bundle.measure != MEASURE_P or bundle.log_chi is None:
        raise MonteCarloError("the density is accumulated on P-measure paths")
    if model is not None and float(model.theta) != bundle.theta:
        raise MonteCarloError("model theta differs from the simulated theta")
    if policy is not None:
        token = as_policy(policy).token
        if token is not None and bundle.policy_token is not None \
                and token != bundle.policy_token:
            raise MonteCarloError("policy differs from the simulated policy")
    with np.errstate(over="ignore"):
        chi = np.exp(bundle.log_chi)
    finite = np.isfinite(chi)
    return chi[finite], int(np.count_nonzero(~finite))


def _pair_mean_se(samples, antithetic):
    """Sample mean and standard error; antithetic samples are reduced to
    pair averages first so the error bar stays honest."""
    y = np.asarray(samples, dtype=float)
    if antithetic:
        half = y.size // 2
        y = 0.5 * (y[:half] + y[half:])
    mean = float(np.mean(y))
    se = float(np.std(y, ddof=1) / math.sqrt(y.size))
    return mean, se, y.size


def _require_reporting_paths(config: SimConfig):
    if config.paths < 1000:
        raise MonteCarloError("reported estimates need at least 10^3 paths")


def estimate_I_tilde(model: MarketModel, policy, t0, x0,
                     config: SimConfig) -> SimEstimate:
    """Sample estimate of the transformed criterion I~(t0, x0; h).

    Under "Ph" this is the plain mean of exp(theta * int g dt); under "P"
    each path is reweighted by its density.  Overflowed paths are dropped
    and counted in the diagnostics.
    """
    _require_reporting_paths(config)
    bundle = simulate_factors(model, policy, x0, config, t0=t0)
    theta = bundle.theta
    excluded = 0
    with np.errstate(over="ignore"):
        if config.measure == MEASURE_PH:
            w = np.exp(theta * bundle.int_g)
        else:
            w = np.exp(theta * bundle.int_g + bundle.log_chi)
    finite = np.isfinite(w)
    if not finite.all():
        if config.antithetic:
            half = w.size // 2
            pair_ok = finite[:half] & finite[half:]
            keep = np.concatenate([pair_ok, pair_ok])
        else:
            keep = finite
        excluded = int(w.size - np.count_nonzero(keep))
        w = w[keep]
    mean, se, used = _pair_mean_se(w, config.antithetic)
    return SimEstimate(mean, se, used, config.measure, diagnostics={
        "excluded_paths": excluded,
        "clamped_lookup_fraction": bundle.clamped_fraction,
        "mean_jump_count": float(bundle.jump_counts.sum(axis=1).mean())
        if bundle.jump_counts.size else 0.0,
    })


def estimate_J_wealth(model: MarketModel, policy, x0, config: SimConfig,
                      t0: float = 0.0, v0: float = 1.0) -> SimEstimate:
    """Risk-sensitive expected-utility criterion from simulated wealth:
    J = -(1/theta) ln E[V_T^(-theta)], computed from log-wealth samples
    with the mean shifted out for stability; the standard error comes from
    the delta method.  Wealth paths live under the physical measure
    regardless of config.measure.
    """
    _require_reporting_paths(config)
    cfg = config if config.measure == MEASURE_P else SimConfig(
        config.paths, config.dt, config.seed, MEASURE_P, config.antithetic)
    bundle = simulate_factors(model, policy, x0, cfg, t0=t0)
    theta = bundle.theta
    lnv = bundle.log_wealth + math.log(v0)
    lbar = float(np.mean(lnv))
    y = np.exp(-theta * (lnv - lbar))
    mean_y, se_y, used = _pair_mean_se(y, cfg.antithetic)
    j_val = lbar - math.log(mean_y) / theta
    se_j = se_y / (theta * mean_y)
    return SimEstimate(j_val, se_j, used, MEASURE_P, diagnostics={
        "log_wealth_mean": lbar,
        "log_wealth_var": float(np.var(lnv)),
        "clamped_lookup_fraction": bundle.clamped_fraction,
    })


def verify_feynman_kac(model: MarketModel, value_field, policy_field,
                       t0, x0, config: SimConfig) -> dict:
    """Stochastic check of the solver output at one point: compares the
    lattice value of Phi~ against the simulated criterion under the solved
    policy, at the configured step and at half the step; the acceptance
    band is 3 sigma plus twice the observed step sensitivity."""
    lattice = value_field.lattice
    level = int(np.clip(np.rint(float(t0) / lattice.dt), 0, lattice.num_steps))
    pde_val, _ = interpolate(lattice, value_field.level(level),
                             np.atleast_2d(np.asarray(x0, dtype=float)))
    pde_val = float(pde_val[0])

    lookup = GridPolicy(policy_field)
    coarse = estimate_I_tilde(model, lookup, t0, x0, config)
    fine = estimate_I_tilde(model, lookup, t0, x0, config.with_dt(config.dt / 2))
    refinement_delta = abs(coarse.mean - fine.mean)
    band = 3.0 * coarse.std_error + 2.0 * refinement_delta
    diff = abs(pde_val - coarse.mean)
    return {
        "t0": float(t0),
        "x0": np.atleast_1d(np.asarray(x0, dtype=float)).tolist(),
        "pde_value": pde_val,
        "mc_mean": coarse.mean,
        "mc_std_error": coarse.std_error,
        "mc_mean_refined": fine.mean,
        "refinement_delta": refinement_delta,
        "band": band,
        "abs_difference": diff,
        "passed": bool(diff <= band),
        "paths": coarse.paths,
        "dt": config.dt,
        "measure": config.measure,
        "seed": int(config.seed),
        "clamped_lookup_fraction":
            coarse.diagnostics["clamped_lookup_fraction"],
    }


def dump_paths_csv(bundle: PathBundle, path, limit: int = 100_000):
    """Optional per-path dump: one row per path with the terminal state
    and accumulators.  Refuses silently oversized dumps via the limit."""
    if bundle.paths > limit:
        raise MonteCarloError(
            "refusing to dump %d paths (limit %d)" % (bundle.paths, limit))
    import csv

    n = bundle.x_final.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["path"] + ["x_final_%d" % i for i in range(n)] + ["int_g"]
        if bundle.log_chi is not None:
            header.append("log_chi")
        if bundle.log_wealth is not None:
            header.append("log_wealth")
        header.append("jumps")
        writer.writerow(header)
        for i in range(bundle.paths):
            row = [i] + [repr(v) for v in bundle.x_final[i]] \
                + [repr(float(bundle.int_g[i]))]
            if bundle.log_chi is not None:
                row.append(repr(float(bundle.log_chi[i])))
            if bundle.log_wealth is not None:
                row.append(repr(float(bundle.log_wealth[i])))
            row.append(int(bundle.jump_counts[i].sum())
                       if bundle.jump_counts.size else 0)
            writer.writerow(row)
