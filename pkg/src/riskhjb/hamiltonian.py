"""Running-cost function g, drifts f and f_a, the auxiliary functional ell,
and the constrained convex minimization that defines the candidate optimal
allocation.

Scale conventions. The transformed-scale Hamiltonian is
    H_a(t, x, r, p) = inf_h { f_a(t,x,h)'p + theta g(t,x,h) r },   r > 0,
with r the transformed value u and p its spatial gradient Du. The
untransformed-scale problem is min_h ell(h; x, q) at gradient q. For r > 0
the two have the same minimizer under q = -p / (theta r): on models that pass
validation (one-of-two-marks atoms) ell(h; x, q) = g(t,x,h) + a0(t,x)
+ theta h' Sigma Lambda' q exactly, so the objectives differ by an
h-independent affine rescaling. minimize_ell is the shared core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .model import MarketModel, interior_point


class HamiltonianError(RuntimeError):
    pass


class InfeasibleControl(HamiltonianError):
    """An allocation violates 1 + h'gamma_j > 0 for some atom."""


class NonConvergence(HamiltonianError):
    pass


class InfeasibleProblem(HamiltonianError):
    """The feasible region has no strictly feasible point."""


@dataclass(frozen=True)
class HamiltonianInputs:
    """Evaluation point on the transformed scale: value r = u(t,x) > 0 and
    spatial gradient p = Du(t,x)."""

    t: float
    x: np.ndarray
    r: float
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "p", np.atleast_1d(np.asarray(self.p, dtype=float)))


@dataclass
class MinimizerResult:
    h_star: np.ndarray
    objective: float
    kkt_residual: float
    active_set: tuple
    jump_margin: float
    iterations: int


def _pow_bracket(s, theta):
    """(1+s)^(-theta) - 1, stable near s = 0."""
    return np.expm1(-theta * np.log1p(s))


def _jump_margins(model: MarketModel, h):
    """1 + h'gamma_j per asset atom; shape (..., num_asset_atoms)."""
    atoms = [a for a in model.nu.atoms if a.gamma is not None and np.any(a.gamma != 0.0)]
    if not atoms:
        return np.ones(np.asarray(h, dtype=float).shape[:-1] + (0,))
    G = np.stack([a.gamma for a in atoms], axis=-1)  # (m, J)
    return 1.0 + np.asarray(h, dtype=float) @ G


def _require_feasible_jumps(model: MarketModel, h):
    margins = _jump_margins(model, h)
    if margins.size and np.any(margins <= 0.0):
        raise InfeasibleControl("1 + h'gamma <= 0 for some atom")
    return margins


def g(t, x, h, model: MarketModel):
    """Running cost of the criterion:
    g = (theta+1)/2 h'SS'h - a0 - h'ahat
        + sum_j lambda_j { (1/theta)[(1+h'gamma_j)^(-theta) - 1] + h'gamma_j }.
    Batched over leading axes of x and h."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    _require_feasible_jumps(model, h)
    theta = model.theta
    Sig = model.assets.Sigma(t, x)
    Sh = np.einsum("...jk,...j->...k", Sig, h)
    quad = 0.5 * (theta + 1.0) * np.einsum("...k,...k->...", Sh, Sh)
    out = quad - model.assets.a0(t, x) - np.einsum("...j,...j->...", h, model.ahat(t, x))
    for atom in model.nu.atoms:
        gam = atom.gamma
        if gam is None or not np.any(gam != 0.0):
            continue
        s = h @ gam
        out = out + atom.weight * (_pow_bracket(s, theta) / theta + s)
    return out


def f(t, x, h, model: MarketModel):
    """Factor drift after the control-absorbing change of measure:
    f = b - theta Lambda Sigma' h + sum_j lambda_j xi_j [(1+h'gamma_j)^(-theta) - 1].
    The sum vanishes identically on validated models (one-of-two-marks)."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    _require_feasible_jumps(model, h)
    theta = model.theta
    Lam = model.factor.Lambda(t, x)
    Sig = model.assets.Sigma(t, x)
    Sh = np.einsum("...jk,...j->...k", Sig, h)
    out = model.factor.b(t, x) - theta * np.einsum("...ik,...k->...i", Lam, Sh)
    for atom in model.nu.atoms:
        if atom.xi is None:
            continue
        gam = atom.gamma_vec(model.m)
        bracket = _pow_bracket(h @ gam, theta)
        out = out + atom.weight * atom.xi(t, x) * bracket[..., None]
    return out


def f_a(t, x, h, model: MarketModel):
    """f minus the factor-jump compensator: f_a = f - sum_j lambda_j xi_j."""
    return f(t, x, h, model) - model.xi_sum(t, x)


def ell(h, inputs: HamiltonianInputs, model: MarketModel):
    """Auxiliary functional. Here inputs.p is read on the untransformed
    scale (a gradient of Phi, not of u; inputs.r is not used):
    ell = (theta+1)/2 h'SS'h + theta h'Sigma Lambda' p - h'ahat
          + (1/theta) sum_j lambda_j { (1 - theta xi_j'p)[(1+h'gamma_j)^(-theta) - 1]
                                       + theta h'gamma_j }."""
    return ell_at(h, inputs.t, inputs.x, inputs.p, model)


def ell_at(h, t, x, q, model: MarketModel):
    """ell with the untransformed-scale gradient q passed directly; batched
    over leading axes."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    q = np.asarray(q, dtype=float)
    _require_feasible_jumps(model, h)
    theta = model.theta
    Sig = model.assets.Sigma(t, x)
    Lam = model.factor.Lambda(t, x)
    Sh = np.einsum("...jk,...j->...k", Sig, h)
    Lq = np.einsum("...ik,...i->...k", Lam, q)
    out = (0.5 * (theta + 1.0) * np.einsum("...k,...k->...", Sh, Sh)
           + theta * np.einsum("...k,...k->...", Sh, Lq)
           - np.einsum("...j,...j->...", h, model.ahat(t, x)))
    for atom in model.nu.atoms:
        gam = atom.gamma_vec(model.m)
        s = h @ gam
        w = 1.0 - theta * np.einsum("...i,...i->...", atom.xi_at(t, x, model.n), q)
        out = out + (atom.weight / theta) * (w * _pow_bracket(s, theta) + theta * s)
    return out


class _EllProblem:
    """ell(.; x, q) at a batch of points, with analytic gradient and Hessian.

    value(h)  = 1/2 (theta+1) h'SS h + c'h
                + sum_j (lambda_j w_j / theta) [(1+h'gamma_j)^(-theta) - 1]
    with c = theta Sigma Lambda' q - ahat + sum_j lambda_j gamma_j and
    w_j = 1 - theta xi_j'q. Only atoms with a nonzero gamma contribute to the
    nonlinear part. On validated models w_j = 1 there, so the nonlinear part
    is a convex barrier-like term that blows up at the 1 + h'gamma = 0 wall.
    """

    def __init__(self, t, x, q, model: MarketModel):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        self.B, self.m = x.shape[0], model.m
        self.theta = model.theta
        Sig = model.assets.Sigma(t, x)          # (B, m, M)
        Lam = model.factor.Lambda(t, x)         # (B, n, M)
        self.SS = Sig @ np.swapaxes(Sig, -1, -2)
        SL = Sig @ np.swapaxes(Lam, -1, -2)     # (B, m, n)
        self.c = (self.theta * np.einsum("bmn,bn->bm", SL, q) - model.ahat(t, x))
        self.gammas = []
        self.coefs = []                          # lambda_j w_j / theta, shape (B,)
        for atom in model.nu.atoms:
            gam = atom.gamma_vec(model.m)
            if np.any(gam != 0.0):
                w = 1.0 - self.theta * np.einsum("bi,bi->b", atom.xi_at(t, x, model.n), q)
                self.gammas.append(gam)
                self.coefs.append(atom.weight * w / self.theta)
            self.c = self.c + atom.weight * gam
        self.G = (np.stack(self.gammas, axis=0) if self.gammas
                  else np.zeros((0, self.m)))    # (J, m)

    def _s(self, h):
        """h'gamma_j per nonlinear atom, shape (B, J)."""
        return h @ self.G.T if self.gammas else np.zeros(h.shape[:-1] + (0,))

    def margins(self, h):
        return 1.0 + self._s(h)

    def value(self, h):
        out = (0.5 * (self.theta + 1.0) * np.einsum("bi,bij,bj->b", h, self.SS, h)
               + np.einsum("bi,bi->b", self.c, h))
        if self.gammas:
            s = self._s(h)
            bad = np.any(s <= -1.0, axis=-1)
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                brackets = _pow_bracket(np.maximum(s, -1.0 + 1e-300), self.theta)
            for j, coef in enumerate(self.coefs):
                out = out + coef * brackets[:, j]
            out = np.where(bad, np.inf, out)
        return out

    def grad(self, h):
        out = (self.theta + 1.0) * np.einsum("bij,bj->bi", self.SS, h) + self.c
        if self.gammas:
            s = self._s(h)
            pw = np.exp((-self.theta - 1.0) * np.log1p(s))
            for j, (gam, coef) in enumerate(zip(self.gammas, self.coefs)):
                out = out - (self.theta * coef * pw[:, j])[:, None] * gam
        return out

    def hess(self, h):
        out = np.broadcast_to((self.theta + 1.0) * self.SS,
                              (h.shape[0], self.m, self.m)).copy()
        if self.gammas:
            s = self._s(h)
            pw = np.exp((-self.theta - 2.0) * np.log1p(s))
            for j, (gam, coef) in enumerate(zip(self.gammas, self.coefs)):
                scale = self.theta * (self.theta + 1.0) * coef * pw[:, j]
                out = out + scale[:, None, None] * np.outer(gam, gam)
        return out

    def single(self, b: int):
        """View of entry b as a batch of one (cheap, shares arrays)."""
        return self.subset(np.array([b]))

    def subset(self, idx):
        """Sub-batch view at the given row indices (cheap)."""
        sub = object.__new__(_EllProblem)
        sub.B, sub.m, sub.theta = len(idx), self.m, self.theta
        sub.SS = self.SS[idx]
        sub.c = self.c[idx]
        sub.gammas = self.gammas
        sub.coefs = [np.asarray(cf)[idx] for cf in self.coefs]
        sub.G = self.G
        return sub


def _fraction_to_boundary(problem: _EllProblem, h, d, frac=0.995):
    """Largest step factor keeping all jump margins strictly positive."""
    if not problem.gammas:
        return np.ones(h.shape[0])
    marg = problem.margins(h)
    dm = d @ problem.G.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dm < 0.0, -frac * marg / dm, np.inf)
    return np.minimum(1.0, ratio.min(axis=-1))


def _newton_batch(problem: _EllProblem, h0, tol, max_iter=60):
    """Damped Newton on the unconstrained-in-polytope problem, vectorized
    over the batch. The jump term's own singular gradient acts as the
    barrier; steps are damped to stay strictly inside. Rows that reach the
    tolerance are retired from the working set, and the backtracking line
    search only re-evaluates rows that still fail the sufficient-decrease
    test."""
    h = np.array(h0, dtype=float)
    work = np.arange(problem.B)
    iters = 0
    for _ in range(max_iter):
        iters += 1
        sub = problem.subset(work)
        hw = h[work]
        grd = sub.grad(hw)
        keep = np.abs(grd).max(axis=-1) > tol
        if not keep.any():
            break
        if not keep.all():
            work, sub, hw, grd = work[keep], sub.subset(np.nonzero(keep)[0]), \
                hw[keep], grd[keep]
        hes = sub.hess(hw)
        try:
            d = -np.linalg.solve(hes, grd[..., None])[..., 0]
        except np.linalg.LinAlgError:
            reg = hes + 1e-10 * np.eye(problem.m)
            d = -np.linalg.solve(reg, grd[..., None])[..., 0]
        descent = np.einsum("bi,bi->b", grd, d)
        uphill = descent > 0.0
        if np.any(uphill):
            d[uphill] = -grd[uphill]
            descent = np.einsum("bi,bi->b", grd, d)
        alpha = _fraction_to_boundary(sub, hw, d)
        val = sub.value(hw)
        trial = hw + alpha[:, None] * d
        tval = sub.value(trial)
        need = (tval > val + 1e-4 * alpha * descent) \
            & (tval - val > 8e-16 * np.abs(val))
        for _ in range(40):
            if not need.any():
                break
            alpha[need] *= 0.5
            rows = np.nonzero(need)[0]
            trial[rows] = hw[rows] + alpha[rows, None] * d[rows]
            tval[rows] = sub.subset(rows).value(trial[rows])
            # an "increase" below roundoff scale is not a failed step
            need[rows] = (tval[rows] > val[rows]
                          + 1e-4 * alpha[rows] * descent[rows]) \
                & (tval[rows] - val[rows] > 8e-16 * np.abs(val[rows])) \
                & (alpha[rows] > 1e-14)
        h[work] = trial
        # rows whose accepted step no longer moves them are at the limit of
        # floating-point resolution; keeping them active only burns sweeps
        moved = np.abs(trial - hw).max(axis=-1)
        stalled = moved <= 1e-14 * (1.0 + np.abs(hw).max(axis=-1))
        if stalled.any():
            work = work[~stalled]
            if work.size == 0:
                break
    return h, iters


def minimize_ell_batch(t, x, q, model: MarketModel, tol=1e-8, init=None):
    """argmin_h ell(h; x, q) over the feasible region at a batch of points.

    Returns (h, info) with info carrying per-point kkt residual, margins and
    a mask of points handled by the per-point active-set fallback. Points
    whose polytope rows activate are re-solved individually; everything else
    runs through the vectorized Newton path.
    """
    problem = _EllProblem(t, x, q, model)
    B, m = problem.B, problem.m
    U, v = model.constraints.Upsilon, model.constraints.upsilon
    if init is None:
        h0 = np.zeros((B, m))
        if np.any(h0[0] @ U > v):
            center, _ = interior_point(model.constraints, problem.gammas)
            if center is None:
                raise InfeasibleProblem("constraint region has no strict interior")
            h0 = np.tile(center, (B, 1))
    else:
        h0 = np.array(init, dtype=float).reshape(B, m)
        bad = np.any(problem.margins(h0) <= 0.0, axis=-1) | np.any(h0 @ U > v, axis=-1)
        if np.any(bad):
            h0[bad] = 0.0
    h, iters = _newton_batch(problem, h0, tol=0.1 * tol)
    viol = np.any(h @ U > v + 1e-12, axis=-1)
    kkt = np.abs(problem.grad(h)).max(axis=-1)
    if np.any(viol):
        for b in np.nonzero(viol)[0]:
            res = _minimize_single(problem.single(int(b)), model.constraints, tol)
            h[b] = res.h_star
            kkt[b] = res.kkt_residual
    marg = problem.margins(h)
    info = {
        "kkt": kkt,
        "jump_margin": marg.min(axis=-1) if marg.shape[-1] else np.full(B, np.inf),
        "constrained": viol,
        "iterations": iters,
    }
    return h, info


def _kkt_pieces(problem: _EllProblem, constraints, h, active):
    """Stationarity/feasibility/complementarity residual for the polytope-
    constrained problem (jump constraints are strictly interior, multiplier
    zero)."""
    U, v = constraints.Upsilon, constraints.upsilon
    grd = problem.grad(h[None, :])[0]
    mu = np.zeros(U.shape[1])
    if active:
        cols = U[:, list(active)]
        mu_act, _ = nnls(cols, -grd)
        mu[list(active)] = mu_act
    stat = np.abs(grd + U @ mu).max()
    slack = v - h @ U
    feas = max(0.0, float(-slack.min())) if slack.size else 0.0
    comp = float(np.abs(mu * slack).max()) if slack.size else 0.0
    return max(stat, feas, comp), mu


def _minimize_single(problem: _EllProblem, constraints, tol, max_iter=100):
    """Per-point damped Newton with log-barrier continuation on the jump
    constraints and primal active-set handling of the polytope rows."""
    U, v = constraints.Upsilon, constraints.upsilon
    m, r = U.shape
    h = np.zeros(m)
    if np.any(h @ U > v):
        center, _ = interior_point(constraints, problem.gammas)
        if center is None:
            raise InfeasibleProblem("constraint region has no strict interior")
        h = np.asarray(center, dtype=float)
    active = set(int(i) for i in np.nonzero(h @ U >= v - 1e-12)[0])
    mus = [1e-2, 1e-5, 0.0] if problem.gammas else [0.0]
    total_iters = 0

    def val_g_h(hh, mu_bar):
        grd = problem.grad(hh[None, :])[0]
        hes = problem.hess(hh[None, :])[0]
        if mu_bar > 0.0 and problem.gammas:
            marg = problem.margins(hh[None, :])[0]
            grd = grd - mu_bar * (problem.G / marg[:, None]).sum(axis=0)
            hes = hes + mu_bar * np.einsum("ji,jk->ik", problem.G / (marg ** 2)[:, None],
                                           problem.G)
        return grd, hes

    def value_mu(hh, mu_bar):
        vv = problem.value(hh[None, :])[0]
        if mu_bar > 0.0 and problem.gammas:
            marg = problem.margins(hh[None, :])[0]
            if np.any(marg <= 0.0):
                return np.inf
            vv = vv - mu_bar * np.log(marg).sum()
        return vv

    for mu_bar in mus:
        # barrier stages only warm-start; reserve budget for the exact stage
        stage_cap = max_iter if mu_bar == 0.0 else 20
        for _ in range(stage_cap):
            if total_iters >= max_iter:
                break
            total_iters += 1
            grd, hes = val_g_h(h, mu_bar)
            act = sorted(active)
            if act:
                Ua = U[:, act]
                K = np.block([[hes, Ua], [Ua.T, np.zeros((len(act), len(act)))]])
                rhs = np.concatenate([-grd, np.zeros(len(act))])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
                d, lam = sol[:m], sol[m:]
            else:
                try:
                    d = np.linalg.solve(hes, -grd)
                except np.linalg.LinAlgError:
                    d = np.linalg.solve(hes + 1e-10 * np.eye(m), -grd)
                lam = np.zeros(0)
            if np.abs(d).max() <= 1e-14 or np.abs(grd + (U[:, act] @ lam if act else 0.0)).max() <= 0.05 * tol:
                if act and lam.size and lam.min() < -1e-12:
                    active.discard(act[int(np.argmin(lam))])
                    continue
                break
            # blocking polytope rows among the inactive ones
            alpha = 1.0
            blocker = None
            for i in range(r):
                if i in active:
                    continue
                di = float(U[:, i] @ d)
                if di > 1e-14:
                    ai = max(0.0, float(v[i] - h @ U[:, i])) / di
                    if ai < alpha:
                        alpha, blocker = ai, i
            alpha = min(alpha, float(_fraction_to_boundary(problem, h[None, :], d[None, :])[0]))
            base = value_mu(h, mu_bar)
            descent = float(grd @ d)
            step = alpha
            hit = blocker is not None and step == alpha
            for _ in range(50):
                tv = value_mu(h + step * d, mu_bar)
                # an "increase" below roundoff scale is not a failed step
                if (tv <= base + 1e-4 * step * descent
                        or tv - base <= 8e-16 * abs(base) or step < 1e-16):
                    break
                step *= 0.5
                hit = False
            h = h + step * d
            if hit and blocker is not None:
                active.add(blocker)
            elif step * np.abs(d).max() <= 1e-14 * (1.0 + np.abs(h).max()):
                break   # below floating-point resolution at this mu
    kkt, mu = _kkt_pieces(problem, constraints, h, active)
    marg = problem.margins(h[None, :])[0]
    return MinimizerResult(
        h_star=h,
        objective=float(problem.value(h[None, :])[0]),
        kkt_residual=float(kkt),
        active_set=tuple(sorted(i for i in active if mu[i] > 1e-12 or
                                abs(float(h @ U[:, i] - v[i])) <= 1e-10)),
        jump_margin=float(marg.min()) if marg.size else np.inf,
        iterations=total_iters,
    )


def minimize_ell(t, x, q, model: MarketModel, tol=1e-8) -> MinimizerResult:
    """Unique minimizer of ell(.; x, q) over the feasible region at one point."""
    problem = _EllProblem(t, np.atleast_2d(x), np.atleast_2d(q), model)
    res = _minimize_single(problem, model.constraints, tol)
    if res.kkt_residual > tol:
        raise NonConvergence(
            f"KKT residual {res.kkt_residual:.3g} above tolerance {tol:.3g} "
            f"after {res.iterations} iterations")
    return res


def minimize_ell_constrained(t, x, q, model: MarketModel, constraints,
                             tol=1e-8) -> MinimizerResult:
    """minimize_ell against a caller-supplied polytope (model coefficients,
    custom rows). Used where extra affine restrictions must be imposed on top
    of the model's own trading constraints."""
    problem = _EllProblem(t, np.atleast_2d(x), np.atleast_2d(q), model)
    return _minimize_single(problem, constraints, tol)


def minimize_hamiltonian(inputs: HamiltonianInputs, model: MarketModel,
                         tol=1e-8) -> MinimizerResult:
    """Minimizer of h -> f_a(t,x,h)'p + theta g(t,x,h) r over the feasible
    region, r > 0, computed through the equivalent ell-problem at
    q = -p / (theta r)."""
    if not inputs.r > 0.0:
        raise HamiltonianError("transformed value r must be positive")
    q = -inputs.p / (model.theta * inputs.r)
    return minimize_ell(inputs.t, inputs.x, q, model, tol=tol)


def H_a(inputs: HamiltonianInputs, model: MarketModel, tol=1e-8) -> float:
    """inf_h { f_a(t,x,h)'p + theta g(t,x,h) r } assembled at the minimizer."""
    res = minimize_hamiltonian(inputs, model, tol=tol)
    fa = f_a(inputs.t, inputs.x, res.h_star, model)
    gg = g(inputs.t, inputs.x, res.h_star, model)
    return float(fa @ inputs.p + model.theta * gg * inputs.r)
