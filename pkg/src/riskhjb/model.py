"""Market model declaration and validation.

Factor dynamics, asset dynamics, a finite-activity jump measure, affine
portfolio constraints and the risk-aversion parameter are bundled into an
immutable MarketModel. Coefficient functions are restricted to three
parametric families (constant / affine / affine with saturation caps) so that
boundedness and Lipschitz continuity hold by construction rather than by
user promise.

Conventions used throughout the package:
  n        factor dimension, m number of risky assets, M = m + n Brownians
  b        factor drift, R^n            Lambda  factor loadings, R^(n x M)
  a0       short rate, scalar           a       risky growth rates, R^m
  Sigma    asset loadings, R^(m x M)    ahat = a - a0 * 1
  atoms    weighted jump atoms; each moves either the factors (xi) or the
           assets (gamma), never both
  Upsilon' h <= upsilon                 affine allocation constraints
  1 + h' gamma_j > 0 for every atom     no-bankruptcy jump condition
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import qmc


class ModelError(ValueError):
    """Base class for model construction/validation failures."""


class DimensionMismatch(ModelError):
    pass


class EllipticityViolation(ModelError):
    pass


class SimultaneousJump(ModelError):
    pass


class EmptyConstraintInterior(ModelError):
    pass


CONSTANT = "constant"
AFFINE = "affine"
AFFINE_SATURATED = "affine_saturated"
_FAMILIES = (CONSTANT, AFFINE, AFFINE_SATURATED)


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CoefficientFn:
    """Coefficient of the state, one of three families.

    value(t, x) = const                              (constant)
                = const + slope . x                  (affine)
                = clip(const + slope . x, lo, hi)    (affine_saturated)

    `const` fixes the output shape (scalar, vector or matrix); `slope` has
    that shape plus a trailing state axis. Evaluation is total on
    [0, T] x R^n and broadcasts over leading batch axes of x. The families
    carry no time dependence; t is accepted for signature stability.
    """

    family: str
    const: np.ndarray
    slope: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ModelError(f"unknown coefficient family {self.family!r}")
        object.__setattr__(self, "const", _frozen(self.const))
        if self.family == CONSTANT:
            if self.slope is not None:
                raise ModelError("constant family takes no slope")
        else:
            if self.slope is None:
                raise ModelError(f"{self.family} family requires a slope")
            slope = _frozen(self.slope)
            if slope.shape[:-1] != self.const.shape:
                raise DimensionMismatch(
                    f"slope shape {slope.shape} does not extend const shape "
                    f"{self.const.shape} by one state axis")
            object.__setattr__(self, "slope", slope)
        if self.family == AFFINE_SATURATED:
            if self.lo is None or self.hi is None:
                raise ModelError("affine_saturated family requires lo and hi caps")
            lo, hi = _frozen(self.lo), _frozen(self.hi)
            if lo.shape != self.const.shape or hi.shape != self.const.shape:
                raise DimensionMismatch("saturation caps must match the output shape")
            if not np.all(lo <= hi):
                raise ModelError("saturation caps must satisfy lo <= hi")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        elif self.lo is not None or self.hi is not None:
            raise ModelError("saturation caps only apply to affine_saturated")

    @property
    def shape(self) -> tuple:
        return self.const.shape

    @property
    def state_dim(self) -> Optional[int]:
        return None if self.slope is None else self.slope.shape[-1]

    def __call__(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        if self.slope is None:
            return np.broadcast_to(self.const, batch + self.shape).copy()
        flat_slope = self.slope.reshape(-1, self.slope.shape[-1])
        # asarray: scalar-shaped output at a single point decays to np.float64
        out = np.asarray((x @ flat_slope.T).reshape(batch + self.shape) + self.const)
        if self.family == AFFINE_SATURATED:
            np.clip(out, self.lo, self.hi, out=out)
        return out

    def lipschitz_constant(self) -> float:
        """Global Lipschitz constant in x (clipping is 1-Lipschitz)."""
        if self.slope is None:
            return 0.0
        flat = self.slope.reshape(-1, self.slope.shape[-1])
        return float(np.linalg.norm(flat, 2))

    def bound(self, box: np.ndarray) -> float:
        """sup |value| over the box [lo_i, hi_i]^n (componentwise max abs)."""
        if self.slope is None:
            return float(np.max(np.abs(self.const))) if self.const.size else 0.0
        box = np.asarray(box, dtype=float)
        flat = self.slope.reshape(-1, box.shape[0])
        c = self.const.reshape(-1)
        center = flat @ box.mean(axis=1) + c
        radius = np.abs(flat) @ (0.5 * (box[:, 1] - box[:, 0]))
        hi = center + radius
        lo = center - radius
        if self.family == AFFINE_SATURATED:
            hi = np.minimum(hi, self.hi.reshape(-1))
            lo = np.maximum(lo, self.lo.reshape(-1))
        return float(np.max(np.maximum(np.abs(hi), np.abs(lo)))) if c.size else 0.0


def constant(value) -> CoefficientFn:
    return CoefficientFn(CONSTANT, np.asarray(value, dtype=float))


def affine(const, slope) -> CoefficientFn:
    return CoefficientFn(AFFINE, np.asarray(const, dtype=float), np.asarray(slope, dtype=float))


def affine_saturated(const, slope, lo, hi) -> CoefficientFn:
    return CoefficientFn(AFFINE_SATURATED, np.asarray(const, dtype=float),
                         np.asarray(slope, dtype=float), np.asarray(lo, dtype=float),
                         np.asarray(hi, dtype=float))


@dataclass(frozen=True)
class JumpAtom:
    """One weighted jump atom: intensity, an asset mark gamma in R^m and a
    factor mark xi(t, x) in R^n. A well-formed atom carries exactly one
    nonzero mark; validation flags violations, construction does not."""

    weight: float
    gamma: Optional[np.ndarray] = None
    xi: Optional[CoefficientFn] = None

    def __post_init__(self):
        if self.weight <= 0 or not np.isfinite(self.weight):
            raise ModelError("atom weight must be a positive finite intensity")
        if self.gamma is not None:
            object.__setattr__(self, "gamma", _frozen(self.gamma))

    def gamma_vec(self, m: int) -> np.ndarray:
        return np.zeros(m) if self.gamma is None else self.gamma

    def xi_at(self, t, x, n: int) -> np.ndarray:
        if self.xi is None:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape[:-1] + (n,))
        return self.xi(t, x)

    def moves_assets(self) -> bool:
        return self.gamma is not None and bool(np.any(self.gamma != 0.0))

    def moves_factors(self) -> bool:
        if self.xi is None:
            return False
        if np.any(self.xi.const != 0.0):
            return True
        return self.xi.slope is not None and bool(np.any(self.xi.slope != 0.0))


@dataclass(frozen=True)
class JumpMeasure:
    """Finite-activity jump measure: weighted atoms, all compensated.

    gamma_low/gamma_high optionally declare the per-asset mark hypercube; when
    declared it must contain every atom and straddle zero strictly.
    """

    atoms: tuple
    gamma_low: Optional[np.ndarray] = None
    gamma_high: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        for name in ("gamma_low", "gamma_high"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(v))

    @property
    def total_intensity(self) -> float:
        return float(sum(a.weight for a in self.atoms))

    def factor_atoms(self) -> list:
        return [a for a in self.atoms if a.moves_factors()]

    def asset_atoms(self) -> list:
        return [a for a in self.atoms if a.moves_assets()]


@dataclass(frozen=True)
class FactorModel:
    n: int
    b: CoefficientFn
    Lambda: CoefficientFn


@dataclass(frozen=True)
class AssetModel:
    m: int
    a0: CoefficientFn
    a: CoefficientFn
    Sigma: CoefficientFn


@dataclass(frozen=True)
class ConstraintSet:
    """Affine allocation constraints Upsilon' h <= upsilon, Upsilon in R^(m x r)."""

    Upsilon: np.ndarray
    upsilon: np.ndarray

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.Upsilon, dtype=float))
        v = np.atleast_1d(np.asarray(self.upsilon, dtype=float))
        if U.shape[1] != v.shape[0]:
            raise DimensionMismatch(
                f"Upsilon has {U.shape[1]} columns but upsilon has {v.shape[0]} entries")
        object.__setattr__(self, "Upsilon", _frozen(U))
        object.__setattr__(self, "upsilon", _frozen(v))

    @property
    def r(self) -> int:
        return self.Upsilon.shape[1]


@dataclass(frozen=True)
class MarketModel:
    """Immutable bundle of market coefficients; validate before solving."""

    factor: FactorModel
    assets: AssetModel
    nu: JumpMeasure
    constraints: ConstraintSet
    theta: float
    T: float

    def __post_init__(self):
        if not (self.theta > 0 and np.isfinite(self.theta)):
            raise ModelError("theta must lie in (0, inf)")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ModelError("horizon T must be positive")

    @property
    def n(self) -> int:
        return self.factor.n

    @property
    def m(self) -> int:
        return self.assets.m

    @property
    def brownian_dim(self) -> int:
        return self.m + self.n

    def ahat(self, t, x) -> np.ndarray:
        a = self.assets.a(t, x)
        a0 = self.assets.a0(t, x)
        return a - a0[..., None]

    def gamma_matrix(self) -> np.ndarray:
        """(num_atoms, m) matrix of asset marks (zero rows for factor atoms)."""
        return np.array([a.gamma_vec(self.m) for a in self.nu.atoms]).reshape(
            len(self.nu.atoms), self.m)

    def weights(self) -> np.ndarray:
        return np.array([a.weight for a in self.nu.atoms])

    def xi_sum(self, t, x) -> np.ndarray:
        """sum_j lambda_j xi_j(t, x), the factor-jump compensator drift."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n,))
        for atom in self.nu.atoms:
            if atom.xi is not None:
                out = out + atom.weight * atom.xi(t, x)
        return out


@dataclass(frozen=True)
class ProbeSpec:
    """Sampling plan for the probe-based assumption checks: an axis-aligned
    box, optional explicit probe points (e.g. solver lattice nodes) and a
    count of quasi-random fill-in points."""

    box: np.ndarray
    points: Optional[np.ndarray] = None
    n_random: int = 1000
    seed: int = 0

    def __post_init__(self):
        box = np.atleast_2d(np.asarray(self.box, dtype=float))
        if box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
            raise ModelError("probe box must be rows of strictly ordered [lo, hi]")
        object.__setattr__(self, "box", _frozen(box))
        if self.points is not None:
            object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, float)))

    def sample(self) -> np.ndarray:
        n = self.box.shape[0]
        sampler = qmc.Halton(d=n, scramble=True, seed=self.seed)
        pts = qmc.scale(sampler.random(self.n_random), self.box[:, 0], self.box[:, 1])
        if self.points is not None:
            pts = np.vstack([self.points, pts])
        return pts


def default_probe_spec(model: MarketModel, half_width: float = 2.0) -> ProbeSpec:
    box = np.tile([[-half_width, half_width]], (model.n, 1))
    return ProbeSpec(box=box)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    min_eig_factor: float = np.nan
    min_eig_asset: float = np.nan

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append(CheckResult(name, bool(passed), detail))

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "min_eig_factor_diffusion": self.min_eig_factor,
            "min_eig_asset_diffusion": self.min_eig_asset,
        }


_FAILURE_EXC = {
    "factor-ellipticity": EllipticityViolation,
    "asset-ellipticity": EllipticityViolation,
    "no-simultaneous-jumps": SimultaneousJump,
    "constraint-interior": EmptyConstraintInterior,
}


def _check_dimensions(model: MarketModel, rep: ValidationReport):
    n, m, M = model.n, model.m, model.brownian_dim
    expect = [
        ("factor drift b", model.factor.b, (n,)),
        ("factor loading Lambda", model.factor.Lambda, (n, M)),
        ("short rate a0", model.assets.a0, ()),
        ("growth rates a", model.assets.a, (m,)),
        ("asset loading Sigma", model.assets.Sigma, (m, M)),
    ]
    for label, fn, shape in expect:
        if fn.shape != shape:
            raise DimensionMismatch(f"{label} has shape {fn.shape}, expected {shape}")
        if fn.state_dim is not None and fn.state_dim != n:
            raise DimensionMismatch(f"{label} slope state axis {fn.state_dim} != n = {n}")
    for k, atom in enumerate(model.nu.atoms):
        if atom.gamma is not None and atom.gamma.shape != (m,):
            raise DimensionMismatch(f"atom {k} gamma has shape {atom.gamma.shape}, expected ({m},)")
        if atom.xi is not None:
            if atom.xi.shape != (n,):
                raise DimensionMismatch(f"atom {k} xi has shape {atom.xi.shape}, expected ({n},)")
            if atom.xi.state_dim is not None and atom.xi.state_dim != n:
                raise DimensionMismatch(f"atom {k} xi slope state axis != n")
    if model.constraints.Upsilon.shape[0] != m:
        raise DimensionMismatch(
            f"Upsilon has {model.constraints.Upsilon.shape[0]} rows, expected m = {m}")
    rep.add("dimension-agreement", True, f"n={n}, m={m}, brownian_dim={M}")


def _min_eig_over_probes(fn: CoefficientFn, pts: np.ndarray) -> float:
    vals = fn(0.0, pts)                      # (P, k, M)
    gram = vals @ np.swapaxes(vals, -1, -2)  # (P, k, k)
    eigs = np.linalg.eigvalsh(gram)
    return float(eigs[..., 0].min())


def interior_point(constraints: ConstraintSet, gammas: Sequence[np.ndarray] = (),
                   min_margin: float = 1e-9):
    """Strictly feasible allocation, or None when the region has no interior.

    Maximizes the common normalized slack s over Upsilon'h + s |row| <= upsilon
    and -h'gamma_j + s |gamma_j| <= 1, a Chebyshev-center style LP. Returns
    (h, s); s <= min_margin means no interior.
    """
    U, v = constraints.Upsilon, constraints.upsilon
    m = U.shape[0]
    rows = [U.T]
    rhs = [v]
    for gam in gammas:
        gam = np.asarray(gam, dtype=float)
        if np.any(gam != 0.0):
            rows.append(-gam[None, :])
            rhs.append(np.array([1.0]))
    A = np.vstack(rows) if rows else np.zeros((0, m))
    bvec = np.concatenate(rhs) if rhs else np.zeros(0)
    norms = np.linalg.norm(A, axis=1)
    norms[norms == 0.0] = 1.0
    A_lp = np.hstack([A, norms[:, None]])
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_lp, b_ub=bvec,
                  bounds=[(None, None)] * m + [(None, 1.0)], method="highs")
    if not res.success:
        return None, -np.inf
    h, s = res.x[:m], res.x[-1]
    if s <= min_margin:
        return None, float(s)
    return h, float(s)


def validate_model(model: MarketModel, probe_spec: Optional[ProbeSpec] = None) -> ValidationReport:
    """Run every assumption check; the report lists each with pass/fail.

    Structural shape disagreement raises DimensionMismatch immediately (the
    remaining probes would be meaningless); semantic failures are collected in
    the report so callers can serialize it.
    """
    rep = ValidationReport()
    _check_dimensions(model, rep)
    if probe_spec is None:
        probe_spec = default_probe_spec(model)
    pts = probe_spec.sample()

    rep.min_eig_factor = _min_eig_over_probes(model.factor.Lambda, pts)
    rep.add("factor-ellipticity", rep.min_eig_factor > 0.0,
            f"min eigenvalue of Lambda Lambda' over {len(pts)} probes: {rep.min_eig_factor:.6g}")
    rep.min_eig_asset = _min_eig_over_probes(model.assets.Sigma, pts)
    rep.add("asset-ellipticity", rep.min_eig_asset > 0.0,
            f"min eigenvalue of Sigma Sigma' over {len(pts)} probes: {rep.min_eig_asset:.6g}")

    bad = [k for k, atom in enumerate(model.nu.atoms)
           if atom.moves_assets() and atom.moves_factors()]
    rep.add("no-simultaneous-jumps", not bad,
            "each atom moves either factors or assets" if not bad
            else f"atoms {bad} carry both a nonzero gamma and a nonzero xi")

    gammas = model.gamma_matrix() if model.nu.atoms else np.zeros((0, model.m))
    ok_range = bool(np.all(np.isfinite(gammas)) and np.all(gammas >= -1.0))
    detail = "all asset marks finite and >= -1"
    if not ok_range:
        detail = "an asset mark is below -1 or non-finite"
    if ok_range and model.nu.gamma_low is not None and model.nu.gamma_high is not None:
        lo, hi = model.nu.gamma_low, model.nu.gamma_high
        inside = np.all(gammas >= lo) and np.all(gammas <= hi) if gammas.size else True
        straddle = np.all(lo < 0.0) and np.all(hi > 0.0) and np.all(lo >= -1.0)
        ok_range = bool(inside and straddle)
        detail = ("declared mark hypercube contains all atoms and straddles zero"
                  if ok_range else "declared mark hypercube violated (coverage or zero straddle)")
    rep.add("jump-mark-range", ok_range, detail)

    h0, slack = interior_point(model.constraints, gammas)
    rep.add("constraint-interior", h0 is not None,
            f"strictly feasible point with normalized slack {slack:.3g}" if h0 is not None
            else f"no strictly feasible allocation (best slack {slack:.3g})")
    return rep


def assert_valid(model: MarketModel, probe_spec: Optional[ProbeSpec] = None) -> ValidationReport:
    """validate_model, raising the matching exception on the first failure."""
    rep = validate_model(model, probe_spec)
    for c in rep.failures():
        raise _FAILURE_EXC.get(c.name, ModelError)(f"{c.name}: {c.detail}")
    return rep


def feasible_region_membership(model: MarketModel, h, t: float = 0.0) -> bool:
    """True iff Upsilon'h <= upsilon and 1 + h'gamma_j > 0 for every atom.

    The polytope is closed (boundary allocations belong), the jump condition
    is open. Total on R^m; supports batched h of shape (..., m).
    """
    h = np.asarray(h, dtype=float)
    ok = np.all(h @ model.constraints.Upsilon <= model.constraints.upsilon, axis=-1)
    for atom in model.nu.atoms:
        if atom.gamma is not None:
            ok = ok & (1.0 + h @ atom.gamma > 0.0)
    return bool(ok) if ok.ndim == 0 else ok


def a0_sup_abs(model: MarketModel, box: np.ndarray) -> float:
    """sup |a0| over the box; scale constant of the value upper bound."""
    return model.assets.a0.bound(np.asarray(box, dtype=float))
