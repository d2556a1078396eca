"""Shared market instances for the test suite.

The same small zoo is reused across unit and acceptance tests:

- ``zero_market``     everything flat; transformed value identically one
- ``const_rate``      riskless rate only; value e^{-theta c (T-t)} exactly
- ``lgq_spec``/``lgq_market``  one-factor one-asset linear-Gaussian market
  realized on the box [-2, 2], where a Riccati integration gives the value
  in closed form
- ``jump1_market``    lgq plus a factor-shift atom and an asset-crash atom
- ``jump2_market``    two factors / two assets / two atoms
- ``skew_market``     near-risk-neutral market with state-dependent
  (saturated-affine) volatility so wealth returns are skewed
"""

import dataclasses

import numpy as np
import pytest

from riskhjb import model as M
from riskhjb import oracle as O

BOX_1D = np.array([[-2.0, 2.0]])
BOX_2D = np.array([[-2.0, 2.0], [-2.0, 2.0]])


def make_lgq_spec(theta=1.0):
    return O.LGQSpec(theta=theta, T=1.0,
                     b0=np.array([0.05]), B=np.array([[-0.5]]),
                     Lambda=np.array([[0.3, 0.0]]),
                     ahat0=np.array([0.04]), A=np.array([[0.15]]),
                     Sigma=np.array([[0.06, 0.19]]),
                     c0=0.02, c1=np.array([0.01]))


def make_lgq_market(theta=1.0):
    return O.lgq_to_market(make_lgq_spec(theta), BOX_1D)


JUMP1_ATOMS = (M.JumpAtom(weight=0.5, xi=M.constant([0.15])),
               M.JumpAtom(weight=0.3, gamma=np.array([-0.25])))


def make_jump1_market(theta=1.0):
    return dataclasses.replace(make_lgq_market(theta),
                               nu=M.JumpMeasure(atoms=JUMP1_ATOMS))


def make_jump2_market():
    a0 = M.affine_saturated(np.float64(0.03), np.array([0.008, 0.006]),
                            np.float64(0.03 - 3 * 0.028),
                            np.float64(0.03 + 3 * 0.028))
    return M.MarketModel(
        factor=M.FactorModel(
            n=2,
            b=M.affine([0.04, 0.03], np.diag([-0.5, -0.4])),
            Lambda=M.constant(np.array([[0.25, 0.0, 0.0, 0.0],
                                        [0.0, 0.2, 0.0, 0.0]]))),
        assets=M.AssetModel(
            m=2, a0=a0,
            a=M.affine(np.array([0.03, 0.025]) + 0.03,
                       np.array([[0.12, 0.03], [0.02, 0.10]])
                       + np.outer(np.ones(2), [0.008, 0.006])),
            Sigma=M.constant(np.array([[0.05, 0.01, 0.15, 0.0],
                                       [0.02, 0.04, 0.0, 0.12]]))),
        nu=M.JumpMeasure(atoms=(
            M.JumpAtom(weight=0.4, xi=M.constant([0.12, -0.1])),
            M.JumpAtom(weight=0.25, gamma=np.array([-0.2, 0.1])))),
        constraints=M.ConstraintSet(Upsilon=np.hstack([np.eye(2), -np.eye(2)]),
                                    upsilon=np.full(4, 30.0)),
        theta=1.0, T=1.0)


def make_skew_market(theta=0.01):
    """Zero-mean factor feeding the volatility: wealth returns are skewed,
    so the first two cumulants do not exhaust the objective."""
    return M.MarketModel(
        factor=M.FactorModel(n=1, b=M.affine([0.0], [[-0.5]]),
                             Lambda=M.constant([[0.3, 0.0]])),
        assets=M.AssetModel(m=1, a0=M.constant(0.02), a=M.constant([0.06]),
                            Sigma=M.affine_saturated([[0.2, 0.0]],
                                                     [[[0.08], [0.0]]],
                                                     [[0.02, 0.0]],
                                                     [[0.5, 0.0]])),
        nu=M.JumpMeasure(atoms=()),
        constraints=M.ConstraintSet(Upsilon=np.array([[1.0, -1.0]]),
                                    upsilon=np.array([30.0, 30.0])),
        theta=theta, T=1.0)


def make_zero_market():
    return M.MarketModel(
        factor=M.FactorModel(n=1, b=M.constant([0.0]),
                             Lambda=M.constant([[0.1, 0.0]])),
        assets=M.AssetModel(m=1, a0=M.constant(0.0), a=M.constant([0.0]),
                            Sigma=M.constant([[0.2, 0.0]])),
        nu=M.JumpMeasure(atoms=()),
        constraints=M.ConstraintSet(Upsilon=np.array([[1.0, -1.0]]),
                                    upsilon=np.array([1.0, 1.0])),
        theta=1.0, T=1.0)


def make_const_rate_market(c=0.03, theta=1.0):
    """No risky excess return (a = a0 = c): optimal h = 0 and the
    risk-sensitive value is c (T - t) independently of theta."""
    return M.MarketModel(
        factor=M.FactorModel(n=1, b=M.constant([0.0]),
                             Lambda=M.constant([[0.1, 0.0]])),
        assets=M.AssetModel(m=1, a0=M.constant(c), a=M.constant([c]),
                            Sigma=M.constant([[0.2, 0.0]])),
        nu=M.JumpMeasure(atoms=()),
        constraints=M.ConstraintSet(Upsilon=np.array([[1.0, -1.0]]),
                                    upsilon=np.array([1.0, 1.0])),
        theta=theta, T=1.0)


def random_feasible_instance(rng, m=None, n=1, with_jumps=True):
    """Small random market with a nonempty feasible interior, for oracle
    cross-checks of the Hamiltonian minimizer (m <= 2)."""
    m = int(rng.integers(1, 3)) if m is None else m
    bdim = n + m
    theta = float(rng.uniform(0.2, 3.0))
    # noise loadings with a guaranteed well-conditioned asset block
    Sigma = 0.05 * rng.standard_normal((m, bdim))
    Sigma[:, n:] += 0.25 * np.eye(m)
    Lambda = 0.2 * rng.standard_normal((n, bdim))
    atoms = []
    if with_jumps and rng.random() < 0.8:
        for _ in range(int(rng.integers(1, 3))):
            if rng.random() < 0.5:
                gamma = rng.uniform(-0.3, 0.3, size=m)
                if np.all(np.abs(gamma) < 1e-3):
                    gamma[0] = 0.2
                atoms.append(M.JumpAtom(weight=float(rng.uniform(0.1, 1.0)),
                                        gamma=gamma))
            else:
                atoms.append(M.JumpAtom(
                    weight=float(rng.uniform(0.1, 1.0)),
                    xi=M.constant(rng.uniform(-0.2, 0.2, size=n))))
    # box rows keep the polytope bounded; optional extra random cuts
    rows = [np.eye(m), -np.eye(m)]
    rhs = [rng.uniform(1.0, 6.0, size=m), rng.uniform(1.0, 6.0, size=m)]
    for _ in range(int(rng.integers(0, 3))):
        u = rng.standard_normal(m)
        u /= np.linalg.norm(u)
        rows.append(u[None, :])
        rhs.append(np.array([rng.uniform(0.5, 4.0)]))
    constraints = M.ConstraintSet(Upsilon=np.vstack(rows).T,
                                  upsilon=np.concatenate(rhs))
    return M.MarketModel(
        factor=M.FactorModel(n=n, b=M.constant(rng.uniform(-0.1, 0.1, n)),
                             Lambda=M.constant(Lambda)),
        assets=M.AssetModel(m=m, a0=M.constant(float(rng.uniform(0.0, 0.05))),
                            a=M.constant(rng.uniform(-0.1, 0.1, m)),
                            Sigma=M.constant(Sigma)),
        nu=M.JumpMeasure(atoms=tuple(atoms)),
        constraints=constraints, theta=theta, T=1.0)


@pytest.fixture
def zero_market():
    return make_zero_market()


@pytest.fixture
def const_rate():
    return make_const_rate_market()


@pytest.fixture
def lgq_spec():
    return make_lgq_spec()


@pytest.fixture
def lgq_market():
    return make_lgq_market()


@pytest.fixture
def jump1_market():
    return make_jump1_market()


@pytest.fixture
def jump2_market():
    return make_jump2_market()


@pytest.fixture
def skew_market():
    return make_skew_market()
