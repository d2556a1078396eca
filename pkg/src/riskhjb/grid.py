"""Space-time lattice, finite-difference stencils, multilinear interpolation,
and exact-quadrature evaluation of the finite-activity nonlocal operators on
grid functions.

Node ordering is C-order over the per-axis meshgrid, so 1-D arrays line up
with the x-axis and 2-D arrays raster over (axis0, axis1).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

TRANSFORMED = "transformed"        # u = Phi-tilde scale, strictly positive
RISK_SENSITIVE = "risk_sensitive"  # Phi scale

_KINDS = (TRANSFORMED, RISK_SENSITIVE)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    """Uniform tensor-product lattice on a box, with a uniform time grid on
    [0, T]. Supports n = 1 or 2 spatial dimensions."""

    bounds: np.ndarray          # (n, 2)
    num_nodes: tuple            # nodes per axis, each >= 8
    num_steps: int              # time steps on [0, T]
    T: float

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "num_nodes", tuple(int(k) for k in np.atleast_1d(self.num_nodes)))
        object.__setattr__(self, "num_steps", int(self.num_steps))
        object.__setattr__(self, "T", float(self.T))
        if b.shape[1] != 2 or b.shape[0] not in (1, 2):
            raise GridError("bounds must be (n, 2) with n in {1, 2}")
        if len(self.num_nodes) != b.shape[0]:
            raise GridError("one node count per axis required")
        if any(k < 8 for k in self.num_nodes):
            raise GridError("at least 8 nodes per axis required")
        if np.any(b[:, 1] <= b[:, 0]):
            raise GridError("bounds must be strictly ordered")
        if self.num_steps < 1 or self.T <= 0.0:
            raise GridError("need num_steps >= 1 and T > 0")

    @property
    def n(self):
        return self.bounds.shape[0]

    @property
    def total_nodes(self):
        return int(np.prod(self.num_nodes))

    @property
    def dx(self):
        return (self.bounds[:, 1] - self.bounds[:, 0]) / (np.array(self.num_nodes) - 1)

    @property
    def dt(self):
        return self.T / self.num_steps

    @property
    def axes(self):
        return [np.linspace(self.bounds[i, 0], self.bounds[i, 1], self.num_nodes[i])
                for i in range(self.n)]

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.num_steps + 1)

    def points(self):
        """All nodes as a (total_nodes, n) array, C-order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def core_mask(self, margin_frac=0.2):
        """Nodes at least margin_frac of the axis width away from every
        boundary — the region acceptance metrics are measured on."""
        pts = self.points()
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        pad = margin_frac * (hi - lo)
        return np.all((pts >= lo + pad - 1e-12) & (pts <= hi - pad + 1e-12), axis=1)

    def refined(self):
        """One dyadic refinement: cell widths and the time step halve, box
        and horizon unchanged."""
        return Lattice(bounds=self.bounds.copy(),
                       num_nodes=tuple(2 * k - 1 for k in self.num_nodes),
                       num_steps=2 * self.num_steps, T=self.T)

    def to_meta(self):
        return {"n": self.n, "bounds": self.bounds.tolist(),
                "num_nodes": list(self.num_nodes),
                "num_steps": self.num_steps, "T": self.T}

    @staticmethod
    def from_meta(meta):
        return Lattice(bounds=np.asarray(meta["bounds"], dtype=float),
                       num_nodes=tuple(meta["num_nodes"]),
                       num_steps=meta["num_steps"], T=meta["T"])


@dataclass
class ValueField:
    """Grid function over (time level, node). kind records which scale the
    numbers live on; transformed-scale fields must stay strictly positive."""

    lattice: Lattice
    values: np.ndarray          # (num_steps + 1, total_nodes)
    kind: str = TRANSFORMED

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.lattice.num_steps + 1, self.lattice.total_nodes)
        if self.values.shape != expect:
            raise GridError(f"values shape {self.values.shape} != {expect}")
        if self.kind not in _KINDS:
            raise GridError(f"unknown kind {self.kind!r}")

    def level(self, k):
        return self.values[k]

    def at_time_zero(self):
        return self.values[0]


@dataclass
class PolicyField:
    """Allocation vectors over (time level, node)."""

    lattice: Lattice
    values: np.ndarray          # (num_steps + 1, total_nodes, m)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if (self.values.ndim != 3
                or self.values.shape[:2] != (self.lattice.num_steps + 1,
                                             self.lattice.total_nodes)):
            raise GridError("policy values must be (num_steps+1, nodes, m)")

    @property
    def m(self):
        return self.values.shape[2]

    def level(self, k):
        return self.values[k]


def interpolate(lattice: Lattice, values, targets):
    """Multilinear interpolation of a node array at arbitrary points.

    Out-of-box targets are clamped to the boundary per axis; the return
    carries the number of clamped points so callers can report it.
    """
    values = np.asarray(values, dtype=float).reshape(lattice.num_nodes)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    lo = lattice.bounds[:, 0]
    dx = lattice.dx
    frac = (targets - lo) / dx
    clamped = int(np.count_nonzero(
        np.any((frac < -1e-12) | (frac > np.array(lattice.num_nodes) - 1 + 1e-12), axis=1)))
    frac = np.clip(frac, 0.0, np.array(lattice.num_nodes) - 1)
    i0 = np.minimum(frac.astype(int), np.array(lattice.num_nodes) - 2)
    w = frac - i0
    if lattice.n == 1:
        a, b = values[i0[:, 0]], values[i0[:, 0] + 1]
        out = a * (1 - w[:, 0]) + b * w[:, 0]
    else:
        i, j = i0[:, 0], i0[:, 1]
        wi, wj = w[:, 0], w[:, 1]
        out = (values[i, j] * (1 - wi) * (1 - wj)
               + values[i + 1, j] * wi * (1 - wj)
               + values[i, j + 1] * (1 - wi) * wj
               + values[i + 1, j + 1] * wi * wj)
    return out, clamped


def nonlocal_d_a(level_values, t, model, lattice: Lattice):
    """sum_j lambda_j [ u(t, x + xi_j(t,x)) - u(t,x) ] at every node.

    Returns (array over nodes, diagnostics dict with clamp count). Factor
    atoms only — atoms with xi = 0 contribute nothing.
    """
    u = np.asarray(level_values, dtype=float)
    pts = lattice.points()
    out = np.zeros(lattice.total_nodes)
    clamped = 0
    for atom in model.nu.atoms:
        if atom.xi is None:
            continue
        shift = atom.xi(t, pts)
        vals, c = interpolate(lattice, u, pts + shift)
        clamped += c
        out += atom.weight * (vals - u)
    return out, {"clamped": clamped}


def nonlocal_I_NL(level_values, p, t, model, lattice: Lattice, theta=None):
    """Nonlocal part of the untransformed equation at every node:
    sum_j lambda_j [ -(1/theta)(e^{-theta [u(x+xi_j)-u(x)]} - 1) - xi_j'p ].

    level_values must be on the Phi scale. Exponent magnitudes above 700 are
    clamped and the nodes flagged in diagnostics.
    """
    theta = model.theta if theta is None else theta
    u = np.asarray(level_values, dtype=float)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    pts = lattice.points()
    out = np.zeros(lattice.total_nodes)
    clamped = 0
    overflow = np.zeros(lattice.total_nodes, dtype=bool)
    for atom in model.nu.atoms:
        if atom.xi is None:
            continue
        shift = atom.xi(t, pts)
        vals, c = interpolate(lattice, u, pts + shift)
        clamped += c
        expo = -theta * (vals - u)
        over = np.abs(expo) > 700.0
        overflow |= over
        expo = np.clip(expo, -700.0, 700.0)
        out += atom.weight * (-np.expm1(expo) / theta
                              - np.einsum("ij,ij->i", shift, p))
    return out, {"clamped": clamped, "overflow_nodes": int(overflow.sum()),
                 "overflow_mask": overflow}


def _axis_first_derivative(u, dx, axis):
    """Second-order first derivative along one axis: centered interior,
    one-sided three-point at the two boundary layers."""
    d = np.empty_like(u)
    um = np.moveaxis(u, axis, 0)
    dm = np.moveaxis(d, axis, 0)
    dm[1:-1] = (um[2:] - um[:-2]) / (2.0 * dx)
    dm[0] = (-3.0 * um[0] + 4.0 * um[1] - um[2]) / (2.0 * dx)
    dm[-1] = (3.0 * um[-1] - 4.0 * um[-2] + um[-3]) / (2.0 * dx)
    return d


def _axis_second_derivative(u, dx, axis):
    d = np.empty_like(u)
    um = np.moveaxis(u, axis, 0)
    dm = np.moveaxis(d, axis, 0)
    dm[1:-1] = (um[2:] - 2.0 * um[1:-1] + um[:-2]) / dx ** 2
    dm[0] = (2.0 * um[0] - 5.0 * um[1] + 4.0 * um[2] - um[3]) / dx ** 2
    dm[-1] = (2.0 * um[-1] - 5.0 * um[-2] + 4.0 * um[-3] - um[-4]) / dx ** 2
    return d


def gradient(level_values, lattice: Lattice):
    """Per-node spatial gradient, (total_nodes, n). Centered second-order in
    the interior, one-sided second-order at the boundary."""
    u = np.asarray(level_values, dtype=float).reshape(lattice.num_nodes)
    cols = [_axis_first_derivative(u, lattice.dx[i], i).ravel()
            for i in range(lattice.n)]
    return np.stack(cols, axis=-1)


def hessian_diag_blocks(level_values, lattice: Lattice):
    """Per-node Hessian, (total_nodes, n, n). Pure second derivatives use the
    explicit stencils; mixed derivatives compose the two first-derivative
    stencils (exact for bilinear data, second order in the interior)."""
    u = np.asarray(level_values, dtype=float).reshape(lattice.num_nodes)
    n = lattice.n
    out = np.zeros((lattice.total_nodes, n, n))
    for i in range(n):
        out[:, i, i] = _axis_second_derivative(u, lattice.dx[i], i).ravel()
    for i in range(n):
        for j in range(i + 1, n):
            di = _axis_first_derivative(u, lattice.dx[i], i)
            dij = _axis_first_derivative(di, lattice.dx[j], j).ravel()
            out[:, i, j] = dij
            out[:, j, i] = dij
    return out


# -- serialization ----------------------------------------------------------

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _meta_path(path):
    return str(path) + ".meta.json"


def write_value_field(path, vf: ValueField, extra_meta=None):
    """CSV with one row per (time, node): t, x columns, value. A sidecar
    <path>.meta.json carries the lattice metadata and the kind."""
    lat = vf.lattice
    pts = lat.points()
    header = ["t"] + [f"x{i}" for i in range(lat.n)] + ["value"]
    rows = []
    for k, t in enumerate(lat.times):
        for j in range(lat.total_nodes):
            rows.append([repr(float(t))] + [repr(float(c)) for c in pts[j]]
                        + [repr(float(vf.values[k, j]))])
    _write_rows(path, header, rows)
    meta = {"lattice": lat.to_meta(), "kind": vf.kind, "columns": header}
    if extra_meta:
        meta.update(extra_meta)
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_value_field(path):
    with open(_meta_path(path)) as fh:
        meta = json.load(fh)
    lat = Lattice.from_meta(meta["lattice"])
    vals = np.empty((lat.num_steps + 1, lat.total_nodes))
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        flat = [float(row[-1]) for row in r]
    vals[:] = np.asarray(flat).reshape(lat.num_steps + 1, lat.total_nodes)
    return ValueField(lattice=lat, values=vals, kind=meta["kind"])


def write_policy_field(path, pf: PolicyField, extra_meta=None):
    lat = pf.lattice
    pts = lat.points()
    m = pf.m
    header = ["t"] + [f"x{i}" for i in range(lat.n)] + [f"h{j}" for j in range(m)]
    rows = []
    for k, t in enumerate(lat.times):
        for j in range(lat.total_nodes):
            rows.append([repr(float(t))] + [repr(float(c)) for c in pts[j]]
                        + [repr(float(v)) for v in pf.values[k, j]])
    _write_rows(path, header, rows)
    meta = {"lattice": lat.to_meta(), "m": m, "columns": header}
    if extra_meta:
        meta.update(extra_meta)
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_policy_field(path):
    with open(_meta_path(path)) as fh:
        meta = json.load(fh)
    lat = Lattice.from_meta(meta["lattice"])
    m = meta["m"]
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        flat = [[float(c) for c in row[-m:]] for row in r]
    vals = np.asarray(flat).reshape(lat.num_steps + 1, lat.total_nodes, m)
    return PolicyField(lattice=lat, values=vals)
