"""Command-line front end: parses a model configuration, dispatches the
validate / solve / simulate / verify / oracle workflows and writes
plot-ready artifacts.

Exit codes: 0 pass, 1 parse error, 2 model-validation failure, 3 solver or
simulation failure, 4 verification failure (including artifact/config hash
mismatches).

Only the standard library is imported at module scope so that the
RISKHJB_THREADS cap can be exported to the BLAS thread-pool variables
before numpy first loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

TOOL_NAME = "riskhjb"

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_VERIFICATION = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class ConfigError(ValueError):
    """Anything wrong with the configuration document itself."""


class HashMismatch(RuntimeError):
    """Artifacts under verification came from a different configuration."""


def configure_threads(env=os.environ):
    """Propagate RISKHJB_THREADS to the BLAS pool caps (only where the
    variable is not already pinned).  Must run before numpy is imported to
    take effect in-process."""
    cap = env.get("RISKHJB_THREADS")
    if cap:
        for var in _THREAD_VARS:
            env.setdefault(var, cap)


# ---------------------------------------------------------------------------
# configuration handling


def _toml():
    try:
        import tomllib
    except ModuleNotFoundError:        # pragma: no cover - 3.10 fallback
        import tomli as tomllib
    return tomllib


def load_config(path) -> dict:
    tomllib = _toml()
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _coeff(entry, shape, slope_shape, name):
    """Build a coefficient from a config entry: a bare number / nested list
    is a constant; a table {const, slope, lo, hi} is affine, saturated when
    clip bounds are present."""
    import numpy as np

    from . import model as M

    try:
        if isinstance(entry, dict):
            const = np.asarray(entry.get("const", 0.0), dtype=float).reshape(shape)
            slope = entry.get("slope")
            if slope is None:
                return M.constant(const)
            slope = np.asarray(slope, dtype=float).reshape(slope_shape)
            if "lo" in entry or "hi" in entry:
                lo = np.broadcast_to(
                    np.asarray(entry.get("lo", -np.inf), dtype=float), shape).copy()
                hi = np.broadcast_to(
                    np.asarray(entry.get("hi", np.inf), dtype=float), shape).copy()
                return M.affine_saturated(const, slope, lo, hi)
            return M.affine(const, slope)
        return M.constant(np.asarray(entry, dtype=float).reshape(shape))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad coefficient '{name}': {exc}") from exc


def _section(doc, name) -> dict:
    try:
        sec = doc[name]
    except KeyError as exc:
        raise ConfigError(f"missing config section [{name}]") from exc
    if not isinstance(sec, dict):
        raise ConfigError(f"section [{name}] must be a table")
    return sec


def _field(sec, sec_name, key):
    try:
        return sec[key]
    except KeyError as exc:
        raise ConfigError(f"missing field '{key}' in [{sec_name}]") from exc


def build_model(doc: dict, theta_override=None):
    """MarketModel from a parsed config document."""
    import numpy as np

    from . import model as M

    fac = _section(doc, "factor")
    ass = _section(doc, "assets")
    cons = _section(doc, "constraints")
    risk = _section(doc, "risk")
    try:
        n = int(_field(fac, "factor", "n"))
        m = int(_field(ass, "assets", "m"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dimensions n, m must be integers: {exc}") from exc
    bdim = n + m

    factor = M.FactorModel(
        n=n,
        b=_coeff(_field(fac, "factor", "b"), (n,), (n, n), "factor.b"),
        Lambda=_coeff(_field(fac, "factor", "Lambda"), (n, bdim), (n, bdim, n),
                      "factor.Lambda"))
    assets = M.AssetModel(
        m=m,
        a0=_coeff(_field(ass, "assets", "a0"), (), (n,), "assets.a0"),
        a=_coeff(_field(ass, "assets", "a"), (m,), (m, n), "assets.a"),
        Sigma=_coeff(_field(ass, "assets", "Sigma"), (m, bdim), (m, bdim, n),
                     "assets.Sigma"))

    atoms = []
    for k, spec in enumerate(doc.get("jumps", {}).get("atoms", [])):
        if not isinstance(spec, dict) or "lambda" not in spec:
            raise ConfigError(f"jump atom #{k} needs an intensity field 'lambda'")
        gamma = spec.get("gamma")
        xi = spec.get("xi")
        try:
            atoms.append(M.JumpAtom(
                weight=float(spec["lambda"]),
                gamma=None if gamma is None else
                np.asarray(gamma, dtype=float).reshape(m),
                xi=None if xi is None else _coeff(xi, (n,), (n, n),
                                                 f"jumps.atoms[{k}].xi")))
        except (ValueError, TypeError, M.ModelError) as exc:
            raise ConfigError(f"bad jump atom #{k}: {exc}") from exc

    try:
        rows = np.asarray(_field(cons, "constraints", "Upsilon"), dtype=float)
        rows = rows.reshape(-1, m)
        constraints = M.ConstraintSet(
            Upsilon=rows.T,
            upsilon=np.asarray(_field(cons, "constraints", "upsilon"),
                               dtype=float).reshape(rows.shape[0]))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad constraint section: {exc}") from exc

    theta = float(_field(risk, "risk", "theta")) if theta_override is None \
        else float(theta_override)
    horizon = float(_field(risk, "risk", "T"))
    return M.MarketModel(factor=factor, assets=assets,
                         nu=M.JumpMeasure(atoms=tuple(atoms)),
                         constraints=constraints, theta=theta, T=horizon)


def _parse_grid_flag(text, n):
    try:
        nodes = tuple(int(p) for p in str(text).lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--grid expects N or NxN, got {text!r}") from exc
    if len(nodes) != n:
        raise ConfigError(f"--grid lists {len(nodes)} axes for an "
                          f"{n}-dimensional factor")
    return nodes


def lattice_from(doc: dict, model, grid_flag=None, steps_flag=None):
    import numpy as np

    from .grid import GridError, Lattice

    sec = doc.get("grid", {})
    bounds = np.asarray(sec.get("bounds", [[-2.0, 2.0]] * model.n), dtype=float)
    nodes = tuple(int(k) for k in
                  sec.get("nodes", [101] * model.n if model.n == 1
                          else [33] * model.n))
    steps = int(sec.get("steps", 200 if model.n == 1 else 60))
    if grid_flag is not None:
        nodes = _parse_grid_flag(grid_flag, model.n)
    if steps_flag is not None:
        steps = int(steps_flag)
    try:
        return Lattice(bounds=bounds, num_nodes=nodes, num_steps=steps,
                       T=model.T)
    except GridError as exc:
        raise ConfigError(f"bad lattice request: {exc}") from exc


# ---------------------------------------------------------------------------
# artifacts


def _tool_version():
    from . import __version__
    return __version__


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir, command, args, doc_hash):
    """Written before any result file so an interrupted run is visible."""
    manifest = {
        "tool": TOOL_NAME,
        "tool_version": _tool_version(),
        "command": command,
        "config_path": os.path.abspath(args.config),
        "config_hash": doc_hash,
        "output_dir": os.path.abspath(out_dir),
        "seed": getattr(args, "seed", None),
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _center_of(lattice):
    return 0.5 * (lattice.bounds[:, 0] + lattice.bounds[:, 1])


def _write_slices(out_dir, vf, phi, pf, doc_hash):
    """Plot-ready t=0 slices: along each axis, the value on both scales and
    every allocation component, with the other axis held at its middle
    node."""
    import csv

    lat = vf.lattice
    shape = lat.num_nodes
    u0 = vf.at_time_zero().reshape(shape)
    p0 = phi.at_time_zero().reshape(shape)
    h0 = pf.level(0).reshape(shape + (pf.m,))
    for axis in range(lat.n):
        take = [k // 2 for k in shape]
        rows = []
        for i in range(shape[axis]):
            take[axis] = i
            idx = tuple(take)
            rows.append([repr(float(lat.axes[axis][i])),
                         repr(float(u0[idx])), repr(float(p0[idx]))]
                        + [repr(float(v)) for v in h0[idx]])
        path = os.path.join(out_dir, f"slice_t0_axis{axis}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{axis}", "phi_tilde", "phi"]
                       + [f"h{j}" for j in range(pf.m)])
            w.writerows(rows)
        _write_json(path + ".meta.json",
                    {"config_hash": doc_hash, "axis": axis, "time": 0.0})


def _lgq_from_doc(doc: dict, theta_override=None):
    """LGQ oracle inputs read straight from the config: affine drifts and
    rates, constant noise loadings, no jump atoms."""
    import numpy as np

    from .oracle import LGQSpec

    if doc.get("jumps", {}).get("atoms"):
        raise ConfigError("the closed-form oracle covers the no-jump case; "
                          "remove [jumps] atoms to use it")
    fac = _section(doc, "factor")
    ass = _section(doc, "assets")
    risk = _section(doc, "risk")
    n = int(_field(fac, "factor", "n"))
    m = int(_field(ass, "assets", "m"))
    bdim = n + m

    def parts(entry, shape, slope_shape, name):
        if isinstance(entry, dict):
            const = np.asarray(entry.get("const", 0.0), dtype=float).reshape(shape)
            slope = entry.get("slope")
            slope = np.zeros(slope_shape) if slope is None else \
                np.asarray(slope, dtype=float).reshape(slope_shape)
        else:
            const = np.asarray(entry, dtype=float).reshape(shape)
            slope = np.zeros(slope_shape)
        return const, slope

    def const_only(entry, shape, name):
        if isinstance(entry, dict):
            if entry.get("slope") is not None:
                raise ConfigError(f"{name} must be constant for the oracle")
            entry = entry.get("const", 0.0)
        return np.asarray(entry, dtype=float).reshape(shape)

    b0, big_b = parts(_field(fac, "factor", "b"), (n,), (n, n), "factor.b")
    c0, c1 = parts(_field(ass, "assets", "a0"), (), (n,), "assets.a0")
    a_const, big_a = parts(_field(ass, "assets", "a"), (m,), (m, n), "assets.a")
    lam = const_only(_field(fac, "factor", "Lambda"), (n, bdim), "factor.Lambda")
    sig = const_only(_field(ass, "assets", "Sigma"), (m, bdim), "assets.Sigma")
    theta = float(_field(risk, "risk", "theta")) if theta_override is None \
        else float(theta_override)
    return LGQSpec(theta=theta, T=float(_field(risk, "risk", "T")),
                   b0=b0, B=big_b, Lambda=lam,
                   ahat0=a_const - c0, A=big_a - np.outer(np.ones(m), c1),
                   Sigma=sig, c0=float(c0), c1=c1)


def _oracle_comparison(doc, model, vf, doc_hash, theta_override=None):
    import numpy as np

    from .oracle import riccati_solve, verify_ansatz
    from .solver import TO_RISK_SENSITIVE, transform

    spec = _lgq_from_doc(doc, theta_override)
    sol = riccati_solve(spec)
    residual = verify_ansatz(spec, sol)
    lat = vf.lattice
    core = lat.core_mask()
    pts = lat.points()[core]
    phi_pde = transform(vf, TO_RISK_SENSITIVE, model.theta).at_time_zero()[core]
    phi_ric = sol.phi(0.0, pts)
    rel = np.abs(phi_pde - phi_ric) / (1.0 + np.abs(phi_ric))
    return {
        "config_hash": doc_hash,
        "ansatz_residual": float(residual),
        "max_relative_error_core": float(rel.max()),
        "median_relative_error_core": float(np.median(rel)),
        "nodes_compared": int(core.sum()),
        "riccati": sol.to_dict(),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    from .model import validate_model

    doc = load_config(args.config)
    doc_hash = config_hash(doc)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "validate", args, doc_hash)
    try:
        model = build_model(doc, args.theta)
    except ConfigError:
        raise
    report = validate_model(model)
    payload = report.to_dict()
    payload["config_hash"] = doc_hash
    _write_json(os.path.join(args.out, "validation_report.json"), payload)
    if report.passed:
        print("validation: PASS")
        return EXIT_OK
    for failure in report.failures():
        print(f"validation: FAIL {failure.name}: {failure.detail}")
    return EXIT_VALIDATION


def _validated_model(doc, args, out_dir):
    """Shared solve/simulate/verify preamble: build + validate or exit 2."""
    from .model import validate_model

    model = build_model(doc, args.theta)
    report = validate_model(model)
    if not report.passed:
        payload = report.to_dict()
        payload["config_hash"] = config_hash(doc)
        _write_json(os.path.join(out_dir, "validation_report.json"), payload)
        names = ", ".join(f.name for f in report.failures())
        raise ModelInvalid(f"model failed validation: {names}")
    return model


class ModelInvalid(RuntimeError):
    pass


def cmd_solve(args) -> int:
    from .grid import write_policy_field, write_value_field
    from .solver import (TO_RISK_SENSITIVE, SolverError, policy_iteration_solve,
                         transform)

    doc = load_config(args.config)
    doc_hash = config_hash(doc)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "solve", args, doc_hash)
    model = _validated_model(doc, args, args.out)
    lattice = lattice_from(doc, model, args.grid, args.tmax_steps)

    report_path = os.path.join(args.out, "solve_report.json")
    try:
        vf, pf, report = policy_iteration_solve(model, lattice)
    except SolverError as exc:
        _write_json(report_path, {"config_hash": doc_hash, "error": str(exc),
                                  "error_type": type(exc).__name__,
                                  "lattice": lattice.to_meta()})
        print(f"solve: FAIL {type(exc).__name__}: {exc}")
        return EXIT_SOLVER

    phi = transform(vf, TO_RISK_SENSITIVE, model.theta)
    extra = {"config_hash": doc_hash, "command": "solve"}
    write_value_field(os.path.join(args.out, "phi_tilde.csv"), vf, extra)
    write_value_field(os.path.join(args.out, "phi.csv"), phi, extra)
    write_policy_field(os.path.join(args.out, "policy.csv"), pf, extra)
    payload = report.to_dict()
    payload.update({"config_hash": doc_hash, "lattice": lattice.to_meta(),
                    "theta": model.theta})
    _write_json(report_path, payload)
    _write_slices(args.out, vf, phi, pf, doc_hash)

    if args.oracle:
        comparison = _oracle_comparison(doc, model, vf, doc_hash, args.theta)
        _write_json(os.path.join(args.out, "oracle_comparison.json"), comparison)
    print(f"solve: converged={report.converged} "
          f"outer_iterations={report.outer_iterations} "
          f"residual_interior_max={report.residual_interior_max:.3e}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    import numpy as np

    from .montecarlo import (MEASURE_P, MEASURE_PH, SimConfig, doleans_chi,
                             estimate_I_tilde, estimate_J_wealth,
                             simulate_factors)

    doc = load_config(args.config)
    doc_hash = config_hash(doc)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "simulate", args, doc_hash)
    model = _validated_model(doc, args, args.out)
    lattice = lattice_from(doc, model, args.grid, args.tmax_steps)
    x0 = _center_of(lattice)

    if args.artifacts:
        policy, source = _load_policy(args.artifacts, doc_hash)
    else:
        policy, source = np.zeros(model.m), "zero"

    dt = args.dt if args.dt is not None else model.T / 100.0
    base = dict(paths=args.paths, dt=dt, seed=args.seed)
    i_tilde = estimate_I_tilde(model, policy, 0.0, x0,
                               SimConfig(measure=MEASURE_PH, **base))
    j_est = estimate_J_wealth(model, policy, x0,
                              SimConfig(measure=MEASURE_P, **base))
    bundle = simulate_factors(model, policy, x0,
                              SimConfig(measure=MEASURE_P, **base))
    chi, excluded = doleans_chi(bundle)
    payload = {
        "config_hash": doc_hash,
        "policy_source": source,
        "x0": x0.tolist(),
        "paths": args.paths,
        "dt": dt,
        "seed": args.seed,
        "I_tilde": i_tilde.to_dict(),
        "J": j_est.to_dict(),
        "chi": {"mean": float(chi.mean()),
                "std_error": float(chi.std(ddof=1) / np.sqrt(chi.size)),
                "excluded_paths": excluded},
    }
    _write_json(os.path.join(args.out, "simulation.json"), payload)
    print(f"simulate: I~={i_tilde.mean:.6g} (se {i_tilde.std_error:.2g}) "
          f"J={j_est.mean:.6g} (se {j_est.std_error:.2g}) "
          f"E[chi]={payload['chi']['mean']:.6g}")
    return EXIT_OK


def _load_policy(artifacts_dir, doc_hash):
    """Grid policy from solve artifacts, hash-checked against the config."""
    from .grid import read_policy_field

    path = os.path.join(artifacts_dir, "policy.csv")
    meta_path = path + ".meta.json"
    if not os.path.exists(path) or not os.path.exists(meta_path):
        raise ConfigError(f"no policy artifacts under {artifacts_dir}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    stored = meta.get("config_hash")
    if stored != doc_hash:
        raise HashMismatch(
            f"policy artifacts hash {stored!r} does not match the "
            f"configuration {doc_hash!r}")
    return read_policy_field(path), os.path.abspath(path)


def _load_value(artifacts_dir, doc_hash):
    from .grid import read_value_field

    path = os.path.join(artifacts_dir, "phi_tilde.csv")
    meta_path = path + ".meta.json"
    if not os.path.exists(path) or not os.path.exists(meta_path):
        raise ConfigError(f"no value artifacts under {artifacts_dir}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    stored = meta.get("config_hash")
    if stored != doc_hash:
        raise HashMismatch(
            f"value artifacts hash {stored!r} does not match the "
            f"configuration {doc_hash!r}")
    return read_value_field(path)


class _ScaledPolicy:
    """Wraps a policy lookup with a scale factor or an additive offset."""

    def __init__(self, base, scale=1.0, offset=None):
        self.base = base
        self.scale = scale
        self.offset = offset
        self.token = None
        self.evaluations = 0
        self.clamped = 0

    def __call__(self, t, x):
        h = self.scale * self.base(t, x)
        if self.offset is not None:
            h = h + self.offset
        return h


def cmd_verify(args) -> int:
    import numpy as np

    from .model import feasible_region_membership
    from .montecarlo import (MEASURE_P, MEASURE_PH, GridPolicy, SimConfig,
                             doleans_chi, estimate_J_wealth, simulate_factors,
                             verify_feynman_kac)

    doc = load_config(args.config)
    doc_hash = config_hash(doc)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "verify", args, doc_hash)
    model = _validated_model(doc, args, args.out)
    artifacts = args.artifacts or args.out

    vf = _load_value(artifacts, doc_hash)
    pf, _ = _load_policy(artifacts, doc_hash)
    lattice = vf.lattice
    x0 = _center_of(lattice)
    dt = args.dt if args.dt is not None else model.T / 100.0
    checks = {}

    fk_cfg = SimConfig(paths=args.paths, dt=dt, seed=args.seed,
                       measure=MEASURE_PH)
    checks["feynman_kac"] = verify_feynman_kac(model, vf, pf, 0.0, x0, fk_cfg)

    lookup = GridPolicy(pf)
    h_center = lookup(0.0, x0[None, :])[0]
    p_cfg = SimConfig(paths=args.paths, dt=dt, seed=args.seed,
                      measure=MEASURE_P)
    bundle = simulate_factors(model, h_center, x0, p_cfg)
    chi, excluded = doleans_chi(bundle)
    chi_se = float(chi.std(ddof=1) / np.sqrt(chi.size))
    checks["chi_normalization"] = {
        "policy": h_center.tolist(),
        "mean": float(chi.mean()),
        "std_error": chi_se,
        "excluded_paths": excluded,
        "passed": bool(abs(float(chi.mean()) - 1.0) <= 3.0 * chi_se),
    }

    j_star = estimate_J_wealth(model, lookup, x0, p_cfg)
    rng = np.random.Generator(np.random.Philox(int(args.seed) + 1))
    direction = rng.standard_normal(model.m)
    direction /= max(float(np.linalg.norm(direction)), 1e-30)
    h_levels = pf.values.reshape(-1, pf.m)
    scale_probe = 0.1 * max(float(np.abs(h_levels).max()), 1e-8)
    probes = [("scale_0.90", _ScaledPolicy(lookup, 0.90), 0.90 * h_levels),
              ("scale_1.10", _ScaledPolicy(lookup, 1.10), 1.10 * h_levels),
              ("scale_0.75", _ScaledPolicy(lookup, 0.75), 0.75 * h_levels),
              ("scale_1.25", _ScaledPolicy(lookup, 1.25), 1.25 * h_levels),
              ("random_direction",
               _ScaledPolicy(lookup, 1.0, scale_probe * direction),
               h_levels + scale_probe * direction)]
    table = []
    all_ok = True
    for name, probe, samples in probes:
        if not np.all(feasible_region_membership(model, samples)):
            table.append({"probe": name, "skipped_infeasible": True})
            continue
        j_probe = estimate_J_wealth(model, probe, x0, p_cfg)
        sigma = float(np.hypot(j_star.std_error, j_probe.std_error))
        ok = j_star.mean >= j_probe.mean - 3.0 * sigma
        all_ok &= ok
        table.append({"probe": name, "J": j_probe.mean,
                      "std_error": j_probe.std_error,
                      "J_star_minus_J": j_star.mean - j_probe.mean,
                      "band": 3.0 * sigma, "passed": bool(ok)})
    checks["optimality"] = {"J_star": j_star.mean,
                            "J_star_std_error": j_star.std_error,
                            "probes": table, "passed": bool(all_ok)}

    passed = bool(checks["feynman_kac"]["passed"]
                  and checks["chi_normalization"]["passed"]
                  and checks["optimality"]["passed"])
    payload = {"config_hash": doc_hash, "artifacts": os.path.abspath(artifacts),
               "paths": args.paths, "dt": dt, "seed": args.seed,
               "checks": checks, "passed": passed}
    _write_json(os.path.join(args.out, "verification.json"), payload)
    for name, rec in checks.items():
        print(f"verify: {name}: {'PASS' if rec['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_VERIFICATION


def cmd_oracle(args) -> int:
    from .oracle import riccati_solve, verify_ansatz

    doc = load_config(args.config)
    doc_hash = config_hash(doc)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "oracle", args, doc_hash)
    spec = _lgq_from_doc(doc, args.theta)
    sol = riccati_solve(spec)
    residual = verify_ansatz(spec, sol)
    payload = {"config_hash": doc_hash, "ansatz_residual": float(residual),
               "riccati": sol.to_dict()}
    _write_json(os.path.join(args.out, "oracle.json"), payload)
    print(f"oracle: ansatz_residual={residual:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="Risk-sensitive jump-diffusion allocation solver")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML model configuration")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--theta", type=float, default=None,
                       help="override the configured risk sensitivity")
        p.add_argument("--grid", default=None,
                       help="nodes per axis, e.g. 201 or 33x33")
        p.add_argument("--tmax-steps", type=int, default=None,
                       help="number of time steps on the lattice")
        p.add_argument("--seed", type=int, default=0)

    p_validate = sub.add_parser("validate", help="check model assumptions")
    common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_solve = sub.add_parser("solve", help="run the lattice solver")
    common(p_solve)
    p_solve.add_argument("--oracle", action="store_true",
                         help="also compare against the closed-form solution")
    p_solve.set_defaults(func=cmd_solve)

    p_sim = sub.add_parser("simulate", help="Monte Carlo estimates")
    common(p_sim)
    p_sim.add_argument("--paths", type=int, default=10_000)
    p_sim.add_argument("--dt", type=float, default=None)
    p_sim.add_argument("--artifacts", default=None,
                       help="solve output directory providing the policy")
    p_sim.set_defaults(func=cmd_simulate)

    p_verify = sub.add_parser("verify", help="stochastic checks of a solve")
    common(p_verify)
    p_verify.add_argument("--paths", type=int, default=20_000)
    p_verify.add_argument("--dt", type=float, default=None)
    p_verify.add_argument("--artifacts", default=None,
                          help="solve output directory (defaults to --out)")
    p_verify.set_defaults(func=cmd_verify)

    p_oracle = sub.add_parser("oracle", help="closed-form reference solve")
    common(p_oracle)
    p_oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_PARSE

    from .model import ModelError
    from .montecarlo import MonteCarloError
    from .oracle import OracleError
    from .solver import SolverError
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ModelInvalid, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (SolverError, OracleError, MonteCarloError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def entry():
    configure_threads()
    sys.exit(main())


if __name__ == "__main__":
    entry()
