"""Batch entry point: configuration, runs, persistence, replay.

Artifacts written by ``crflow run``:

    monitors.csv        one row per monitor sample, fixed column order
    snapshots/NNNN.json spectral coefficients (+ Moebius params when balanced)
    diagnostics.json    spectral/KW/decay reports keyed by snapshot time
    manifest.json       config echo, basis hash, file inventory with hashes

Exit codes: 0 converged or budget-complete, 2 hard numerical failure or
broken inputs, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import diagnostics as dg
from .basis import DEFAULT_MEMORY_BUDGET, BasisTable, build_basis, load_fixture, validate_basis
from .basis import SpectralField, oracle_eigenvalue, sublaplacian_eigenvalue
from .conformal import ConformalState
from .errors import (
    ArgumentError,
    BalanceStagnationError,
    ConfigError,
    CrflowError,
    DegenerateBalanceError,
    IntegrityError,
    NumericalHealthError,
    ResolutionError,
)
from .flow import FlowConfig, MonitorRecord, RunResult, Tolerances, run, sample_monitors
from .mobius import balance
from .presets import PRESETS, FieldSpec, resolve_fields

CSV_COLUMNS = [
    "t", "dt", "vol", "E", "E_f", "alpha", "alpha_prime",
    "F2", "F3", "Fn1", "F2n2", "G2",
    "minRminusAf", "minU", "normP", "minV", "classification_flag",
]

_RUN_KEYS = {
    "n": int, "basis_degree": int, "t_end": float, "scheme": str,
    "dt_init": float, "dt_max": float, "safety": float,
    "snapshot_every": int, "monitor_every": int, "max_steps": int,
    "classify": bool, "attach_normalizer": bool, "monitor_ps": list,
}
_F_KEYS = {"kind": str, "value": float, "amplitude": float, "sbc_gate": bool,
           "z": list, "tau": float, "r": float}
_U0_KEYS = {"kind": str, "value": float, "amplitude": float, "z": list,
            "tau": float, "r": float}
_BASIS_KEYS = {"fixture": str, "memory_budget": int}
_TOL_KEYS = {"volume_drift": float, "ef_increase_slack": float,
             "positivity_floor": float, "convergence": float, "guard_slack": float}


@dataclass(frozen=True)
class RunSetup:
    config: FlowConfig
    f_spec: FieldSpec
    u0_spec: FieldSpec
    sbc_gate: bool
    basis_fixture: str | None
    memory_budget: int
    raw: dict


def _check_table(section: str, table: dict, allowed: dict, problems: list[str]) -> None:
    for key, val in table.items():
        if key not in allowed:
            problems.append(f"[{section}] unknown key {key!r}")
            continue
        want = allowed[key]
        if want is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            continue
        if want is int and isinstance(val, int) and not isinstance(val, bool):
            continue
        if not isinstance(val, want):
            problems.append(f"[{section}] {key} should be {want.__name__}, got {type(val).__name__}")


def _field_spec(table: dict) -> FieldSpec:
    kind = table.get("kind", "constant")
    kwargs = {}
    for key in ("value", "amplitude", "tau", "r"):
        if key in table:
            kwargs[key] = float(table[key])
    if "z" in table:
        kwargs["z"] = tuple(tuple(float(c) for c in pair) for pair in table["z"])
    return FieldSpec(kind, **kwargs)


def parse_config(path) -> RunSetup:
    """Parse and validate a TOML run configuration.

    Unknown keys are rejected; every violation is reported at once.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax: {exc}"])

    problems: list[str] = []
    for section in raw:
        if section not in ("preset", "run", "f", "u0", "basis", "tolerances"):
            problems.append(f"unknown section [{section}]")

    preset = raw.get("preset")
    if preset is not None and preset not in PRESETS:
        problems.append(f"unknown preset {preset!r} (have: {', '.join(sorted(PRESETS))})")

    run_tbl = raw.get("run", {})
    _check_table("run", run_tbl, _RUN_KEYS, problems)
    _check_table("f", raw.get("f", {}), _F_KEYS, problems)
    _check_table("u0", raw.get("u0", {}), _U0_KEYS, problems)
    _check_table("basis", raw.get("basis", {}), _BASIS_KEYS, problems)
    _check_table("tolerances", raw.get("tolerances", {}), _TOL_KEYS, problems)

    if preset is None and "f" not in raw:
        problems.append("either 'preset' or an [f] section is required")
    if preset is None and "u0" not in raw:
        problems.append("either 'preset' or a [u0] section is required")
    if problems:
        raise ConfigError(problems)

    if preset is not None:
        f_spec, u0_spec = PRESETS[preset]
        if "f" in raw:
            f_spec = _field_spec(raw["f"])
        if "u0" in raw:
            u0_spec = _field_spec(raw["u0"])
    else:
        f_spec = _field_spec(raw["f"])
        u0_spec = _field_spec(raw["u0"])

    tol = Tolerances(**{k: float(v) for k, v in raw.get("tolerances", {}).items()})
    kwargs = dict(run_tbl)
    n = int(kwargs.pop("n", 1))
    N = int(kwargs.pop("basis_degree", 8))
    if "monitor_ps" in kwargs:
        kwargs["monitor_ps"] = tuple(float(p) for p in kwargs["monitor_ps"])
    try:
        config = FlowConfig(n=n, N=N, tolerances=tol, **kwargs)
    except (ArgumentError, TypeError) as exc:
        raise ConfigError([str(exc)])

    basis_tbl = raw.get("basis", {})
    return RunSetup(
        config=config,
        f_spec=f_spec,
        u0_spec=u0_spec,
        sbc_gate=bool(raw.get("f", {}).get("sbc_gate", False)),
        basis_fixture=basis_tbl.get("fixture"),
        memory_budget=int(basis_tbl.get("memory_budget", DEFAULT_MEMORY_BUDGET)),
        raw=raw,
    )


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.17g}"


def _monitor_row(rec: MonitorRecord, n: int) -> list[str]:
    return [_fmt(v) for v in (
        rec.t, rec.dt, rec.vol, rec.E, rec.E_f, rec.alpha, rec.alpha_prime,
        rec.Fp[2.0], rec.Fp[3.0], rec.Fp[float(n + 1)], rec.Fp[float(2 * n + 2)],
        rec.G2, rec.min_R_minus_alpha_f, rec.min_u, rec.norm_P, rec.min_v,
    )] + [str(rec.flag)]


def write_monitors_csv(path, monitors, n: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in monitors:
            writer.writerow(_monitor_row(rec, n))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _diagnostics_report(result: RunResult, basis: BasisTable) -> dict:
    f = result.f
    ratio, ok = dg.sbc_check(f)
    f_const = float(np.ptp(f.grid)) <= 1e-12 * float(np.max(np.abs(f.grid)))
    report: dict = {
        "sbc": {"ratio": ratio, "pass": ok},
        "guards": {
            "alpha_low": result.guards.alpha_low,
            "alpha_high": result.guards.alpha_high,
            "alpha_prime_max": result.guards.alpha_prime_max,
            "gamma": result.guards.gamma,
            "energy_low": result.guards.energy_low,
            "energy_high": result.guards.energy_high,
        },
        "classification": result.classification,
        "snapshots": {},
    }
    tail = result.trajectory[-3:]
    for s in tail:
        block: dict = {}
        try:
            sd = dg.spectral_deficit(s, f, check=False)
            block["beta0"] = sd.beta0
            block["F2"] = sd.F2
            block["G2"] = sd.G2
            block["sum_beta_sq"] = sd.sum_beta_sq
            block["sum_lambda_beta_sq"] = sd.sum_lambda_beta_sq
            block["lambda1"] = float(sd.eigenvalues[1])
        except CrflowError as exc:
            block["spectral_error"] = str(exc)
        try:
            if f_const:
                kw = dg.kazdan_warner_residual(s)
            else:
                _, v = balance(s.u)
                kw = dg.kazdan_warner_residual(ConformalState(v, s.t))
            block["kazdan_warner_max"] = float(np.max(np.abs(kw)))
        except (BalanceStagnationError, DegenerateBalanceError, ResolutionError) as exc:
            block["kazdan_warner_error"] = str(exc)
        report["snapshots"][_fmt(s.t)] = block
    try:
        positive = [m for m in result.monitors if m.Fp[2.0] > 0]
        if len(positive) >= 4:
            t1 = positive[-1].t
            t0 = max(positive[0].t, t1 - 5.0)
            fit = dg.decay_fit(positive, "F2", (t0, t1), basis)
            report["decay_fit_F2"] = {
                "window": list(fit.t_window),
                "rate": fit.rate,
                "residual": fit.residual,
                "relative_residual": fit.relative_residual,
                "predicted_rate_bound": fit.predicted_rate_bound,
            }
    except CrflowError as exc:
        report["decay_fit_error"] = str(exc)
    return report


def execute(setup: RunSetup, outdir) -> int:
    """Run a configuration and persist all artifacts.  Returns the exit code."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "snapshots").mkdir(exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    cfg = setup.config
    if setup.basis_fixture:
        basis = load_fixture(setup.basis_fixture)
        if (basis.n, basis.N) != (cfg.n, cfg.N):
            raise IntegrityError(
                f"fixture is (n={basis.n}, N={basis.N}), config wants (n={cfg.n}, N={cfg.N})"
            )
    else:
        basis = build_basis(cfg.n, cfg.N, memory_budget=setup.memory_budget)

    f, u0 = resolve_fields(setup.f_spec, setup.u0_spec, basis)
    if setup.sbc_gate:
        ratio, ok = dg.sbc_check(f)
        if not ok:
            raise ConfigError(
                [f"sbc gate: max f / min f = {ratio:.6g} >= 2^(1/n) = {2 ** (1 / cfg.n):.6g}"]
            )

    result = run(cfg, basis, f, u0)

    write_monitors_csv(outdir / "monitors.csv", result.monitors, cfg.n)
    for snap in result.snapshots:
        _json_dump(outdir / "snapshots" / f"{snap.index:04d}.json", {
            "index": snap.index,
            "t": snap.t,
            "coeffs": [float(c) for c in snap.coeffs],
            "moebius": snap.moebius.to_json() if snap.moebius else None,
        })
    _json_dump(outdir / "diagnostics.json", _diagnostics_report(result, basis))

    files = {}
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(outdir))] = _sha256(p)
    manifest = {
        "format_version": 1,
        "config": setup.raw,
        "basis_fixture_hash": basis.content_hash,
        "basis_fixture_path": setup.basis_fixture,
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "classification": result.classification,
        "failure": result.failure,
        "invariant_violations": result.invariant_violations,
        "files": files,
    }
    _json_dump(outdir / "manifest.json", manifest)

    if result.classification == "failed":
        return 2
    if result.invariant_violations:
        return 3
    return 0


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def replay(manifest_path, snapshot_index: int, *, drift_tol: float = 1e-12):
    """Reconstruct a snapshot state and re-verify its monitor row.

    Checks every file hash from the manifest, rebuilds the basis, recomputes
    the monitors for the stored state, and compares them with the recorded
    CSV row.  Returns the reconstructed ConformalState.
    """
    manifest_path = Path(manifest_path)
    outdir = manifest_path.parent
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for rel, digest in manifest["files"].items():
        p = outdir / rel
        if not p.exists():
            raise IntegrityError(f"missing artifact {rel}")
        if _sha256(p) != digest:
            raise IntegrityError(f"hash mismatch for {rel}")

    snap_path = outdir / "snapshots" / f"{snapshot_index:04d}.json"
    if not snap_path.exists():
        raise IntegrityError(f"snapshot {snapshot_index} not found")
    with open(snap_path) as fh:
        snap = json.load(fh)

    setup = _setup_from_raw(dict(manifest["config"]))
    if setup.basis_fixture:
        basis = load_fixture(setup.basis_fixture)
    else:
        basis = build_basis(setup.config.n, setup.config.N,
                            memory_budget=setup.memory_budget)
    if basis.content_hash != manifest["basis_fixture_hash"]:
        raise IntegrityError("rebuilt basis hash differs from the manifest")
    f, _ = resolve_fields(setup.f_spec, setup.u0_spec, basis)
    state = ConformalState(SpectralField(basis, np.array(snap["coeffs"])), snap["t"])

    rows = list(csv.DictReader(open(outdir / "monitors.csv")))
    match = [r for r in rows if float(r["t"]) == snap["t"]]
    if not match:
        raise IntegrityError(f"no monitor row at t={snap['t']!r}")
    row = match[0]
    rec = sample_monitors(state, f, float(row["dt"]))
    recomputed = dict(zip(CSV_COLUMNS, _monitor_row(rec, basis.n)))
    for col in CSV_COLUMNS:
        if col in ("dt", "classification_flag", "minV"):
            continue
        a, b = float(row[col]), float(recomputed[col])
        if abs(a - b) > drift_tol * max(1.0, abs(a)):
            raise IntegrityError(f"monitor drift in {col}: recorded {a!r}, recomputed {b!r}")
    return state


def _setup_from_raw(raw: dict) -> RunSetup:
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".toml", delete=False) as fh:
        fh.write(_toml_dumps(raw))
        tmp = fh.name
    try:
        return parse_config(tmp)
    finally:
        os.unlink(tmp)


def _toml_dumps(obj: dict) -> str:
    # minimal writer for the config echo (flat tables of scalars/lists)
    lines = []
    for key, val in obj.items():
        if not isinstance(val, dict):
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in obj.items():
        if isinstance(val, dict):
            lines.append(f"[{key}]")
            for k2, v2 in val.items():
                lines.append(f"{k2} = {_toml_value(v2)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def validate_basis_fixture(path) -> None:
    """Integrity + invariants + an eigen-oracle spot check of a fixture."""
    table = load_fixture(path)
    validate_basis(table)
    for (p, q) in ((1, 0), (1, 1)):
        if (p, q) in table.block_dims:
            lam = oracle_eigenvalue(table, p, q, npoints=4)
            expect = sublaplacian_eigenvalue(table.n, p, q)
            if abs(lam - expect) > 1e-6 * max(1.0, expect):
                raise IntegrityError(
                    f"eigen oracle mismatch at (p,q)=({p},{q}): {lam!r} vs {expect!r}"
                )


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _limit_threads() -> None:
    cap = os.environ.get("CRFLOW_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(cap))
    except Exception:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _limit_threads()
    parser = argparse.ArgumentParser(prog="crflow",
                                     description="Webster curvature flow runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate a flow configuration")
    p_run.add_argument("config")
    p_run.add_argument("--out", required=True)

    p_rep = sub.add_parser("replay", help="reconstruct a snapshot and verify monitors")
    p_rep.add_argument("manifest")
    p_rep.add_argument("--snapshot", type=int, required=True)

    p_val = sub.add_parser("validate-basis", help="check a persisted basis fixture")
    p_val.add_argument("fixture")

    p_bld = sub.add_parser("build-basis", help="build and persist a basis fixture")
    p_bld.add_argument("--n", type=int, default=1)
    p_bld.add_argument("--degree", type=int, default=8)
    p_bld.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            setup = parse_config(args.config)
            code = execute(setup, args.out)
            print(f"run complete: exit {code}")
            return code
        if args.command == "replay":
            state = replay(args.manifest, args.snapshot)
            print(f"snapshot {args.snapshot} verified at t={state.t:.6g}")
            return 0
        if args.command == "validate-basis":
            validate_basis_fixture(args.fixture)
            print("basis fixture valid")
            return 0
        if args.command == "build-basis":
            table = build_basis(args.n, args.degree)
            table.save(args.out)
            print(f"saved basis (n={args.n}, N={args.degree}) to {args.out}")
            return 0
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, NumericalHealthError, CrflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
