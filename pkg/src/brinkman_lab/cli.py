"""Command-line entry point: ``brinkman-lab <command> --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical
failure, 4 a check failed (lemma, commutator, energy or validation).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, _core
from .config import ConfigError, RunSpec, build_law, load_config, parse_config
from .diagnostics import (
    DiagnosticsCollector,
    PairSampler,
    commutator_bound_check,
    deweight_bound,
    extra_integrability,
    refinement_study,
    translation_modulus,
    unweighted_modulus,
    weighted_modulus,
)
from .fields import PeriodicGrid, ScalarField, VectorField, read_snapshot, write_snapshot
from .harmonic import (
    KernelSpec,
    compare_dh_max,
    gradient_magnitude,
    random_bandlimited,
    refinement_ratio_ok,
    square_function_stat,
    verify_pointwise_lemma,
)
from .pressure import validate_law
from .solver import SimulationError, run_simulation
from .weights import log_weight_budget

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4


class _Outputs:
    """Tracks written files and writes the manifest last (atomically)."""

    def __init__(self, out_dir: Path, command: str, cfg_bytes: bytes, seed: int):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list = []
        self.manifest = {
            "command": command,
            "config_hash": _sha256(cfg_bytes),
            "code_version": __version__,
            "backend": _core.BACKEND,
            "seed": seed,
            "started": _now(),
        }

    def path(self, name: str) -> Path:
        p = self.dir / name
        if name not in self.files:
            self.files.append(name)
        return p

    def write_json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, status: str, checks: dict, error: Optional[str] = None) -> None:
        self.manifest.update({
            "finished": _now(),
            "outputs": [f for f in self.files if (self.dir / f).exists()],
            "checks": checks,
            "status": status,
            "error": error,
        })
        tmp = self.dir / "manifest.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(_jsonable(self.manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.dir / "manifest.json")


def _sha256(data: bytes) -> str:
    import hashlib

    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fmt(v) -> str:
    return "%.17g" % (float(v) + 0.0)  # no negative zero


def _parse_list(text: Optional[str], cast=float) -> Optional[list]:
    if text is None:
        return None
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("cli", f"cannot parse list {text!r}") from None


def _out_dir(args, spec: RunSpec) -> Path:
    if args.out:
        return Path(args.out)
    if spec.out_dir:
        return Path(spec.out_dir)
    return Path("brinkman_out")


# --- run --------------------------------------------------------------------------


def cmd_run(args) -> int:
    spec, data = load_config(args.config, seed=args.seed, h0_override=_parse_list(args.h0))
    out = _Outputs(_out_dir(args, spec), "run", data, spec.seed)
    cfg = spec.sim
    sampler = PairSampler(mode=spec.sampler_mode, sample_count=spec.sampler_samples, seed=spec.seed)
    coll = DiagnosticsCollector(cfg, sampler, lp=spec.lp, theta=spec.theta,
                                commutator_pairs=spec.commutator_pairs)
    csv_path = out.path("diagnostics.csv")
    fh = open(csv_path, "w")
    states: list = []

    def write_row(state, rec, damping):
        d = coll.records[-1]
        if len(coll.records) == 1:
            fh.write(",".join(d.columns()) + "\n")
        fh.write(",".join(_fmt(v) for v in d.row()) + "\n")

    def snapshot(state, rec, damping):
        if spec.snapshot_every and rec.step % spec.snapshot_every == 0:
            tag = f"{rec.step:06d}"
            write_snapshot(out.path(f"rho_{tag}.bin"), state.rho, "rho", state.t)
            write_snapshot(out.path(f"w_{tag}.bin"), state.w, "w", state.t)
            write_snapshot(out.path(f"u_{tag}.bin"), state.u, "u", state.t)

    def keep(state, rec, damping):
        states.append(state)

    callbacks = [coll, write_row, snapshot]
    if cfg.emit_every == 1:
        callbacks.append(keep)
    try:
        result = run_simulation(cfg, callbacks=callbacks)
    except (SimulationError, FloatingPointError, ArithmeticError) as exc:
        fh.close()
        out.finish("failed", {}, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if not fh.closed:
            fh.close()

    recs = result.records
    M0 = recs[0].mass
    checks = {
        "mass_conservation": bool(max(abs(r.mass - M0) for r in recs) <= 1e-10 * M0),
        "energy_inequality": bool(result.energy_gap >= -result.energy_tolerance()),
        "momentum_residual": bool(all(
            r.momentum_residual <= 1e-8 * (_source_l2(cfg, r.t) + 1.0) for r in recs)),
        "weight_bounds": bool(all(0.0 <= r.w_min and r.w_max <= 1.0 for r in recs)),
    }
    viol = [d.commutator_violation for d in coll.records if not math.isnan(d.commutator_violation)]
    if viol:
        checks["commutator"] = bool(max(viol) <= 1e-10)
    report = {
        "lambda_w": result.lambda_w,
        "E0": result.E0,
        "energy_gap": result.energy_gap,
        "energy_tolerance": result.energy_tolerance(),
        "max_momentum_residual": max(r.momentum_residual for r in recs),
        "max_div_identity_residual": max(r.div_residual for r in recs),
        "max_commutator_violation": max(viol) if viol else None,
        "steps": recs[-1].step,
        "checks": checks,
    }
    if states:
        report["extra_integrability"] = extra_integrability(
            states[:-1] or states, cfg.law, cfg.mu, cfg.alpha, cfg.dt, spec.theta, cfg.source)
        checks["extra_integrability_identity"] = bool(report["extra_integrability"]["mismatch"] <= 1e-6)
    out.write_json("report.json", report)
    ok = all(checks.values())
    out.finish("ok" if ok else "check_failed", checks)
    print(json.dumps(_jsonable(checks), sort_keys=True))
    return EXIT_OK if ok else EXIT_CHECK


def _source_l2(cfg, t: float) -> float:
    S = cfg.source.evaluate(cfg.grid, t).values
    return math.sqrt(float(np.sum(S * S)) * cfg.grid.cell_volume)


# --- diagnose ---------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    spec, data = load_config(args.config, seed=args.seed, h0_override=_parse_list(args.h0))
    run_dir = Path(args.run_dir) if args.run_dir else _out_dir(args, spec)
    out = _Outputs(_out_dir(args, spec), "diagnose", data, spec.seed)
    snaps = sorted(run_dir.glob("rho_*.bin"))
    if not snaps:
        out.finish("failed", {}, error=f"no snapshots in {run_dir}")
        print(f"error: no rho_*.bin snapshots in {run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    cfg = spec.sim
    sampler = PairSampler(mode=spec.sampler_mode, sample_count=spec.sampler_samples, seed=spec.seed)
    rows = []
    worst = -math.inf
    for path in snaps:
        tag = path.stem.split("_", 1)[1]
        header, rho = read_snapshot(path)
        _, w = read_snapshot(run_dir / f"w_{tag}.bin")
        budget = log_weight_budget(rho, w)
        entry = {"t": header["time"], "step": int(tag), "weight_budget": budget, "moduli": {}}
        for kspec in cfg.kernels:
            h0 = float(kspec.h0)
            R = weighted_modulus(rho, w, kspec, sampler).value
            U = unweighted_modulus(rho, kspec, sampler).value
            bound = deweight_bound(R, budget, h0, -math.log(h0))
            entry["moduli"][f"{h0:g}"] = {"weighted": R, "unweighted": U,
                                          "deweight_bound": bound["bound"],
                                          "eta_star": bound["eta_star"],
                                          "bound_ok": bound["bound"] >= U * (1 - 1e-12)}
        shifts = [k / rho.grid.n for k in (1, 2, 4, 8)]
        if rho.grid.dim == 2:
            shifts = [(s, 0.0) for s in shifts]
        entry["translation_L1"] = {str(k): v for k, v in translation_modulus(rho, shifts, p=1.0).items()}
        if spec.commutator_pairs:
            com = commutator_bound_check(rho, cfg.law, PairSampler(
                sample_count=spec.commutator_pairs, seed=spec.seed))
            entry["commutator"] = com
            worst = max(worst, com["max_violation"])
        rows.append(entry)
    bound_ok = all(m["bound_ok"] for r in rows for m in r["moduli"].values())
    checks = {"deweight_consistency": bool(bound_ok)}
    if worst > -math.inf:
        checks["commutator"] = bool(worst <= 1e-10)
    out.write_json("diagnose.json", {"snapshots": rows, "checks": checks})
    ok = all(checks.values())
    out.finish("ok" if ok else "check_failed", checks)
    return EXIT_OK if ok else EXIT_CHECK


# --- verify-lemmas ------------------------------------------------------------------


def _lemma_settings(spec: RunSpec, args) -> dict:
    L = spec.lemmas
    res = _parse_list(args.resolutions, int) or L.get("resolutions", [256, 512])
    if not isinstance(res, list) or len(res) < 2:
        raise ConfigError("lemmas.resolutions", "stability verdicts need at least 2 resolutions")
    ensemble = L.get("ensemble", "random")
    if ensemble not in ("random", "zero"):
        raise ConfigError("lemmas.ensemble", f"unknown ensemble {ensemble!r}")
    seeds = L.get("seeds", 5)
    if not isinstance(seeds, int) or seeds < 1:
        raise ConfigError("lemmas.seeds", "expected a positive integer")
    sq_res = L.get("square_resolutions", [2048, 4096])
    if not isinstance(sq_res, list) or len(sq_res) < 2:
        raise ConfigError("lemmas.square_resolutions", "need at least 2 resolutions")
    sq_h0 = _parse_list(args.h0) or L.get("square_h0", [0.1, 0.01, 0.001])
    return {"resolutions": [int(n) for n in res], "ensemble": ensemble, "seeds": seeds,
            "kmax": int(L.get("kmax", 8)), "decay": float(L.get("decay", 1.5)),
            "pairs": int(L.get("pairs", 10_000)), "square_resolutions": [int(n) for n in sq_res],
            "square_h0": [float(h) for h in sq_h0], "dim": int(L.get("dim", 1))}


def _ensemble(grid: PeriodicGrid, s: dict, seed: int, components: int = 1):
    if s["ensemble"] == "zero":
        if components == 1:
            return ScalarField.constant(grid, 0.0)
        return VectorField.zeros(grid)
    return random_bandlimited(grid, seed, kmax=s["kmax"], decay=s["decay"], components=components)


def _stability(per_res: list, one_sided: bool = False) -> bool:
    vals = [v for _, v in per_res]
    if not all(math.isfinite(v) for v in vals):
        return False
    for a, b in zip(vals, vals[1:]):
        if one_sided:
            if b > 1.25 * a:
                return False
        elif not refinement_ratio_ok(a, b):
            return False
    return True


def cmd_verify_lemmas(args) -> int:
    spec, data = load_config(args.config, seed=args.seed, need_sim=False)
    s = _lemma_settings(spec, args)
    out = _Outputs(_out_dir(args, spec), "verify-lemmas", data, spec.seed)
    seeds = [spec.seed + i for i in range(s["seeds"])]
    dim = s["dim"]

    dh = []
    pw = []
    for n in s["resolutions"]:
        grid = PeriodicGrid(dim, n)
        c_dh = 0.0
        c_pw = 0.0
        for sd in seeds:
            u = _ensemble(grid, s, sd)
            c_dh = max(c_dh, compare_dh_max(gradient_magnitude(u))["ratio"])
            c_pw = max(c_pw, verify_pointwise_lemma(u, pairs=s["pairs"], seed=sd)["C_hat"])
        dh.append((n, c_dh))
        pw.append((n, c_pw))

    sq = []
    slopes = []
    logL = np.log([-math.log(h) for h in s["square_h0"]])
    for n in s["square_resolutions"]:
        grid = PeriodicGrid(dim, n)
        c_sq = 0.0
        for sd in seeds:
            u = _ensemble(grid, s, sd)
            stats = [square_function_stat(u, h0)["stat"] for h0 in s["square_h0"]]
            c_sq = max(c_sq, max(stats))
            if len(stats) >= 2 and min(stats) > 0:
                slopes.append(float(np.polyfit(logL, np.log(stats), 1)[0]))
        sq.append((n, c_sq))

    def section(name, per_res, one_sided=False, extra=None):
        sec = {"lemma_name": name, "constant_estimate": max(v for _, v in per_res),
               "resolutions": [n for n, _ in per_res],
               "per_resolution": {str(n): v for n, v in per_res},
               "pass": _stability(per_res, one_sided)}
        sec.update(extra or {})
        return sec

    lemmas = [
        section("dh_vs_maximal", dh, one_sided=True),
        section("pointwise_difference", pw),
        section("square_function", sq, extra={"trend_slope_max": max(slopes) if slopes else 0.0,
                                               "h0": s["square_h0"]}),
    ]
    ok = all(sec["pass"] for sec in lemmas)
    out.write_json("lemmas.json", {"lemmas": lemmas, "ensemble": s["ensemble"],
                                   "seeds": seeds, "pass": ok})
    out.finish("ok" if ok else "check_failed", {sec["lemma_name"]: sec["pass"] for sec in lemmas})
    return EXIT_OK if ok else EXIT_CHECK


# --- validate-pressure --------------------------------------------------------------


def cmd_validate_pressure(args) -> int:
    spec, data = load_config(args.config, seed=args.seed, need_sim=False)
    out = _Outputs(_out_dir(args, spec), "validate-pressure", data, spec.seed)
    law = build_law(spec.law_spec)
    p = spec.raw.get("pressure", {})
    rho_max = float(p.get("rho_max", 10.0))
    samples = int(p.get("samples", 2000))
    if not rho_max > 0:
        raise ConfigError("pressure.rho_max", "must be positive")
    if samples < 100:
        raise ConfigError("pressure.samples", "must be >= 100")
    report = validate_law(law, rho_max=rho_max, samples=samples).to_dict()
    report["label"] = law.label
    report["gamma"] = law.gamma
    out.write_json("validation.json", report)
    out.finish("ok" if report["pass"] else "check_failed", {"validate_law": report["pass"]})
    print(json.dumps(_jsonable(report), sort_keys=True))
    return EXIT_OK if report["pass"] else EXIT_CHECK


# --- convergence-study ----------------------------------------------------------------


def cmd_convergence_study(args) -> int:
    spec, data = load_config(args.config, seed=args.seed, h0_override=_parse_list(args.h0))
    out = _Outputs(_out_dir(args, spec), "convergence-study", data, spec.seed)
    res = _parse_list(args.resolutions, int) or spec.study.get("resolutions", [128, 256, 512])
    if not isinstance(res, list) or len(res) < 3:
        raise ConfigError("study.resolutions", "need at least 3 resolutions")
    if len(spec.h0_list) < 3:
        raise ConfigError("kernels.h0", "need at least 3 values")
    base = spec.sim
    base_n = base.grid.n

    def make(n: int):
        s = parse_config(spec.raw, seed=spec.seed, n_override=n, h0_override=list(spec.h0_list))
        # keep the Courant number fixed across resolutions
        return dataclasses.replace(s.sim, dt=base.dt * base_n / n)

    sampler = PairSampler(mode=spec.sampler_mode, sample_count=spec.sampler_samples, seed=spec.seed)
    report = refinement_study(make, res, spec.h0_list, sampler,
                              scenario=str(spec.study.get("scenario", Path(args.config).stem)),
                              emit_every=lambda n: max(1, base.emit_every * n // base_n))
    out.write_json("study.json", report)
    if report["error"]:
        out.finish("failed", {"refinement_study": False}, error=report["error"])
        return EXIT_RUNTIME
    out.finish("ok" if report["pass"] else "check_failed", {"refinement_study": report["pass"]})
    return EXIT_OK if report["pass"] else EXIT_CHECK


# --- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brinkman-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "run": (cmd_run, "integrate a scenario and write diagnostics"),
        "diagnose": (cmd_diagnose, "recompute functionals from stored snapshots"),
        "verify-lemmas": (cmd_verify_lemmas, "estimate the harmonic-analysis lemma constants"),
        "validate-pressure": (cmd_validate_pressure, "fit and check the pressure-law constants"),
        "convergence-study": (cmd_convergence_study, "run a scenario at several resolutions"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="random seed (overrides diagnostics.seed)")
        p.add_argument("--threads", type=int, help="threads for compiled kernels")
        p.add_argument("--h0", help="comma-separated h0 values")
        p.add_argument("--resolutions", help="comma-separated grid sizes")
        if name == "diagnose":
            p.add_argument("--run-dir", help="directory holding the run snapshots (default: --out)")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        env = os.environ.get("BRINKMAN_LAB_THREADS")
        threads = int(env) if env and env.isdigit() else None
    try:
        if threads is not None:
            _core.set_threads(threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        if args.threads is not None and args.threads < 1:
            print(f"config error: --threads: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
