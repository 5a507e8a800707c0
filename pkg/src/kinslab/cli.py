"""Command-line experiment runner.

Every workflow is a subcommand driven by one JSON config document.  The
config is checked against ``CONFIG_SCHEMA`` before any computation.  Each
run writes its numeric outputs and a manifest into ``--out``.  The manifest
holds the resolved config, grid hashes, tolerances and timing.

Exit codes: 0 ok, 1 usage or config error, 2 validation failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
SCHEMA_VERSION = 1

log = logging.getLogger("kinslab")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "velocity": {"rule": "gauss_hermite_tensor", "n_per_axis": 12, "cutoff": None},
    "theta": 0.125,
    "slab": {"nx": 16, "scheme": "upwind_fd_order2"},
    "n": 4,
    "use_full_K": False,
    "kernel_constants": None,
    "validate": {"tol_K": 1e-3, "oracle_samples": 1_000_000, "oracle_probes": 20, "oracle_rtol": 0.01},
    "diffusion": {"tol": 1e-11, "discrepancy_tol": 1e-6},
    "spectrum": {"ks": [0.0125, 0.025, 0.05, 0.1], "fit_basis": "even", "agreement": 0.05},
    "evolve": {
        "k_max": 0.6,
        "dk": 0.03,
        "bump_width": 1.0,
        "T": 50.0,
        "window": [5.0, 50.0],
        "samples": 16,
        "q": 1.0,
        "project_out_P0": False,
        "rtol": 1e-4,
        "k_tail_tol": 1e-4,
    },
    "heat_compare": {"lambda_scale": 1.0},
    "cycles": {"T0": [5.0, 10.0, 20.0], "C1": [0.1, 0.15, 0.2, 0.25, 0.3], "samples": 1_000_000, "min_count": 100},
    "decay_lemmas": {"q": [1.0, 1.5, 2.0]},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "kinslab run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "velocity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rule": {"enum": ["gauss_hermite_tensor", "uniform_truncated"]},
                "n_per_axis": _posint,
                "cutoff": {"type": ["number", "null"]},
            },
        },
        "theta": _num,
        "slab": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"nx": _posint, "scheme": {"type": "string"}},
        },
        "n": {"type": ["integer", "null"], "minimum": 0},
        "use_full_K": {"type": "boolean"},
        "kernel_constants": {"type": ["array", "null"], "items": _num, "minItems": 2, "maxItems": 2},
        "validate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol_K": _pos,
                "oracle_samples": {"type": "integer", "minimum": 0},
                "oracle_probes": _posint,
                "oracle_rtol": _pos,
            },
        },
        "diffusion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tol": _pos, "discrepancy_tol": _pos},
        },
        "spectrum": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks": {"type": "array", "items": _pos, "minItems": 2},
                "fit_basis": {"enum": ["cubic", "even"]},
                "agreement": _pos,
            },
        },
        "evolve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_max": _pos,
                "dk": _pos,
                "bump_width": _pos,
                "T": _pos,
                "window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "samples": {"type": "integer", "minimum": 2},
                "q": {"type": "number", "minimum": 1, "maximum": 2},
                "project_out_P0": {"type": "boolean"},
                "rtol": _pos,
                "k_tail_tol": _pos,
            },
        },
        "heat_compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lambda_scale": _pos},
        },
        "cycles": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T0": {"type": "array", "items": _pos, "minItems": 1},
                "C1": {"type": "array", "items": _pos, "minItems": 1},
                "samples": _posint,
                "min_count": _posint,
            },
        },
        "decay_lemmas": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"q": {"type": "array", "items": {"type": "number", "minimum": 1, "maximum": 2}}},
        },
    },
}


class ConfigError(ValueError):
    pass


class ValidationFailure(RuntimeError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, text=None):
    """Read, schema-check and complete a config; every default ends up explicit."""
    import jsonschema

    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    elif text is not None:
        raw = json.loads(text)
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config does not match schema: {exc.message}") from exc
    cfg = _merge(DEFAULTS, raw)
    if not 0 < cfg["theta"] < 0.25:
        raise ConfigError("theta outside (0, 1/4)")
    return cfg


# --------------------------------------------------------------------------
# shared setup


class Context:
    def __init__(self, cfg, out, seed, threads):
        self.cfg = cfg
        self.out = Path(out)
        self.seed = seed
        self.threads = threads
        self.out.mkdir(parents=True, exist_ok=True)
        self._grid = self._coll = self._ph = None

    def write_json(self, name, obj):
        (self.out / name).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def write_text(self, name, text):
        (self.out / name).write_text(text)

    @property
    def grid(self):
        if self._grid is None:
            from . import velocity as vel

            v = self.cfg["velocity"]
            try:
                self._grid = vel.build_velocity_grid(v["rule"], v["n_per_axis"], v["cutoff"])
            except vel.GridError as exc:
                raise ConfigError(str(exc)) from exc
        return self._grid

    @property
    def coll(self):
        if self._coll is None:
            from . import collision as col

            self._coll = col.assemble_K(
                self.grid, constants=self.cfg["kernel_constants"], tol_K=self.cfg["validate"]["tol_K"]
            )
        return self._coll

    @property
    def ph(self):
        if self._ph is None:
            from . import slab as sl
            from . import velocity as vel

            try:
                mw = vel.maxwellian(self.grid, self.cfg["theta"])
                s = sl.build_slab(self.cfg["slab"]["nx"], self.cfg["slab"]["scheme"])
            except (vel.GridError, sl.SlabError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
            self._ph = sl.Phase(self.grid, s, mw)
        return self._ph

    @property
    def n(self):
        n = self.cfg["n"]
        if n is not None and 2 * n >= self.cfg["slab"]["nx"]:
            raise ConfigError(f"order n={n} aliases on {self.cfg['slab']['nx']} cells (need n < Nx/2)")
        return n

    def manifest(self, command, started, extra=None):
        m = {
            "command": command,
            "config": self.cfg,
            "seed": self.seed,
            "threads": self.threads,
            "wall_time_s": time.time() - started,
        }
        if self._grid is not None:
            m["velocity_grid_hash"] = self._grid.hash()
            m["tol_q"] = self._grid.tol_q
        if self._coll is not None:
            m["collision_report"] = self._coll.oracle_report
        if extra:
            m.update(extra)
        self.write_json(f"manifest_{command}.json", m)
        self.write_json("config_schema.json", CONFIG_SCHEMA)


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, complex) or isinstance(obj, np.complexfloating):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _dat_and_plot(ctx, stem, header, rows, ylabel, logscale=True):
    lines = ["# " + " ".join(header)] + [" ".join(repr(float(x)) for x in r) for r in rows]
    ctx.write_text(f"{stem}.dat", "\n".join(lines) + "\n")
    cols = len(header)
    plot = ", ".join(f"'{stem}.dat' using 1:{i} with linespoints title '{header[i - 1]}'" for i in range(2, cols + 1))
    script = [
        "set terminal pngcairo size 800,600",
        f"set output '{stem}.png'",
        f"set xlabel '{header[0]}'",
        f"set ylabel '{ylabel}'",
    ]
    if logscale:
        script.append("set logscale xy")
    script.append(f"plot {plot}")
    ctx.write_text(f"{stem}.gp", "\n".join(script) + "\n")


def _csv(header, rows):
    out = [",".join(header)]
    for r in rows:
        out.append(",".join(repr(float(x)) if not isinstance(x, str) else x for x in r))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# subcommands


def cmd_validate_operators(ctx):
    import numpy as np

    from . import collision as col
    from . import slab as sl

    report = {"checks": {}}
    checks = report["checks"]
    cfg = ctx.cfg
    ph = ctx.ph
    try:
        coll = ctx.coll
    except col.CollisionValidationError as exc:
        report["passed"] = False
        report["failure"] = str(exc)
        ctx.write_json("validate_operators.json", report)
        raise ValidationFailure(str(exc)) from exc
    tol = cfg["validate"]["tol_K"]
    rep = coll.oracle_report
    for name, v in rep["null_relations_raw"].items():
        checks[f"null_relation[{name}]"] = {"value": v, "bound": tol, "passed": v <= tol}
    ks = rep["kernel_symmetry_defect"]
    checks["kernel_symmetry"] = {"value": ks, "bound": 1e-12, "passed": ks <= 1e-12}
    if rep["self_adjointness_defect"] is not None:
        sa = rep["self_adjointness_defect"]
        checks["self_adjointness"] = {"value": sa, "bound": 1e-10, "passed": sa <= 1e-10}
    rng = np.random.default_rng(ctx.seed)
    F = rng.standard_normal(ph.shape) * ph.mw.sqrt_mu
    for name, P in (("P", lambda G: sl.apply_P(G, ph)), ("P0", lambda G: sl.apply_P0(G, ph))):
        once = P(F)
        d = float(np.linalg.norm(P(once) - once) / max(np.linalg.norm(once), 1e-300))
        checks[f"idempotency[{name}]"] = {"value": d, "bound": 1e-12, "passed": d <= 1e-12}
    if ctx.n is not None:
        once = sl.apply_Pn(F, ph.slab, ctx.n)
        d = float(np.linalg.norm(sl.apply_Pn(once, ph.slab, ctx.n) - once) / np.linalg.norm(once))
        checks["idempotency[P_n]"] = {"value": d, "bound": 1e-12, "passed": d <= 1e-12}
    LF = np.stack([coll.apply_L(F[j]) for j in range(ph.slab.nx)])
    cons = float(np.linalg.norm(sl.apply_P(LF, ph)) / np.linalg.norm(LF))
    checks["collision_conservation"] = {"value": cons, "bound": 1e-10, "passed": cons <= 1e-10}
    TF = sl.apply_transport(F, ph, "diffuse")
    mass_rate = float(abs(sl.mass(TF, ph)) / np.sqrt(np.sum(ph.cell_weights * TF**2)))
    checks["transport_mass_conservation"] = {"value": mass_rate, "bound": 1e-12, "passed": mass_rate <= 1e-12}
    ns = cfg["validate"]["oracle_samples"]
    if ns:
        oc = col.kernel_oracle_check(coll, samples=ns, count=cfg["validate"]["oracle_probes"], seed=ctx.seed)
        rel = np.abs(np.array(oc["numeric"]) - np.array(oc["monte_carlo"])) / np.abs(oc["monte_carlo"])
        noise = 4 * np.array(oc["mc_stderr"]) / np.abs(oc["monte_carlo"])
        bound = np.maximum(cfg["validate"]["oracle_rtol"], noise)
        oc["passed"] = bool(np.all(rel <= bound))
        checks["kernel_oracle"] = {"value": oc["max_rel_error"], "bound": float(bound.max()), "passed": oc["passed"]}
    for c in checks.values():
        c["passed"] = bool(c["passed"])
        c["margin"] = float(c["bound"] - c["value"])
    report["passed"] = all(c["passed"] for c in checks.values())
    report["nu0_estimate"] = coll.nu0_estimate
    ctx.write_json("validate_operators.json", report)
    if not report["passed"]:
        bad = [k for k, c in checks.items() if not c["passed"]]
        raise ValidationFailure("failed checks: " + ", ".join(bad))
    return report


def _cross_check(ctx):
    d = ctx.out / "diffusion.json"
    b = ctx.out / "spectrum.json"
    if not (d.exists() and b.exists()):
        return None
    dj = json.loads(d.read_text())
    bj = json.loads(b.read_text())
    fit = bj["lambda_star_fit"]
    rel = abs(fit - dj["lambda_star"]) / dj["lambda_star"]
    bound = ctx.cfg["spectrum"]["agreement"]
    summary = {
        "lambda_star_G1": dj["lambda_star"],
        "lambda_star_fit": fit,
        "fit_basis": bj["fit_basis"],
        "relative_difference": rel,
        "bound": bound,
        "passed": bool(rel <= bound),
    }
    ctx.write_json("summary.json", summary)
    return summary


def cmd_diffusion(ctx):
    from . import slab as sl
    from . import spectral as spc

    d = spc.solve_G1(ctx.ph, ctx.coll, n=ctx.n, use_full_K=ctx.cfg["use_full_K"], tol=ctx.cfg["diffusion"]["tol"])
    out = {k: getattr(d, k) for k in d.__dataclass_fields__ if k != "G1"}
    out["discrepancy_tol"] = ctx.cfg["diffusion"]["discrepancy_tol"]
    out["passed"] = bool(d.discrepancy <= out["discrepancy_tol"] and d.lambda_star > 0)
    ctx.write_json("diffusion.json", out)
    (ctx.out / "G1.bin").write_bytes(sl.to_bytes(d.G1))
    ctx.write_json("G1.json", {"shape": list(d.G1.shape), "dtype": "complex128", "order": "C", "x3_cells": ctx.ph.slab.nx})
    _cross_check(ctx)
    if not out["passed"]:
        raise spc.SolverError(f"diffusion cross-check failed: discrepancy {d.discrepancy:.3e}", d.discrepancy, d.iterations)
    return out


def cmd_spectrum(ctx):
    from . import spectral as spc

    sc = ctx.cfg["spectrum"]
    br = spc.compute_branch(ctx.ph, ctx.coll, ctx.n, sc["ks"], use_full_K=ctx.cfg["use_full_K"])
    out = {
        "k": br.k,
        "eigenvalues": [complex(z) for z in br.eigenvalues],
        "residuals": br.residuals,
        "fit_basis": sc["fit_basis"],
        "lambda_star_fit": br.fit_lambda_star(sc["fit_basis"]),
        "lambda_star_fit_cubic": br.lambda_star_fit,
        "C_fit_cubic": br.C_fit,
        "lambda_star_fit_even": br.lambda_star_fit_even,
        "C_fit_even": br.C_fit_even,
        "leave_one_out_cubic": br.leave_one_out,
        "leave_one_out_even": br.leave_one_out_even,
    }
    ctx.write_json("spectrum.json", out)
    rows = [(k, z.real, z.imag, r) for k, z, r in zip(br.k, br.eigenvalues, br.residuals)]
    ctx.write_text("spectrum.csv", _csv(["k", "re_lambda", "im_lambda", "residual"], rows))
    _dat_and_plot(ctx, "spectrum", ["k", "minus_re_lambda"], [(k, -z.real) for k, z in zip(br.k, br.eigenvalues)], "-Re lambda")
    _cross_check(ctx)
    return out


def _radial_run(ctx, lambda_scale=None):
    import numpy as np

    from . import evolution as ev
    from . import spectral as spc

    ec = ctx.cfg["evolve"]
    g_full, g_perp, removed = ev.decay_profiles(ctx.ph, ctx.coll, ctx.n, ctx.cfg["use_full_K"])
    prof = g_perp if ec["project_out_P0"] else g_full
    w = ec["bump_width"]
    rho = lambda k: np.exp(-0.5 * (w * k) ** 2)
    d = spc.solve_G1(ctx.ph, ctx.coll, n=ctx.n, use_full_K=ctx.cfg["use_full_K"])
    ev.check_k_grid(rho, ec["k_max"], d.lambda_star, ec["window"][0], ec["k_tail_tol"])
    fs = ev.radial_field(ctx.ph, rho, ec["k_max"], ec["dk"], profile=prof)
    t_out = np.concatenate([[0.0], ev.log_times(ec["window"][0], ec["window"][1], ec["samples"])])
    traj = ev.evolve_field(fs, ctx.coll, ec["T"], t_out, n=ctx.n, use_full_K=ctx.cfg["use_full_K"], rtol=ec["rtol"])
    idx = ev.DecayIndex(ec["q"], 1 if ec["project_out_P0"] else 0)
    fit = ev.measure_decay(traj, idx, tuple(ec["window"]))
    fit_sup = ev.measure_decay(traj, idx, tuple(ec["window"]), norm="sup")
    comps = {}
    for scale in sorted({1.0, lambda_scale or 1.0}):
        comps[scale] = ev.heat_compare(traj, ev.HeatReference.from_field(fs, scale * d.lambda_star), tuple(ec["window"]))
    return fs, traj, fit, fit_sup, d, comps, removed


def cmd_evolve(ctx):
    _, traj, fit, fit_sup, d, comps, removed = _radial_run(ctx)
    hc = comps[1.0]
    rows = [(t, n, s, e) for t, n, s, e in zip(traj.times, traj.norms, traj.sups, hc.errors)]
    ctx.write_text("trajectory.csv", _csv(["t", "l2_norm", "weighted_sup", "heat_error"], rows))
    _dat_and_plot(ctx, "trajectory", ["t", "l2_norm", "weighted_sup", "heat_error"], [r for r in rows if r[0] > 0], "norm")
    out = {
        "slope_l2": fit.slope,
        "slope_weighted_sup": fit_sup.slope,
        "expected_slope": fit.expected,
        "window": fit.window,
        "samples": fit.samples,
        "lambda_star": d.lambda_star,
        "removed_slow_modes": [complex(z) for z in removed],
        "steps": traj.steps,
        "rejected_steps": traj.rejected,
    }
    ctx.write_json("evolve.json", out)
    return out


def cmd_heat_compare(ctx):
    scale = ctx.cfg["heat_compare"]["lambda_scale"]
    _, traj, fit, _, d, comps, _ = _radial_run(ctx, scale)
    hc = comps[scale]
    rows = [(t, e, n) for t, e, n in zip(hc.times, hc.errors, hc.norms)]
    ctx.write_text("heat_compare.csv", _csv(["t", "heat_error", "l2_norm"], rows))
    _dat_and_plot(ctx, "heat_compare", ["t", "heat_error", "l2_norm"], [r for r in rows if r[0] > 0], "norm")
    out = {
        "lambda_scale": scale,
        "lambda_reference": scale * d.lambda_star,
        "slope_error": hc.slope_error,
        "slope_solution": hc.slope_solution,
        "gap": hc.gap,
        "required_gap": 0.4,
        "passed": bool(hc.gap >= 0.4),
    }
    if scale != 1.0:
        out["gap_exact_lambda"] = comps[1.0].gap
        out["gap_degradation"] = comps[1.0].gap - hc.gap
    ctx.write_json("heat_compare.json", out)
    return out


def cmd_cycles(ctx):
    from . import cycles as cy

    cc = ctx.cfg["cycles"]
    tab = cy.estimate_persistence(cc["T0"], cc["C1"], cc["samples"], ctx.seed, cc["min_count"], ctx.threads)
    ctx.write_text("persistence.csv", tab.to_csv())
    ctx.write_text("persistence.json", tab.to_json() + "\n")
    rows = [(r[2], r[3]) for r in tab.rows]
    _dat_and_plot(ctx, "persistence", ["k", "p_hat"], rows, "p_hat")
    if not all(e["passed"] for e in tab.envelopes.values()):
        raise ValidationFailure("geometric envelope check failed")
    return tab.summary()


def cmd_decay_lemmas(ctx):
    from . import evolution as ev

    res = [ev.check_decay_convolutions(q) for q in ctx.cfg["decay_lemmas"]["q"]]
    ctx.write_json("decay_lemmas.json", res)
    if not all(r["passed"] for r in res):
        raise ValidationFailure("decay convolution envelope failed")
    return res


COMMANDS = {
    "validate-operators": cmd_validate_operators,
    "diffusion": cmd_diffusion,
    "spectrum": cmd_spectrum,
    "evolve": cmd_evolve,
    "heat-compare": cmd_heat_compare,
    "cycles": cmd_cycles,
    "decay-lemmas": cmd_decay_lemmas,
}


def build_parser():
    p = argparse.ArgumentParser(prog="kinslab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--out", default="kinslab-out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--seed", type=int, default=0, help="random seed (unsigned 64-bit)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1 or not 0 <= args.seed < 2**64:
        print("error: --threads must be >= 1 and --seed an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))

    from .collision import CollisionValidationError
    from .spectral import SolverError

    started = time.time()
    try:
        cfg = load_config(args.config)
        ctx = Context(cfg, args.out, args.seed, args.threads)
        result = COMMANDS[args.command](ctx)
        ctx.manifest(args.command, started, {"status": "ok"})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationFailure, CollisionValidationError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        _flag_partial(args, started, str(exc))
        return EXIT_VALIDATION
    except (SolverError, FloatingPointError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _flag_partial(args, started, str(exc))
        return EXIT_NUMERICAL
    print(json.dumps(_jsonable(_headline(args.command, result)), sort_keys=True))
    return EXIT_OK


def _flag_partial(args, started, msg):
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"manifest_{args.command}.json").write_text(
            json.dumps({"command": args.command, "status": "failed", "partial_outputs": True, "error": msg,
                        "wall_time_s": time.time() - started}, indent=2) + "\n"
        )
    except OSError:
        pass


def _headline(command, result):
    if isinstance(result, dict):
        keep = ("passed", "lambda_star", "lambda_star_fit", "discrepancy", "slope_l2", "gap", "best_C1_C2")
        return {"command": command, **{k: result[k] for k in keep if k in result}}
    return {"command": command, "passed": all(r.get("passed", True) for r in result)}


if __name__ == "__main__":
    sys.exit(main())
