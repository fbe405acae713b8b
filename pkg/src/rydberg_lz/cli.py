"""Command-line front end.

    rydberg-lz simulate --config run.toml --out data/
    rydberg-lz fit data/dataset.csv --kind both --out fit/
    rydberg-lz noise data/dataset.csv --fit-report fit/fit_report.json --out noise/
    rydberg-lz table --config run.toml --out tables/
    rydberg-lz convert --fit-report fit/fit_report.json --s-total 10 --n-atoms 1e4

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or input
format error, 4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import calibration as cal
from . import noise as noise_mod
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetFormatError, read_dataset_csv, write_dataset_csv, write_truth_csv
from .numerics import NumericalError
from .physics import MAGIC_ANGLE, PairPhysics, p_lz_single
from .simulator import generate_dataset

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class NonConvergence(RuntimeError):
    pass


def _version() -> str:
    return __version__


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _physics_dict(cfg: RunConfig, physics: PairPhysics) -> dict:
    return {"r0_ref_um": physics.r0_ref, "f_prime_ref_V_per_cm_per_us": physics.f_prime_ref,
            "r0_marker_um": cfg.physics.r0_marker_um,
            "r0_marker_meaning": cfg.physics.r0_marker_meaning,
            "channel_set": cfg.physics.channel_set}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    sim = cfg.sim_config(seed=args.seed)
    if args.n_shots is not None:
        sim = sim.with_(n_shots=args.n_shots)
    if args.no_sweep:
        sim = sim.with_(sweep_enabled=False)
    data, truth = generate_dataset(sim)
    out = _out_dir(args, cfg)
    write_dataset_csv(out / "dataset.csv", data)
    write_truth_csv(out / "truth.csv", truth)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": sim.seed,
        "n_shots": sim.n_shots,
        "sweep_enabled": sim.sweep_enabled,
        "versions": {"rydberg_lz": _version(), "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "files": ["dataset.csv", "truth.csv"],
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(data)} shots to {out}")
    return EXIT_OK


def _summary_table(fits: dict, ftest) -> str:
    lines = [f"{'model':<10} {'g0 [cm^-3/(V s)]':>22} {'g1 [cm^-3/(V s)^2]':>24} "
             f"{'chi2_red [nVs^2]':>17} {'noise [nVs]':>12} {'conv':>5}"]
    for kind, f in fits.items():
        g0 = f"{f.model.g0:.5e} ± {f.param_std[0]:.1e}"
        g1 = f"{f.model.g1:.4e} ± {f.param_std[1]:.1e}" if f.n_params > 1 else "-"
        lines.append(f"{kind:<10} {g0:>22} {g1:>24} {f.reduced_chi_square:>17.5g} "
                     f"{f.noise_estimate:>12.4g} {'yes' if f.converged else 'NO':>5}")
    if ftest is not None:
        lines.append(f"F-test: F = {ftest.f_statistic:.4g}, p = {ftest.p_value:.3g}, "
                     f"quadratic preferred at {ftest.threshold:.0%}: "
                     f"{'yes' if ftest.quadratic_preferred else 'no'}")
    return "\n".join(lines)


def cmd_fit(args, cfg: RunConfig) -> int:
    physics = cfg.physics.build()
    data = read_dataset_csv(args.dataset)
    if len(data) == 0:
        raise ConfigError(f"{args.dataset}: dataset is empty")
    corrected = False
    if args.baseline is not None:
        baseline = read_dataset_csv(args.baseline)
        data = cal.bbr_correct(data, baseline)
        corrected = True
    kind = args.kind or cfg.fit.kind
    kinds = ("linear", "quadratic") if kind == "both" else (kind,)
    fits = {}
    for k in kinds:
        init = fits["linear"].model if k == "quadratic" and "linear" in fits else None
        fits[k] = cal.fit(data, k, physics, init=init)
    ftest = None
    if kind == "both":
        ftest = cal.compare_models(fits["linear"], fits["quadratic"],
                                   threshold=cfg.fit.significance)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "dataset": str(args.dataset),
        "baseline": None if args.baseline is None else str(args.baseline),
        "bbr_corrected": corrected,
        "n_shots": len(data),
        "physics": _physics_dict(cfg, physics),
        "fits": {k: f.to_dict() for k, f in fits.items()},
        "f_test": None if ftest is None else ftest.to_dict(),
    }
    out = _out_dir(args, cfg)
    _write_json(out / "fit_report.json", report)
    print(_summary_table(fits, ftest))
    bad = [k for k, f in fits.items() if not f.converged]
    if bad:
        raise NonConvergence(f"fit did not converge for: {', '.join(bad)}")
    return EXIT_OK


def _load_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(path, exc.lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(report, dict) or report.get("schema_version") != SCHEMA_VERSION \
            or not isinstance(report.get("fits"), dict):
        raise ConfigError(f"{path}: not a fit report (schema_version {SCHEMA_VERSION})")
    return report


def _model_from_report(report: dict, which: str, path) -> cal.ConversionModel:
    fits = report["fits"]
    if which == "auto":
        ft = report.get("f_test")
        if ft is not None and "quadratic" in fits:
            which = "quadratic" if ft.get("quadratic_preferred") else "linear"
        else:
            which = "linear" if "linear" in fits else next(iter(fits))
    if which not in fits:
        raise ConfigError(f"{path}: report has no {which} fit")
    m = fits[which]["model"]
    try:
        if which == "linear":
            return cal.ConversionModel.linear(m["g0_cm3_per_Vs"])
        return cal.ConversionModel.quadratic(m["g0_cm3_per_Vs"], m["g1_cm3_per_Vs2"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed {which} model ({exc})") from None


def cmd_noise(args, cfg: RunConfig) -> int:
    physics = cfg.physics.build()
    report = _load_report(args.fit_report)
    model = _model_from_report(report, "linear", args.fit_report)
    data = read_dataset_csv(args.dataset)
    if len(data) == 0:
        raise ConfigError(f"{args.dataset}: dataset is empty")
    nc = cfg.noise
    res = noise_mod.iterative_fit(data, model, physics, bins_per_group=nc.bins_per_group,
                                  trim_edges=nc.trim_edges, tol=nc.tol, max_iter=nc.max_iter)
    out = _out_dir(args, cfg)
    body = res.to_dict()
    body.update({"schema_version": SCHEMA_VERSION, "command": "noise",
                 "dataset": str(args.dataset), "fit_report": str(args.fit_report),
                 "calibration": model.to_dict()})
    _write_json(out / "noise_report.json", body)
    with (out / "snr_points.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gate", "f_prime_V_per_cm_per_us", "s_nVs", "snr", "snr_fit", "snr_poisson"])
        pts = res.points
        for gate, skey, ykey in (("np", "s_np", "snr_np"), ("R", "s_R", "snr_R")):
            for b, s, y in zip(res.bins, pts.get(skey, []), pts.get(ykey, [])):
                if not (s > 0 and np.isfinite(y)):
                    continue
                fit_val = noise_mod.polya_snr(res.model, s) if res.model else math.nan
                alpha = res.model.alpha if res.model else math.nan
                w.writerow([gate, repr(b.f_prime), repr(float(s)), repr(float(y)),
                            repr(float(fit_val)), repr(float(alpha * math.sqrt(s)))])
    if res.model is not None:
        m = res.model
        print(f"alpha = {m.alpha:.4g} (nV s)^-1/2, beta_eff = {m.beta_eff:.4g} (nV s)^-1, "
              f"gamma_max = {m.gamma_max:.4g}; {res.iterations} iterations, "
              f"{'converged' if res.converged else 'NOT converged'}")
    if res.degenerate:
        raise NonConvergence(f"noise fit degenerate: {res.message}")
    if not res.converged:
        raise NonConvergence(f"noise fit did not converge: {res.message}")
    return EXIT_OK


def cmd_table(args, cfg: RunConfig) -> int:
    physics = cfg.physics.build()
    t = cfg.table
    out = _out_dir(args, cfg)
    eta = np.geomspace(t.eta_min_cm3, t.eta_max_cm3, t.n_eta)
    with (out / "transition_grid.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_prime_V_per_cm_per_us", "r0_um"] + [repr(float(e)) for e in eta])
        for fp in t.f_prime_grid_V_per_cm_per_us:
            p = physics.expected_transition(eta, fp)
            w.writerow([repr(fp), repr(float(physics.r0(fp)))] + [repr(float(x)) for x in p])

    channel = next((c for c in physics.channels.channels if c.label == t.polar_channel), None)
    if channel is None:
        raise ConfigError(f"table.polar_channel {t.polar_channel!r} is not in the channel set")
    sweep = physics.sweep(t.polar_f_prime_V_per_cm_per_us)
    theta = np.linspace(0.0, math.pi, t.polar_n_theta)
    radii = np.linspace(0.0, t.polar_r_max_um, t.polar_n_r)
    with (out / "polar_profile.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_rad", "r_um", "p_lz"])
        for th in theta:
            p = p_lz_single(sweep, radii, np.full_like(radii, th), channel)
            for r, v in zip(radii, p):
                w.writerow([repr(float(th)), repr(float(r)), repr(float(v))])
    r0 = float(physics.r0(t.polar_f_prime_V_per_cm_per_us))
    fc = np.abs(channel.f_cubed(theta)) ** (1.0 / 3.0)
    with (out / "polar_contour.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_rad", "r_contour_um"])
        for th, f in zip(theta, fc):
            w.writerow([repr(float(th)), repr(float(r0 * f))])
    marker = r0 * abs(float(channel.f_cubed(np.array(0.0)))) ** (1.0 / 3.0)
    _write_json(out / "table_manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "command": "table",
        "config_sha256": cfg.digest(),
        "physics": _physics_dict(cfg, physics),
        "polar_channel": channel.label,
        "polar_f_prime_V_per_cm_per_us": t.polar_f_prime_V_per_cm_per_us,
        "r0_um": r0,
        "contour_marker_um": marker,
        "contour_marker_definition": "radius where p_lz = 1 - 1/e along the field axis",
        "magic_angle_rad": MAGIC_ANGLE,
        "files": ["transition_grid.csv", "polar_profile.csv", "polar_contour.csv"],
    })
    print(f"tables written to {out}; contour marker at {marker:.4g} um")
    return EXIT_OK


def cmd_convert(args, cfg: RunConfig) -> int:
    physics = cfg.physics.build()
    report = _load_report(args.fit_report)
    model = _model_from_report(report, args.model, args.fit_report)
    if not args.s_total >= 0:
        raise ConfigError("--s-total must be >= 0")
    eta = float(cal.g_eval(model, args.s_total))
    p = float(physics.expected_transition(eta, args.f_prime)) if eta > 0 else 0.0
    n_atoms = args.n_atoms
    if not n_atoms >= 2:
        raise ConfigError("--n-atoms must be >= 2")
    absolute, relative = cal.finite_sample_uncertainty(n_atoms, p)
    result = {
        "schema_version": SCHEMA_VERSION,
        "command": "convert",
        "model": model.to_dict(),
        "s_total_nVs": args.s_total,
        "eta_cm3": eta,
        "f_prime_V_per_cm_per_us": args.f_prime,
        "expected_transition": p,
        "n_atoms": n_atoms,
        "finite_sample_abs": absolute,
        "finite_sample_rel": relative if math.isfinite(relative) else None,
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "convert.json").write_text(text + "\n", encoding="utf-8")
    rel = f"{relative:.3%}" if math.isfinite(relative) else "unbounded"
    print(f"eta = {eta:.6g} cm^-3 (finite-sample relative bound {rel})")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(
        prog="rydberg-lz",
        description="Gas density from Landau-Zener pair transitions: simulate, calibrate, analyse.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-shots", type=int, default=None, help="override simulation.n_shots")
    p.add_argument("--no-sweep", action="store_true",
                   help="baseline shots without field ramp (for black-body correction)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="calibrate the conversion function")
    p.add_argument("dataset")
    p.add_argument("--kind", choices=("linear", "quadratic", "both"), default=None)
    p.add_argument("--baseline", default=None, help="no-sweep dataset for black-body correction")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("noise", parents=[common], help="conversion-fluctuation analysis")
    p.add_argument("dataset")
    p.add_argument("--fit-report", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("table", parents=[common], help="tabulate transition probabilities")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("convert", parents=[common], help="signal to density with uncertainty")
    p.add_argument("--fit-report", required=True)
    p.add_argument("--s-total", type=float, required=True, help="total signal in nV s")
    p.add_argument("--n-atoms", type=float, default=1e4, help="atom count for the bound")
    p.add_argument("--f-prime", type=float, default=7.8,
                   help="slew rate in V/cm/us used for the transition fraction")
    p.add_argument("--model", choices=("auto", "linear", "quadratic"), default="auto")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonConvergence, NumericalError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
