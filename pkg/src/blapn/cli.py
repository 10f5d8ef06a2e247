"""Command-line pipeline: generate -> simulate -> estimate -> detect, plus report.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bla import BlaEstimate, LpmConfig, bla_fast, bla_robust, fast_lpm
from .detect import ExperimentSet, classify_nonlinearity
from .experiments import (PRESETS, SimulationConfig, benchmark_multisine, nfir_config,
                          reference_periods, simulate_ensemble)
from .oracle import NfirParams, nfir_bla_true, nfir_bla_var_true, nfir_stability_ok
from .signals import (NoiseSpec, asymptotic_variance, design_flat_multisine,
                      design_odd_random_multisine, riemann_band_power)
from .spectra import SignalEnsemble, config_digest
from .volterra import LoopDivergedError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


def _stamp(config: dict, seed) -> dict:
    return {"config": config, "digest": config_digest(config), "seed": seed}


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header_meta: dict, columns, rows):
    lines = ["# " + " ".join(f"{k}={v}" for k, v in header_meta.items()), ",".join(columns)]
    lines += [",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)
                       for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- generate ---------------------------------------------------------------
def cmd_generate(args) -> int:
    if args.preset == "paper-sv":
        spec = benchmark_multisine(args.std, args.N or 1024)
    elif args.odd:
        spec = design_odd_random_multisine(args.N, args.fs, args.band, args.std, seed=args.seed)
    else:
        spec = design_flat_multisine(args.N, args.fs, args.band, args.std)
    if args.std == 0:
        print("warning: target std is 0, the ensemble is all zeros", file=sys.stderr)
    config = {"command": "generate", "preset": args.preset, "N": spec.n_samples,
              "fs": spec.clock_freq, "band": args.band, "std": args.std, "M": args.M,
              "odd": bool(args.odd), "kind": args.kind}
    stamp = _stamp(config, args.seed)
    periods = reference_periods(spec, args.M, args.seed, args.kind)
    meta = dict(stamp, excited=spec.excited.tolist(), kind=args.kind)
    ens = SignalEnsemble({"reference": periods[:, None, :]}, spec.clock_freq, meta)
    out = _outdir(args)
    _write_json(out / "multisine.json", dict(spec.to_dict(args.seed), **stamp))
    _write_json(out / "ensemble.json", ens.to_dict())
    lo, hi = (args.band or (0.0, spec.clock_freq / 2))
    print(f"designed std: {np.sqrt(asymptotic_variance(spec)):.6g}")
    print(f"band power [{lo:g}, {hi:g}] Hz: {riemann_band_power(spec, lo, hi):.6g}")
    print(f"excited harmonics: {spec.excited.size}, realizations: {args.M}")
    return 0


# --- simulate ---------------------------------------------------------------
def _sim_config(args) -> SimulationConfig:
    if args.system:
        cfg = SimulationConfig.from_dict(json.loads(Path(args.system).read_text()))
        cfg.n_periods, cfg.warmup_periods = args.P, args.warmup_periods
    elif args.preset == "paper-nfir":
        if not nfir_stability_ok(args.alpha, args.sigma_w):
            raise ConfigError(
                f"alpha={args.alpha}, sigma_w={args.sigma_w} violates the stability bound "
                "0 < alpha < min(4 sigma_w^2, 1/sigma_w^2) (|alpha| < 1 when sigma_w = 0)")
        cfg = nfir_config(args.alpha, args.sigma_w, args.P, args.warmup_periods)
    elif args.preset in PRESETS:
        cfg = PRESETS[args.preset](n_periods=args.P, warmup_periods=args.warmup_periods)
    else:
        raise ConfigError(f"unknown system preset {args.preset!r}")
    if args.meas_noise_y:
        cfg.meas_noise_y = NoiseSpec(args.meas_noise_y)
    if args.meas_noise_u:
        cfg.meas_noise_u = NoiseSpec(args.meas_noise_u)
    return cfg


def cmd_simulate(args) -> int:
    src = SignalEnsemble.load(args.ensemble)
    cfg = _sim_config(args)
    config = {"command": "simulate", "preset": args.preset, "alpha": args.alpha,
              "sigma_w": args.sigma_w, "P": args.P, "warmup_periods": args.warmup_periods,
              "meas_noise_y": args.meas_noise_y, "meas_noise_u": args.meas_noise_u,
              "system": cfg.to_dict(), "source_digest": src.meta.get("digest")}
    stamp = _stamp(config, args.seed)
    meta = {k: v for k, v in src.meta.items() if k in ("excited", "kind")}
    meta.update(stamp)
    meta["preset"] = args.preset
    if args.preset == "paper-nfir":
        meta.update(alpha=args.alpha, sigma_w=args.sigma_w)
    try:
        ens = simulate_ensemble(cfg, src["reference"][:, 0], args.seed, src.clock_freq, meta)
    except LoopDivergedError as exc:
        print(f"error: {exc}; check the loop stability bound "
              "0 < alpha < min(4 sigma_w^2, 1/sigma_w^2)", file=sys.stderr)
        return EXIT_NUMERIC
    out = _outdir(args)
    _write_json(out / "simulated.json", ens.to_dict())
    print(f"simulated {ens.M} x {ens.P} periods of {ens.N} samples "
          f"(warm-up {cfg.warmup_periods} periods discarded)")
    return 0


# --- estimate ---------------------------------------------------------------
def _estimate(ens, method, poly_order, dof):
    if method == "robust":
        return bla_robust(ens)
    if method == "fast":
        return bla_fast(ens)
    return fast_lpm(ens, LpmConfig(poly_order, dof))


def _bin_table_rows(est: BlaEstimate, ens: SignalEnsemble):
    """Per-bin |g| in dB and the variances, with true values for the NFIR preset."""
    known = ens.meta.get("preset") == "paper-nfir"
    cols = ["k", "freq_hz", "g_db", "var_total_db", "var_noise_db"]
    M = est.meta.get("M", 1)
    db = lambda v: 10 * np.log10(np.maximum(v, 1e-300))  # noqa: E731
    data = [est.k, est.freq_hz, db(np.abs(est.g_bla) ** 2), db(est.var_total), db(est.var_noise)]
    if known:
        p = NfirParams(float(ens.meta["alpha"]), float(ens.meta["sigma_w"]),
                       float(np.std(ens["reference"])), float(np.std(ens["input"])))
        omega = 2 * np.pi * est.k / est.meta["N"]
        g_true = nfir_bla_true(p, omega)
        # the local polynomial fit divides the single-estimate variance by dof
        red = est.dof if est.method == "fast_lpm" else 1
        v_true = nfir_bla_var_true(p, omega) / red / M
        cols += ["g_true_db", "var_true_db"]
        data += [db(np.abs(g_true) ** 2), db(v_true)]
    return cols, list(zip(*data))


def cmd_estimate(args) -> int:
    ens = SignalEnsemble.load(args.ensemble)
    config = {"command": "estimate", "method": args.method, "poly_order": args.poly_order,
              "dof": args.dof, "source_digest": ens.meta.get("digest"), "tag": args.tag}
    stamp = _stamp(config, ens.meta.get("seed", args.seed))
    try:
        est = _estimate(ens, args.method, args.poly_order, args.dof)
    except np.linalg.LinAlgError as exc:
        print(f"error: rank deficiency in the estimator: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    est.meta.update(stamp)
    est.meta["tag"] = args.tag
    out = _outdir(args)
    name = f"estimate{('_' + args.tag) if args.tag else ''}"
    est.save(out / f"{name}.json")
    if args.format == "csv":
        est.save(out / f"{name}.csv")
    cols, rows = _bin_table_rows(est, ens)
    _write_csv(out / f"fig5{('_' + args.tag) if args.tag else ''}.csv",
               {"digest": stamp["digest"], "seed": stamp["seed"]}, cols, rows)
    print(f"{est.method}: {est.k.size} bins, median var_total/var_noise = "
          f"{np.median(est.var_total / np.maximum(est.var_noise, 1e-300)):.4g}")
    return 0


# --- detect -----------------------------------------------------------------
def cmd_detect(args) -> int:
    ests = [BlaEstimate.load(p) for p in args.estimates]
    try:
        xs = ExperimentSet(ests)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rep = classify_nonlinearity(xs, args.z_threshold)
    config = {"command": "detect", "z_threshold": args.z_threshold,
              "sources": [e.meta.get("digest") for e in ests]}
    stamp = _stamp(config, args.seed)
    out = _outdir(args)
    _write_json(out / "detection.json", dict(rep.to_dict(), **stamp))
    text = rep.table()
    (out / "detection.txt").write_text(f"# digest={stamp['digest']} seed={args.seed}\n{text}\n")
    print(text)
    return 0


# --- report: the whole NFIR pipeline in one go --------------------------------
def cmd_report(args) -> int:
    if not nfir_stability_ok(args.alpha, args.sigma_w):
        raise ConfigError("alpha/sigma_w violate the stability bound")
    spec = benchmark_multisine(1.0, args.N)
    config = {"command": "report", "alpha": args.alpha, "sigma_w": args.sigma_w, "M": args.M,
              "N": args.N, "P": args.P, "method": args.method, "poly_order": args.poly_order,
              "dof": args.dof}
    stamp = _stamp(config, args.seed)
    periods = reference_periods(spec, args.M, args.seed)
    warm = 0 if args.method == "fast-lpm" else args.warmup_periods
    cfg = nfir_config(args.alpha, args.sigma_w, args.P, warm)
    meta = dict(stamp, excited=spec.excited.tolist(), preset="paper-nfir", alpha=args.alpha,
                sigma_w=args.sigma_w)
    try:
        ens = simulate_ensemble(cfg, periods, args.seed, 1.0, meta)
    except LoopDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    est = _estimate(ens, args.method, args.poly_order, args.dof)
    est.meta.update(stamp)
    out = _outdir(args)
    est.save(out / "estimate.json")
    cols, rows = _bin_table_rows(est, ens)
    _write_csv(out / "fig5.csv", {"digest": stamp["digest"], "seed": args.seed}, cols, rows)
    ratio = np.median(est.var_total / np.maximum(est.var_noise, 1e-300))
    print(f"fig5 table: {len(rows)} bins -> {out / 'fig5.csv'}")
    print(f"median var_total/var_noise: {ratio:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blapn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--format", choices=("csv", "json"), default="json")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="design and realize a multisine")
    g.add_argument("--preset", choices=("paper-sv", "none"), default="none")
    g.add_argument("--N", type=int, default=None)
    g.add_argument("--fs", type=float, default=1.0)
    g.add_argument("--band", type=float, nargs=2, default=None)
    g.add_argument("--std", type=float, default=1.0)
    g.add_argument("--M", type=int, default=1)
    g.add_argument("--odd", action="store_true", help="odd multisine with detection lines")
    g.add_argument("--kind", choices=("multisine", "periodic-noise"), default="multisine")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", parents=[common], help="drive a system with an ensemble")
    s.add_argument("--ensemble", required=True)
    s.add_argument("--preset", default="paper-nfir", choices=sorted(PRESETS))
    s.add_argument("--system", default=None, help="simulation config JSON (overrides preset)")
    s.add_argument("--alpha", type=float, default=0.3)
    s.add_argument("--sigma-w", type=float, default=0.75)
    s.add_argument("--P", type=int, default=2)
    s.add_argument("--warmup-periods", type=int, default=2)
    s.add_argument("--meas-noise-y", type=float, default=0.0)
    s.add_argument("--meas-noise-u", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    def est_flags(p):
        p.add_argument("--method", choices=("robust", "fast", "fast-lpm"), default="robust")
        p.add_argument("--poly-order", type=int, default=2)
        p.add_argument("--dof", type=int, default=10)

    e = sub.add_parser("estimate", parents=[common], help="estimate the BLA")
    e.add_argument("--ensemble", required=True)
    e.add_argument("--tag", default="")
    est_flags(e)
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("detect", parents=[common], help="Type I / Type II classification")
    d.add_argument("estimates", nargs="+")
    d.add_argument("--z-threshold", type=float, default=3.0)
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("report", parents=[common], help="NFIR benchmark end to end")
    r.add_argument("--alpha", type=float, default=0.3)
    r.add_argument("--sigma-w", type=float, default=0.75)
    r.add_argument("--M", type=int, default=100)
    r.add_argument("--N", type=int, default=1024)
    r.add_argument("--P", type=int, default=2)
    r.add_argument("--warmup-periods", type=int, default=2)
    est_flags(r)
    r.set_defaults(func=cmd_report, method="fast-lpm")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "generate" and args.preset != "paper-sv" and not args.N:
        args.N = 1024
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoopDivergedError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
