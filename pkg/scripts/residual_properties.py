"""Monte-Carlo moments of the distortion and process-noise residuals of the NFIR loop.

For each N prints |mean|/SE of Y_S, Y_P, Y_P conj(R), Y_P^2 and Y_S conj(Y_P),
and the bin-averaged |E{Y_P^2}| with its floor-corrected value.
"""
import argparse
import math

import numpy as np

from blapn.bla import residual_decomposition
from blapn.experiments import (benchmark_multisine, nfir_config, reference_periods,
                               simulate_ensemble)
from blapn.oracle import NfirParams, nfir_bla_true


def zscore(x):
    m = x.mean(axis=0)
    se = np.sqrt(np.sum(np.abs(x - m) ** 2, axis=0) / (x.shape[0] - 1) / x.shape[0])
    return np.abs(m) / se, m, se


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, nargs="+", default=[128, 512])
    ap.add_argument("--M", type=int, default=1000)
    ap.add_argument("--n-mc", type=int, default=50)
    ap.add_argument("--seed", type=int, default=8)
    args = ap.parse_args()

    cfg = nfir_config(0.3, 0.75)
    for N in args.N:
        spec = benchmark_multisine(1.0, N)
        k = spec.excited
        e = simulate_ensemble(cfg, reference_periods(spec, args.M, args.seed), args.seed, 1.0,
                              {"excited": k.tolist()})
        G0 = nfir_bla_true(NfirParams(), 2 * np.pi * k / N)
        y_s, y_p = residual_decomposition(e, G0, args.n_mc, cfg, seed=args.seed + 1)
        yp = y_p.mean(axis=1)
        R = np.fft.rfft(e["reference"][:, 0], axis=-1)[:, k] / math.sqrt(N)
        pairs = np.random.default_rng(args.seed).integers(0, k.size, (50, 2))
        rows = {
            "Y_S": y_s, "Y_P": yp, "Y_P conj(R)": yp * np.conj(R), "Y_P^2": yp**2,
            "Y_S conj(Y_P)": y_s[:, pairs[:, 0]] * np.conj(yp[:, pairs[:, 1]]),
        }
        print(f"N = {N}, M = {args.M}")
        for name, x in rows.items():
            print(f"  {name:<14} max |mean|/SE = {zscore(x)[0].max():.2f}")
        _, m, se = zscore(yp**2)
        print(f"  mean |E Y_P^2| = {np.mean(np.abs(m)):.3e}, floor {np.mean(se):.3e}, "
              f"corrected {np.mean(np.abs(m) ** 2 - se**2):.3e}")


if __name__ == "__main__":
    main()
