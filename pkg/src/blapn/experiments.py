"""Simulation configurations, system presets and ensemble generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import (STREAM_MEAS_NOISE, MultisineSpec, NoiseSpec, design_flat_multisine,
                      design_odd_random_multisine,
                      gaussian_noise, make_rng, realize_multisine, realize_periodic_noise)
from .spectra import SignalEnsemble
from .volterra import (FeedbackSystemSpec, VolterraKernel, draw_process_noise, nfir_plant,
                       simulate_closed_loop)


def _noise_to_dict(ns):
    if ns is None:
        return None
    d = {"std_dev": ns.std_dev}
    if ns.shaping is not None:
        d["shaping"] = [np.asarray(c).tolist() for c in ns.shaping]
    return d


def _noise_from_dict(d):
    if d is None:
        return None
    return NoiseSpec(float(d["std_dev"]), tuple(d["shaping"]) if d.get("shaping") else None)


@dataclass
class SimulationConfig:
    """Loop, process-noise sources and sensor noise for one experiment.

    ``noise`` maps ``w_pl``, ``w_act`` and ``w_fb`` to :class:`NoiseSpec`.
    Only ``n_periods`` periods after ``warmup_periods`` discarded ones are kept.
    """

    system: FeedbackSystemSpec
    noise: dict = field(default_factory=dict)
    meas_noise_u: NoiseSpec | None = None
    meas_noise_y: NoiseSpec | None = None
    n_periods: int = 2
    warmup_periods: int = 2

    def __post_init__(self):
        if self.n_periods < 1:
            raise ValueError("n_periods must be >= 1")
        if self.warmup_periods < 0:
            raise ValueError("warmup_periods must be >= 0")
        bad = set(self.noise) - {"w_pl", "w_act", "w_fb"}
        if bad:
            raise ValueError(f"unknown noise sources {sorted(bad)}")

    def to_dict(self) -> dict:
        return {
            "system": self.system.to_dict(),
            "noise": {k: _noise_to_dict(v) for k, v in self.noise.items()},
            "meas_noise_u": _noise_to_dict(self.meas_noise_u),
            "meas_noise_y": _noise_to_dict(self.meas_noise_y),
            "n_periods": self.n_periods,
            "warmup_periods": self.warmup_periods,
        }

    @classmethod
    def from_dict(cls, d) -> "SimulationConfig":
        return cls(FeedbackSystemSpec.from_dict(d["system"]),
                   {k: _noise_from_dict(v) for k, v in d.get("noise", {}).items()},
                   _noise_from_dict(d.get("meas_noise_u")), _noise_from_dict(d.get("meas_noise_y")),
                   int(d.get("n_periods", 2)), int(d.get("warmup_periods", 2)))


def simulate_records(cfg: SimulationConfig, r, seed=None, stream=0):
    """Full loop records (transient included) for references ``r`` of shape ``[..., T]``."""
    r = np.asarray(r, dtype=float)
    T = r.shape[-1]
    noises = draw_process_noise(cfg.noise, T, r.shape[:-1], seed, stream)
    u, y = simulate_closed_loop(cfg.system, r, noises)
    if cfg.meas_noise_u is not None:
        u = u + gaussian_noise(T, cfg.meas_noise_u, make_rng(seed, STREAM_MEAS_NOISE, 0, stream),
                               r.shape[:-1])
    if cfg.meas_noise_y is not None:
        y = y + gaussian_noise(T, cfg.meas_noise_y, make_rng(seed, STREAM_MEAS_NOISE, 1, stream),
                               r.shape[:-1])
    return u, y


def simulate_ensemble(cfg: SimulationConfig, periods, seed=None, clock_freq=1.0, meta=None,
                      stream=0) -> SignalEnsemble:
    """Drive the loop with periodic references, one period per row of ``periods``.

    ``periods`` is ``[M, N]``; each reference is repeated for the warm-up and
    recorded periods and the warm-up is dropped.
    """
    periods = np.atleast_2d(np.asarray(periods, dtype=float))
    M, N = periods.shape
    n_tot = cfg.warmup_periods + cfg.n_periods
    r = np.tile(periods, (1, n_tot))
    u, y = simulate_records(cfg, r, seed, stream)
    shape = (M, n_tot, N)
    keep = slice(cfg.warmup_periods, None)
    chans = {"reference": r.reshape(shape)[:, keep], "input": u.reshape(shape)[:, keep],
             "output": y.reshape(shape)[:, keep]}
    m = {"warmup_periods": cfg.warmup_periods, "seed": seed}
    m.update(meta or {})
    return SignalEnsemble(chans, clock_freq, m)


def reference_periods(spec: MultisineSpec, M, seed=None, kind="multisine") -> np.ndarray:
    """``[M, N]`` independent realizations (random phases, or periodic noise)."""
    fn = realize_multisine if kind == "multisine" else realize_periodic_noise
    return np.stack([fn(spec, seed, m).samples for m in range(M)])


# --- presets --------------------------------------------------------------
def benchmark_multisine(target_std=1.0, N=1024) -> MultisineSpec:
    """Full-band flat multisine, N = 1024, unit clock."""
    return design_flat_multisine(N, 1.0, None, target_std)


def nfir_config(alpha=0.3, sigma_w=0.75, n_periods=2, warmup_periods=2) -> SimulationConfig:
    sys = FeedbackSystemSpec([nfir_plant()], loop_gain=float(alpha), name="paper-nfir")
    return SimulationConfig(sys, {"w_pl": NoiseSpec(sigma_w)}, n_periods=n_periods,
                            warmup_periods=warmup_periods)


def lti_config(meas_std=0.1, n_periods=2, warmup_periods=2) -> SimulationConfig:
    """Open-loop FIR ``y = 0.8 u(t-1) - 0.3 u(t-2) + 0.1 u(t-3)`` plus output noise."""
    k = VolterraKernel.from_taps({1: 0.8, 2: -0.3, 3: 0.1})
    return SimulationConfig(FeedbackSystemSpec([k], name="lti"), {},
                            meas_noise_y=NoiseSpec(meas_std) if meas_std else None,
                            n_periods=n_periods, warmup_periods=warmup_periods)


def cubic_config(coef=0.1, n_periods=2, warmup_periods=1) -> SimulationConfig:
    """Static ``y = u + coef * u^3`` in open loop, noiseless."""
    k = VolterraKernel.from_taps({(0,): 1.0, (0, 0, 0): coef})
    return SimulationConfig(FeedbackSystemSpec([k], name="cubic"), {}, n_periods=n_periods,
                            warmup_periods=warmup_periods)


def square_config(n_periods=2, warmup_periods=1) -> SimulationConfig:
    """Static ``y = u^2`` in open loop."""
    k = VolterraKernel.from_taps({(0, 0): 1.0})
    return SimulationConfig(FeedbackSystemSpec([k], name="square"), {}, n_periods=n_periods,
                            warmup_periods=warmup_periods)


def resonator_taps(f0, damping, n_taps=64):
    """Impulse response (delayed by one sample) of a discrete two-pole resonator."""
    rho = np.exp(-damping)
    th = 2 * np.pi * f0
    n = np.arange(n_taps - 1)
    h = rho**n * np.sin(th * (n + 1)) / np.sin(th)
    return np.concatenate([[0.0], h * (1 - rho)])


def bandpass_noise_config(sigma_w, f0=0.1, damping=0.08, shift=0.02, loop_gain=0.2,
                          n_periods=2, warmup_periods=2) -> SimulationConfig:
    """Resonant plant whose resonance frequency moves with ``w^2``.

    ``y = h(f0) * u + w^2 * dh * u`` with ``dh`` the change of the resonator
    taps for a resonance shift of ``shift`` (cycles/sample), closed by the
    gain ``loop_gain``.  The BLA resonance moves with ``sigma_w^2``.
    """
    h = resonator_taps(f0, damping)
    dh = resonator_taps(f0 + shift, damping) - h
    kernels = [VolterraKernel.dense(h, inputs=("u",)),
               VolterraKernel.separable([dh, [1.0], [1.0]], inputs=("u", "w", "w"))]
    sys = FeedbackSystemSpec(kernels, loop_gain=loop_gain, name="bandpass-noise")
    return SimulationConfig(sys, {"w_pl": NoiseSpec(sigma_w)}, n_periods=n_periods,
                            warmup_periods=warmup_periods)


def power_sweep(cfg: SimulationConfig, stds, N=256, M=20, seed=0, estimator=None, odd=False):
    """One BLA estimate per reference std, each from a fresh flat multisine experiment.

    Experiment ``i`` uses seed ``seed + 1000 * i``; ``estimator`` defaults to
    the robust method.
    """
    from .bla import bla_robust

    estimator = estimator or bla_robust
    out = []
    for i, std in enumerate(stds):
        s = seed + 1000 * i
        if odd:
            spec = design_odd_random_multisine(N, 1.0, None, std, seed=seed)
        else:
            spec = design_flat_multisine(N, 1.0, None, std)
        e = simulate_ensemble(cfg, reference_periods(spec, M, s), s, spec.clock_freq,
                              {"excited": spec.excited.tolist(), "ref_power": float(std) ** 2})
        out.append(estimator(e))
    return out


PRESETS = {
    "paper-nfir": nfir_config,
    "lti": lti_config,
    "cubic": cubic_config,
    "square": square_config,
}
