"""Periodic excitation design and realization, plus Gaussian noise sources.

Amplitude grids are stored *before* the 1/sqrt(N) scaling, so the scaled DFT
of one period of a realized multisine returns ``amp_grid[k] * exp(j*phase)``
at every excited harmonic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

PHASE_LAWS = ("uniform_random", "schroeder_like_deterministic_for_debug")

# independent RNG streams per signal source
STREAM_REFERENCE = 0
STREAM_PROCESS_NOISE = 1
STREAM_MEAS_NOISE = 2


def make_rng(seed, *stream) -> np.random.Generator:
    """Generator for ``seed`` on the sub-stream identified by ``stream``."""
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


@dataclass
class MultisineSpec:
    """Frequency-domain description of one period of a multisine."""

    n_samples: int
    clock_freq: float
    amp_grid: np.ndarray
    excited: np.ndarray
    dc_value: float = 0.0
    phase_law: str = "uniform_random"

    def __post_init__(self):
        self.amp_grid = np.asarray(self.amp_grid, dtype=float)
        self.excited = np.unique(np.asarray(self.excited, dtype=int))
        self.validate()

    def validate(self):
        N = self.n_samples
        if N < 4 or N % 2:
            raise ValueError(f"n_samples must be even and >= 4, got {N}")
        if self.amp_grid.shape != (N // 2,):
            raise ValueError(f"amp_grid must have length N/2={N // 2}")
        if not np.all(np.isfinite(self.amp_grid)):
            raise ValueError("amp_grid must be finite")
        if np.any(self.amp_grid < 0):
            raise ValueError("amp_grid must be non-negative")
        if self.excited.size and (self.excited.min() < 1 or self.excited.max() >= N // 2):
            raise ValueError("excited harmonics must lie in [1, N/2 - 1]")
        mask = np.ones(N // 2, dtype=bool)
        mask[0] = False
        mask[self.excited] = False
        if np.any(self.amp_grid[mask] != 0):
            raise ValueError("non-excited harmonics must have zero amplitude")
        if self.phase_law not in PHASE_LAWS:
            raise ValueError(f"unknown phase law {self.phase_law!r}")

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.n_samples // 2) * self.clock_freq / self.n_samples

    @property
    def max_power(self) -> float:
        """Uniform bound M_R on the squared amplitudes."""
        return float(np.max(self.amp_grid**2)) if self.amp_grid.size else 0.0

    def to_dict(self, seed=None) -> dict:
        return {
            "n_samples": self.n_samples,
            "clock_freq_hz": self.clock_freq,
            "dc": self.dc_value,
            "harmonics": [{"k": int(k), "amp": float(self.amp_grid[k])} for k in self.excited],
            "phase_law": self.phase_law,
            "seed": seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultisineSpec":
        N = int(d["n_samples"])
        amp = np.zeros(N // 2)
        ks = [int(h["k"]) for h in d["harmonics"]]
        for h in d["harmonics"]:
            amp[int(h["k"])] = float(h["amp"])
        return cls(N, float(d["clock_freq_hz"]), amp, ks, float(d.get("dc", 0.0)),
                   d.get("phase_law", "uniform_random"))

    def save(self, path, seed=None):
        Path(path).write_text(json.dumps(self.to_dict(seed), indent=1))

    @classmethod
    def load(cls, path) -> "MultisineSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PeriodicSignal:
    samples: np.ndarray
    spec: MultisineSpec
    seed: object = None

    def to_csv(self, path):
        n = np.arange(self.samples.size)
        with open(path, "w") as fh:
            fh.write("t_index,value\n")
            for i, v in zip(n, self.samples):
                fh.write(f"{i},{float(v)!r}\n")


@dataclass
class NoiseSpec:
    """Stationary Gaussian noise: white, or shaped by a stable filter ``(b, a)``."""

    std_dev: float = 0.0
    shaping: tuple | None = None
    seed: object = None

    def __post_init__(self):
        if self.std_dev < 0:
            raise ValueError("std_dev must be >= 0")
        if self.shaping is not None:
            b, a = (np.atleast_1d(np.asarray(c, dtype=float)) for c in self.shaping)
            poles = np.roots(a) if a.size > 1 else np.array([])
            if np.any(np.abs(poles) >= 1):
                raise ValueError("shaping filter is unstable (pole on or outside unit circle)")
            self.shaping = (b, a)


def _band_indices(N, fs, band):
    f_lo, f_hi = band
    if not (0 <= f_lo < f_hi < fs / 2):
        raise ValueError(f"band must satisfy 0 <= f_lo < f_hi < fs/2, got {band}")
    k = np.arange(1, N // 2)
    f = k * fs / N
    # band edges are usually quoted rounded to a few digits
    tol = 1e-3 * fs / N
    return k[(f >= f_lo - tol) & (f <= f_hi + tol)]


def _flat_spec(N, fs, excited, target_std, dc, phase_law):
    if target_std < 0:
        raise ValueError("target_std must be >= 0")
    excited = np.asarray(excited, dtype=int)
    if excited.size == 0:
        raise ValueError("no excitable harmonics")
    amp = np.zeros(N // 2)
    # (2/N) * F * A^2 = target_std^2
    amp[excited] = target_std * math.sqrt(N / (2.0 * excited.size))
    return MultisineSpec(N, fs, amp, excited, dc, phase_law)


def design_flat_multisine(N, f_s, band=None, target_std=1.0, dc=0.0,
                          phase_law="uniform_random") -> MultisineSpec:
    """Equal-amplitude multisine over ``band`` with finite-N std ``target_std``.

    ``band=None`` excites every harmonic 1 .. N/2-1.
    """
    if N < 4 or N % 2:
        raise ValueError(f"N must be even and >= 4, got {N}")
    if band is None:
        excited = np.arange(1, N // 2)
    else:
        excited = _band_indices(N, f_s, band)
    return _flat_spec(N, f_s, excited, target_std, dc, phase_law)


def design_odd_random_multisine(N, f_s, band=None, target_std=1.0, dc=0.0,
                                group=3, seed=None) -> MultisineSpec:
    """Odd multisine with one randomly chosen detection line per group of odd lines.

    Even harmonics stay unexcited as well, so the non-excited bins split into
    odd and even detection lines.
    """
    if N < 4 or N % 2:
        raise ValueError(f"N must be even and >= 4, got {N}")
    cand = np.arange(1, N // 2) if band is None else _band_indices(N, f_s, band)
    odd = cand[cand % 2 == 1]
    rng = make_rng(seed, STREAM_REFERENCE, 99)
    keep = np.ones(odd.size, dtype=bool)
    for start in range(0, odd.size - group + 1, group):
        keep[start + rng.integers(group)] = False
    return _flat_spec(N, f_s, odd[keep], target_std, dc, "uniform_random")


def _phases(spec: MultisineSpec, rng):
    if spec.phase_law == "uniform_random":
        return rng.uniform(0.0, 2 * np.pi, size=spec.excited.size)
    return np.zeros(spec.excited.size)


def _synthesize(spec: MultisineSpec, amps, phases) -> np.ndarray:
    N = spec.n_samples
    X = np.zeros(N // 2 + 1, dtype=complex)
    X[spec.excited] = amps * np.exp(1j * phases)
    X[0] = spec.dc_value * math.sqrt(N)
    # irfft enforces conjugate symmetry; undo its 1/N and apply the sqrt(N) scaling
    return np.fft.irfft(X, n=N) * math.sqrt(N)


def realize_multisine(spec: MultisineSpec, seed=None, realization=0) -> PeriodicSignal:
    """One period of a random-phase multisine (deterministic given ``seed``)."""
    spec.validate()
    rng = make_rng(seed, STREAM_REFERENCE, realization)
    amps = spec.amp_grid[spec.excited]
    return PeriodicSignal(_synthesize(spec, amps, _phases(spec, rng)), spec, seed)


def realize_periodic_noise(spec: MultisineSpec, seed=None, realization=0) -> PeriodicSignal:
    """One period of periodic noise: Rayleigh amplitudes with mean square ``amp_grid**2``."""
    spec.validate()
    rng = make_rng(seed, STREAM_REFERENCE, realization)
    phases = _phases(spec, rng)
    target = spec.amp_grid[spec.excited]
    # Rayleigh(scale s) has E[X^2] = 2 s^2
    amps = rng.rayleigh(scale=target / math.sqrt(2.0)) if target.size else target
    return PeriodicSignal(_synthesize(spec, amps, phases), spec, seed)


def asymptotic_variance(spec: MultisineSpec) -> float:
    """Finite-N Riemann sum ``(2/N) * sum_k amp_grid[k]**2`` over k >= 1."""
    return float(2.0 / spec.n_samples * np.sum(spec.amp_grid[1:] ** 2))


def riemann_band_power(spec: MultisineSpec, f1, f2) -> float:
    """Power of the periodic signal in the band [f1, f2]."""
    if f1 >= f2:
        raise ValueError("empty band")
    N, fs = spec.n_samples, spec.clock_freq
    k1 = math.ceil(N * f1 / fs)
    k2 = min(math.floor(N * f2 / fs), N // 2 - 1)
    if k2 < k1:
        return 0.0
    return float(np.sum(spec.amp_grid[k1:k2 + 1] ** 2) / N)


def gaussian_noise(n, spec: NoiseSpec, rng=None, shape=()) -> np.ndarray:
    """Zero-mean Gaussian samples with stationary std ``spec.std_dev``.

    ``shape`` prepends batch dimensions; the last axis has length ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    size = tuple(shape) + (int(n),)
    if spec.std_dev == 0:
        return np.zeros(size)
    if rng is None:
        rng = make_rng(spec.seed, STREAM_PROCESS_NOISE)
    e = rng.standard_normal(size)
    if spec.shaping is None:
        return spec.std_dev * e
    b, a = spec.shaping
    # stationary gain of the shaping filter from its (long) impulse response
    imp = np.zeros(4096)
    imp[0] = 1.0
    h = sps.lfilter(b, a, imp)
    gain = math.sqrt(float(np.sum(h**2)))
    # start in steady state so the output is stationary from sample 0
    zi = sps.lfilter_zi(b, a) if a.size > 1 or b.size > 1 else None
    if zi is None:
        x = sps.lfilter(b, a, e, axis=-1)
    else:
        burn = rng.standard_normal(size[:-1] + (4 * 1024,))
        _, zf = sps.lfilter(b, a, burn, axis=-1, zi=np.zeros(size[:-1] + (zi.size,)))
        x, _ = sps.lfilter(b, a, e, axis=-1, zi=zf)
    return spec.std_dev * x / gain
