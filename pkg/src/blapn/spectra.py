"""Scaled DFT, signal ensembles and replicate statistics."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("reference", "input", "output")


@dataclass
class Spectrum:
    """Scaled DFT bins k = 0 .. N/2-1 of one record of N samples."""

    bins: np.ndarray
    n_samples: int
    clock_freq: float = 1.0

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.bins.shape[-1]) * self.clock_freq / self.n_samples

    def full(self) -> np.ndarray:
        """All N bins, negative frequencies rebuilt by conjugate symmetry.

        The Nyquist bin is not stored; it is reported as zero.
        """
        N = self.n_samples
        out = np.zeros(self.bins.shape[:-1] + (N,), dtype=complex)
        out[..., : N // 2] = self.bins
        out[..., N // 2 + 1:] = np.conj(self.bins[..., 1: N // 2][..., ::-1])
        return out

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("k,freq_hz,re,im\n")
            for k, (f, x) in enumerate(zip(self.freqs, self.bins)):
                fh.write(f"{k},{float(f)!r},{float(x.real)!r},{float(x.imag)!r}\n")


def scaled_dft_bins(x, axis=-1) -> np.ndarray:
    """Bins 0 .. N/2-1 of ``DFT(x)/sqrt(N)`` along ``axis`` (batched)."""
    x = np.asarray(x, dtype=float)
    N = x.shape[axis]
    if N < 4 or N % 2:
        raise ValueError(f"record length must be even and >= 4, got {N}")
    X = np.fft.rfft(x, axis=axis) / math.sqrt(N)
    return np.take(X, np.arange(N // 2), axis=axis)


def scaled_dft(samples, clock_freq=1.0) -> Spectrum:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 1:
        raise ValueError("scaled_dft expects a 1-D record")
    return Spectrum(scaled_dft_bins(samples), samples.size, clock_freq)


@dataclass
class SignalEnsemble:
    """Per-channel records shaped ``[M realizations, P periods, N samples]``."""

    channels: dict
    clock_freq: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.channels:
            raise ValueError("ensemble needs at least one channel")
        shapes = set()
        for name, data in list(self.channels.items()):
            if name not in CHANNELS:
                raise ValueError(f"unknown channel {name!r}")
            arr = np.asarray(data, dtype=float)
            if arr.ndim != 3:
                raise ValueError(f"channel {name!r} must be [M][P][N]")
            self.channels[name] = arr
            shapes.add(arr.shape)
        if len(shapes) != 1:
            raise ValueError(f"channels disagree on (M, P, N): {sorted(shapes)}")
        M, P, N = shapes.pop()
        if M < 1 or P < 1:
            raise ValueError("need M >= 1 and P >= 1")

    @property
    def shape(self):
        return next(iter(self.channels.values())).shape

    @property
    def M(self):
        return self.shape[0]

    @property
    def P(self):
        return self.shape[1]

    @property
    def N(self):
        return self.shape[2]

    def __getitem__(self, name):
        return self.channels[name]

    def drop_periods(self, n) -> "SignalEnsemble":
        """Copy without the first ``n`` periods (warm-up discard)."""
        if n >= self.P:
            raise ValueError(f"cannot drop {n} of {self.P} periods")
        return SignalEnsemble({k: v[:, n:] for k, v in self.channels.items()},
                              self.clock_freq, dict(self.meta))

    def record(self, name) -> np.ndarray:
        """Channel as ``[M, P*N]`` consecutive records."""
        v = self.channels[name]
        return v.reshape(v.shape[0], -1)

    def to_dict(self) -> dict:
        return {
            "layout": "channel -> [M][P][N] row-major",
            "clock_freq_hz": self.clock_freq,
            "meta": self.meta,
            "channels": {k: v.tolist() for k, v in self.channels.items()},
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d) -> "SignalEnsemble":
        return cls({k: np.asarray(v, dtype=float) for k, v in d["channels"].items()},
                   float(d.get("clock_freq_hz", 1.0)), dict(d.get("meta", {})))

    @classmethod
    def load(cls, path) -> "SignalEnsemble":
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def ensemble_spectra(e: SignalEnsemble, channel) -> np.ndarray:
    """Scaled DFT of every period: complex array ``[M, P, N/2]``."""
    if channel not in e.channels:
        raise KeyError(f"channel {channel!r} not in ensemble")
    return scaled_dft_bins(e.channels[channel], axis=-1)


_AXES = {"realizations": 0, "periods": 1}


def sample_stats(spectra, axis="periods"):
    """Complex sample mean and sample variance ``mean |x - xbar|^2`` (1/(n-1)).

    ``axis`` is an integer or one of ``"realizations"`` (axis 0) and
    ``"periods"`` (axis 1) of an ``[M, P, ...]`` array.
    """
    X = np.asarray(spectra)
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    n = X.shape[ax]
    if n < 1:
        raise ValueError("need at least one replicate")
    mean = X.mean(axis=ax)
    if n < 2:
        raise ValueError("insufficient replicates")
    dev = X - np.expand_dims(mean, ax)
    var = np.sum(np.abs(dev) ** 2, axis=ax) / (n - 1)
    return mean, var


def sample_cov(X, Y, axis="periods"):
    """Sample cross-covariance ``sum (x - xbar) conj(y - ybar) / (n-1)``."""
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    X, Y = np.asarray(X), np.asarray(Y)
    n = X.shape[ax]
    if n < 2:
        raise ValueError("insufficient replicates")
    dx = X - X.mean(axis=ax, keepdims=True)
    dy = Y - Y.mean(axis=ax, keepdims=True)
    return np.sum(dx * np.conj(dy), axis=ax) / (n - 1)
