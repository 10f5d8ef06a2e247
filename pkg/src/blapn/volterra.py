"""Finite Volterra systems: evaluation, closed-loop simulation, zoh discretization.

Kernel terms act on *named* inputs.  A block of a feedback loop sees its loop
input under a fixed name (``"e"`` for the actuator, ``"u"`` for the plant,
``"y"`` for the feedback path) and its own process-noise source as ``"w"``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .signals import STREAM_PROCESS_NOISE, gaussian_noise, make_rng

DIVERGENCE_LIMIT = 1e12
DENSE2_CAP = 4096 * 4096


class LoopDivergedError(RuntimeError):
    def __init__(self, index, limit=DIVERGENCE_LIMIT):
        self.index = int(index)
        super().__init__(f"loop diverged: |u| exceeded {limit:g} at sample {self.index}")


class FeedThroughError(ValueError):
    pass


def _norm_factor(f, default_input):
    if isinstance(f, (int, np.integer)):
        return (default_input, int(f))
    name, lag = f
    return (str(name), int(lag))


@dataclass(frozen=True)
class VolterraKernel:
    """One Volterra kernel in sparse-tap, dense-grid or separable form.

    ``taps`` maps a tuple of ``(input_name, lag)`` factors to a coefficient;
    the empty tuple is the constant term.  Dense and separable kernels act on
    the inputs listed in ``inputs`` (one name per axis), with axis index i
    standing for lag ``i * step``.
    """

    degree: int
    form: str
    taps: dict | None = None
    grid: np.ndarray | None = None
    axes: tuple | None = None
    inputs: tuple = ()
    time_domain: str = "discrete"
    step: float = 1.0

    def __post_init__(self):
        if self.form not in ("nfir", "dense", "separable"):
            raise ValueError(f"unknown kernel form {self.form!r}")
        if self.time_domain not in ("discrete", "continuous"):
            raise ValueError(f"unknown time domain {self.time_domain!r}")
        if self.form == "nfir":
            for key in self.taps:
                if any(lag < 0 for _, lag in key):
                    raise ValueError("kernel must be causal (lags >= 0)")
        elif self.form == "dense":
            g = np.asarray(self.grid, dtype=float)
            object.__setattr__(self, "grid", g)
            if g.ndim != self.degree:
                raise ValueError(f"dense grid has {g.ndim} dims for degree {self.degree}")
            if self.degree == 2 and g.size > DENSE2_CAP:
                raise ValueError("dense degree-2 grid exceeds 4096x4096; use separable form")
        else:
            axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
            object.__setattr__(self, "axes", axes)
            if len(axes) != self.degree:
                raise ValueError(f"{len(axes)} axes for degree {self.degree}")
        if self.form != "nfir":
            ins = tuple(self.inputs) or ("u",) * self.degree
            if len(ins) != self.degree:
                raise ValueError("need one input name per kernel axis")
            object.__setattr__(self, "inputs", ins)

    # constructors -------------------------------------------------------
    @classmethod
    def from_taps(cls, taps: dict, default_input="u"):
        norm = {}
        for key, c in taps.items():
            key = (key,) if isinstance(key, (int, np.integer)) else tuple(key)
            if len(key) == 2 and isinstance(key[0], str):
                key = (key,)
            k = tuple(_norm_factor(f, default_input) for f in key)
            norm[k] = norm.get(k, 0.0) + float(c)
        degree = max((len(k) for k in norm), default=0)
        return cls(degree, "nfir", taps=norm)

    @classmethod
    def dense(cls, grid, inputs=None, time_domain="discrete", step=1.0):
        g = np.asarray(grid, dtype=float)
        return cls(g.ndim, "dense", grid=g, inputs=tuple(inputs or ()),
                   time_domain=time_domain, step=step)

    @classmethod
    def separable(cls, axes, inputs=None, time_domain="discrete", step=1.0):
        return cls(len(axes), "separable", axes=tuple(axes), inputs=tuple(inputs or ()),
                   time_domain=time_domain, step=step)

    # helpers ------------------------------------------------------------
    def to_dense(self) -> np.ndarray:
        if self.form == "dense":
            return self.grid
        if self.form == "separable":
            out = self.axes[0]
            for a in self.axes[1:]:
                out = np.multiply.outer(out, a)
            return out
        raise ValueError("sparse taps have no dense grid")

    def min_lag(self, name) -> float:
        """Smallest lag at which input ``name`` enters (inf if it never does)."""
        best = math.inf
        if self.form == "nfir":
            for key, c in self.taps.items():
                if c != 0:
                    for n, lag in key:
                        if n == name:
                            best = min(best, lag)
            return best
        for ax, n in enumerate(self.inputs):
            if n != name:
                continue
            if self.form == "separable":
                a = self.axes[ax]
                if np.all([np.any(b != 0) for b in self.axes]):
                    nz = np.flatnonzero(a)
                    best = min(best, nz[0]) if nz.size else best
            else:
                prof = np.any(np.moveaxis(self.grid, ax, 0).reshape(self.grid.shape[ax], -1) != 0,
                              axis=1)
                nz = np.flatnonzero(prof)
                best = min(best, nz[0]) if nz.size else best
        return best

    def to_dict(self) -> dict:
        d = {"degree": self.degree, "form": self.form, "time_domain": self.time_domain,
             "step": self.step}
        if self.form == "nfir":
            d["taps"] = [{"factors": [list(f) for f in k], "coef": c} for k, c in self.taps.items()]
        elif self.form == "dense":
            d["grid"] = self.grid.tolist()
            d["inputs"] = list(self.inputs)
        else:
            d["axes"] = [a.tolist() for a in self.axes]
            d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d) -> "VolterraKernel":
        form = d["form"]
        if form == "nfir":
            taps = {tuple((str(n), int(l)) for n, l in t["factors"]): float(t["coef"])
                    for t in d["taps"]}
            return cls.from_taps(taps)
        kw = dict(inputs=d.get("inputs"), time_domain=d.get("time_domain", "discrete"),
                  step=float(d.get("step", 1.0)))
        if form == "dense":
            return cls.dense(d["grid"], **kw)
        return cls.separable(d["axes"], **kw)


def _as_list(kernels):
    if kernels is None:
        return []
    if isinstance(kernels, VolterraKernel):
        return [kernels]
    return list(kernels)


# --- whole-record evaluation --------------------------------------------
def _shift(x, lag):
    if lag == 0:
        return x
    out = np.zeros_like(x)
    if lag < x.shape[-1]:
        out[..., lag:] = x[..., :-lag]
    return out


def _lag_matrix(x, L):
    """``out[..., t, i] = x[..., t - i]`` with zero pre-history."""
    T = x.shape[-1]
    pad = np.concatenate([np.zeros(x.shape[:-1] + (L - 1,)), x], axis=-1)
    idx = np.arange(T)[:, None] + (L - 1) - np.arange(L)[None, :]
    return pad[..., idx]


def _causal_conv(h, x):
    T = x.shape[-1]
    n = T + h.size - 1
    nfft = 1 << (n - 1).bit_length()
    out = np.fft.irfft(np.fft.rfft(x, nfft, axis=-1) * np.fft.rfft(h, nfft), nfft, axis=-1)
    return out[..., :T]


def _eval_kernel(k: VolterraKernel, inputs: dict, shape):
    if k.form == "nfir":
        y = np.zeros(shape)
        for key, c in k.taps.items():
            term = c
            for name, lag in key:
                term = term * _shift(inputs[name], lag)
            y = y + term
        return y
    if k.form == "separable":
        y = np.ones(shape)
        for a, name in zip(k.axes, k.inputs):
            y = y * _causal_conv(a, inputs[name])
        return y
    letters = "abcdefghij"[: k.degree]
    mats = [_lag_matrix(inputs[name], k.grid.shape[i]) for i, name in enumerate(k.inputs)]
    expr = ",".join(f"...t{c}" for c in letters) + f",{letters}->...t"
    return np.einsum(expr, *mats, k.grid, optimize=True)


def eval_volterra_dt(kernels, inputs: dict) -> np.ndarray:
    """Response of a discrete-time kernel set to named input records.

    Inputs share the last (time) axis and broadcast over leading axes; all
    signals are zero before the first sample.
    """
    ks = _as_list(kernels)
    for k in ks:
        if k.time_domain != "discrete":
            raise ValueError("discretize first: continuous-time kernel passed")
    arrs = {n: np.asarray(v, dtype=float) for n, v in inputs.items()}
    shape = np.broadcast_shapes(*(a.shape for a in arrs.values()))
    arrs = {n: np.broadcast_to(a, shape) for n, a in arrs.items()}
    y = np.zeros(shape)
    for k in ks:
        y = y + _eval_kernel(k, arrs, shape)
    return y


# --- sample-by-sample evaluation (time-major storage) ---------------------
def _lagvec(x, t, L):
    lo = t - L + 1
    if lo >= 0:
        seg = x[lo:t + 1]
    else:
        seg = np.concatenate([np.zeros((-lo,) + x.shape[1:]), x[: t + 1]], axis=0)
    return seg[::-1]


def _eval_kernel_at(k: VolterraKernel, sig: dict, t):
    if k.form == "nfir":
        acc = 0.0
        for key, c in k.taps.items():
            term = c
            for name, lag in key:
                if t - lag < 0:
                    term = 0.0
                    break
                term = term * sig[name][t - lag]
            acc = acc + term
        return acc
    if k.form == "separable":
        acc = 1.0
        for a, name in zip(k.axes, k.inputs):
            acc = acc * np.tensordot(a, _lagvec(sig[name], t, a.size), axes=(0, 0))
        return acc
    vecs = [_lagvec(sig[name], t, k.grid.shape[i]) for i, name in enumerate(k.inputs)]
    letters = "abcdefghij"[: k.degree]
    expr = letters + "," + ",".join(f"{c}..." for c in letters) + "->..."
    return np.einsum(expr, k.grid, *vecs)


def _eval_block_at(ks, sig, t):
    acc = 0.0
    for k in ks:
        acc = acc + _eval_kernel_at(k, sig, t)
    return acc


@dataclass
class FeedbackSystemSpec:
    """Actuator -> plant -> feedback loop, each block a Volterra kernel set.

    With ``feedback=None`` the feedback path is the scalar gain
    ``loop_gain * y(t)``; with ``actuator=None`` the actuator is the identity.
    """

    plant: list
    actuator: list | None = None
    feedback: list | None = None
    loop_gain: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        self.plant = _as_list(self.plant)
        self.actuator = _as_list(self.actuator) if self.actuator is not None else None
        self.feedback = _as_list(self.feedback) if self.feedback is not None else None
        for k in self.plant + (self.actuator or []) + (self.feedback or []):
            if k.time_domain != "discrete":
                raise ValueError("discretize first: continuous-time kernel passed")

    @property
    def closed(self) -> bool:
        return self.feedback is not None or self.loop_gain != 0

    def loop_delays(self) -> dict:
        d_act = 0 if self.actuator is None else min((k.min_lag("e") for k in self.actuator),
                                                     default=math.inf)
        d_pl = min((k.min_lag("u") for k in self.plant), default=math.inf)
        if self.feedback is None:
            d_fb = 0 if self.loop_gain != 0 else math.inf
        else:
            d_fb = min((k.min_lag("y") for k in self.feedback), default=math.inf)
        return {"act": d_act, "pl": d_pl, "fb": d_fb}

    def check_feedthrough(self):
        if self.closed and max(self.loop_delays().values()) < 1:
            raise FeedThroughError("direct feed-through around the loop: "
                                   "some block must delay its loop input by >= 1 sample")

    def to_dict(self) -> dict:
        enc = lambda ks: None if ks is None else [k.to_dict() for k in ks]  # noqa: E731
        return {"name": self.name, "loop_gain": self.loop_gain, "plant": enc(self.plant),
                "actuator": enc(self.actuator), "feedback": enc(self.feedback)}

    @classmethod
    def from_dict(cls, d) -> "FeedbackSystemSpec":
        dec = lambda ks: None if ks is None else [VolterraKernel.from_dict(k) for k in ks]  # noqa: E731
        return cls(dec(d["plant"]) or [], dec(d.get("actuator")), dec(d.get("feedback")),
                   float(d.get("loop_gain", 0.0)), d.get("name", "custom"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def nfir_plant() -> VolterraKernel:
    """Taps of ``y(t) = u(t-1) + u(t-2) w(t)^2``."""
    return VolterraKernel.from_taps({(("u", 1),): 1.0, (("u", 2), ("w", 0), ("w", 0)): 1.0})


def nfir_system(alpha) -> FeedbackSystemSpec:
    return FeedbackSystemSpec([nfir_plant()], loop_gain=float(alpha), name="paper-nfir")


def _time_major(x, batch, T):
    x = np.broadcast_to(np.asarray(x, dtype=float), batch + (T,))
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


def simulate_closed_loop(sys: FeedbackSystemSpec, r, noises=None):
    """Simulate the loop ``e = r - f``, ``u = act(e)``, ``y = plant(u)``, ``f = fb(y)``.

    Zero initial conditions.  ``noises`` maps ``w_pl``, ``w_act``, ``w_fb`` to
    arrays broadcastable against ``r``; absent sources are zero.  Returns the
    full records ``(u, y)`` including the start-up transient.
    """
    noises = dict(noises or {})
    r = np.asarray(r, dtype=float)
    arrs = [r] + [np.asarray(v, dtype=float) for v in noises.values()]
    full = np.broadcast_shapes(*(a.shape for a in arrs))
    batch, T = full[:-1], full[-1]
    zeros = np.zeros(full)
    w_pl = noises.get("w_pl", zeros)
    w_act = noises.get("w_act", zeros)
    w_fb = noises.get("w_fb", zeros)

    if not sys.closed:
        e = np.broadcast_to(r, full)
        u = e if sys.actuator is None else eval_volterra_dt(sys.actuator, {"e": e, "w": w_act})
        y = eval_volterra_dt(sys.plant, {"u": u, "w": w_pl})
        return np.array(np.broadcast_to(u, full)), y

    sys.check_feedthrough()
    delays = sys.loop_delays()
    rt = _time_major(r, batch, T)
    sig_act = {"e": np.zeros((T,) + batch), "w": _time_major(w_act, batch, T)}
    sig_pl = {"u": np.zeros((T,) + batch), "w": _time_major(w_pl, batch, T)}
    sig_fb = {"y": np.zeros((T,) + batch), "w": _time_major(w_fb, batch, T)}
    f = np.zeros((T,) + batch)
    e, u, y = sig_act["e"], sig_pl["u"], sig_fb["y"]

    def act(t):
        u[t] = e[t] if sys.actuator is None else _eval_block_at(sys.actuator, sig_act, t)

    def pl(t):
        y[t] = _eval_block_at(sys.plant, sig_pl, t)

    def fb(t):
        f[t] = sys.loop_gain * y[t] if sys.feedback is None else _eval_block_at(sys.feedback, sig_fb, t)

    def sub(t):
        e[t] = rt[t] - f[t]

    if delays["pl"] >= 1:
        order = (pl, fb, sub, act)
    elif delays["fb"] >= 1:
        order = (fb, sub, act, pl)
    else:
        order = (act, pl, fb, sub)
    for t in range(T):
        for step in order:
            step(t)
        if not np.all(np.abs(u[t]) <= DIVERGENCE_LIMIT):
            raise LoopDivergedError(t)
    return np.moveaxis(u, 0, -1).copy(), np.moveaxis(y, 0, -1).copy()


def simulate_nfir_feedback(alpha, r, w):
    """Exact recursion ``y(t) = u(t-1) + u(t-2) w(t)^2``, ``u(t) = r(t) - alpha y(t)``.

    Zero initial conditions; ``r`` and ``w`` broadcast over leading axes.
    Raises :class:`LoopDivergedError` once ``|u|`` exceeds 1e12.
    """
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    full = np.broadcast_shapes(r.shape, w.shape)
    if r.shape[-1] != w.shape[-1]:
        raise ValueError("r and w must have the same length")
    if len(full) == 1:
        return _nfir_scalar(alpha, r.tolist(), w.tolist())
    batch, T = full[:-1], full[-1]
    rt, wt = _time_major(r, batch, T), _time_major(w, batch, T)
    u = np.zeros((T,) + batch)
    y = np.zeros((T,) + batch)
    for t in range(T):
        if t >= 2:
            y[t] = u[t - 1] + u[t - 2] * wt[t] * wt[t]
        elif t == 1:
            y[t] = u[0]
        u[t] = rt[t] - alpha * y[t]
        if not np.all(np.abs(u[t]) <= DIVERGENCE_LIMIT):
            raise LoopDivergedError(t)
    return np.moveaxis(u, 0, -1).copy(), np.moveaxis(y, 0, -1).copy()


def _nfir_scalar(alpha, r, w):
    T = len(r)
    u = [0.0] * T
    y = [0.0] * T
    lim = DIVERGENCE_LIMIT
    for t in range(T):
        if t >= 2:
            yt = u[t - 1] + u[t - 2] * w[t] * w[t]
        elif t == 1:
            yt = u[0]
        else:
            yt = 0.0
        ut = r[t] - alpha * yt
        if not -lim <= ut <= lim:
            raise LoopDivergedError(t)
        y[t] = yt
        u[t] = ut
    return np.array(u), np.array(y)


_NOISE_KEYS = ("w_pl", "w_act", "w_fb")


def draw_process_noise(noise_specs: dict, T, shape=(), seed=None, stream=0) -> dict:
    """Independent Gaussian draws for every configured process-noise source."""
    out = {}
    for i, key in enumerate(_NOISE_KEYS):
        spec = (noise_specs or {}).get(key)
        if spec is None:
            continue
        rng = make_rng(seed, STREAM_PROCESS_NOISE, i, stream)
        out[key] = gaussian_noise(T, spec, rng=rng, shape=shape)
    return out


def conditional_mean_response(sys: FeedbackSystemSpec, r, noise_specs: dict, n_mc, seed=None,
                              stream=0):
    """Monte-Carlo estimate of ``E{u | r}`` and ``E{y | r}``.

    ``r`` may carry leading batch axes; the ``n_mc`` process-noise draws are
    averaged out per reference record.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    r = np.asarray(r, dtype=float)
    T = r.shape[-1]
    noises = draw_process_noise(noise_specs, T, r.shape[:-1] + (n_mc,), seed, stream)
    u, y = simulate_closed_loop(sys, r[..., None, :], noises)
    return u.mean(axis=-2), y.mean(axis=-2)


# --- step-invariant (zoh) transform ---------------------------------------
def sample_ct_kernel(fn, degree, support, T_s, oversample=32, inputs=None):
    """Continuous-time kernel sampled on ``[0, support]`` with step ``T_s / oversample``.

    ``fn`` is a callable of ``degree`` lag arguments (dense grid) or a list
    of ``degree`` one-dimensional callables (separable kernel).
    """
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    dt = T_s / oversample
    n = int(math.ceil(support / dt - 1e-9))
    tau = np.arange(n + 1) * dt
    if callable(fn):
        grid = fn(*np.meshgrid(*([tau] * degree), indexing="ij")) if degree > 1 else fn(tau)
        return VolterraKernel.dense(np.broadcast_to(grid, (n + 1,) * degree), inputs,
                                    time_domain="continuous", step=dt)
    if len(fn) != degree:
        raise ValueError("need one callable per axis")
    return VolterraKernel.separable([np.broadcast_to(f(tau), tau.shape) for f in fn], inputs,
                                    time_domain="continuous", step=dt)


def _oversampling(step, T_s):
    ratio = T_s / step
    os_ = int(round(ratio))
    if os_ < 1 or abs(ratio - os_) > 1e-9 * max(1.0, ratio):
        raise ValueError("T_s must be an integer multiple of the kernel grid step")
    return os_


def _zoh_axis(g, step, T_s, n_taps=None):
    g = np.asarray(g, dtype=float)
    os_ = _oversampling(step, T_s)
    avail = (g.size - 1) // os_
    if n_taps is None:
        n_taps = avail
    if n_taps > avail:
        raise ValueError("kernel support not covered by the provided grid")
    h = cumulative_trapezoid(g, dx=step, initial=0.0)[: n_taps * os_ + 1: os_]
    return np.diff(h, prepend=0.0)


def step_invariant_deg1(g1: VolterraKernel, T_s, n_taps=None) -> VolterraKernel:
    """Discrete taps ``h1(nT) - h1((n-1)T)`` with ``h1`` the integrated kernel."""
    if g1.degree != 1 or g1.time_domain != "continuous":
        raise ValueError("expected a continuous-time degree-1 kernel")
    a = g1.axes[0] if g1.form == "separable" else g1.grid
    taps = _zoh_axis(a, g1.step, T_s, n_taps)
    return VolterraKernel.dense(taps, inputs=g1.inputs, step=T_s)


def step_invariant_deg2(g2: VolterraKernel, T_s, n_taps=None) -> VolterraKernel:
    """Four-corner difference of the doubly integrated degree-2 kernel."""
    if g2.degree != 2 or g2.time_domain != "continuous":
        raise ValueError("expected a continuous-time degree-2 kernel")
    if g2.form == "separable":
        axes = [_zoh_axis(a, g2.step, T_s, n_taps) for a in g2.axes]
        return VolterraKernel.separable(axes, inputs=g2.inputs, step=T_s)
    if g2.form != "dense":
        raise ValueError("unsupported form")
    g = g2.grid
    os_ = _oversampling(g2.step, T_s)
    avail = (min(g.shape) - 1) // os_
    n = avail if n_taps is None else n_taps
    if n > avail:
        raise ValueError("kernel support not covered by the provided grid")
    h = cumulative_trapezoid(g, dx=g2.step, axis=0, initial=0.0)
    h = cumulative_trapezoid(h, dx=g2.step, axis=1, initial=0.0)
    H = h[: n * os_ + 1: os_, : n * os_ + 1: os_]
    taps = np.diff(np.diff(H, axis=0, prepend=0.0), axis=1, prepend=0.0)
    return VolterraKernel.dense(taps, inputs=g2.inputs, step=T_s)


def step_invariant_degN(g: VolterraKernel, T_s, n_taps=None) -> VolterraKernel:
    """Per-axis differencing of a separable kernel of any degree."""
    if g.time_domain != "continuous":
        raise ValueError("expected a continuous-time kernel")
    if g.form != "separable":
        if g.degree == 1:
            return step_invariant_deg1(g, T_s, n_taps)
        raise ValueError("unsupported form: degree >= 2 kernels need separable form here")
    axes = [_zoh_axis(a, g.step, T_s, n_taps) for a in g.axes]
    if g.degree == 1:
        return VolterraKernel.dense(axes[0], inputs=g.inputs, step=T_s)
    return VolterraKernel.separable(axes, inputs=g.inputs, step=T_s)


def zoh_reference_response(kernel_fn, degree, u, T_s, support, oversample=64):
    """Sampled response of a continuous-time kernel to a zoh input (midpoint rule).

    ``kernel_fn`` is either a callable of ``degree`` lag arguments or a list of
    ``degree`` one-dimensional callables (separable kernel).  Used as an
    independent oracle for the step-invariant transform.
    """
    u = np.asarray(u, dtype=float)
    dt = T_s / oversample
    n_cells = int(round(support / dt))
    tau = (np.arange(n_cells) + 0.5) * dt
    # cell i of the lag axis sees the zoh value u[l - 1 - i // oversample]
    lag_samples = 1 + np.arange(n_cells) // oversample
    L = u.size
    Umat = np.zeros((L, n_cells))
    for l in range(L):
        src = l - lag_samples
        ok = src >= 0
        Umat[l, ok] = u[src[ok]]
    if callable(kernel_fn):
        grids = np.meshgrid(*([tau] * degree), indexing="ij")
        G = kernel_fn(*grids) * dt**degree
        out = np.empty(L)
        for l in range(L):
            acc = G
            for _ in range(degree):
                acc = acc @ Umat[l]
            out[l] = acc
        return out
    out = np.ones(L)
    for fn in kernel_fn:
        out = out * (Umat @ (fn(tau) * dt))
    return out
