"""Nonparametric BLA estimation with noise / total / distortion variances.

Three estimators share the :class:`BlaEstimate` result:

* ``bla_robust``: several phase realizations, several steady-state periods.
* ``bla_fast``: detection lines (non-excited bins) measure distortion plus noise.
* ``fast_lpm``: local polynomial fits on the transient record of P periods,
  excited bins for the FRF and in-between bins for the noise.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectra import SignalEnsemble, Spectrum, ensemble_spectra, scaled_dft_bins

FLAG_INVALID = 1
FLAG_CLIPPED = 2
FLAG_RETRIED = 4
FLAG_EDGE = 8

TINY = 1e-300


@dataclass
class BlaEstimate:
    """BLA per excited bin with its noise, total and nonlinear variances.

    Variances refer to the reported ``g_bla`` (the average over realizations
    when several are used).  ``var_nl`` is derived and clipped at zero.
    """

    k: np.ndarray
    freq_hz: np.ndarray
    g_bla: np.ndarray
    var_noise: np.ndarray
    var_total: np.ndarray
    method: str
    dof: float
    flags: np.ndarray | None = None
    dof_bins: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    g_realizations: np.ndarray | None = None
    var_nl: np.ndarray = field(init=False)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=int)
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.g_bla = np.asarray(self.g_bla, dtype=complex)
        self.var_noise = np.asarray(self.var_noise, dtype=float)
        self.var_total = np.asarray(self.var_total, dtype=float)
        n = self.k.size
        for name in ("freq_hz", "g_bla", "var_noise", "var_total"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per bin")
        if np.any(self.var_noise < 0) or np.any(self.var_total < 0):
            raise ValueError("variances must be non-negative")
        self.flags = np.zeros(n, dtype=int) if self.flags is None else np.asarray(self.flags, int)
        if self.dof_bins is None:
            self.dof_bins = np.full(n, float(self.dof))
        diff = self.var_total - self.var_noise
        self.flags = np.where(diff < 0, self.flags | FLAG_CLIPPED, self.flags & ~FLAG_CLIPPED)
        self.var_nl = np.maximum(diff, 0.0)

    @property
    def ref_power(self):
        return self.meta.get("ref_power")

    def subset(self, ks) -> "BlaEstimate":
        idx = np.searchsorted(self.k, ks)
        return BlaEstimate(self.k[idx], self.freq_hz[idx], self.g_bla[idx], self.var_noise[idx],
                           self.var_total[idx], self.method, self.dof, self.flags[idx],
                           self.dof_bins[idx], dict(self.meta),
                           None if self.g_realizations is None else self.g_realizations[:, idx])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dof": self.dof,
            "meta": self.meta,
            "bins": [
                {"k": int(k), "freq_hz": float(f), "re": float(g.real), "im": float(g.imag),
                 "var_noise": float(vn), "var_total": float(vt), "var_nl": float(vs),
                 "flags": int(fl), "dof": float(d)}
                for k, f, g, vn, vt, vs, fl, d in zip(self.k, self.freq_hz, self.g_bla,
                                                      self.var_noise, self.var_total, self.var_nl,
                                                      self.flags, self.dof_bins)
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "BlaEstimate":
        b = d["bins"]
        col = lambda key: np.array([x[key] for x in b])  # noqa: E731
        return cls(col("k").astype(int), col("freq_hz"), col("re") + 1j * col("im"),
                   col("var_noise"), col("var_total"), d["method"], d["dof"],
                   col("flags").astype(int), col("dof"), dict(d.get("meta", {})))

    def csv_lines(self):
        yield "k,freq_hz,re,im,var_noise,var_total,var_nl,flags"
        for k, f, g, vn, vt, vs, fl in zip(self.k, self.freq_hz, self.g_bla, self.var_noise,
                                           self.var_total, self.var_nl, self.flags):
            yield (f"{k},{float(f)!r},{float(g.real)!r},{float(g.imag)!r},{float(vn)!r},"
                   f"{float(vt)!r},{float(vs)!r},{fl}")

    def save(self, path):
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text("\n".join(self.csv_lines()) + "\n")
        else:
            path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "BlaEstimate":
        path = Path(path)
        if path.suffix == ".csv":
            raise ValueError("CSV exports drop metadata; load the JSON file")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class LpmConfig:
    """Local polynomial order ``poly_order`` and residual degrees of freedom ``dof``."""

    poly_order: int = 2
    dof: int = 10

    def __post_init__(self):
        if self.poly_order < 0:
            raise ValueError("poly_order must be >= 0")
        if self.dof < 1:
            raise ValueError("dof must be >= 1")

    @property
    def n_params(self) -> int:
        return 2 * (self.poly_order + 1)

    @property
    def window(self) -> int:
        """Excited bins per FRF + transient fit."""
        return self.n_params + self.dof

    @property
    def noise_window(self) -> int:
        """Non-excited bins per transient-only fit."""
        return self.poly_order + 1 + self.dof


# --- shared helpers -------------------------------------------------------
def excited_bins(e: SignalEnsemble, rel_floor=1e-12) -> np.ndarray:
    """Excited harmonics from ensemble metadata, else from the reference spectrum."""
    if "excited" in e.meta:
        return np.asarray(e.meta["excited"], dtype=int)
    if "reference" not in e.channels:
        raise ValueError("need a reference channel or meta['excited']")
    P = np.mean(np.abs(ensemble_spectra(e, "reference")) ** 2, axis=(0, 1))
    P[0] = 0.0
    return np.flatnonzero(P > rel_floor * P.max())


def _base_meta(e: SignalEnsemble) -> dict:
    m = {k: v for k, v in e.meta.items() if k != "excited"}
    m.update({"M": e.M, "P": e.P, "N": e.N})
    if "reference" in e.channels and "ref_power" not in m:
        m["ref_power"] = float(np.var(e.channels["reference"]))
    return m


def _noise_var_ratio(G, vY, vU, cYU, U):
    """First-order variance of ``Y/U`` from the covariances of Y and U."""
    num = vY + np.abs(G) ** 2 * vU - 2 * np.real(np.conj(G) * cYU)
    return np.maximum(num, 0.0) / np.maximum(np.abs(U) ** 2, TINY)


def _period_stats(U, Y):
    """Period means and covariances of those means; inputs ``[M, P, F]``."""
    P = U.shape[1]
    Um, Ym = U.mean(axis=1), Y.mean(axis=1)
    dU, dY = U - Um[:, None], Y - Ym[:, None]
    vU = np.sum(np.abs(dU) ** 2, axis=1) / (P - 1) / P
    vY = np.sum(np.abs(dY) ** 2, axis=1) / (P - 1) / P
    cYU = np.sum(dY * np.conj(dU), axis=1) / (P - 1) / P
    return Um, Ym, vU, vY, cYU


def _mean_m(x):
    """Mean over realizations ignoring invalid (NaN) entries; all-NaN bins stay NaN."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(x, axis=0)


def _finish(e, ks, G_m, vt, vn, method, dof, flags, dof_bins=None, extra=None):
    keep = ~(flags & FLAG_INVALID).astype(bool)
    excluded = [int(k) for k in ks[~keep]]
    meta = _base_meta(e)
    meta["excluded_bins"] = excluded
    meta.update(extra or {})
    return BlaEstimate(ks[keep], ks[keep] * e.clock_freq / e.N, _mean_m(G_m[:, keep]),
                       vn[keep], vt[keep], method, dof, flags[keep],
                       None if dof_bins is None else dof_bins[keep], meta, G_m[:, keep])


# --- robust method --------------------------------------------------------
def bla_robust(e: SignalEnsemble, excited=None) -> BlaEstimate:
    """Average over periods, ratio per realization, spread over realizations."""
    if e.M < 2 or e.P < 2:
        raise ValueError("robust method needs M >= 2 and P >= 2")
    ks = excited_bins(e) if excited is None else np.asarray(excited, dtype=int)
    U = ensemble_spectra(e, "input")[..., ks]
    Y = ensemble_spectra(e, "output")[..., ks]
    Um, Ym, vU, vY, cYU = _period_stats(U, Y)
    bad = np.any(np.abs(Um) < TINY, axis=0)
    G_m = np.divide(Ym, Um, out=np.full_like(Ym, np.nan), where=~(np.abs(Um) < TINY))
    M = e.M
    G = _mean_m(G_m)
    var_total = np.nansum(np.abs(G_m - G) ** 2, axis=0) / (M - 1) / M
    vn_m = _noise_var_ratio(G_m, vY, vU, cYU, Um)
    var_noise = _mean_m(vn_m) / M
    flags = np.where(bad, FLAG_INVALID, 0)
    return _finish(e, ks, G_m, var_total, var_noise, "robust", M - 1, flags)


# --- fast method ----------------------------------------------------------
def _nearest(cand, target, n_side=2):
    """Indices into ``cand`` of the ``n_side`` nearest entries below and above each target."""
    pos = np.searchsorted(cand, target)
    lo = pos[:, None] - np.arange(1, n_side + 1)[None, :]
    hi = pos[:, None] + np.arange(n_side)[None, :]
    # skip a candidate equal to the target itself
    hi = hi + (cand[np.minimum(pos, cand.size - 1)] == target)[:, None]
    idx = np.concatenate([lo, hi], axis=1)
    return np.where((idx >= 0) & (idx < cand.size), idx, -1)


def bla_fast(e: SignalEnsemble, excited=None) -> BlaEstimate:
    """BLA with total variance read off the non-excited in-band bins."""
    if e.P < 2:
        raise ValueError("fast method needs P >= 2")
    ks = excited_bins(e) if excited is None else np.asarray(excited, dtype=int)
    band = np.arange(ks.min(), ks.max() + 1)
    det = np.setdiff1d(band, ks)
    if det.size == 0:
        raise ValueError("fast method requires detection lines")
    Uall = ensemble_spectra(e, "input")
    Yall = ensemble_spectra(e, "output")
    Um_all, Ym_all = Uall.mean(axis=1), Yall.mean(axis=1)
    Um, Ym, vU, vY, cYU = _period_stats(Uall[..., ks], Yall[..., ks])
    bad = np.any(np.abs(Um) < TINY, axis=0)
    G_m = np.divide(Ym, Um, out=np.full_like(Ym, np.nan), where=~(np.abs(Um) < TINY))

    # residual at each detection line after removing the linear part of U
    near_exc = np.clip(np.searchsorted(ks, det), 0, ks.size - 1)
    left = np.clip(near_exc - 1, 0, ks.size - 1)
    near_exc = np.where(np.abs(ks[left] - det) < np.abs(ks[near_exc] - det), left, near_exc)
    res = Ym_all[:, det] - G_m[:, near_exc] * Um_all[:, det]
    res_pow = np.abs(res) ** 2

    nb = _nearest(det, ks, 2)
    valid = nb >= 0
    pw = np.where(valid[None], res_pow[:, np.where(valid, nb, 0)], 0.0)
    vt_m = pw.sum(axis=-1) / np.maximum(valid.sum(axis=-1), 1) / np.maximum(np.abs(Um) ** 2, TINY)
    vn_m = _noise_var_ratio(G_m, vY, vU, cYU, Um)
    M = e.M
    var_total = _mean_m(vt_m) / M
    var_noise = _mean_m(vn_m) / M

    odd = det % 2 == 1
    out_pow = np.mean(np.abs(Ym_all[:, det]) ** 2, axis=0)
    p_odd = float(out_pow[odd].mean()) if odd.any() else 0.0
    p_even = float(out_pow[~odd].mean()) if (~odd).any() else 0.0
    detection = {"k_odd": det[odd].tolist(), "k_even": det[~odd].tolist(),
                 "power_odd": p_odd, "power_even": p_even,
                 "even_odd_ratio": p_even / p_odd if p_odd > 0 else math.inf}
    flags = np.where(bad, FLAG_INVALID, 0)
    return _finish(e, ks, G_m, var_total, var_noise, "fast", e.P - 1, flags,
                   extra={"detection": detection})


# --- local polynomial method ---------------------------------------------
def _windows(cand, targets, n):
    """Window of ``n`` consecutive candidate positions around each target position."""
    if cand.size < n:
        raise ValueError(f"window of {n} bins exceeds the {cand.size} available bins")
    start = np.clip(targets - n // 2, 0, cand.size - n)
    idx = start[:, None] + np.arange(n)[None, :]
    edge = (targets - n // 2 < 0) | (targets - n // 2 > cand.size - n)
    return idx, edge


def _poly_basis(delta, order):
    scale = np.maximum(np.max(np.abs(delta), axis=-1, keepdims=True), 1)
    d = delta / scale
    return d[..., None] ** np.arange(order + 1)


def _local_ls(K, Z, rtol=1e-10):
    """Batched least squares ``Z ~ K c``: coefficients, residuals, [(K^H K)^-1]_00, rank flag."""
    Q, Rr = np.linalg.qr(K)
    diag = np.abs(np.diagonal(Rr, axis1=-2, axis2=-1))
    ok = diag.min(axis=-1) > rtol * np.maximum(diag.max(axis=-1), TINY)
    eye = np.eye(Rr.shape[-1])
    Rs = np.where(ok[..., None, None], Rr, eye)
    Rinv = np.linalg.inv(Rs)
    QhZ = np.conj(np.swapaxes(Q, -1, -2)) @ Z
    coef = Rinv @ QhZ
    resid = Z - Q @ QhZ
    inv00 = np.sum(np.abs(Rinv[..., 0, :]) ** 2, axis=-1)
    return coef, resid, inv00, ok


def _as_bins(x):
    return x.bins if isinstance(x, Spectrum) else np.asarray(x)


@dataclass
class LpmFit:
    """Per-bin local polynomial results; leading axes follow the input batch."""

    bins: np.ndarray
    g_ry: np.ndarray
    g_ru: np.ndarray
    transient_y: np.ndarray
    transient_u: np.ndarray
    residual_cov: np.ndarray
    inv00: np.ndarray
    dof: np.ndarray
    flags: np.ndarray

    @property
    def g_bla(self):
        return bla_from_reference(self.g_ry, self.g_ru)

    @property
    def residual_var(self):
        return np.real(self.residual_cov[..., 0, 0])


def _fit_windows(cand, targets, n, make_K, Z_of):
    """Fit every target with a window of ``n`` candidates; widen once if rank deficient."""
    idx, edge = _windows(cand, targets, n)
    K = make_K(idx, cand[targets])
    p = K.shape[-1]
    coef, resid, inv00, ok = _local_ls(K, Z_of(idx))
    rcov = np.conj(np.swapaxes(resid, -1, -2)) @ resid / (n - p)
    flags = np.where(edge, FLAG_EDGE, 0)
    dof = np.full(targets.size, float(n - p))
    bad = ~np.all(ok.reshape(-1, ok.shape[-1]), axis=0)
    if bad.any() and cand.size >= n + 2:
        idx2, _ = _windows(cand, targets[bad], n + 2)
        c2, r2, i2, ok2 = _local_ls(make_K(idx2, cand[targets[bad]]), Z_of(idx2))
        coef[..., bad, :, :] = c2
        inv00[..., bad] = i2
        ok[..., bad] = ok2
        rcov[..., bad, :, :] = np.conj(np.swapaxes(r2, -1, -2)) @ r2 / (n + 2 - p)
        flags[bad] |= FLAG_RETRIED
        dof[bad] = n + 2 - p
    still_bad = ~np.all(ok.reshape(-1, ok.shape[-1]), axis=0)
    flags[still_bad] |= FLAG_INVALID
    return coef, rcov, inv00, ok, flags, dof


def lpm_fit(R_spec, U_spec, Y_spec, cfg: LpmConfig, excited) -> LpmFit:
    """Local fits ``Z(k+d) = sum_i a_i d^i R(k+d) + sum_i b_i d^i`` at every excited bin.

    Spectra are arrays ``[..., n_bins]`` (or :class:`Spectrum`); ``excited``
    indexes those bins and neighbouring excited bins form the window.
    ``g_ry``/``g_ru`` are the ``a_0`` of output and input; residual
    covariance of ``[Y, U]`` is normalized by the residual dof.
    """
    R = _as_bins(R_spec)
    Z = np.stack([_as_bins(Y_spec), _as_bins(U_spec)], axis=-1)
    exc = np.unique(np.asarray(excited, dtype=int))
    order = cfg.poly_order

    def make_K(idx, centre):
        bins = exc[idx]
        B = _poly_basis((bins - centre[:, None]).astype(float), order)
        Rw = R[..., bins]
        return np.concatenate([Rw[..., None] * B, np.broadcast_to(B, Rw.shape + B.shape[-1:])],
                              axis=-1)

    def Z_of(idx):
        return Z[..., exc[idx], :]

    coef, rcov, inv00, ok, flags, dof = _fit_windows(exc, np.arange(exc.size), cfg.window,
                                                     make_K, Z_of)
    p = order + 1
    return LpmFit(exc, coef[..., 0, 0], coef[..., 0, 1], coef[..., p, 0], coef[..., p, 1],
                  rcov, inv00, dof, flags)


def _noise_fit(Z, cand, targets, cfg: LpmConfig):
    """Transient-only fits on non-excited bins: residual covariance of ``[Y, U]``."""
    order = cfg.poly_order

    def make_K(idx, centre):
        B = _poly_basis((cand[idx] - centre[:, None]).astype(float), order)
        return np.broadcast_to(B, Z.shape[:-2] + B.shape)

    def Z_of(idx):
        return Z[..., cand[idx], :]

    _, rcov, _, _, _, _ = _fit_windows(cand, targets, cfg.noise_window, make_K, Z_of)
    return rcov


def bla_from_reference(g_ry, g_ru):
    """BLA as the ratio of reference-to-output and reference-to-input BLAs."""
    g_ry = np.asarray(g_ry, dtype=complex)
    g_ru = np.asarray(g_ru, dtype=complex)
    small = np.abs(g_ru) < TINY
    if np.ndim(g_ru) == 0 and small:
        raise ZeroDivisionError("invalid bin: |g_ru| below 1e-300")
    return np.divide(g_ry, g_ru, out=np.full(np.broadcast(g_ry, g_ru).shape, np.nan, complex),
                     where=~small)


def _ratio_var_cov(G, C, g_ru, inv00):
    num = (np.real(C[..., 0, 0]) + np.abs(G) ** 2 * np.real(C[..., 1, 1])
           - 2 * np.real(np.conj(G) * C[..., 0, 1]))
    return inv00 * np.maximum(num, 0.0) / np.maximum(np.abs(g_ru) ** 2, TINY)


def fast_lpm(e: SignalEnsemble, cfg: LpmConfig = LpmConfig(), excited=None) -> BlaEstimate:
    """Local polynomial BLA from the full P-period record of each realization.

    The record of ``P * N`` samples (transient included) is transformed as a
    whole: bins ``P * k`` carry the excitation, the bins in between carry
    only transient and noise and give the noise covariance.
    """
    if e.P < 2:
        raise ValueError("fast_lpm needs P >= 2 for a noise estimate")
    ks = excited_bins(e) if excited is None else np.asarray(excited, dtype=int)
    P, N = e.P, e.N
    Rl = scaled_dft_bins(e.record("reference"))
    Ul = scaled_dft_bins(e.record("input"))
    Yl = scaled_dft_bins(e.record("output"))
    exc = P * ks
    fit = lpm_fit(Rl, Ul, Yl, cfg, exc)
    G_m = fit.g_bla

    # noise: non-excited bins of the long grid, 2 nearest on each side
    L = P * N // 2
    cand = np.array([l for l in range(1, L) if l % P], dtype=int)
    nb = _nearest(cand, exc, 2)
    need = np.unique(nb[nb >= 0])
    Z = np.stack([Yl, Ul], axis=-1)
    Cn_need = _noise_fit(Z, cand, need, cfg)
    lookup = np.searchsorted(need, np.where(nb >= 0, nb, need[0]))
    valid = (nb >= 0)
    Cn = np.where(valid[None, :, :, None, None], Cn_need[:, lookup], 0)
    Cn = Cn.sum(axis=2) / valid.sum(axis=1)[None, :, None, None]

    vt_m = _ratio_var_cov(G_m, fit.residual_cov, fit.g_ru, fit.inv00)
    vn_m = _ratio_var_cov(G_m, Cn, fit.g_ru, fit.inv00)
    bad = np.all(~np.isfinite(G_m), axis=0) | (fit.flags & FLAG_INVALID).astype(bool)
    M = e.M
    var_total = _mean_m(vt_m) / M
    var_noise = _mean_m(vn_m) / M
    flags = np.where(bad, fit.flags | FLAG_INVALID, fit.flags)
    return _finish(e, ks, G_m, var_total, var_noise, "fast_lpm", cfg.dof, flags, fit.dof,
                   extra={"poly_order": cfg.poly_order, "lpm_dof": cfg.dof})


def residual_decomposition(e: SignalEnsemble, g_bla, n_mc_conditional, sim, seed=None,
                           excited=None, chunk=20000):
    """Split the BLA output residual into distortion ``y_s`` and process noise ``y_p``.

    Needs the simulator: the conditional means ``E{y|r}``, ``E{u|r}`` are
    re-estimated from ``n_mc_conditional`` fresh process-noise draws per
    reference.  Two independent conditional-mean estimates are used for
    ``y_s`` and ``y_p`` so their Monte-Carlo errors are uncorrelated.

    Returns ``y_s`` as ``[M, F]`` and ``y_p`` as ``[M, P, F]`` at the excited bins.
    """
    from .volterra import conditional_mean_response

    ks = excited_bins(e) if excited is None else np.asarray(excited, dtype=int)
    G = np.broadcast_to(np.asarray(g_bla, dtype=complex), ks.shape)
    M, P, N = e.M, e.P, e.N
    warm = sim.warmup_periods
    n_tot = warm + P
    r = np.tile(e.channels["reference"][:, 0], (1, n_tot))
    per_chunk = max(1, chunk // max(n_mc_conditional, 1))

    def cond_spectra(stream):
        Uc = np.empty((M, N // 2), dtype=complex)
        Yc = np.empty((M, N // 2), dtype=complex)
        for lo in range(0, M, per_chunk):
            sl = slice(lo, lo + per_chunk)
            u, y = conditional_mean_response(sim.system, r[sl], sim.noise, n_mc_conditional,
                                             seed, stream=stream * 1_000_003 + lo)
            # the conditional mean is periodic in steady state: average the kept periods
            Uc[sl] = scaled_dft_bins(u.reshape(-1, n_tot, N)[:, warm:].mean(axis=1))
            Yc[sl] = scaled_dft_bins(y.reshape(-1, n_tot, N)[:, warm:].mean(axis=1))
        return Uc[:, ks], Yc[:, ks]

    Uc1, Yc1 = cond_spectra(1)
    Uc2, Yc2 = cond_spectra(2)
    U = ensemble_spectra(e, "input")[..., ks]
    Y = ensemble_spectra(e, "output")[..., ks]
    y_s = Yc1 - G * Uc1
    y_p = (Y - Yc2[:, None]) - G * (U - Uc2[:, None])
    return y_s, y_p
