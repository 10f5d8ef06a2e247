
import numpy as np
import pytest
from hypothesis import given, strategies as st

from blapn.bla import (FLAG_CLIPPED, BlaEstimate, LpmConfig, bla_fast,
                       bla_from_reference, bla_robust, excited_bins, fast_lpm, lpm_fit,
                       residual_decomposition)
from blapn.experiments import (SimulationConfig, benchmark_multisine, cubic_config, nfir_config,
                               reference_periods, simulate_ensemble, square_config)
from blapn.oracle import NfirParams, nfir_bla_true, nfir_ry_ru_true, nfir_yp_series
from blapn.signals import design_flat_multisine, design_odd_random_multisine
from blapn.spectra import SignalEnsemble
from blapn.volterra import FeedbackSystemSpec, VolterraKernel, simulate_nfir_feedback


def _delay_config(P=2, warm=1):
    k = VolterraKernel.from_taps({1: 0.5})
    return SimulationConfig(FeedbackSystemSpec([k]), n_periods=P, warmup_periods=warm)


def _run(cfg, spec, M, seed=1, kind="multisine"):
    r = reference_periods(spec, M, seed, kind)
    return simulate_ensemble(cfg, r, seed, spec.clock_freq, {"excited": spec.excited.tolist()})


@pytest.fixture(scope="module")
def nfir_ens():
    spec = benchmark_multisine(N=1024)
    return _run(nfir_config(0.3, 0.75), spec, 100, seed=3), spec


# --- robust ----------------------------------------------------------------
def test_robust_noiseless_lti():
    spec = design_flat_multisine(128, 1.0, None, 1.0)
    est = bla_robust(_run(_delay_config(3), spec, 4))
    w = 2 * np.pi * est.k / 128
    np.testing.assert_allclose(est.g_bla, 0.5 * np.exp(-1j * w), atol=1e-12)
    assert est.var_total.max() <= 1e-20 and est.var_noise.max() <= 1e-20


def test_robust_nfir_within_total_std(nfir_ens):
    e, _ = nfir_ens
    est = bla_robust(e)
    G0 = nfir_bla_true(NfirParams(), 2 * np.pi * est.k / 1024)
    z = np.abs(est.g_bla - G0) / np.sqrt(est.var_total)
    assert np.mean(z <= 3) > 0.99


def test_robust_cubic_distortion():
    spec = design_flat_multisine(256, 1.0, None, 1.0)
    est = bla_robust(_run(cubic_config(0.1), spec, 20))
    assert np.all(est.var_nl > 0)
    assert est.var_noise.max() < 1e-25
    # Gaussian-input BLA of u + 0.1 u^3 is 1 + 0.3 var(u)
    assert np.mean(est.g_bla.real) == pytest.approx(1.3, abs=0.03)


def test_robust_needs_replicates():
    spec = design_flat_multisine(64, 1.0, None, 1.0)
    with pytest.raises(ValueError):
        bla_robust(_run(_delay_config(1), spec, 3))


def test_zero_input_bin_excluded():
    # period-4 input: bin 16 of 64 carries power, bin 5 is exactly zero
    u = np.tile([1.0, 0.0, -1.0, 0.0], 16)
    uu = np.broadcast_to(u, (3, 2, 64))
    e = SignalEnsemble({"reference": uu, "input": uu, "output": 0.5 * uu})
    est = bla_robust(e, excited=[5, 16])
    assert est.k.tolist() == [16] and est.meta["excluded_bins"] == [5]
    assert est.g_bla[0] == pytest.approx(0.5)


def test_robust_variance_scales_with_M():
    spec = design_flat_multisine(128, 1.0, None, 1.0)
    cfg = nfir_config(0.3, 0.75)
    ratios = []
    for trial in range(6):
        v20 = bla_robust(_run(cfg, spec, 20, seed=100 + trial)).var_total.mean()
        v40 = bla_robust(_run(cfg, spec, 40, seed=200 + trial)).var_total.mean()
        ratios.append(v20 / v40)
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.3)


def test_bla_same_for_multisine_and_periodic_noise():
    spec = design_flat_multisine(256, 1.0, None, 1.0)
    cfg = cubic_config(0.1)
    a = bla_robust(_run(cfg, spec, 60, seed=1))
    b = bla_robust(_run(cfg, spec, 60, seed=2, kind="noise"))
    z = np.abs(a.g_bla - b.g_bla) / np.sqrt(a.var_total + b.var_total)
    assert np.mean(z <= 3) > 0.98


# --- fast -------------------------------------------------------------------
def test_fast_linear_residual():
    spec = design_odd_random_multisine(256, 1.0, None, 1.0, seed=2)
    e = _run(_delay_config(2), spec, 3)
    est = bla_fast(e)
    out_pow = np.mean(np.abs(np.fft.rfft(e["output"], axis=-1)[..., spec.excited]) ** 2)
    det = est.meta["detection"]
    assert max(det["power_odd"], det["power_even"]) <= 1e-10 * out_pow / 256
    assert est.var_total.max() < 1e-20


def test_fast_square_even_bins():
    spec = design_odd_random_multisine(256, 1.0, None, 1.0, seed=2)
    est = bla_fast(_run(square_config(), spec, 4))
    assert est.meta["detection"]["even_odd_ratio"] > 10


def test_fast_nfir_total_matches_noise():
    spec = design_odd_random_multisine(1024, 1.0, None, 1.0, seed=4)
    est = bla_fast(_run(nfir_config(0.3, 0.75), spec, 100, seed=5))
    ratio = est.var_total / est.var_noise
    assert np.mean((ratio >= 0.5) & (ratio <= 2)) >= 0.95


def test_fast_requires_detection_lines():
    spec = design_flat_multisine(64, 1.0, None, 1.0)
    with pytest.raises(ValueError, match="detection lines"):
        bla_fast(_run(_delay_config(2), spec, 2))


# --- local polynomial -------------------------------------------------------
def test_lpm_config():
    cfg = LpmConfig()
    assert cfg.window == 16 and cfg.noise_window == 13
    with pytest.raises(ValueError):
        LpmConfig(dof=0)
    with pytest.raises(ValueError):
        LpmConfig(poly_order=-1)


def test_lpm_exact_linear_relation():
    rng = np.random.default_rng(1)
    R = np.exp(2j * np.pi * rng.uniform(size=100))
    fit = lpm_fit(R, R, 2 * R, LpmConfig(2, 4), np.arange(100))
    np.testing.assert_allclose(fit.g_ry, 2, atol=1e-10)
    np.testing.assert_allclose(fit.g_ru, 1, atol=1e-10)
    assert np.abs(fit.transient_y).max() < 1e-10
    assert fit.residual_var.max() < 1e-20


def test_lpm_recovers_g_under_transient():
    rng = np.random.default_rng(2)
    n = 400
    k = np.arange(n)
    w = np.pi * k / n
    G = 1 / (1 - 0.5 * np.exp(-1j * w))
    R = np.exp(2j * np.pi * rng.uniform(size=n))
    T = 0.3 / (1 - 0.5 * np.exp(-1j * w))
    fit = lpm_fit(R, R, G * R + T, LpmConfig(2, 10), k)
    assert np.abs(fit.g_ry - G)[10:-10].max() < 1e-3


def test_lpm_window_too_large():
    with pytest.raises(ValueError, match="exceeds"):
        lpm_fit(np.ones(10), np.ones(10), np.ones(10), LpmConfig(2, 10), np.arange(10))


def test_fast_lpm_consumes_transient():
    # noiseless IIR loop recorded from t = 0
    spec = design_flat_multisine(1024, 1.0, None, 1.0)
    e = _run(nfir_config(0.5, 0.0, n_periods=2, warmup_periods=0), spec, 2)
    est = fast_lpm(e, LpmConfig(2, 10))
    err = np.abs(est.g_bla - np.exp(-2j * np.pi * est.k / 1024))
    assert err.max() < 1e-3
    assert est.method == "fast_lpm" and np.all(est.dof_bins == 10)


def test_fast_lpm_needs_two_periods():
    spec = design_flat_multisine(64, 1.0, None, 1.0)
    with pytest.raises(ValueError):
        fast_lpm(_run(_delay_config(1), spec, 2))


def test_bla_from_reference():
    z = np.exp(1j * np.linspace(0.1, 3, 7))
    p = NfirParams()
    np.testing.assert_allclose(bla_from_reference(*nfir_ry_ru_true(p, z)),
                               nfir_bla_true(p, np.angle(z)), rtol=1e-12)
    assert bla_from_reference(0.3 + 1j, 0.3 + 1j) == 1
    with pytest.raises(ZeroDivisionError, match="invalid bin"):
        bla_from_reference(1.0, 0.0)
    assert np.isnan(bla_from_reference([1.0, 1.0], [0.0, 1.0])[0])


# --- estimate container ----------------------------------------------------
@given(vt=st.lists(st.floats(0, 10), min_size=1, max_size=20), seed=st.integers(0, 99))
def test_clipping_rule(vt, seed):
    vt = np.array(vt)
    vn = np.random.default_rng(seed).uniform(0, 10, vt.size)
    est = BlaEstimate(np.arange(vt.size), np.arange(vt.size), np.ones(vt.size), vn, vt, "robust", 1)
    assert np.all(est.var_nl >= 0)
    clipped = (est.flags & FLAG_CLIPPED).astype(bool)
    assert np.array_equal(clipped, vt < vn)
    np.testing.assert_array_equal(est.var_nl[~clipped], (vt - vn)[~clipped])


def test_negative_variance_rejected():
    with pytest.raises(ValueError):
        BlaEstimate([1], [0.1], [1.0], [-1.0], [0.0], "robust", 1)


def test_estimate_roundtrip(tmp_path, nfir_ens):
    est = bla_robust(nfir_ens[0])
    est.save(tmp_path / "e.json")
    back = BlaEstimate.load(tmp_path / "e.json")
    np.testing.assert_array_equal(back.g_bla, est.g_bla)
    np.testing.assert_array_equal(back.var_nl, est.var_nl)
    assert back.meta["M"] == 100
    est.save(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "k,freq_hz,re,im,var_noise,var_total,var_nl,flags"
    assert len(lines) == est.k.size + 1
    with pytest.raises(ValueError):
        BlaEstimate.load(tmp_path / "e.csv")


def test_excited_bins_from_reference():
    spec = design_odd_random_multisine(128, 1.0, None, 1.0, seed=1)
    e = simulate_ensemble(_delay_config(2), reference_periods(spec, 2, 1))
    np.testing.assert_array_equal(excited_bins(e), spec.excited)


# --- residual decomposition -----------------------------------------------
def test_decomposition_linear_noiseless():
    spec = design_flat_multisine(64, 1.0, None, 1.0)
    cfg = _delay_config(2)
    e = _run(cfg, spec, 3)
    est = bla_robust(e)
    y_s, y_p = residual_decomposition(e, est.g_bla, 2, cfg, seed=1)
    assert np.abs(y_s).max() < 1e-10 and np.abs(y_p).max() < 1e-10


def test_decomposition_nfir_no_distortion():
    spec = design_flat_multisine(128, 1.0, None, 1.0)
    cfg = nfir_config(0.3, 0.75)
    e = _run(cfg, spec, 4)
    G0 = nfir_bla_true(NfirParams(), 2 * np.pi * spec.excited / 128)
    n_mc = 400
    y_s, y_p = residual_decomposition(e, G0, n_mc, cfg, seed=2)
    # Monte-Carlo floor of the conditional-mean estimate is ~ |y_p| / sqrt(n_mc)
    floor = np.sqrt(np.mean(np.abs(y_p) ** 2) / n_mc)
    assert np.sqrt(np.mean(np.abs(y_s) ** 2)) < 3 * floor


def test_process_noise_time_series():
    rng = np.random.default_rng(3)
    r, w = rng.standard_normal(500), 0.75 * rng.standard_normal(500)
    u, y = simulate_nfir_feedback(0.3, r, w)
    lin = np.zeros_like(y)
    lin[1:] += u[:-1]
    lin[2:] += 0.75**2 * u[:-2]
    np.testing.assert_allclose(y - lin, nfir_yp_series(u, w, 0.75), atol=1e-9)
