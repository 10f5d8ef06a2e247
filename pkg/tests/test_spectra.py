import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from blapn.signals import design_flat_multisine, realize_multisine
from blapn.spectra import (SignalEnsemble, Spectrum, config_digest, ensemble_spectra,
                           sample_cov, sample_stats, scaled_dft, scaled_dft_bins)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_dc_identity():
    s = scaled_dft(np.full(8, 2.5))
    assert s.bins[0] == pytest.approx(2.5 * math.sqrt(8))
    assert np.all(np.abs(s.bins[1:]) < 1e-14)
    assert s.bins.size == 4


def test_cosine_bin():
    N = 64
    s = scaled_dft(np.cos(2 * np.pi * 3 * np.arange(N) / N))
    assert s.bins[3] == pytest.approx(math.sqrt(N) / 2, abs=1e-12)
    others = np.delete(np.abs(s.bins), [0, 3])
    assert others.max() < 1e-12


def test_odd_length_rejected():
    with pytest.raises(ValueError):
        scaled_dft(np.zeros(7))


def test_multisine_bins_match_design():
    spec = design_flat_multisine(128, 1.0, None, 1.0)
    x = realize_multisine(spec, 4).samples
    b = scaled_dft(x).bins
    np.testing.assert_allclose(np.abs(b[spec.excited]), spec.amp_grid[spec.excited], rtol=1e-10)


@given(arrays(float, st.integers(2, 64).map(lambda n: 2 * n), elements=finite))
def test_parseval(x):
    s = scaled_dft(x)
    full = np.fft.fft(x) / math.sqrt(x.size)
    # stored half plus conjugate mirror plus the Nyquist bin
    total = np.sum(np.abs(s.full()) ** 2) + abs(full[x.size // 2]) ** 2
    assert total == pytest.approx(np.sum(x**2), rel=1e-9, abs=1e-9)


@given(arrays(float, 32, elements=finite), arrays(float, 32, elements=finite),
       st.floats(-10, 10), st.floats(-10, 10))
def test_linearity(x, y, a, b):
    lhs = scaled_dft_bins(a * x + b * y)
    rhs = a * scaled_dft_bins(x) + b * scaled_dft_bins(y)
    scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale


def test_full_spectrum_symmetry():
    x = np.random.default_rng(0).standard_normal(16)
    f = Spectrum(scaled_dft_bins(x), 16).full()
    ref = np.fft.fft(x) / 4
    ref[8] = 0
    np.testing.assert_allclose(f, ref, atol=1e-12)


def _ens(M=2, P=3, N=16, seed=0):
    rng = np.random.default_rng(seed)
    return SignalEnsemble({c: rng.standard_normal((M, P, N)) for c in ("reference", "input", "output")},
                          2.0, {"seed": seed})


def test_ensemble_validation():
    with pytest.raises(ValueError):
        SignalEnsemble({"input": np.zeros((2, 2, 8)), "output": np.zeros((2, 3, 8))})
    with pytest.raises(ValueError):
        SignalEnsemble({"bogus": np.zeros((1, 1, 8))})
    e = _ens()
    assert (e.M, e.P, e.N) == (2, 3, 16)
    assert e.drop_periods(1).P == 2
    assert e.record("input").shape == (2, 48)


def test_ensemble_spectra_single():
    e = _ens(1, 1)
    np.testing.assert_array_equal(ensemble_spectra(e, "input")[0, 0],
                                  scaled_dft(e["input"][0, 0]).bins)


def test_periodic_channel_identical_periods():
    spec = design_flat_multisine(32, 1.0, None, 1.0)
    x = realize_multisine(spec, 1).samples
    e = SignalEnsemble({"reference": np.tile(x, (1, 4, 1))})
    S = ensemble_spectra(e, "reference")
    assert np.abs(S - S[:, :1]).max() < 1e-10


def test_different_seeds_differ():
    spec = design_flat_multisine(32, 1.0, None, 1.0)
    e = SignalEnsemble({"reference": np.stack([realize_multisine(spec, s).samples
                                               for s in (1, 2)])[:, None]})
    S = ensemble_spectra(e, "reference")[:, 0, spec.excited]
    assert np.all(np.abs(S[0] - S[1]) > 0)


def test_ensemble_json_roundtrip(tmp_path):
    e = _ens()
    e.save(tmp_path / "e.json")
    back = SignalEnsemble.load(tmp_path / "e.json")
    for c in e.channels:
        np.testing.assert_array_equal(back[c], e[c])
    assert back.clock_freq == 2.0 and back.meta == e.meta


def test_sample_stats_identities():
    a = np.array([1 + 2j, 3.0])
    b = np.array([2 - 1j, -1.0])
    X = np.stack([a, b])
    m, v = sample_stats(X, axis=0)
    np.testing.assert_allclose(m, (a + b) / 2)
    np.testing.assert_allclose(v, np.abs(a - b) ** 2 / 2)
    m, v = sample_stats(np.stack([a, a, a]), axis=0)
    assert np.all(v == 0)
    with pytest.raises(ValueError, match="insufficient replicates"):
        sample_stats(X[:1], axis=0)


def test_sample_stats_white_noise_level():
    rng = np.random.default_rng(1)
    N, P, sigma = 2048, 6, 0.3
    x = np.sin(2 * np.pi * 5 * np.arange(N) / N) + sigma * rng.standard_normal((1, P, N))
    _, v = sample_stats(scaled_dft_bins(x), axis="periods")
    assert v[0, 1:].mean() == pytest.approx(sigma**2, rel=0.1)


def test_noise_variance_independent_of_reference_seed():
    rng = np.random.default_rng(2)
    spec = design_flat_multisine(256, 1.0, None, 1.0)
    vs = []
    for seed in (1, 2):
        r = realize_multisine(spec, seed).samples
        y = r + 0.2 * rng.standard_normal((1, 8, 256))
        _, v = sample_stats(scaled_dft_bins(y), axis="periods")
        vs.append(v[0, 1:])
    se = np.sqrt(np.var(vs[0]) / vs[0].size + np.var(vs[1]) / vs[1].size)
    assert abs(vs[0].mean() - vs[1].mean()) < 5 * se


def test_sample_cov_matches_var():
    X = np.random.default_rng(3).standard_normal((5, 4)) + 1j
    _, v = sample_stats(X, axis=0)
    np.testing.assert_allclose(sample_cov(X, X, axis=0).real, v)


def test_spectrum_csv(tmp_path):
    s = scaled_dft(np.arange(8.0), clock_freq=4.0)
    s.to_csv(tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "k,freq_hz,re,im"
    assert rows[2].split(",")[1] == "0.5"


def test_config_digest_stable():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
    assert len(config_digest({})) == 16
