import warnings

import numpy as np
import pytest

from olt.txgen import (
    ConstellationSpec,
    TxConfig,
    build_tx_waveform,
    generate_symbols,
    maxwell_boltzmann,
    nu_for_entropy,
    square_qam,
)
from olt.waveforms import InvalidInput, dbm_to_watts

from conftest import small_tx_cfg


def test_square_qam_unit_energy():
    for m in (4, 16, 64):
        pts = square_qam(m)
        assert pts.size == m
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0)
    with pytest.raises(InvalidInput):
        square_qam(32)


def test_mb_exponent_reaches_target_entropy():
    nu = nu_for_entropy(5.5)
    p = maxwell_boltzmann(square_qam(64), nu)
    h = -np.sum(p * np.log2(p))
    assert h == pytest.approx(5.5, abs=1e-10)
    assert nu > 0


def test_uniform_limit_has_full_entropy():
    p = maxwell_boltzmann(square_qam(64), 0.0)
    assert np.allclose(p, 1 / 64)


def test_pcs_symbol_statistics_follow_mb():
    cfg = TxConfig(n_symbols=1 << 17, seed=5)
    s = generate_symbols(cfg)[0]
    pts, probs = cfg.constellation.alphabet()
    idx = np.argmin(np.abs(s[:, None] - pts[None, :]), axis=1)
    freq = np.bincount(idx, minlength=pts.size) / s.size
    # binomial standard error per point
    se = np.sqrt(probs * (1 - probs) / s.size)
    assert np.all(np.abs(freq - probs) < 5 * se)
    assert np.mean(np.abs(s) ** 2) == pytest.approx(1.0, rel=0.02)


def test_launch_power_calibration():
    for p_dbm in (-2.0, 3.0, 6.0):
        w = build_tx_waveform(small_tx_cfg(launch_power_dbm=p_dbm))
        assert w.total_power() == pytest.approx(float(dbm_to_watts(p_dbm)), rel=1e-12)


def test_same_seed_same_symbols_and_streams_differ():
    a = generate_symbols(small_tx_cfg(seed=3))
    b = generate_symbols(small_tx_cfg(seed=3))
    c = generate_symbols(small_tx_cfg(seed=4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a[0], a[1])


def test_oversampling_override_keeps_symbols():
    cfg = small_tx_cfg(oversampling=4)
    w4 = build_tx_waveform(cfg)
    w2 = build_tx_waveform(cfg, oversampling=2)
    assert w4.n_samples == 2 * w2.n_samples
    assert w2.sample_rate == 2 * cfg.symbol_rate


def test_gaussian_constellation_unit_energy():
    cfg = small_tx_cfg(constellation=ConstellationSpec("gaussian"))
    s = generate_symbols(cfg)
    assert np.allclose(np.mean(np.abs(s) ** 2, axis=1), 1.0)
    with pytest.raises(InvalidInput):
        ConstellationSpec("gaussian").alphabet()


def test_short_capture_warns():
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        build_tx_waveform(small_tx_cfg(n_symbols=512))
    assert any("recommended" in str(r.message) for r in rec)


def test_config_validation():
    with pytest.raises(InvalidInput):
        TxConfig(oversampling=1)
    with pytest.raises(InvalidInput):
        TxConfig(rolloff=1.5)
    with pytest.raises(InvalidInput):
        ConstellationSpec("qam1024")
    with pytest.raises(InvalidInput):
        build_tx_waveform(small_tx_cfg(n_symbols=0))


def _psd(w):
    s = np.sum(np.abs(np.fft.fft(w.samples, axis=-1)) ** 2, axis=0)
    return np.fft.fftfreq(w.n_samples, 1 / w.sample_rate), s


def test_occupied_bandwidth_and_out_of_band_rejection():
    cfg = small_tx_cfg(oversampling=8, n_symbols=8192)
    f, s = _psd(build_tx_waveform(cfg))
    order = np.argsort(np.abs(f))
    cum = np.cumsum(s[order]) / s.sum()
    obw = 2 * np.abs(f[order][np.searchsorted(cum, 0.99)])
    # raised-cosine spectrum holds 99 % of its power inside about 1.03 Rs for rolloff 0.1
    assert cfg.symbol_rate <= obw <= (1 + cfg.rolloff) * cfg.symbol_rate * 1.02
    out = np.abs(f) > (1 + cfg.rolloff) * cfg.symbol_rate / 2
    assert 10 * np.log10(s[out].max() / s.max()) <= -40.0
