import csv

import numpy as np
import pytest

from olt.dimensions import (
    TomographyMap,
    average_profiles,
    dispersion_at,
    moving_average,
    run_jobs,
    sop_bases,
    sop_sweep,
    spectral_map,
    split_change,
    temporal_map,
)
from olt.linksim import LinkSpec, PdlElement, Span, propagate
from olt.rxdsp import prepare_pair
from olt.tomography import EstimatorConfig, ProfileEstimate
from olt.txgen import build_tx_waveform
from olt.waveforms import FiberParams, InvalidInput, PositionGrid

from conftest import small_tx_cfg

GRID = PositionGrid.uniform(5.0, 1.0)


def _est(gx, gy=None, kind="dual_pol"):
    gx = np.asarray(gx, dtype=float)
    gy = None if gy is None else np.asarray(gy, dtype=float)
    return ProfileEstimate(GRID, gx, gy, 1.3, kind)


@pytest.fixture(scope="module")
def noiseless():
    """20 km single span without amplifiers (no noise) at 128 GBd."""
    cfg = small_tx_cfg(symbol_rate=128e9)
    tx = build_tx_waveform(cfg)

    def run(elements=()):
        link = LinkSpec((Span(FiberParams(length_km=20.0), tuple(elements)),))
        rx, truth = propagate(tx, link, step_km=0.1)
        return prepare_pair(rx, tx, link.total_dispersion_ps_nm(), cfg), truth, link

    return cfg, run


def test_run_jobs_preserves_order():
    items = list(range(20))
    assert run_jobs(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert run_jobs(lambda x: -x, items) == [-x for x in items]


def test_average_is_mean_idempotent_and_order_free():
    rng = np.random.default_rng(0)
    ps = [_est(rng.random(5), rng.random(5)) for _ in range(4)]
    a = average_profiles(ps)
    assert np.allclose(a.gamma_prime_x, np.mean([p.gamma_prime_x for p in ps], axis=0))
    b = average_profiles(ps[::-1])
    assert np.allclose(a.gamma_prime_x, b.gamma_prime_x) and np.allclose(a.gamma_prime_y, b.gamma_prime_y)
    same = average_profiles([ps[0]] * 3)
    assert np.allclose(same.gamma_prime_x, ps[0].gamma_prime_x)
    assert a.diagnostics["n_averaged"] == 4


def test_polarization_average_folds_tributaries():
    p = _est([1, 2, 3, 4, 5], [3, 2, 1, 0, -1])
    a = average_profiles([p], ("polarization",))
    assert a.kind == "pol_averaged" and a.gamma_prime_y is None
    assert np.allclose(a.gamma_prime_x, [2, 2, 2, 2, 2])
    # total power is preserved
    assert np.allclose(a.power_w, p.power_w)
    with pytest.raises(InvalidInput):
        average_profiles([_est(np.ones(5), kind="single_pol")], ("polarization",))


def test_average_rejects_bad_input():
    with pytest.raises(InvalidInput):
        average_profiles([])
    with pytest.raises(InvalidInput):
        average_profiles([_est(np.ones(5), np.ones(5))], ("space",))
    other = ProfileEstimate(PositionGrid.uniform(6.0, 1.0), np.ones(6), np.ones(6), 1.3)
    with pytest.raises(InvalidInput):
        average_profiles([_est(np.ones(5), np.ones(5)), other])


def test_moving_average_window_one_is_identity_and_ends_shrink():
    ps = [_est(np.full(5, float(k)), np.full(5, float(k))) for k in range(5)]
    one = moving_average(ps, 1)
    assert all(np.array_equal(a.gamma_prime_x, b.gamma_prime_x) for a, b in zip(one, ps))
    three = moving_average(ps, 3)
    assert [float(p.gamma_prime_x[0]) for p in three] == pytest.approx([0.0, 1.0, 2.0, 3.0, 4.0])
    assert [p.diagnostics["n_averaged"] for p in three] == [1, 3, 3, 3, 1]
    ps[2] = _est(np.full(5, 10.0), np.full(5, 10.0))
    assert float(moving_average(ps, 3)[1].gamma_prime_x[0]) == pytest.approx((0 + 1 + 10) / 3)
    with pytest.raises(InvalidInput):
        moving_average(ps, 2)
    with pytest.raises(InvalidInput):
        moving_average(ps, 7)


def test_split_change_recovers_exact_step():
    py = np.linspace(2.0, 0.5, 20)
    px = py * np.where(np.arange(20) >= 12, 10 ** 0.3, 1.0)
    k, d = split_change(px, py)
    assert k == 12
    assert d == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(InvalidInput):
        split_change(px[:4], py[:4])


def test_sop_bases_cover_the_sphere_grid():
    b = sop_bases(13, 4)
    assert len(b) == 52
    assert b[0] == (0.0, 0.0)
    assert max(t for t, _ in b) == pytest.approx(np.pi / 2)
    assert sorted({p for _, p in b}) == pytest.approx([0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
    with pytest.raises(InvalidInput):
        sop_bases(0, 4)


def test_dispersion_slope():
    f0 = 193.4e12
    assert dispersion_at(f0, f0, 17.0, 0.06) == 17.0
    lam0 = 299792458.0 / f0 * 1e9
    f1 = 299792458.0 / ((lam0 + 10.0) * 1e-9)
    assert dispersion_at(f1, f0, 17.0, 0.06) == pytest.approx(17.6, rel=1e-9)


def test_map_csv_long_form(tmp_path):
    m = TomographyMap("time_s", [0.0, 1.0], [_est(np.ones(5), np.ones(5)), _est(2 * np.ones(5), np.ones(5))])
    m.to_csv(tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["axis_value", "z_km", "power_dbm", "power_x_dbm", "power_y_dbm"]
    assert len(rows) == 10
    assert m.power_dbm().shape == (2, 5)
    assert m.slice_at(2.2)[1] - m.slice_at(2.2)[0] == pytest.approx(10 * np.log10(1.5))
    with pytest.raises(InvalidInput):
        m.slice_at(6.0)
    with pytest.raises(InvalidInput):
        TomographyMap("time_s", [0.0], [])


def test_sop_sweep_without_pdl_shows_no_split(noiseless):
    _, run = noiseless
    pair, _, _ = run()
    res = sop_sweep(pair, EstimatorConfig.for_length(20.0, 1.0), grid_theta=3, grid_phi=2)
    assert res.max_split_db < 0.5
    assert res.total_power_variation < 0.02


def test_sop_sweep_finds_pdl_split_and_onset(noiseless):
    _, run = noiseless
    pair, _, _ = run([PdlElement(3.0, 0.0, 0.0, 10.0)])
    res = sop_sweep(pair, EstimatorConfig.for_length(20.0, 1.0), grid_theta=5, grid_phi=2)
    assert res.max_split_db == pytest.approx(3.0, abs=0.5)
    assert res.onset_km == pytest.approx(10.0, abs=2.0)
    assert res.total_power_variation < 0.02
    # a coarser sweep cannot find a larger split than a finer one that contains it
    coarse = sop_sweep(pair, EstimatorConfig.for_length(20.0, 1.0), grid_theta=3, grid_phi=1)
    assert coarse.max_split_db <= res.max_split_db + 1e-9


def test_spectral_map_with_identical_channels_is_flat():
    cfg = small_tx_cfg(symbol_rate=128e9)
    link = LinkSpec((Span(FiberParams(length_km=20.0)),))
    m = spectral_map(cfg, link, EstimatorConfig.for_length(20.0, 2.0), dispersion_values=[17.0, 17.0], step_km=0.5)
    p = m.power_dbm()
    assert np.array_equal(p[0], p[1])
    assert m.axis_name == "dispersion_ps_nm_km"
    with pytest.raises(InvalidInput):
        spectral_map(cfg, link, EstimatorConfig.for_length(20.0, 2.0))


def test_temporal_map_shapes(noiseless):
    _, run = noiseless
    pair, _, _ = run()
    raw, avg = temporal_map([pair, pair, pair], [0.0, 1.0, 2.0], EstimatorConfig.for_length(20.0, 2.0), window=3)
    assert raw.power_dbm().shape == (3, 10)
    assert np.allclose(avg.estimates[1].gamma_prime_x, raw.estimates[1].gamma_prime_x)
    with pytest.raises(InvalidInput):
        temporal_map([pair], [0.0, 1.0], EstimatorConfig.for_length(20.0, 2.0))


def test_spectral_slice_tracks_channel_launch_powers():
    cfg = small_tx_cfg(symbol_rate=128e9)
    link = LinkSpec((Span(FiberParams(length_km=20.0)),))
    powers = [0.0, 3.0, 5.0]
    m = spectral_map(cfg, link, EstimatorConfig.for_length(20.0, 1.0), dispersion_values=[17.0] * 3, launch_powers_dbm=powers, step_km=0.5)
    est = m.slice_at(0.5)
    truth = np.array([10 * np.log10(t.power_w[0] / 1e-3) for t in m.truths])
    assert np.sqrt(np.mean((est - truth) ** 2)) < 0.3
    assert np.all(np.diff(est) > 0)
