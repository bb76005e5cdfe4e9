"""Acceptance criteria, one test each.

Every test prints a ``CRITERION n: PASS|FAIL`` line with the measured
values before asserting, so the captured output in the pytest summary shows the
numbers behind the verdict.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from olt import scenario as sc
from olt.cli import estimate_pairs, run_scenario, simulate_captures
from olt.dimensions import average_profiles, sop_sweep, spectral_map, temporal_map
from olt.linksim import MANAKOV, LinkSpec, Propagator, Span, uniform_link
from olt.metrics import (
    correlation_width,
    detect_anomalies,
    snr_pp,
    span_line_fits,
    spatial_correlation,
    strongest_step,
)
from olt.rxdsp import RxFilter, prepare_pair, reference_pair
from olt.tomography import EstimatorConfig, LinearModel, assemble_model, estimate, solve_profile
from olt.txgen import ConstellationSpec, TxConfig, build_tx_waveform
from olt.waveforms import FiberParams, apply_dispersion

from conftest import short_link
from test_tomography import _cfg, _dense_oracle


def report(n, ok, detail):
    print(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def _snr_db(groups):
    """Profile SNR of group means against the matching mean truths."""
    e = np.array([np.mean([g[0] for g in grp], axis=0) for grp in groups])
    t = np.array([np.mean([g[1] for g in grp], axis=0) for grp in groups])
    return 10 * np.log10(np.mean(t**2) / np.mean((e - t) ** 2))


def _gains(samples, ns=(1, 2, 4, 8, 16)):
    base = _snr_db([[s] for s in samples])
    return {n: _snr_db([samples[i : i + n] for i in range(0, len(samples), n)]) - base for n in ns}


# --- 1 ------------------------------------------------------------------------------------


def test_criterion_1_baseline_loss_slope_and_amplifier_step():
    cfg = TxConfig(n_symbols=1 << 16, oversampling=4, seed=1, launch_power_dbm=3.0)
    link = uniform_link(2, 50.0, fiber=FiberParams(0.2, 17.0, 1.3), noise_figure_db=5.0)
    est_cfg = EstimatorConfig.for_length(link.length_km, 1.0)
    freqs = cfg.center_frequency + (np.arange(16) - 7.5) * 250e9
    t0 = time.time()
    smap = spectral_map(cfg, link, est_cfg, frequencies=freqs, dispersion_slope=0.057, step_km=0.2, noise_seed=1)
    elapsed = time.time() - t0
    avg = average_profiles(smap.estimates, ("frequency", "polarization"))
    slopes = [s for s, _ in span_line_fits(avg, link)]
    z_step, h_step = strongest_step(avg, sign=1)
    ok = report(
        1,
        all(abs(s - 0.2) <= 0.02 for s in slopes) and abs(z_step - 50.0) <= 2.0 and elapsed <= 600.0,
        f"slopes {np.round(slopes, 4).tolist()} dB/km, step at {z_step:.1f} km (+{h_step:.2f} dB), {elapsed:.0f} s",
    )
    assert ok


# --- 2 ------------------------------------------------------------------------------------


def test_criterion_2_polarization_averaging_gain():
    cfg = sc.load(sc.bundled("baseline_2x50km"))
    cfg = dataclasses.replace(cfg, n_realizations=32)
    tx, caps = simulate_captures(cfg)
    _, profiles = estimate_pairs(cfg, tx, [c[1] for c in caps])
    truths = [c[2] for c in caps]
    single = snr_pp(truths, profiles, "x")
    pol = snr_pp(truths, [average_profiles([p], ("polarization",)) for p in profiles])
    gain = pol.mean_snr_db - single.mean_snr_db
    ok = report(2, abs(gain - 3.0) <= 1.0, f"single {single.mean_snr_db:.2f} dB, averaged {pol.mean_snr_db:.2f} dB, gain {gain:.2f} dB over {len(profiles)}")
    assert ok


# --- 3 ------------------------------------------------------------------------------------

# the pattern-dependent error must be comparable to the ASE error for the
# two averaging laws to separate; cell-integrated kernels remove the bias
# floor of cells that straddle the amplifier
C3_POWER_DBM = 8.0
C3_KERNEL_SUBSAMPLES = 4
C3_GROUPS = 2


def _c3_samples(tx, cfg, ec, dispersions, seeds):
    out = []
    for d, s in zip(dispersions, seeds):
        link = uniform_link(2, 50.0, fiber=FiberParams(dispersion_D=d))
        rx, truth = Propagator(tx, link, 0.2).run(s)
        pair = prepare_pair(rx, tx, link.total_dispersion_ps_nm(), cfg)
        est = estimate(pair, ec.with_(cd_coefficient=d))
        out.append((est.gamma_prime("mean"), truth.gamma_prime("mean")))
    return out


def test_criterion_3_cd_diversity_versus_time_averaging():
    cfg = TxConfig(n_symbols=8192, oversampling=4, seed=1, launch_power_dbm=C3_POWER_DBM)
    tx = build_tx_waveform(cfg)
    ec = EstimatorConfig.for_length(100.0, 1.0, kernel_subsamples=C3_KERNEL_SUBSAMPLES)
    n = 16 * C3_GROUPS
    # repeated pattern: same symbols, fresh amplifier noise
    timed = _c3_samples(tx, cfg, ec, [17.0] * n, range(n))
    # CD diversity: the same pattern seen through 16 dispersion values
    ds = np.tile(np.linspace(16.5, 19.0, 16), C3_GROUPS)
    cd = _c3_samples(tx, cfg, ec, ds, range(1000, 1000 + n))
    g_t, g_cd = _gains(timed), _gains(cd)
    ideal = {k: 10 * np.log10(k) for k in g_cd}
    cd_ok = all(abs(g_cd[k] - ideal[k]) <= 1.0 for k in (2, 4, 8, 16))
    time_ok = ideal[16] - g_t[16] >= 2.0
    ok = report(
        3,
        cd_ok and time_ok,
        f"CD gains {[round(float(g_cd[k]), 2) for k in (2, 4, 8, 16)]}, time gains {[round(float(g_t[k]), 2) for k in (2, 4, 8, 16)]}, "
        f"ideal {[round(float(ideal[k]), 2) for k in (2, 4, 8, 16)]}",
    )
    assert ok


# --- 4 ------------------------------------------------------------------------------------


def _correlation(symbol_rate, beta2):
    cfg = TxConfig(constellation=ConstellationSpec("gaussian"), symbol_rate=symbol_rate, oversampling=2, n_symbols=4096, seed=3)
    pair = reference_pair(build_tx_waveform(cfg), RxFilter(symbol_rate, cfg.rolloff))
    ec = EstimatorConfig.for_length(200.0, 1.0, beta2=beta2, mode="single_pol")
    w0 = 1.0 / (abs(beta2) * (symbol_rate * 1e-12) ** 2)
    dz = np.linspace(0.0, min(4 * w0, 199.0), 81)
    rho = spatial_correlation(pair, 0.0, dz, ec)
    return dz, rho


def _first_lobe_monotone(rho):
    d = np.diff(rho)
    rises = np.nonzero(d > 0)[0]
    end = rises[0] if rises.size else d.size
    return bool(np.all(d[:end] <= 0)) and end > 0


def test_criterion_4_spatial_correlation_shape_and_width():
    widths_bw, widths_b2, shape_ok = [], [], True
    for rs in (32e9, 64e9, 128e9, 256e9):
        dz, rho = _correlation(rs, -20.6)
        shape_ok &= abs(rho[0] - 1.0) < 1e-12 and _first_lobe_monotone(rho)
        widths_bw.append(correlation_width(dz, rho))
    for b2 in (-5.0, -10.0, -20.6):
        dz, rho = _correlation(256e9, b2)
        shape_ok &= abs(rho[0] - 1.0) < 1e-12 and _first_lobe_monotone(rho)
        widths_b2.append(correlation_width(dz, rho))
    ok = report(
        4,
        shape_ok and bool(np.all(np.diff(widths_bw) < 0)) and bool(np.all(np.diff(widths_b2) < 0)),
        f"half-widths vs bandwidth {np.round(widths_bw, 3).tolist()} km, vs |beta2| {np.round(widths_b2, 3).tolist()} km",
    )
    assert ok


# --- 5, 6 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def field_static():
    """Field analogue with the time-varying VOA removed, 32 captures with fresh payloads."""
    data = json.loads(sc.bundled("field_analogue_3span").read_text())
    data["link"]["spans"][1]["elements"] = [e for e in data["link"]["spans"][1]["elements"] if e["type"] != "voa"]
    cfg = sc.build(data)
    pairs, profiles = [], []
    for s in range(32):
        txc = dataclasses.replace(cfg.tx, seed=500 + s)
        tx = build_tx_waveform(txc)
        rx, _ = Propagator(tx, cfg.link, cfg.step_km).run(100 + s)
        pair = prepare_pair(rx, tx, cfg.link.total_dispersion_ps_nm(), txc)
        pairs.append(pair)
        profiles.append(estimate(pair, cfg.estimator))
    return cfg, pairs, profiles


def _planted(cfg, kind, mid_span=False):
    for i, span in enumerate(cfg.link.spans):
        for e in span.elements_at_input:
            if type(e).__name__ == kind and (e.position_km > 0) == mid_span:
                return float(cfg.link.span_starts_km[i] + e.position_km), e
    raise LookupError(kind)


def test_criterion_5_mid_span_loss_detected(field_static):
    cfg, _, profiles = field_static
    z_true, el = _planted(cfg, "LumpedLoss", mid_span=True)
    avg = average_profiles(profiles, ("time", "polarization"))
    rep = detect_anomalies(avg, cfg.link, threshold_db=1.0)
    hits = [e for e in rep.events if e.kind == "lumped_loss" and abs(e.z_km - z_true) <= 2.0]
    mid = [e for e in rep.events if e.kind == "lumped_loss"]
    ok = bool(hits) and abs(hits[0].magnitude_db - 1.5) <= 0.3
    found = [(round(e.z_km, 2), round(e.magnitude_db, 2)) for e in mid]
    report(5, ok, f"planted {el.loss_db} dB at {z_true:.1f} km, detected lumped losses {found}")
    assert ok


def test_criterion_6_sop_sweep_pdl_split(field_static):
    cfg, pairs, _ = field_static
    z_pdl, el = _planted(cfg, "PdlElement")
    res = sop_sweep(pairs[:16], cfg.estimator, grid_theta=5, grid_phi=2)
    ok = abs(res.max_split_db - 3.0) <= 0.5 and abs(res.onset_km - z_pdl) <= 2.0 and res.total_power_variation < 0.02
    report(
        6,
        ok,
        f"split {res.max_split_db:.2f} dB at {res.onset_km:.1f} km (PDL element at {z_pdl:.1f} km), "
        f"total-power variation {100 * res.total_power_variation:.2f} %",
    )
    assert ok


# --- 7 ------------------------------------------------------------------------------------


def test_criterion_7_voa_step_in_time():
    cfg = sc.load(sc.bundled("field_analogue_3span"))
    tx, caps = simulate_captures(cfg)
    times = [c[0] for c in caps]
    pairs = [prepare_pair(c[1], tx, cfg.link.total_dispersion_ps_nm(), cfg.tx) for c in caps]
    window = cfg.dimensions["window"]
    _, avg = temporal_map(pairs, times, cfg.estimator, window)
    levels = np.array([[lv for _, lv in span_line_fits(average_profiles([p], ("polarization",)), cfg.link)] for p in avg.estimates])
    truth = np.array([[lv for _, lv in span_line_fits(_truth_profile(c[2], avg.estimates[0]), cfg.link)] for c in caps])
    # compare the first state with the last fully settled window
    d_est = levels[-2] - levels[0]
    d_true = truth[-1] - truth[0]
    voa_span = 1
    down = abs(d_est[voa_span] - d_true[voa_span])
    up = abs(d_est[0])
    ok = report(7, down <= 0.3 and up <= 0.3, f"level change per span {np.round(d_est, 2).tolist()} dB, truth {np.round(d_true, 2).tolist()} dB")
    assert ok


def _truth_profile(truth, like):
    g = truth.gamma_prime("mean")
    return dataclasses.replace(like, gamma_prime_x=g, gamma_prime_y=None, kind="pol_averaged")


# --- 8 ------------------------------------------------------------------------------------


def test_criterion_8_dense_oracle_and_synthetic_recovery():
    cfg = _cfg(oversampling=4)
    tx = build_tx_waveform(cfg)
    link = short_link(2, 10.0)
    rx, _ = Propagator(tx, link, 0.1).run(5)
    pair = prepare_pair(rx, tx, link.total_dispersion_ps_nm(), cfg)
    ec = EstimatorConfig.for_length(20.0, 1.0)
    assert ec.grid.size <= 30
    G, b = _dense_oracle(pair, ec)
    ref, *_ = np.linalg.lstsq(G, b, rcond=None)
    est = estimate(pair, ec)
    got = np.concatenate([est.gamma_prime_x, est.gamma_prime_y])
    dev_oracle = float(np.max(np.abs(got - ref)) / np.max(np.abs(ref)))
    # synthetic A1 = G gamma' from the materialized model, solved without penalty
    model = assemble_model(pair, ec, materialize=True)
    gamma = np.random.default_rng(3).uniform(0.5, 3.0, model.n_columns)
    a1 = model.G @ gamma
    synth = LinearModel(model.grid, model.mode, model.gram, model.G.T @ a1, np.zeros_like(gamma), float(a1 @ a1), 1.0, model.n_rows, model.guard)
    back = solve_profile(synth, ec.with_(lambda_reg=0.0))
    got = np.concatenate([back.gamma_prime_x, back.gamma_prime_y])
    dev_synth = float(np.max(np.abs(got - gamma)) / np.max(gamma))
    ok = report(8, dev_oracle <= 1e-9 and dev_synth <= 1e-8, f"oracle rel. dev {dev_oracle:.1e}, synthetic recovery rel. dev {dev_synth:.1e}")
    assert ok


# --- 9 ------------------------------------------------------------------------------------


def _rel_rms(a, b):
    return float(np.sqrt(np.mean(np.abs(a - b) ** 2) / np.mean(np.abs(b) ** 2)))


def test_criterion_9_linear_and_spm_limits():
    tx = build_tx_waveform(TxConfig(n_symbols=4096, oversampling=4, seed=2, launch_power_dbm=3.0))
    length = 50.0
    lin = LinkSpec((Span(FiberParams(0.0, 17.0, 0.0, length)),))
    rx, _ = Propagator(tx, lin, 0.5).run(0)
    f = lin.spans[0].fiber
    e_lin = _rel_rms(rx.samples, apply_dispersion(tx, f.beta2(tx.center_frequency), length).samples)
    spm = LinkSpec((Span(FiberParams(0.0, 0.0, 1.3, length)),))
    rx, _ = Propagator(tx, spm, 0.5).run(0)
    p = np.sum(np.abs(tx.samples) ** 2, axis=0)
    e_spm = _rel_rms(rx.samples, tx.samples * np.exp(-1j * MANAKOV * 1.3 * p * length))
    ok = report(9, e_lin <= 1e-9 and e_spm <= 1e-7, f"linear limit rel. RMS {e_lin:.1e}, SPM limit rel. RMS {e_spm:.1e}")
    assert ok


# --- 10 -----------------------------------------------------------------------------------


@pytest.mark.parametrize("name", sc.bundled_names())
def test_criterion_10_seeded_runs_are_reproducible(name, tmp_path):
    cfg = sc.load(sc.bundled(name))
    a = run_scenario(cfg, tmp_path / "a")
    b = run_scenario(cfg, tmp_path / "b")
    same = a.read_bytes() == b.read_bytes()
    ok = report(10, same, f"{name}: manifests {'identical' if same else 'differ'}")
    assert ok
