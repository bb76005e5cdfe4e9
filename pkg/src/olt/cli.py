"""Command-line front end.

``olt run --config scenario.json --out DIR`` simulates, estimates and
reports in one go; the other subcommands expose the individual stages.
Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from . import scenario as sc
from .dimensions import TomographyMap, average_profiles, average_truths, moving_average, sop_sweep, spectral_map
from .linksim import GroundTruthProfile, Propagator, SimulationError, capture_noise_seed
from .metrics import detect_anomalies, detect_level_changes, snr_pp, spatial_correlation
from .rxdsp import AlignmentError, RxFilter, prepare_pair, reference_pair
from .tomography import ConditioningError, EstimatorConfig, ProfileEstimate, ProfileEstimator
from .txgen import build_tx_waveform
from .waveforms import InvalidInput, PositionGrid, read_waveform, resample, write_waveform

log = logging.getLogger("olt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (SimulationError, ConditioningError, AlignmentError, np.linalg.LinAlgError, FloatingPointError)


class Outputs:
    """Files are written to a staging directory and moved into place on success."""

    def __init__(self, out: Path, fmt: str = "csv"):
        self.out = Path(out)
        self.fmt = fmt
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".olt-stage-", dir=self.out.parent))
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def text(self, name: str, content: str) -> None:
        self.path(name).write_text(content if content.endswith("\n") else content + "\n")

    @property
    def plots(self) -> bool:
        return self.fmt == "csv+plots"

    def commit(self, header: dict) -> Path:
        manifest = dict(header)
        entries = []
        for name in sorted(set(self.files)):
            data = (self.stage / name).read_bytes()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        manifest["files"] = entries
        (self.stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.out.mkdir(parents=True, exist_ok=True)
        for name in sorted(set(self.files)) + ["manifest.json"]:
            dst = self.out / name
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.stage / name, dst)
        shutil.rmtree(self.stage, ignore_errors=True)
        return self.out / "manifest.json"

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0"


# --- plots ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "olt"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_profile(path: Path, profile: ProfileEstimate, truth: GroundTruthProfile | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    z = profile.grid.z_positions
    ax.plot(z, profile.power_dbm("total"), label="estimate")
    if profile.gamma_prime_y is not None:
        ax.plot(z, profile.power_dbm("x"), lw=0.8, label="x")
        ax.plot(z, profile.power_dbm("y"), lw=0.8, label="y")
    if truth is not None:
        ax.plot(truth.grid.z_positions, 10 * np.log10(np.maximum(truth.power_w, 1e-15) / 1e-3), "k--", lw=0.8, label="truth")
    ax.set_xlabel("distance [km]")
    ax.set_ylabel("power [dBm]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_map(path: Path, m: TomographyMap, label: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    g = m.grid
    img = ax.pcolormesh(g.edges, np.arange(len(m.axis_values) + 1), m.power_dbm("total"), shading="flat")
    ax.set_yticks(np.arange(len(m.axis_values)) + 0.5)
    ax.set_yticklabels([f"{v:.4g}" for v in m.axis_values], fontsize=6)
    ax.set_xlabel("distance [km]")
    ax.set_ylabel(label)
    fig.colorbar(img, ax=ax, label="power [dBm]")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_curve(path: Path, x, y, xlabel: str, ylabel: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, y, "o-", ms=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


# --- pipeline pieces -----------------------------------------------------------------


def simulate_captures(cfg: sc.ScenarioConfig):
    """Transmit waveform, captures ``[(time_s, rx, truth)]`` for the scenario."""
    tx = build_tx_waveform(cfg.tx)
    dims = cfg.dimensions
    prop = Propagator(tx, cfg.link, cfg.step_km, cfg.estimator.grid.delta_z_km)
    if dims.get("n_captures", 1) > 1:
        n = dims["n_captures"]
        interval = dims.get("capture_interval_s", 0.55)
    else:
        n, interval = cfg.n_realizations, 0.0
    caps = []
    for k in range(n):
        t = k * interval
        rx, truth = prop.run(capture_noise_seed(cfg.seed, k), t)
        log.info("capture %d/%d simulated (t = %.3f s)", k + 1, n, t)
        caps.append((t, rx, truth))
    return tx, caps


def estimate_pairs(cfg: sc.ScenarioConfig, tx, rxs) -> tuple[list, list[ProfileEstimate]]:
    cd = cfg.link.total_dispersion_ps_nm()
    est = ProfileEstimator(cfg.estimator)
    pairs, profiles = [], []
    for k, rx in enumerate(rxs):
        pair = prepare_pair(rx, tx, cd, cfg.tx)
        pairs.append(pair)
        profiles.append(est(pair))
        log.info("capture %d estimated", k)
    return pairs, profiles


def _combine(cfg: sc.ScenarioConfig, profiles: list[ProfileEstimate]) -> ProfileEstimate:
    dims = [d for d in cfg.averaging if d != "frequency"]
    if cfg.estimator.mode != "dual_pol":
        dims = [d for d in dims if d != "polarization"]
    return average_profiles(profiles, dims or ("time",))


def _write_estimates(o: Outputs, profiles: list[ProfileEstimate]) -> None:
    for k, p in enumerate(profiles):
        p.to_csv(o.path(f"estimates/estimate_{k:03d}.csv"))


def _snr_section(o: Outputs, truths, profiles: list[ProfileEstimate]) -> None:
    if len(profiles) < 2:
        return
    lines = []
    rep = snr_pp(truths, profiles, "x")
    rep.to_csv(o.path("snr_single_pol.csv"))
    lines.append("single polarization (x): " + rep.summary())
    if profiles[0].gamma_prime_y is not None:
        avg = [average_profiles([p], ("polarization",)) for p in profiles]
        rep2 = snr_pp(truths, avg)
        rep2.to_csv(o.path("snr_pol_averaged.csv"))
        lines.append("polarization averaged: " + rep2.summary())
        lines.append(f"gain {rep2.mean_snr_db - rep.mean_snr_db:+.2f} dB")
    o.text("snr.txt", "\n".join(lines))


def run_scenario(cfg: sc.ScenarioConfig, out: Path, threads: int = 1, fmt: str | None = None) -> Path:
    """Full simulate -> estimate -> report pipeline; returns the manifest path."""
    o = Outputs(out, fmt or cfg.output_format)
    try:
        tx, caps = simulate_captures(cfg)
        times = [c[0] for c in caps]
        truths = [c[2] for c in caps]
        pairs, profiles = estimate_pairs(cfg, tx, [c[1] for c in caps])
        truths[0].to_csv(o.path("truth.csv"))
        _write_estimates(o, profiles)
        dims = cfg.dimensions
        final_source = profiles
        if dims.get("n_captures", 1) > 1:
            window = dims.get("window", 1)
            raw = TomographyMap("time_s", times, profiles, truths)
            avg = TomographyMap("time_s", times, moving_average(profiles, window), truths)
            raw.to_csv(o.path("temporal_raw.csv"))
            avg.to_csv(o.path("temporal_map.csv"))
            if o.plots:
                plot_map(o.path("temporal_map.svg"), avg, "time [s]")
        else:
            _snr_section(o, truths, profiles)
        if "frequencies" in dims or "dispersion_values" in dims:
            smap = spectral_map(
                cfg.tx,
                cfg.link,
                cfg.estimator,
                frequencies=dims.get("frequencies"),
                dispersion_values=dims.get("dispersion_values"),
                dispersion_slope=dims.get("dispersion_slope", 0.0),
                step_km=cfg.step_km,
                noise_seed=capture_noise_seed(cfg.seed, 0),
                threads=threads,
            )
            smap.to_csv(o.path("spectral_map.csv"))
            if o.plots:
                plot_map(o.path("spectral_map.svg"), smap, smap.axis_name)
            if "frequency" in cfg.averaging:
                final_source = smap.estimates
        if "sop_sweep" in dims and cfg.estimator.mode == "dual_pol":
            sw = dims["sop_sweep"]
            res = sop_sweep(pairs, cfg.estimator, sw.get("grid_theta", 13), sw.get("grid_phi", 4), threads)
            res.to_csv(o.path("sop_sweep.csv"))
            o.text("sop_sweep.txt", res.summary())
        final = _combine(cfg, final_source)
        final.to_csv(o.path("estimate.csv"))
        an = cfg.analysis
        thr, guard = an.get("anomaly_threshold_db", 0.5), an.get("edge_guard_km", 2.0)
        # keep x and y apart so that polarization splits can be flagged; a
        # time series is judged on its final window so that states are not mixed
        if dims.get("n_captures", 1) > 1:
            rep = detect_anomalies(average_profiles(profiles[-window:], ("time",)), cfg.link, thr, guard)
            rep.events += detect_level_changes(avg.estimates, times, cfg.link, thr, guard)
            rep.events.sort(key=lambda e: (e.z_km, e.kind))
        else:
            rep = detect_anomalies(average_profiles(final_source, ("time",)), cfg.link, thr, guard)
        rep.to_csv(o.path("anomalies.csv"))
        rep.residual_to_csv(o.path("anomaly_residual.csv"))
        o.text("anomalies.txt", rep.summary())
        if o.plots:
            plot_profile(o.path("estimate.svg"), final, average_truths(truths))
        return o.commit(_header(cfg, "run"))
    except BaseException:
        o.discard()
        raise


def _header(cfg: sc.ScenarioConfig, command: str) -> dict:
    cfg_hash = hashlib.sha256(json.dumps(cfg.raw, sort_keys=True).encode()).hexdigest()
    return {"tool": "olt", "version": _version(), "command": command, "scenario": cfg.name, "seed": cfg.seed, "config_sha256": cfg_hash}


# --- subcommands -------------------------------------------------------------------------


def cmd_run(args, cfg):
    run_scenario(cfg, args.out, args.threads, args.format)


def cmd_simulate(args, cfg):
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        tx, caps = simulate_captures(cfg)
        write_waveform(o.path("tx.oltw"), tx)
        with open(o.path("captures.csv"), "w") as fh:
            fh.write("index,time_s,rx_file,truth_file\n")
            for k, (t, rx, truth) in enumerate(caps):
                write_waveform(o.path(f"rx_{k:03d}.oltw"), rx)
                truth.to_csv(o.path(f"truth_{k:03d}.csv"))
                fh.write(f"{k},{t!r},rx_{k:03d}.oltw,truth_{k:03d}.csv\n")
        o.commit(_header(cfg, "simulate"))
    except BaseException:
        o.discard()
        raise


def _read_pairs(args, cfg):
    if not args.rx or not args.tx:
        raise InvalidInput("--rx and --tx waveform files are required")
    tx = read_waveform(args.tx)
    rxs = [read_waveform(p) for p in args.rx]
    return tx, rxs


def cmd_estimate(args, cfg):
    tx, rxs = _read_pairs(args, cfg)
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        _, profiles = estimate_pairs(cfg, tx, rxs)
        _write_estimates(o, profiles)
        final = _combine(cfg, profiles)
        final.to_csv(o.path("estimate.csv"))
        if o.plots:
            plot_profile(o.path("estimate.svg"), final)
        o.commit(_header(cfg, "estimate"))
    except BaseException:
        o.discard()
        raise


def _pairs_for(args, cfg):
    if args.rx:
        tx, rxs = _read_pairs(args, cfg)
        return estimate_pairs(cfg, tx, rxs)[0]
    tx, caps = simulate_captures(cfg)
    cd = cfg.link.total_dispersion_ps_nm()
    return [prepare_pair(c[1], tx, cd, cfg.tx) for c in caps]


def cmd_sop_sweep(args, cfg):
    pairs = _pairs_for(args, cfg)
    sw = cfg.dimensions.get("sop_sweep", {})
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        res = sop_sweep(pairs, cfg.estimator, sw.get("grid_theta", 13), sw.get("grid_phi", 4), args.threads)
        res.to_csv(o.path("sop_sweep.csv"))
        o.text("sop_sweep.txt", res.summary())
        if o.plots:
            b = res.bases.index(res.best_basis)
            plot_profile(o.path("sop_best_basis.svg"), res.profiles[b])
        o.commit(_header(cfg, "sop-sweep"))
    except BaseException:
        o.discard()
        raise


def cmd_spectral(args, cfg):
    dims = cfg.dimensions
    if "frequencies" not in dims and "dispersion_values" not in dims:
        raise InvalidInput("dimensions.frequencies or dimensions.dispersion_values is required")
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        smap = spectral_map(
            cfg.tx,
            cfg.link,
            cfg.estimator,
            frequencies=dims.get("frequencies"),
            dispersion_values=dims.get("dispersion_values"),
            dispersion_slope=dims.get("dispersion_slope", 0.0),
            step_km=cfg.step_km,
            noise_seed=capture_noise_seed(cfg.seed, 0),
            threads=args.threads,
        )
        smap.to_csv(o.path("spectral_map.csv"))
        if o.plots:
            plot_map(o.path("spectral_map.svg"), smap, smap.axis_name)
        o.commit(_header(cfg, "spectral"))
    except BaseException:
        o.discard()
        raise


def cmd_temporal(args, cfg):
    window = cfg.dimensions.get("window", 3)
    if args.rx:
        tx, rxs = _read_pairs(args, cfg)
        interval = cfg.dimensions.get("capture_interval_s", 0.55)
        times = [k * interval for k in range(len(rxs))]
        truths = None
    else:
        if cfg.dimensions.get("n_captures", 1) < 2:
            raise InvalidInput("dimensions.n_captures must be >= 2 for temporal tomography")
        tx, caps = simulate_captures(cfg)
        rxs = [c[1] for c in caps]
        times = [c[0] for c in caps]
        truths = [c[2] for c in caps]
    if window > len(rxs):
        raise InvalidInput("dimensions.window is longer than the capture series")
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        _, profiles = estimate_pairs(cfg, tx, rxs)
        raw = TomographyMap("time_s", times, profiles, truths)
        avg = TomographyMap("time_s", times, moving_average(profiles, window), truths)
        raw.to_csv(o.path("temporal_raw.csv"))
        avg.to_csv(o.path("temporal_map.csv"))
        if o.plots:
            plot_map(o.path("temporal_map.svg"), avg, "time [s]")
        o.commit(_header(cfg, "temporal"))
    except BaseException:
        o.discard()
        raise


def cmd_correlation(args, cfg):
    corr = cfg.analysis.get("correlation")
    if corr is None:
        raise InvalidInput("analysis.correlation is required")
    tx = build_tx_waveform(cfg.tx)
    tx2 = resample(tx, 2 * cfg.tx.symbol_rate)
    pair = reference_pair(tx2, RxFilter(cfg.tx.symbol_rate, cfg.tx.rolloff))
    length = corr.get("length_km", cfg.link.length_km)
    ec = cfg.estimator.with_(grid=PositionGrid.uniform(length, cfg.estimator.grid.delta_z_km))
    dz = np.asarray(corr["dz_values"], dtype=float)
    rho = spatial_correlation(pair, corr.get("z_km", 0.0), dz, ec)
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        with open(o.path("correlation.csv"), "w") as fh:
            fh.write("dz_km,rho\n")
            for d, r in zip(dz, rho):
                fh.write(f"{float(d)!r},{float(r)!r}\n")
        if o.plots:
            plot_curve(o.path("correlation.svg"), dz, rho, "dz [km]", "spatial correlation")
        o.commit(_header(cfg, "correlation"))
    except BaseException:
        o.discard()
        raise


def cmd_snr(args, cfg):
    if not args.estimates or len(args.estimates) < 2:
        raise InvalidInput("snr needs at least 2 --estimates files")
    if not args.truth:
        raise InvalidInput("--truth is required")
    truth = GroundTruthProfile.from_csv(args.truth)
    gamma = cfg.estimator.gamma_nominal if cfg is not None else 1.3
    profiles = [ProfileEstimate.from_csv(p, gamma) for p in args.estimates]
    o = Outputs(args.out, "csv")
    try:
        _snr_section(o, truth, profiles)
        o.commit({"tool": "olt", "version": _version(), "command": "snr", "n_estimates": len(profiles)})
    except BaseException:
        o.discard()
        raise


def cmd_detect(args, cfg):
    if not args.profile:
        raise InvalidInput("--profile is required")
    prof = ProfileEstimate.from_csv(args.profile, cfg.estimator.gamma_nominal)
    an = cfg.analysis
    o = Outputs(args.out, args.format or cfg.output_format)
    try:
        rep = detect_anomalies(prof, cfg.link, an.get("anomaly_threshold_db", 0.5), an.get("edge_guard_km", 2.0))
        rep.to_csv(o.path("anomalies.csv"))
        rep.residual_to_csv(o.path("anomaly_residual.csv"))
        o.text("anomalies.txt", rep.summary())
        o.commit(_header(cfg, "detect"))
    except BaseException:
        o.discard()
        raise


COMMANDS = {
    "run": (cmd_run, "simulate, estimate and report a scenario"),
    "simulate": (cmd_simulate, "propagate and write waveforms and truth profiles"),
    "estimate": (cmd_estimate, "estimate profiles from waveform files"),
    "sop-sweep": (cmd_sop_sweep, "sweep analysis polarization bases"),
    "spectral": (cmd_spectral, "per-channel (frequency) tomography"),
    "temporal": (cmd_temporal, "time series of profiles with a moving average"),
    "correlation": (cmd_correlation, "spatial correlation of the model columns"),
    "snr": (cmd_snr, "power-profile SNR of estimate files against a truth file"),
    "detect": (cmd_detect, "anomaly detection on a profile file"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="olt", description="Power-profile tomography of optical links.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="scenario JSON file or bundled:<name>")
        s.add_argument("--out", required=True, type=Path, help="output directory")
        s.add_argument("--seed", type=int, help="overrides the scenario seed")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--format", choices=["csv", "csv+plots"])
        if name in ("estimate", "sop-sweep", "temporal"):
            s.add_argument("--rx", nargs="+", help="received waveform files")
            s.add_argument("--tx", help="transmitted waveform file")
        if name == "snr":
            s.add_argument("--estimates", nargs="+")
            s.add_argument("--truth")
        if name == "detect":
            s.add_argument("--profile")
    return p


def _configure_logging() -> None:
    level = os.environ.get("OLT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load_config(ref: str | None):
    if ref is None:
        return None
    if ref.startswith("bundled:"):
        return sc.load(sc.bundled(ref.split(":", 1)[1]))
    return sc.load(ref)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        if args.threads < 1:
            raise sc.ConfigError("--threads must be >= 1")
        cfg = _load_config(args.config)
        if cfg is None and args.command != "snr":
            raise sc.ConfigError("--config is required")
        if cfg is not None and args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        fn(args, cfg)
    except (sc.ConfigError, InvalidInput) as exc:
        print(f"olt: configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"olt: numerical failure in {type(exc).__module__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
