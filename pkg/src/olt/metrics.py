"""Quality metrics for estimated power profiles and anomaly detection."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.optimize

from .linksim import GroundTruthProfile, LinkSpec
from .rxdsp import AlignedPair
from .tomography import MANAKOV, EstimatorConfig, ProfileEstimate, projected_self_columns
from .waveforms import InvalidInput, PositionGrid

MIN_ENSEMBLES = 8


@dataclass
class SnrReport:
    """Power-profile SNR over an ensemble of estimates.

    ``per_position_snr_db`` is ``gamma'^2 / Var`` per cell; ``mean_snr_db``
    is its mean over positions (in dB). ``pooled_snr_db`` divides the summed
    squared truth by the summed variance, which stays usable for small
    ensembles.
    """

    grid: PositionGrid
    per_position_snr_db: np.ndarray
    mean_snr_db: float
    pooled_snr_db: float
    n_ensembles: int
    reference: str = "truth"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z_km", "snr_db"])
            for z, s in zip(self.grid.z_positions, self.per_position_snr_db):
                wr.writerow([repr(float(z)), repr(float(s))])

    def summary(self) -> str:
        return (
            f"SNR_pp over {self.n_ensembles} estimates (variance about {self.reference}): "
            f"mean {self.mean_snr_db:.2f} dB, pooled {self.pooled_snr_db:.2f} dB"
        )


def _truth_values(truth, est: ProfileEstimate, component: str) -> np.ndarray:
    if isinstance(truth, GroundTruthProfile):
        t = truth.gamma_prime(component)
    else:
        t = np.asarray(truth, dtype=float)
    if est.kind == "single_pol" and isinstance(truth, GroundTruthProfile):
        t = t / MANAKOV  # gamma * P convention
    return t


def _component_for(est: ProfileEstimate) -> str:
    return "mean" if est.kind == "pol_averaged" else "x"


def snr_pp(
    truth,
    estimates: Sequence[ProfileEstimate],
    component: str | None = None,
    reference: Literal["truth", "ensemble"] = "truth",
) -> SnrReport:
    """Power-profile SNR ``gamma'_m^2 / Var[gamma_hat'_m]``.

    Parameters
    ----------
    truth : GroundTruthProfile, array, or a sequence of those
        Per-estimate truths may be given (one per estimate); their mean is
        the SNR numerator and each estimate is compared with its own truth.
    estimates : sequence of ProfileEstimate
    component : str, optional
        ``"x"``, ``"y"`` or ``"mean"``; defaults to ``"mean"`` for
        pol-averaged estimates and ``"x"`` otherwise.
    reference : {"truth", "ensemble"}
        Variance about the truth (mean squared error, default) or about the
        ensemble mean.
    """
    estimates = list(estimates)
    if len(estimates) < 2:
        raise InvalidInput("snr_pp needs at least 2 estimates")
    grid = estimates[0].grid
    for e in estimates[1:]:
        if not e.grid.same_as(grid):
            raise InvalidInput("estimates are on different grids")
    if len(estimates) < MIN_ENSEMBLES:
        warnings.warn(f"only {len(estimates)} estimates; at least {MIN_ENSEMBLES} are recommended", stacklevel=2)
    comp = component or _component_for(estimates[0])
    vals = np.array([e.gamma_prime(comp) for e in estimates])
    if isinstance(truth, (list, tuple)):
        if len(truth) != len(estimates):
            raise InvalidInput("need one truth per estimate")
        tv = np.array([_truth_values(t, e, comp) for t, e in zip(truth, estimates)])
    else:
        tv = np.broadcast_to(_truth_values(truth, estimates[0], comp), vals.shape)
    if tv.shape != vals.shape:
        raise InvalidInput("truth and estimates are on different grids")
    t_mean = tv.mean(axis=0)
    if reference == "truth":
        var = np.mean((vals - tv) ** 2, axis=0)
    elif reference == "ensemble":
        var = np.var(vals - tv, axis=0, ddof=1)
    else:
        raise InvalidInput(f"unknown reference {reference!r}")
    if np.any(var <= 0):
        raise InvalidInput("degenerate ensemble: zero variance")
    per = 10 * np.log10(t_mean**2 / var)
    pooled = 10 * np.log10(np.sum(t_mean**2) / np.sum(var))
    return SnrReport(grid, per, float(np.mean(per)), float(pooled), len(estimates), reference)


def spatial_correlation(pair: AlignedPair, z: float, dz_values, cfg: EstimatorConfig, pol: int = 0) -> np.ndarray:
    """Normalized overlap of the model columns at ``z`` and ``z + dz``.

    Columns are edge-trimmed and stripped of their linear-term component,
    exactly as the estimator sees them.
    """
    dz = np.atleast_1d(np.asarray(dz_values, dtype=float))
    if z < 0 or z + dz.max() > cfg.length_km + 1e-9 or z + dz.min() < -1e-9:
        raise InvalidInput("z + dz must stay within the link")
    cols = projected_self_columns(pair, np.concatenate([[z], z + dz]), cfg, pol)
    g0 = cols[0]
    n0 = np.linalg.norm(g0)
    out = np.empty(dz.size)
    for k, g in enumerate(cols[1:]):
        out[k] = abs(np.vdot(g0, g)) / (n0 * np.linalg.norm(g))
    return np.minimum(out, 1.0)


def correlation_width(dz_values, rho, level: float = 0.5) -> float:
    """First ``dz`` at which ``rho`` falls below ``level`` (linear interpolation)."""
    dz = np.asarray(dz_values, dtype=float)
    rho = np.asarray(rho, dtype=float)
    below = np.nonzero(rho < level)[0]
    if below.size == 0:
        return float("inf")
    k = below[0]
    if k == 0:
        return float(dz[0])
    r0, r1 = rho[k - 1], rho[k]
    return float(dz[k - 1] + (r0 - level) / (r0 - r1) * (dz[k] - dz[k - 1]))


# --- anomaly detection -----------------------------------------------------------------


@dataclass
class AnomalyEvent:
    z_km: float
    magnitude_db: float
    kind: Literal["lumped_loss", "gain_step", "pdl_flag"]
    time_s: float | None = None


@dataclass
class AnomalyReport:
    grid: PositionGrid
    events: list[AnomalyEvent]
    residual_profile_db: np.ndarray
    span_slopes_db_per_km: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z_km", "magnitude_db", "kind", "time_s"])
            for e in self.events:
                t = "" if e.time_s is None else repr(float(e.time_s))
                wr.writerow([repr(float(e.z_km)), repr(float(e.magnitude_db)), e.kind, t])

    def residual_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z_km", "residual_db"])
            for z, r in zip(self.grid.z_positions, self.residual_profile_db):
                wr.writerow([repr(float(z)), repr(float(r))])

    def summary(self) -> str:
        lines = [f"{len(self.events)} event(s)"]
        for e in self.events:
            when = "" if e.time_s is None else f"  from t = {e.time_s:.2f} s"
            lines.append(f"  {e.kind:<12s} at {e.z_km:8.2f} km  {e.magnitude_db:+.2f} dB{when}")
        if self.span_slopes_db_per_km:
            s = ", ".join(f"{v:.4f}" for v in self.span_slopes_db_per_km)
            lines.append(f"span loss slopes [dB/km]: {s}")
        return "\n".join(lines)


def profile_db(profile: ProfileEstimate, component: str = "total", floor_w: float = 1e-9) -> np.ndarray:
    """Profile in dBm with non-positive cells clipped to ``floor_w``."""
    return profile.power_dbm(component, floor_w)


def _profile_w(profile: ProfileEstimate, component: str) -> np.ndarray:
    if component == "total":
        return profile.power_w
    if component == "x":
        return profile.power_x_w
    if component == "y":
        if profile.power_y_w is None:
            raise InvalidInput("profile has no y component")
        return profile.power_y_w
    raise InvalidInput(f"unknown component {component!r}")


def _span_cells(grid: PositionGrid, start: float, stop: float, guard: float) -> tuple[np.ndarray, np.ndarray]:
    z = grid.z_positions
    inside = np.nonzero((z >= start) & (z < stop))[0]
    fit = np.nonzero((z >= start + guard) & (z <= stop - guard))[0]
    return inside, fit


def _model_db(params: np.ndarray, z: np.ndarray, steps: Sequence[float]) -> np.ndarray:
    """Level ``params[0]`` (dBm at z=0), loss slope ``params[1]``, step losses ``params[2:]``."""
    y = params[0] - params[1] * z
    for s, h in zip(steps, params[2:]):
        y = y - h * (z >= s)
    return y


def _model_w(params: np.ndarray, z: np.ndarray, steps: Sequence[float]) -> np.ndarray:
    return 10 ** (_model_db(params, z, steps) / 10) * 1e-3


def _ssr(params: np.ndarray, z: np.ndarray, p_w: np.ndarray, steps: Sequence[float]) -> float:
    return float(np.sum((_model_w(params, z, steps) - p_w) ** 2))


def _fit_span(z: np.ndarray, p_w: np.ndarray, steps: Sequence[float]) -> np.ndarray:
    """Fit a line in dB (plus steps) to a linear-power profile.

    Estimator noise is additive on the linear coefficients and cells can be
    negative, so the misfit is measured in watts rather than on dB values.
    """
    scale = float(np.max(np.abs(p_w)))
    if not scale > 0:
        raise InvalidInput("profile is identically zero")
    ok = p_w > 0.05 * scale
    if ok.sum() < 2:
        ok = p_w > 0
    x0 = np.zeros(2 + len(steps))
    if ok.sum() >= 2:
        c = np.polyfit(z[ok], 10 * np.log10(p_w[ok] / 1e-3), 1)
        x0[0], x0[1] = c[1], -c[0]
    else:
        x0[0] = 10 * np.log10(scale / 1e-3)

    def resid(x):
        return (_model_w(x, z, steps) - p_w) / scale

    return scipy.optimize.least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12).x


def _ratio_steps(num: np.ndarray, den: np.ndarray | None, half: int) -> np.ndarray:
    """Step (dB) of ``num / den`` at each boundary ``k`` from ``half``-cell means.

    Means are taken in the linear domain; NaN where undefined.
    """
    out = np.full(num.size + 1, np.nan)
    for k in range(half, num.size - half + 1):
        right = num[k : k + half].mean()
        left = num[k - half : k].mean()
        if den is not None:
            dr, dl = den[k : k + half].mean(), den[k - half : k].mean()
            if dr <= 0 or dl <= 0:
                continue
            right, left = right / dr, left / dl
        if right > 0 and left > 0:
            out[k] = 10 * np.log10(right / left)
    return out


def span_line_fits(profile: ProfileEstimate, link: LinkSpec, edge_guard_km: float = 2.0, component: str = "total"):
    """Per-span dB lines fitted to the profile.

    Returns a list of ``(loss_slope_db_per_km, level_at_span_start_dbm)``.
    """
    grid = profile.grid
    p = _profile_w(profile, component)
    out = []
    for start, span in zip(link.span_starts_km, link.spans):
        stop = start + span.fiber.length_km
        _, fit = _span_cells(grid, start, stop, edge_guard_km)
        if fit.size < 3:
            raise InvalidInput(f"span at {start} km is too short for a {edge_guard_km} km guard")
        x = _fit_span(grid.z_positions[fit] - start, p[fit], [])
        out.append((float(x[1]), float(x[0])))
    return out


def strongest_step(profile: ProfileEstimate, half_window: int = 3, sign: int = 1, component: str = "total") -> tuple[float, float]:
    """Cell boundary (km) and height (dB) of the largest rise (``sign=1``) or drop (``sign=-1``)."""
    s = _ratio_steps(_profile_w(profile, component), None, half_window) * sign
    if np.all(np.isnan(s)):
        raise InvalidInput("profile too short or non-positive")
    k = int(np.nanargmax(s))
    return float(profile.grid.edges[k]), float(sign * s[k])


def detect_anomalies(
    profile: ProfileEstimate,
    link: LinkSpec,
    threshold_db: float = 0.5,
    edge_guard_km: float = 2.0,
    half_window: int = 3,
    component: str = "total",
    min_significance: float = 4.0,
) -> AnomalyReport:
    """Find lumped losses, span-input level deviations and polarization splits.

    Within each span a straight line in dB is fitted to the profile,
    excluding ``edge_guard_km`` at both span ends, with the misfit measured
    in watts. Steps are then added one at a time: every cell boundary at
    least ``half_window`` cells from the existing steps is tried, line and
    steps are refitted jointly, and the boundary with the smallest misfit
    is kept if its height is at least ``threshold_db`` and the misfit drops
    by at least ``min_significance**2`` noise variances. The noise level is
    estimated from the cell-to-cell scatter of the profile, which keeps
    low-power span ends from producing events. Kept steps become
    ``lumped_loss`` events with positive magnitudes for losses.

    Span input levels deviating from the previous span by ``threshold_db``
    give ``gain_step`` events. For dual-pol profiles, a change of the x/y
    power ratio between consecutive spans (the first compared with a
    balanced launch) gives a ``pdl_flag`` at the span input.
    """
    grid = profile.grid
    if not np.isclose(grid.length_km, link.length_km, rtol=1e-9, atol=1e-9):
        raise InvalidInput("profile grid does not span the link")
    p = _profile_w(profile, component)
    z = grid.z_positions
    residual = np.zeros(grid.size)
    events: list[AnomalyEvent] = []
    slopes = []
    levels = []
    fits = []
    for start, span in zip(link.span_starts_km, link.spans):
        stop = start + span.fiber.length_km
        inside, fit = _span_cells(grid, start, stop, edge_guard_km)
        if fit.size < 2 * half_window + 2:
            raise InvalidInput(f"span at {start} km is shorter than its guards")
        zf = z[fit] - start
        pf = p[fit]
        x = _fit_span(zf, pf, [])
        line = _model_w(x, z[inside] - start, [])
        residual[inside] = 10 * np.log10(np.maximum(p[inside] / line, 1e-3))
        sigma = _noise_sigma(pf - _model_w(x, zf, []))
        steps: list[float] = []
        ssr = _ssr(x, zf, pf, steps)
        while True:
            best = None
            for k in range(half_window, fit.size - half_window + 1):
                s = float(0.5 * (zf[k - 1] + zf[k]))
                if any(abs(s - t) < half_window * grid.delta_z_km for t in steps):
                    continue
                xs = _fit_span(zf, pf, steps + [s])
                r = _ssr(xs, zf, pf, steps + [s])
                if best is None or r < best[0]:
                    best = (r, s, xs)
            if best is None:
                break
            r, s, xs = best
            if abs(xs[-1]) < threshold_db or ssr - r < (min_significance * sigma) ** 2:
                break
            steps.append(s)
            x, ssr = xs, r
        for s, h in zip(steps, x[2:]):
            if abs(h) >= threshold_db:
                events.append(AnomalyEvent(float(start + s), float(h), "lumped_loss"))
        slopes.append(float(x[1]))
        levels.append(float(x[0]))
        fits.append(fit)
    for start, prev, lv in zip(link.span_starts_km[1:], levels[:-1], levels[1:]):
        if abs(lv - prev) >= threshold_db:
            events.append(AnomalyEvent(float(start), float(prev - lv), "gain_step"))
    if profile.gamma_prime_y is not None:
        prev = 0.0  # equal launch power in both tributaries
        for start, fit in zip(link.span_starts_km, fits):
            split, noise = _split_db(profile.gamma_prime_x[fit], profile.gamma_prime_y[fit])
            d = split - prev
            if abs(d) >= threshold_db and abs(d) >= min_significance * noise:
                events.append(AnomalyEvent(float(start), float(d), "pdl_flag"))
            prev = split
    events.sort(key=lambda e: (e.z_km, e.kind))
    return AnomalyReport(grid, events, residual, slopes)


def _noise_sigma(r: np.ndarray) -> float:
    """Robust per-cell noise level from first differences."""
    d = np.diff(r)
    if d.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / np.sqrt(2))


def _split_db(gx: np.ndarray, gy: np.ndarray) -> tuple[float, float]:
    """x/y power ratio (dB) over a set of cells and its noise level."""
    sx, sy = gx.sum(), gy.sum()
    if sx <= 0 or sy <= 0:
        return float("nan"), float("inf")
    n = gx.size
    v = n * (_noise_sigma(gx) ** 2 / sx**2 + _noise_sigma(gy) ** 2 / sy**2)
    return float(10 * np.log10(sx / sy)), float(10 / np.log(10) * np.sqrt(v))


def detect_level_changes(
    profiles: Sequence[ProfileEstimate],
    times: Sequence[float],
    link: LinkSpec,
    threshold_db: float = 0.5,
    edge_guard_km: float = 2.0,
) -> list[AnomalyEvent]:
    """Spans whose fitted input level drifts over a time series of profiles.

    One ``gain_step`` event per affected span, at the span start, with the
    level drop between the first and last profile and the time at which
    the level first moved by half of it.
    """
    if len(profiles) != len(times):
        raise InvalidInput("one time per profile is required")
    levels = np.array([[lv for _, lv in span_line_fits(p, link, edge_guard_km)] for p in profiles])
    events = []
    for s, start in enumerate(link.span_starts_km):
        lv = levels[:, s]
        if lv.max() - lv.min() < threshold_db:
            continue
        drop = float(lv[0] - lv[-1])
        moved = np.nonzero(np.abs(lv - lv[0]) >= 0.5 * abs(drop))[0] if drop else np.array([], dtype=int)
        t = float(times[moved[0]]) if moved.size else None
        events.append(AnomalyEvent(float(start), drop, "gain_step", t))
    return events


def compare_to_truth(profile: ProfileEstimate, truth: GroundTruthProfile, component: str = "total") -> dict:
    """RMS and maximum dB deviation of ``profile`` from ``truth``."""
    if not profile.grid.same_as(truth.grid):
        raise InvalidInput("profile and truth grids differ")
    est = profile_db(profile, component)
    if component == "total":
        t = truth.power_w
    else:
        t = truth.power_x_w if component == "x" else truth.power_y_w
    ref = 10 * np.log10(np.maximum(t, 1e-15) / 1e-3)
    d = est - ref
    return {"rms_db": float(np.sqrt(np.mean(d**2))), "max_abs_db": float(np.max(np.abs(d))), "mean_db": float(np.mean(d))}
