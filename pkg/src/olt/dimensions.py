"""Tomography along polarization, frequency and time, plus profile averaging."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .linksim import Capture, GroundTruthProfile, LinkSpec, Propagator, Span, capture_noise_seed
from .rxdsp import AlignedPair, prepare_pair
from .tomography import EstimatorConfig, ProfileEstimate, ProfileEstimator, estimate
from .txgen import TxConfig, build_tx_waveform
from .waveforms import C_NM_PER_PS, FiberParams, InvalidInput, PositionGrid

DIMENSIONS = ("polarization", "time", "frequency")


def run_jobs(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def average_profiles(profiles: Sequence[ProfileEstimate], dims: Iterable[str] = ("time",)) -> ProfileEstimate:
    """Arithmetic mean of coefficient profiles.

    The list is averaged as a whole (the labels in ``dims`` other than
    ``"polarization"`` only document what the list spans). With
    ``"polarization"`` the x and y coefficients are averaged as well and a
    ``"pol_averaged"`` profile is returned.
    """
    profiles = list(profiles)
    dims = set(dims)
    unknown = dims - set(DIMENSIONS)
    if unknown:
        raise InvalidInput(f"unknown averaging dimension(s) {sorted(unknown)}")
    if not profiles:
        raise InvalidInput("nothing to average")
    first = profiles[0]
    for p in profiles[1:]:
        if not p.grid.same_as(first.grid):
            raise InvalidInput("profiles are on different grids")
        if p.kind != first.kind:
            raise InvalidInput("cannot mix profile kinds")
        if p.gamma_nominal != first.gamma_nominal:
            raise InvalidInput("profiles use different nominal gamma")
    gx = np.mean([p.gamma_prime_x for p in profiles], axis=0)
    gy = None if first.gamma_prime_y is None else np.mean([p.gamma_prime_y for p in profiles], axis=0)
    kind = first.kind
    if "polarization" in dims:
        if gy is None:
            if kind != "pol_averaged":
                raise InvalidInput("polarization averaging needs dual-pol profiles")
        else:
            gx, gy, kind = 0.5 * (gx + gy), None, "pol_averaged"
    basis = first.basis if all(p.basis == first.basis for p in profiles) else (float("nan"), float("nan"))
    return ProfileEstimate(first.grid, gx, gy, first.gamma_nominal, kind, basis, {"n_averaged": len(profiles)})


def average_truths(truths: Sequence[GroundTruthProfile]) -> GroundTruthProfile:
    truths = list(truths)
    if not truths:
        raise InvalidInput("nothing to average")
    g = truths[0].grid
    for t in truths[1:]:
        if not t.grid.same_as(g):
            raise InvalidInput("truth profiles are on different grids")

    def m(name):
        return np.mean([getattr(t, name) for t in truths], axis=0)

    return GroundTruthProfile(g, m("power_x_w"), m("power_y_w"), m("gamma_prime_x"), m("gamma_prime_y"))


@dataclass
class TomographyMap:
    """Profiles indexed by an extra axis (frequency, time, ...)."""

    axis_name: str
    axis_values: np.ndarray
    estimates: list[ProfileEstimate]
    truths: list[GroundTruthProfile] | None = None

    def __post_init__(self):
        self.axis_values = np.asarray(self.axis_values, dtype=float)
        if len(self.estimates) != self.axis_values.size:
            raise InvalidInput("one estimate per axis value is required")
        if not self.estimates:
            raise InvalidInput("empty map")
        g = self.estimates[0].grid
        if any(not e.grid.same_as(g) for e in self.estimates[1:]):
            raise InvalidInput("map estimates are on different grids")

    @property
    def grid(self) -> PositionGrid:
        return self.estimates[0].grid

    def power_dbm(self, component: str = "total") -> np.ndarray:
        """Shape ``(n_axis, n_positions)``."""
        return np.array([e.power_dbm(component) for e in self.estimates])

    def cell_index(self, z_km: float) -> int:
        g = self.grid
        if not 0 <= z_km <= g.length_km:
            raise InvalidInput(f"{z_km} km lies outside the grid")
        return int(min(np.searchsorted(g.edges, z_km, side="right") - 1, g.size - 1))

    def slice_at(self, z_km: float, component: str = "total") -> np.ndarray:
        """Power (dBm) against the map axis at the cell containing ``z_km``."""
        return self.power_dbm(component)[:, self.cell_index(z_km)]

    def gamma_prime_at(self, z_km: float, component: str = "total") -> np.ndarray:
        k = self.cell_index(z_km)
        return np.array([e.gamma_prime(component)[k] for e in self.estimates])

    def to_csv(self, path) -> None:
        dual = self.estimates[0].gamma_prime_y is not None
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            head = ["axis_value", "z_km", "power_dbm"]
            if dual:
                head += ["power_x_dbm", "power_y_dbm"]
            wr.writerow(head)
            for v, e in zip(self.axis_values, self.estimates):
                tot = e.power_dbm("total")
                px = e.power_dbm("x") if dual else None
                py = e.power_dbm("y") if dual else None
                for m, z in enumerate(e.grid.z_positions):
                    row = [repr(float(v)), repr(float(z)), repr(float(tot[m]))]
                    if dual:
                        row += [repr(float(px[m])), repr(float(py[m]))]
                    wr.writerow(row)


# --- polarization ----------------------------------------------------------------------


@dataclass
class SopSweepResult:
    """Per-basis dual-pol profiles and the derived polarization split.

    ``split_db[b, m] = 10 log10(P_x / P_y)`` in basis ``b`` (NaN where either
    estimate is non-positive). ``max_split_db`` is the size of the x/y
    ratio change in the basis that supports a change best (``best_basis``),
    ``onset_km`` the boundary where that change happens.
    """

    bases: list[tuple[float, float]]
    profiles: list[ProfileEstimate]
    split_db: np.ndarray
    max_split_db: float
    best_basis: tuple[float, float]
    onset_km: float
    total_power_variation: float

    @property
    def grid(self) -> PositionGrid:
        return self.profiles[0].grid

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["theta", "phi", "z_km", "power_x_dbm", "power_y_dbm", "split_db"])
            for b, p, s in zip(self.bases, self.profiles, self.split_db):
                px, py = p.power_dbm("x"), p.power_dbm("y")
                for m, z in enumerate(p.grid.z_positions):
                    wr.writerow([repr(float(b[0])), repr(float(b[1])), repr(float(z)), repr(float(px[m])), repr(float(py[m])), repr(float(s[m]))])

    def summary(self) -> str:
        th, ph = np.degrees(self.best_basis)
        return (
            f"max polarization split {self.max_split_db:.2f} dB in basis theta={th:.1f} deg, phi={ph:.1f} deg; "
            f"onset at {self.onset_km:.1f} km; total-power variation across bases {100 * self.total_power_variation:.2f} %"
        )


def sop_bases(grid_theta: int = 13, grid_phi: int = 4) -> list[tuple[float, float]]:
    """theta evenly over [0, pi/2], phi = k pi / grid_phi."""
    if grid_theta < 1 or grid_phi < 1:
        raise InvalidInput("sweep grid sizes must be >= 1")
    thetas = np.linspace(0.0, np.pi / 2, grid_theta) if grid_theta > 1 else np.array([0.0])
    phis = np.arange(grid_phi) * np.pi / grid_phi
    return [(float(t), float(p)) for t in thetas for p in phis]


def _split_fit(px: np.ndarray, py: np.ndarray, min_cells: int) -> tuple[int, float, float]:
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    if px.shape != py.shape or px.size < 2 * min_cells:
        raise InvalidInput("profiles too short for a split change")

    def seg(a, c):
        cc = float(c @ c)
        r = float(a @ c) / cc if cc > 0 else 0.0
        return r, float(a @ a) - r * float(a @ c)

    best = None
    for k in range(min_cells, px.size - min_cells + 1):
        r0, e0 = seg(px[:k], py[:k])
        r1, e1 = seg(px[k:], py[k:])
        if r0 <= 0 or r1 <= 0:
            continue
        if best is None or e0 + e1 < best[0]:
            best = (e0 + e1, k, float(10 * np.log10(r1 / r0)))
    if best is None:
        raise InvalidInput("no boundary gives positive power ratios")
    _, e_flat = seg(px, py)
    explained = 1.0 - best[0] / e_flat if e_flat > 0 else 0.0
    return best[1], best[2], explained


def split_change(px: np.ndarray, py: np.ndarray, min_cells: int = 3) -> tuple[int, float]:
    """Boundary index and size (dB) of the best single change of ``px / py``.

    For each boundary ``k`` the ratio is fitted separately on both sides by
    least squares on ``px ~ r py`` in watts, so low-power cells weigh
    little; the boundary with the smallest total misfit is returned with
    ``10 log10(r_after / r_before)``.
    """
    k, change, _ = _split_fit(px, py, min_cells)
    return k, change


def sop_sweep(
    pairs: AlignedPair | Sequence[AlignedPair],
    cfg: EstimatorConfig,
    grid_theta: int = 13,
    grid_phi: int = 4,
    threads: int = 1,
    min_cells: int = 3,
) -> SopSweepResult:
    """Dual-pol estimates in a sweep of analysis polarization bases.

    Several pairs (e.g. captures at different times) are estimated
    separately in each basis and averaged. In each basis the x/y ratio is
    modelled as constant before and after one boundary (see
    :func:`split_change`). The reported split and onset come from the basis
    where that boundary explains the largest fraction of the misfit of a
    constant ratio; ranking by the size of the change instead would favour
    noise in low-power cells.
    """
    if isinstance(pairs, AlignedPair):
        pairs = [pairs]
    pairs = list(pairs)
    if not pairs:
        raise InvalidInput("no pairs given")
    if cfg.mode != "dual_pol":
        raise InvalidInput("an SOP sweep needs dual_pol mode")
    if not all(p.active.all() for p in pairs):
        raise InvalidInput("an SOP sweep needs a dual-polarization signal")
    bases = sop_bases(grid_theta, grid_phi)

    def job(basis):
        ests = [estimate(p.rotated(*basis), cfg, basis) for p in pairs]
        out = average_profiles(ests, ("time",))
        out.basis = basis
        return out

    profiles = run_jobs(job, bases, threads)
    px = np.array([p.power_x_w for p in profiles])
    py = np.array([p.power_y_w for p in profiles])
    with np.errstate(divide="ignore", invalid="ignore"):
        split = np.where((px > 0) & (py > 0), 10 * np.log10(px / py), np.nan)
    fits = [_split_fit(a, c, min_cells) for a, c in zip(px, py)]
    b = int(np.argmax([f[2] for f in fits]))
    k, peak, _ = fits[b]
    onset = float(profiles[0].grid.edges[k])
    total = px + py
    mean_total = total.mean(axis=0)
    variation = float(np.max(np.linalg.norm(total - mean_total, axis=1)) / np.linalg.norm(mean_total))
    return SopSweepResult(bases, profiles, split, abs(peak), bases[b], onset, variation)


# --- frequency ---------------------------------------------------------------------------


def dispersion_at(frequency: float, reference_frequency: float, dispersion_D: float, dispersion_slope: float = 0.0) -> float:
    """D (ps/nm/km) at ``frequency`` with a linear slope in wavelength (ps/nm^2/km)."""
    dl = C_NM_PER_PS * 1e12 / frequency - C_NM_PER_PS * 1e12 / reference_frequency
    return float(dispersion_D + dispersion_slope * dl)


def _with_dispersion(link: LinkSpec, D: float) -> LinkSpec:
    spans = []
    for s in link.spans:
        f = s.fiber
        spans.append(Span(FiberParams(f.alpha_db_per_km, D, f.gamma, f.length_km), s.elements_at_input))
    return LinkSpec(tuple(spans), link.post_link_elements)


def spectral_map(
    tx_cfg: TxConfig,
    link: LinkSpec,
    est_cfg: EstimatorConfig,
    frequencies: Sequence[float] | None = None,
    dispersion_values: Sequence[float] | None = None,
    dispersion_slope: float = 0.0,
    launch_powers_dbm: Sequence[float] | None = None,
    step_km: float = 0.2,
    noise_seed: int = 0,
    threads: int = 1,
) -> TomographyMap:
    """Per-channel tomography emulated one channel at a time.

    Each channel is simulated alone with its own center frequency and the
    dispersion coefficient valid there; the estimator uses the same
    coefficient. ``dispersion_values`` sets D per channel directly
    (frequency held at ``tx_cfg.center_frequency``). All channels share
    the symbol pattern of ``tx_cfg``; amplifier noise is drawn
    independently per channel from ``noise_seed``. Every span must have
    the same D (the value of the first span is the reference).
    """
    if (frequencies is None) == (dispersion_values is None):
        raise InvalidInput("give exactly one of frequencies or dispersion_values")
    d0 = link.spans[0].fiber.dispersion_D
    if any(s.fiber.dispersion_D != d0 for s in link.spans):
        raise InvalidInput("spectral emulation assumes one fiber type")
    if frequencies is not None:
        freqs = [float(f) for f in frequencies]
        ds = [dispersion_at(f, tx_cfg.center_frequency, d0, dispersion_slope) for f in freqs]
        axis = np.array(freqs)
    else:
        ds = [float(d) for d in dispersion_values]
        freqs = [tx_cfg.center_frequency] * len(ds)
        axis = np.array(ds)
    if not ds:
        raise InvalidInput("no channels requested")
    powers = [tx_cfg.launch_power_dbm] * len(ds) if launch_powers_dbm is None else list(launch_powers_dbm)
    if len(powers) != len(ds):
        raise InvalidInput("one launch power per channel is required")

    def job(k):
        cfg_k = tx_cfg.with_(center_frequency=freqs[k], launch_power_dbm=powers[k])
        tx = build_tx_waveform(cfg_k)
        link_k = _with_dispersion(link, ds[k])
        rx, truth = Propagator(tx, link_k, step_km, est_cfg.grid.delta_z_km).run(capture_noise_seed(noise_seed, k))
        pair = prepare_pair(rx, tx, link_k.total_dispersion_ps_nm(), cfg_k)
        return estimate(pair, est_cfg.with_(cd_coefficient=ds[k], beta2=None)), truth

    res = run_jobs(job, list(range(len(ds))), threads)
    return TomographyMap("frequency_hz" if frequencies is not None else "dispersion_ps_nm_km", axis, [r[0] for r in res], [r[1] for r in res])


# --- time --------------------------------------------------------------------------------


def moving_average(profiles: Sequence[ProfileEstimate], window: int) -> list[ProfileEstimate]:
    """Centered moving average; the window shrinks symmetrically at the series ends."""
    n = len(profiles)
    if window < 1 or window % 2 == 0:
        raise InvalidInput("window must be a positive odd integer")
    if window > n:
        raise InvalidInput("window longer than the series")
    h = window // 2
    out = []
    for k in range(n):
        r = min(h, k, n - 1 - k)
        out.append(average_profiles(profiles[k - r : k + r + 1], ("time",)))
    return out


def temporal_map(
    pairs: Sequence[AlignedPair],
    times: Sequence[float],
    cfg: EstimatorConfig,
    window: int = 3,
    threads: int = 1,
    truths: Sequence[GroundTruthProfile] | None = None,
) -> tuple[TomographyMap, TomographyMap]:
    """Raw and moving-averaged per-capture profiles.

    Returns ``(raw, averaged)``; averaging is done on the coefficients.
    """
    pairs = list(pairs)
    if len(pairs) != len(times):
        raise InvalidInput("one capture time per pair is required")
    if not pairs:
        raise InvalidInput("no captures")
    if window > len(pairs):
        raise InvalidInput("window longer than the series")
    est = ProfileEstimator(cfg)
    raw = run_jobs(lambda p: est(p), pairs, threads)
    avg = moving_average(raw, window)
    tr = list(truths) if truths is not None else None
    return TomographyMap("time_s", times, raw, tr), TomographyMap("time_s", times, avg, tr)


def pairs_from_captures(captures: Sequence[Capture], tx, link: LinkSpec, tx_cfg: TxConfig) -> list[AlignedPair]:
    cd = link.total_dispersion_ps_nm()
    return [prepare_pair(c.rx, tx, cd, tx_cfg) for c in captures]

