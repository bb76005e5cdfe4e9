"""Split-step Manakov propagation over multi-span links with in-line elements."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np
import scipy.fft as sfft

from .waveforms import (
    PLANCK,
    FiberParams,
    InvalidInput,
    PositionGrid,
    Waveform,
    db_to_linear,
    dbm_to_watts,
    dispersion_phase,
    jones_matrix,
    watts_to_dbm,
)

MANAKOV = 8.0 / 9.0


class SimulationError(RuntimeError):
    """Numerical failure during propagation."""


@dataclass(frozen=True)
class Amplifier:
    gain_db: float = 10.0
    noise_figure_db: float = 5.0
    mode: Literal["fixed_gain", "fixed_output_power_dbm"] = "fixed_gain"
    output_power_dbm: float | None = None

    def __post_init__(self):
        if self.mode not in ("fixed_gain", "fixed_output_power_dbm"):
            raise InvalidInput(f"unknown amplifier mode {self.mode!r}")
        if self.mode == "fixed_output_power_dbm" and self.output_power_dbm is None:
            raise InvalidInput("fixed_output_power_dbm mode needs output_power_dbm")

    @property
    def position_km(self) -> float:
        return 0.0


@dataclass(frozen=True)
class LumpedLoss:
    loss_db: float
    position_km: float = 0.0

    def __post_init__(self):
        if self.loss_db < 0:
            raise InvalidInput("loss_db must be >= 0")


@dataclass(frozen=True)
class PdlElement:
    """PDL with field gains ``10**(+pdl/40)`` / ``10**(-pdl/40)`` on its own axes."""

    pdl_db: float
    axis_theta: float = 0.0
    axis_phi: float = 0.0
    position_km: float = 0.0

    def __post_init__(self):
        if self.pdl_db < 0:
            raise InvalidInput("pdl_db must be >= 0")

    def matrix(self) -> np.ndarray:
        u = jones_matrix(self.axis_theta, self.axis_phi)
        a = 10.0 ** (self.pdl_db / 40.0)
        return u @ np.diag([a, 1.0 / a]) @ u.conj().T


@dataclass(frozen=True)
class Voa:
    """Attenuator following a piecewise-constant ``(time_s, attenuation_db)`` schedule."""

    schedule: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    position_km: float = 0.0

    def __post_init__(self):
        sched = tuple((float(t), float(a)) for t, a in self.schedule)
        if not sched:
            raise InvalidInput("VOA schedule is empty")
        times = [t for t, _ in sched]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInput("VOA schedule times must be strictly increasing")
        if any(a < 0 for _, a in sched):
            raise InvalidInput("VOA attenuation must be >= 0")
        object.__setattr__(self, "schedule", sched)

    def attenuation_db(self, t: float) -> float:
        """Entry in force at ``t``; before the first entry the first value holds."""
        value = self.schedule[0][1]
        for ts, att in self.schedule:
            if ts <= t:
                value = att
            else:
                break
        return value


Element = Union[Amplifier, LumpedLoss, PdlElement, Voa]


@dataclass(frozen=True)
class Span:
    fiber: FiberParams
    elements_at_input: tuple = ()

    def __post_init__(self):
        els = tuple(self.elements_at_input)
        for e in els:
            if not 0 <= e.position_km <= self.fiber.length_km:
                raise InvalidInput(f"{type(e).__name__} at {e.position_km} km lies outside its span")
        object.__setattr__(self, "elements_at_input", els)


@dataclass(frozen=True)
class LinkSpec:
    spans: tuple
    post_link_elements: tuple = ()

    def __post_init__(self):
        spans = tuple(self.spans)
        if not spans:
            raise InvalidInput("a link needs at least one span")
        object.__setattr__(self, "spans", spans)
        object.__setattr__(self, "post_link_elements", tuple(self.post_link_elements))

    @property
    def length_km(self) -> float:
        return float(sum(s.fiber.length_km for s in self.spans))

    @property
    def span_starts_km(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([s.fiber.length_km for s in self.spans])[:-1]])

    def total_dispersion_ps_nm(self) -> float:
        """Accumulated CD, sum of D * length."""
        return float(sum(s.fiber.dispersion_D * s.fiber.length_km for s in self.spans))

    def element_positions(self) -> list[tuple[float, Element]]:
        """Absolute position (km) of every element."""
        out = []
        for z0, span in zip(self.span_starts_km, self.spans):
            for e in span.elements_at_input:
                out.append((float(z0 + e.position_km), e))
        for e in self.post_link_elements:
            out.append((self.length_km, e))
        return out


@dataclass
class GroundTruthProfile:
    grid: PositionGrid
    power_x_w: np.ndarray
    power_y_w: np.ndarray
    gamma_prime_x: np.ndarray
    gamma_prime_y: np.ndarray

    @property
    def power_w(self) -> np.ndarray:
        return self.power_x_w + self.power_y_w

    def gamma_prime(self, component: str = "x") -> np.ndarray:
        if component == "x":
            return self.gamma_prime_x
        if component == "y":
            return self.gamma_prime_y
        if component == "mean":
            return 0.5 * (self.gamma_prime_x + self.gamma_prime_y)
        if component == "total":
            return self.gamma_prime_x + self.gamma_prime_y
        raise InvalidInput(f"unknown component {component!r}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z_km", "power_x_dbm", "power_y_dbm", "gamma_prime_x", "gamma_prime_y"])
            for row in zip(
                self.grid.z_positions,
                _safe_dbm(self.power_x_w),
                _safe_dbm(self.power_y_w),
                self.gamma_prime_x,
                self.gamma_prime_y,
            ):
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "GroundTruthProfile":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise InvalidInput(f"{path}: no rows")
        z = np.array([float(r["z_km"]) for r in rows])
        dz = float(z[1] - z[0]) if z.size > 1 else 2 * float(z[0])

        def watts(key):
            return np.array([10 ** (float(r[key]) / 10) * 1e-3 for r in rows])

        gx = np.array([float(r["gamma_prime_x"]) for r in rows])
        gy = np.array([float(r["gamma_prime_y"]) for r in rows])
        return cls(PositionGrid(z, dz), watts("power_x_dbm"), watts("power_y_dbm"), gx, gy)


def _safe_dbm(p):
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, -np.inf)
    pos = p > 0
    out[pos] = watts_to_dbm(p[pos])
    return out


# --- compiled link -----------------------------------------------------------------


@dataclass(frozen=True)
class _FiberOp:
    fiber: FiberParams
    z_start: float
    length: float
    n_steps: int


@dataclass(frozen=True)
class _ElementOp:
    element: Element
    z: float

    @property
    def stochastic(self) -> bool:
        # Amplifiers draw ASE; VOA output depends on capture time.
        return isinstance(self.element, (Amplifier, Voa))


def _n_steps(length: float, step_km: float) -> int:
    n = int(round(length / step_km))
    if n < 1 or abs(n * step_km - length) > 1e-9 * max(length, 1.0):
        raise InvalidInput(f"step {step_km} km does not divide fiber section of {length} km")
    return n


def compile_link(link: LinkSpec, step_km: float) -> list:
    """Ordered fiber / element operations for ``link``."""
    if not step_km > 0:
        raise InvalidInput("step_km must be > 0")
    ops: list = []
    for z0, span in zip(link.span_starts_km, link.spans):
        length = span.fiber.length_km
        # stable sort keeps the configured order of co-located elements
        els = sorted(span.elements_at_input, key=lambda e: e.position_km)
        pos = 0.0
        for e in els:
            if e.position_km > pos:
                seg = e.position_km - pos
                ops.append(_FiberOp(span.fiber, float(z0 + pos), seg, _n_steps(seg, step_km)))
                pos = e.position_km
            ops.append(_ElementOp(e, float(z0 + e.position_km)))
        if length > pos:
            seg = length - pos
            ops.append(_FiberOp(span.fiber, float(z0 + pos), seg, _n_steps(seg, step_km)))
    for e in link.post_link_elements:
        ops.append(_ElementOp(e, link.length_km))
    return ops


@dataclass
class _State:
    field: np.ndarray  # (2, n)
    z_mid: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    px: list = field(default_factory=list)
    py: list = field(default_factory=list)
    gamma: list = field(default_factory=list)

    def copy(self) -> "_State":
        return _State(
            self.field.copy(), list(self.z_mid), list(self.weights), list(self.px), list(self.py), list(self.gamma)
        )


def _run_fiber(state: _State, op: _FiberOp, freqs: np.ndarray, center_frequency: float) -> None:
    f = op.fiber
    h = op.length / op.n_steps
    alpha = f.alpha_neper_per_km
    beta2 = f.beta2(center_frequency)
    phase = dispersion_phase(freqs, beta2, 1.0)
    half = np.exp(-0.25 * alpha * h + 1j * phase * (0.5 * h))
    full = half * half
    k_nl = MANAKOV * f.gamma * h
    a = sfft.fft(state.field, axis=-1)
    a *= half
    a = sfft.ifft(a, axis=-1, overwrite_x=True)
    rot = np.empty(a.shape[1], dtype=complex)
    for k in range(op.n_steps):
        p = a.real**2 + a.imag**2
        px = p[0].mean()
        py = p[1].mean()
        state.z_mid.append(op.z_start + (k + 0.5) * h)
        state.weights.append(h)
        state.px.append(px)
        state.py.append(py)
        state.gamma.append(f.gamma)
        if k_nl != 0.0:
            ph = p[0] + p[1]
            ph *= -k_nl
            np.cos(ph, out=rot.real)
            np.sin(ph, out=rot.imag)
            a *= rot
        a = sfft.fft(a, axis=-1, overwrite_x=True)
        a *= full if k < op.n_steps - 1 else half
        a = sfft.ifft(a, axis=-1, overwrite_x=True)
    state.field = a


def ase_variance(gain_lin: float, noise_figure_db: float, center_frequency: float, sample_rate: float) -> float:
    """ASE power per polarization over the simulation bandwidth (W)."""
    if gain_lin <= 1.0:
        return 0.0
    psd = (gain_lin - 1.0) * PLANCK * center_frequency * db_to_linear(noise_figure_db) / 2.0
    return float(psd * sample_rate)


def _run_element(
    state: _State, op: _ElementOp, rng: np.random.Generator | None, t: float, w: Waveform
) -> None:
    e = op.element
    if isinstance(e, Amplifier):
        if e.mode == "fixed_gain":
            g = float(db_to_linear(e.gain_db))
        else:
            p_in = float(np.mean(np.abs(state.field) ** 2) * 2)
            if p_in <= 0:
                raise SimulationError("fixed-output amplifier received zero input power")
            g = float(dbm_to_watts(e.output_power_dbm)) / p_in
        state.field = state.field * np.sqrt(g)
        var = ase_variance(g, e.noise_figure_db, w.center_frequency, w.sample_rate)
        if var > 0:
            if rng is None:
                raise SimulationError("amplifier noise requested without a generator")
            n = rng.standard_normal((2, 2, state.field.shape[1]))
            state.field = state.field + np.sqrt(var / 2) * (n[0] + 1j * n[1])
    elif isinstance(e, LumpedLoss):
        state.field = state.field * 10.0 ** (-e.loss_db / 20.0)
    elif isinstance(e, PdlElement):
        state.field = e.matrix() @ state.field
    elif isinstance(e, Voa):
        state.field = state.field * 10.0 ** (-e.attenuation_db(t) / 20.0)
    else:
        raise InvalidInput(f"unknown element {e!r}")


def _truth(state: _State, link: LinkSpec, grid: PositionGrid) -> GroundTruthProfile:
    z = np.asarray(state.z_mid)
    wts = np.asarray(state.weights)
    idx = np.clip(np.searchsorted(grid.edges, z, side="right") - 1, 0, grid.size - 1)
    norm = np.bincount(idx, weights=wts, minlength=grid.size)
    if np.any(norm == 0):
        raise InvalidInput("truth grid finer than the simulation step")
    px = np.bincount(idx, weights=wts * np.asarray(state.px), minlength=grid.size) / norm
    py = np.bincount(idx, weights=wts * np.asarray(state.py), minlength=grid.size) / norm
    gam = np.bincount(idx, weights=wts * np.asarray(state.gamma), minlength=grid.size) / norm
    return GroundTruthProfile(grid, px, py, MANAKOV * gam * px, MANAKOV * gam * py)


def noise_rng(noise_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(noise_seed)))


class Propagator:
    """Reusable propagation of one waveform over one link.

    The deterministic prefix (everything before the first amplifier or VOA)
    is computed once and shared by all calls, which keeps repeated captures
    with different noise seeds cheap while giving bit-identical results to
    a from-scratch run.
    """

    def __init__(self, w: Waveform, link: LinkSpec, step_km: float = 0.2, truth_dz_km: float = 1.0):
        self.w = w
        self.link = link
        self.ops = compile_link(link, step_km)
        self.grid = PositionGrid.uniform(link.length_km, truth_dz_km)
        self._freqs = w.frequencies()
        self._prefix: tuple[int, _State] | None = None

    def _prefix_state(self) -> tuple[int, _State]:
        if self._prefix is None:
            state = _State(self.w.samples)
            i = 0
            while i < len(self.ops):
                op = self.ops[i]
                if isinstance(op, _ElementOp) and op.stochastic:
                    break
                self._apply(state, op, None, 0.0)
                i += 1
            self._prefix = (i, state)
        return self._prefix

    def _apply(self, state, op, rng, t):
        if isinstance(op, _FiberOp):
            _run_fiber(state, op, self._freqs, self.w.center_frequency)
        else:
            _run_element(state, op, rng, t, self.w)
        if not np.all(np.isfinite(state.field)):
            raise SimulationError(f"non-finite field after {op!r}")

    def run(self, noise_seed: int = 0, capture_time_s: float = 0.0) -> tuple[Waveform, GroundTruthProfile]:
        start, prefix = self._prefix_state()
        state = prefix.copy()
        rng = noise_rng(noise_seed)
        for op in self.ops[start:]:
            self._apply(state, op, rng, capture_time_s)
        return self.w.with_samples(state.field), _truth(state, self.link, self.grid)


def propagate(
    w: Waveform,
    link: LinkSpec,
    step_km: float = 0.2,
    noise_seed: int = 0,
    capture_time_s: float = 0.0,
    truth_dz_km: float = 1.0,
) -> tuple[Waveform, GroundTruthProfile]:
    """Symmetric split-step solution of the Manakov model over ``link``.

    Returns the received waveform and the ground-truth power profile averaged
    over ``truth_dz_km`` cells.
    """
    return Propagator(w, link, step_km, truth_dz_km).run(noise_seed, capture_time_s)


@dataclass
class Capture:
    time_s: float
    rx: Waveform
    truth: GroundTruthProfile
    noise_seed: int


def capture_noise_seed(seed: int, index: int) -> int:
    """Independent per-capture noise seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def capture_series(
    w: Waveform,
    link: LinkSpec,
    step_km: float = 0.2,
    interval_s: float = 0.55,
    n_captures: int = 1,
    seed: int = 0,
    truth_dz_km: float = 1.0,
) -> list[Capture]:
    """Repeated captures at ``k * interval_s`` with independent noise."""
    if n_captures < 1:
        raise InvalidInput("n_captures must be >= 1")
    prop = Propagator(w, link, step_km, truth_dz_km)
    out = []
    for k in range(int(n_captures)):
        ns = capture_noise_seed(seed, k)
        t = k * interval_s
        rx, truth = prop.run(ns, t)
        out.append(Capture(t, rx, truth, ns))
    return out


def uniform_link(
    n_spans: int = 2,
    span_km: float | Sequence[float] = 50.0,
    fiber: FiberParams | None = None,
    gain_db: float | None = None,
    noise_figure_db: float = 5.0,
) -> LinkSpec:
    """Spans of identical fiber, each followed by a loss-compensating amplifier."""
    fiber = fiber or FiberParams()
    lengths = [span_km] * n_spans if np.isscalar(span_km) else list(span_km)
    spans = []
    for i, length in enumerate(lengths):
        f = FiberParams(fiber.alpha_db_per_km, fiber.dispersion_D, fiber.gamma, float(length))
        els = ()
        if i > 0:
            g = gain_db if gain_db is not None else fiber.alpha_db_per_km * lengths[i - 1]
            els = (Amplifier(g, noise_figure_db),)
        spans.append(Span(f, els))
    g = gain_db if gain_db is not None else fiber.alpha_db_per_km * lengths[-1]
    return LinkSpec(tuple(spans), (Amplifier(g, noise_figure_db),))
