"""Power-profile estimation from an aligned (received, reference) pair.

The received first-order nonlinear term is modeled as a superposition of
local nonlinear kernels, one per grid cell and polarization, and the
position-wise nonlinear coefficients are found by penalized least squares
on the real part of the normal equations.

Two details go beyond the bare model. Every vector is projected onto the
orthogonal complement of the (dispersed) linear term in its tributary: a
complex gain fitted at alignment absorbs the mean nonlinear phase rotation,
so that direction carries no usable information and must not be fitted.
Samples within one dispersion spread of either capture edge are dropped.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import scipy.fft as sfft
import scipy.linalg

from .rxdsp import AlignedPair
from .waveforms import (
    PS2,
    InvalidInput,
    PositionGrid,
    dispersion_phase,
    dispersion_to_beta2,
    rrc_transfer,
    watts_to_dbm,
)

MANAKOV = 8.0 / 9.0


class ConditioningError(np.linalg.LinAlgError):
    """The normal matrix is (numerically) singular."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of the profile estimator.

    Attributes
    ----------
    grid : PositionGrid
        Cells to estimate; its extent is taken as the link length.
    lambda_reg : float
        Tikhonov weight.
    reg_matrix : {"identity", "second_difference"}
    cd_coefficient : float
        Uniform dispersion coefficient D in ps/nm/km.
    gamma_nominal : float
        Nonlinear coefficient (1/W/km) used to convert coefficients to watts.
    mode : {"single_pol", "dual_pol"}
    beta2 : float or None
        Overrides the value derived from ``cd_coefficient`` (ps^2/km).
    edge_guard : "auto" or int
        Samples dropped at each capture edge.
    kernel_subsamples : int
        Sub-positions per cell used to integrate the kernel over the cell
        (1 = cell center only).
    max_block_bytes : int
        Memory budget for one block of model columns.
    """

    grid: PositionGrid = field(default_factory=lambda: PositionGrid.uniform(100.0, 1.0))
    lambda_reg: float = 0.0
    reg_matrix: Literal["identity", "second_difference"] = "identity"
    cd_coefficient: float = 17.0
    gamma_nominal: float = 1.3
    mode: Literal["single_pol", "dual_pol"] = "dual_pol"
    beta2: float | None = None
    edge_guard: int | Literal["auto"] = "auto"
    kernel_subsamples: int = 1
    max_block_bytes: int = 1 << 30

    def __post_init__(self):
        if not np.isfinite(self.lambda_reg) or self.lambda_reg < 0:
            raise InvalidInput("lambda_reg must be finite and >= 0")
        if self.reg_matrix not in ("identity", "second_difference"):
            raise InvalidInput(f"unknown reg_matrix {self.reg_matrix!r}")
        if self.mode not in ("single_pol", "dual_pol"):
            raise InvalidInput(f"unknown mode {self.mode!r}")
        if not self.gamma_nominal > 0:
            raise InvalidInput("gamma_nominal must be > 0")
        if self.kernel_subsamples < 1:
            raise InvalidInput("kernel_subsamples must be >= 1")

    @classmethod
    def for_length(cls, length_km: float, delta_z_km: float = 1.0, **kw) -> "EstimatorConfig":
        return cls(grid=PositionGrid.uniform(length_km, delta_z_km), **kw)

    @property
    def length_km(self) -> float:
        return self.grid.length_km

    @property
    def n_pol(self) -> int:
        return 2 if self.mode == "dual_pol" else 1

    def beta2_at(self, center_frequency: float) -> float:
        if self.beta2 is not None:
            return float(self.beta2)
        return float(dispersion_to_beta2(self.cd_coefficient, center_frequency))

    def with_(self, **changes) -> "EstimatorConfig":
        return replace(self, **changes)


@dataclass
class ProfileEstimate:
    """Estimated nonlinear coefficient profile.

    ``kind`` is ``"dual_pol"`` (per-polarization, 8/9 convention),
    ``"single_pol"`` (x only, no 8/9) or ``"pol_averaged"`` (mean of x and y,
    8/9 convention; ``gamma_prime_y`` is None).
    """

    grid: PositionGrid
    gamma_prime_x: np.ndarray
    gamma_prime_y: np.ndarray | None
    gamma_nominal: float
    kind: str = "dual_pol"
    basis: tuple[float, float] = (0.0, 0.0)
    diagnostics: dict = field(default_factory=dict)

    @property
    def _to_watts(self) -> float:
        if self.kind == "single_pol":
            return 1.0 / self.gamma_nominal
        return 1.0 / (MANAKOV * self.gamma_nominal)

    @property
    def power_x_w(self) -> np.ndarray:
        return self.gamma_prime_x * self._to_watts

    @property
    def power_y_w(self) -> np.ndarray | None:
        return None if self.gamma_prime_y is None else self.gamma_prime_y * self._to_watts

    @property
    def gamma_prime_total(self) -> np.ndarray:
        """Sum over polarizations (twice the value for a pol-averaged profile)."""
        if self.gamma_prime_y is not None:
            return self.gamma_prime_x + self.gamma_prime_y
        return 2 * self.gamma_prime_x if self.kind == "pol_averaged" else self.gamma_prime_x

    @property
    def power_w(self) -> np.ndarray:
        """Total (x + y) power estimate."""
        return self.gamma_prime_total * self._to_watts

    def gamma_prime(self, component: str = "x") -> np.ndarray:
        if component == "x" or self.gamma_prime_y is None:
            return self.gamma_prime_x
        if component == "y":
            return self.gamma_prime_y
        if component == "mean":
            return 0.5 * (self.gamma_prime_x + self.gamma_prime_y)
        if component == "total":
            return self.gamma_prime_total
        raise InvalidInput(f"unknown component {component!r}")

    def power_dbm(self, component: str = "total", floor_w: float = 1e-12) -> np.ndarray:
        """Power in dBm; non-positive estimates are clipped to ``floor_w`` for display."""
        if component == "total":
            p = self.power_w
        elif component == "x":
            p = self.power_x_w
        elif component == "y":
            p = self.power_y_w
        else:
            raise InvalidInput(f"unknown component {component!r}")
        return watts_to_dbm(np.maximum(p, floor_w))

    def to_csv(self, path) -> None:
        py = self.power_y_w
        gy = self.gamma_prime_y
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["z_km", "gamma_prime_x", "gamma_prime_y", "power_x_dbm", "power_y_dbm", "basis_theta", "basis_phi", "kind"])
            px_dbm = self.power_dbm("x")
            py_dbm = self.power_dbm("y") if py is not None else None
            for m, z in enumerate(self.grid.z_positions):
                wr.writerow(
                    [
                        repr(float(z)),
                        repr(float(self.gamma_prime_x[m])),
                        "" if gy is None else repr(float(gy[m])),
                        repr(float(px_dbm[m])),
                        "" if py_dbm is None else repr(float(py_dbm[m])),
                        repr(float(self.basis[0])),
                        repr(float(self.basis[1])),
                        self.kind,
                    ]
                )

    @classmethod
    def from_csv(cls, path, gamma_nominal: float) -> "ProfileEstimate":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise InvalidInput(f"{path}: no rows")
        z = np.array([float(r["z_km"]) for r in rows])
        gx = np.array([float(r["gamma_prime_x"]) for r in rows])
        gy = None
        if rows[0]["gamma_prime_y"] != "":
            gy = np.array([float(r["gamma_prime_y"]) for r in rows])
        dz = float(z[1] - z[0]) if z.size > 1 else 2 * float(z[0])
        kind = rows[0]["kind"]
        basis = (float(rows[0]["basis_theta"]), float(rows[0]["basis_phi"]))
        return cls(PositionGrid(z, dz), gx, gy, gamma_nominal, kind, basis)


@dataclass
class LinearModel:
    """Normal-equation pieces of the (projected, edge-trimmed) linear model.

    ``gram = Re[G^H G]`` and ``proj = Re[G^H A1]``; columns are ordered
    ``[x cells..., y cells...]`` in dual-pol mode. ``G``/``a1`` hold the real
    stacked form ``[Re; Im]`` when the model was materialized.
    """

    grid: PositionGrid
    mode: str
    gram: np.ndarray
    proj: np.ndarray
    imag_proj: np.ndarray
    a1_norm2: float
    a0_norm2: float
    n_rows: int
    guard: int
    G: np.ndarray | None = None
    a1: np.ndarray | None = None
    key: str | None = None

    def with_received(self, pair: AlignedPair, cfg: EstimatorConfig) -> "LinearModel":
        """Same (materialized) columns, right-hand side from ``pair``.

        ``pair`` must share this model's reference signal.
        """
        if self.G is None:
            raise InvalidInput("reusing a model needs materialized columns")
        if reference_key(pair, cfg) != self.key:
            raise InvalidInput("pair does not share the model's reference")
        ctx = _KernelContext(pair, cfg)
        a1_s, a0_norm2 = _residual(ctx)
        half = self.n_rows
        return replace(
            self,
            proj=self.G.T @ a1_s,
            imag_proj=self.G[:half].T @ a1_s[half:] - self.G[half:].T @ a1_s[:half],
            a1_norm2=float(a1_s @ a1_s),
            a0_norm2=a0_norm2,
            a1=a1_s,
        )

    @property
    def n_columns(self) -> int:
        return self.gram.shape[0]


# --- kernel --------------------------------------------------------------------------


class _KernelContext:
    """Frequency-domain quantities shared by all columns of one pair."""

    def __init__(self, pair: AlignedPair, cfg: EstimatorConfig):
        self.pair = pair
        self.cfg = cfg
        self.n = pair.n_samples
        self.length = cfg.length_km
        self.beta2 = cfg.beta2_at(pair.tx.center_frequency)
        freqs = sfft.fftfreq(self.n, d=1.0 / pair.sample_rate)
        self.phase1 = dispersion_phase(freqs, self.beta2, 1.0)  # per km
        npol = cfg.n_pol
        self.tx_spec = sfft.fft(pair.tx.samples[:npol], axis=-1)
        if pair.rx_filter is not None:
            f = pair.rx_filter
            self.h = rrc_transfer(self.n, pair.sample_rate, f.symbol_rate, f.rolloff)
        else:
            self.h = np.ones(self.n)
        self.guard = self._guard()
        self._projector = None
        if 2 * self.guard >= self.n:
            raise InvalidInput("capture too short for the dispersion edge guard")

    def _guard(self) -> int:
        g = self.cfg.edge_guard
        if g != "auto":
            return int(g)
        f = self.pair.rx_filter
        bw = (1 + f.rolloff) * f.symbol_rate if f is not None else self.pair.sample_rate
        spread = abs(self.beta2) * PS2 * self.length * 2 * np.pi * bw
        return int(math.ceil(spread * self.pair.sample_rate))

    def disperse(self, spec: np.ndarray, length: float) -> np.ndarray:
        return spec * np.exp(1j * self.phase1 * length)

    def a0(self, z: float) -> np.ndarray:
        """Dispersion-only reference at position ``z``."""
        return sfft.ifft(self.disperse(self.tx_spec, z), axis=-1)

    def sub_positions(self, z: float) -> np.ndarray:
        k = self.cfg.kernel_subsamples
        dz = self.cfg.grid.delta_z_km
        return z + ((np.arange(k) + 0.5) / k - 0.5) * dz

    def columns(self, z: float) -> tuple[np.ndarray, np.ndarray | None]:
        """Self and cross columns (full length, receiver frame) for cell ``z``."""
        npol = self.cfg.n_pol
        dz = self.cfg.grid.delta_z_km
        subs = self.sub_positions(z)
        acc_self = np.zeros((npol, self.n), dtype=complex)
        acc_cross = np.zeros((npol, self.n), dtype=complex) if npol == 2 else None
        for zs in subs:
            a = self.a0(min(max(zs, 0.0), self.length))
            p = a.real**2 + a.imag**2
            res = np.exp(1j * self.phase1 * (self.length - zs)) * self.h
            acc_self += sfft.fft(p * a, axis=-1) * res
            if npol == 2:
                acc_cross += sfft.fft(p[::-1] * a, axis=-1) * res
        scale = -1j * dz / len(subs)
        self_cols = sfft.ifft(acc_self, axis=-1) * scale
        cross_cols = None if acc_cross is None else sfft.ifft(acc_cross, axis=-1) * scale
        return self_cols, cross_cols

    def projector(self) -> "_Projector":
        if self._projector is None:
            sl = slice(self.guard, self.n - self.guard)
            self._projector = _Projector(self.linear_term()[:, sl])
        return self._projector

    def linear_term(self) -> np.ndarray:
        """Dispersed matched-filtered reference at the link end."""
        npol = self.cfg.n_pol
        return sfft.ifft(self.disperse(sfft.fft(self.pair.ref.samples[:npol], axis=-1), self.length), axis=-1)

    def received(self) -> np.ndarray:
        npol = self.cfg.n_pol
        return sfft.ifft(self.disperse(sfft.fft(self.pair.rx.samples[:npol], axis=-1), self.length), axis=-1)


def _check_position(z: float, cfg: EstimatorConfig) -> None:
    if not -1e-9 <= z <= cfg.length_km + 1e-9:
        raise InvalidInput(f"position {z} km outside [0, {cfg.length_km}] km")


def nli_kernel(pair: AlignedPair, z_m: float, cfg: EstimatorConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Self- and cross-polarization model columns for position ``z_m``.

    Returns ``(self_cols, cross_cols)``, each of shape ``(npol, n)``:
    ``self_cols[i] = -j dz H D_{z L}[|a_i|^2 a_i]`` and
    ``cross_cols[i] = -j dz H D_{z L}[|a_j|^2 a_i]`` with ``a = D_{0 z}[tx]``
    and ``H`` the receiver filter. ``cross_cols`` is None in single-pol mode.
    No edge trimming or projection is applied here.
    """
    _check_position(z_m, cfg)
    return _KernelContext(pair, cfg).columns(z_m)


class _Projector:
    """Removes each tributary's component along its linear term."""

    def __init__(self, linear: np.ndarray):
        self.u = linear / np.linalg.norm(linear, axis=-1, keepdims=True)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        coef = np.einsum("pt,p...t->p...", self.u.conj(), v)
        return v - coef[..., None] * self.u if v.ndim == 2 else v - coef[:, :, None] * self.u[:, None, :]


def projected_self_columns(pair: AlignedPair, positions, cfg: EstimatorConfig, pol: int = 0) -> np.ndarray:
    """Trimmed, projected self columns for tributary ``pol`` at ``positions``.

    Shape ``(len(positions), rows)``.
    """
    ctx = _KernelContext(pair, cfg)
    g = ctx.guard
    sl = slice(g, ctx.n - g)
    lin = ctx.linear_term()[pol : pol + 1, sl]
    proj = _Projector(lin)
    out = []
    for z in np.atleast_1d(positions):
        _check_position(float(z), cfg)
        s, _ = ctx.columns(float(z))
        out.append(proj(s[pol : pol + 1, sl])[0])
    return np.array(out)


def _stack(v: np.ndarray) -> np.ndarray:
    """Complex ``(npol, rows)`` -> real ``2 * npol * rows`` vector ``[Re; Im]``."""
    flat = v.reshape(-1)
    return np.concatenate([flat.real, flat.imag])


def _residual(ctx: _KernelContext) -> tuple[np.ndarray, float]:
    """Stacked, trimmed, projected ``A1`` and the squared norm of the linear term."""
    sl = slice(ctx.guard, ctx.n - ctx.guard)
    linear = ctx.linear_term()
    a1 = ctx.received() - linear
    return _stack(ctx.projector()(a1[:, sl])), float(np.sum(np.abs(linear[:, sl]) ** 2))


def reference_key(pair: AlignedPair, cfg: EstimatorConfig) -> str:
    """Digest of everything the model columns depend on."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pair.tx.samples).tobytes())
    h.update(np.ascontiguousarray(pair.ref.samples).tobytes())
    f = pair.rx_filter
    h.update(repr((pair.sample_rate, pair.tx.center_frequency, None if f is None else (f.symbol_rate, f.rolloff), cfg, cfg.grid.size, cfg.length_km)).encode())
    return h.hexdigest()


def _build_block(ctx: _KernelContext, proj: _Projector, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stacked-real columns for ``cells`` and their global column indices."""
    cfg = ctx.cfg
    npol = cfg.n_pol
    m_total = cfg.grid.size
    g = ctx.guard
    rows = ctx.n - 2 * g
    ncol = npol * len(cells)
    block = np.empty((2 * npol * rows, ncol))
    index = np.empty(ncol, dtype=int)
    for k, m in enumerate(cells):
        s, c = ctx.columns(float(cfg.grid.z_positions[m]))
        s = proj(s[:, g : ctx.n - g])
        if npol == 1:
            block[:, k] = _stack(s)
            index[k] = m
            continue
        c = proj(c[:, g : ctx.n - g])
        # gamma'_x drives self_x in x rows and cross_y (|a_x|^2 a_y) in y rows
        block[:, k] = _stack(np.stack([s[0], c[1]]))
        block[:, len(cells) + k] = _stack(np.stack([c[0], s[1]]))
        index[k] = m
        index[len(cells) + k] = m_total + m
    return block, index


def assemble_model(pair: AlignedPair, cfg: EstimatorConfig, materialize: bool | None = None) -> LinearModel:
    """Build ``Re[G^H G]`` and ``Re[G^H A1]`` for ``pair``.

    ``A1`` is the received signal minus the dispersed reference, both taken
    back to the link end. Columns are generated independently and the
    normal matrix is accumulated block by block; with ``materialize`` the
    full stacked ``G`` is kept (default: only when it fits in one block).
    """
    npol = cfg.n_pol
    if npol == 2 and not pair.active.all():
        raise InvalidInput("dual_pol mode needs power in both tributaries")
    ctx = _KernelContext(pair, cfg)
    g = ctx.guard
    rows = ctx.n - 2 * g
    proj = ctx.projector()
    a1_s, a0_norm2 = _residual(ctx)

    m = cfg.grid.size
    ncols = npol * m
    bytes_per_cell = 2 * npol * rows * npol * 8
    cells_per_block = max(1, int(cfg.max_block_bytes // bytes_per_cell))
    blocks = [np.arange(i, min(i + cells_per_block, m)) for i in range(0, m, cells_per_block)]
    if materialize is None:
        materialize = len(blocks) == 1
    if materialize and len(blocks) > 1:
        blocks = [np.arange(m)]

    gram = np.zeros((ncols, ncols))
    proj_v = np.zeros(ncols)
    imag_v = np.zeros(ncols)
    half = npol * rows
    a1_re, a1_im = a1_s[:half], a1_s[half:]
    G_full = None
    for bi, cells in enumerate(blocks):
        Gi, ii = _build_block(ctx, proj, cells)
        gram[np.ix_(ii, ii)] = Gi.T @ Gi
        proj_v[ii] = Gi.T @ a1_s
        imag_v[ii] = Gi[:half].T @ a1_im - Gi[half:].T @ a1_re
        for cells_j in blocks[bi + 1 :]:
            Gj, jj = _build_block(ctx, proj, cells_j)
            cross = Gi.T @ Gj
            gram[np.ix_(ii, jj)] = cross
            gram[np.ix_(jj, ii)] = cross.T
            del Gj
        if materialize:
            G_full = Gi
        del Gi
    gram = 0.5 * (gram + gram.T)
    return LinearModel(
        grid=cfg.grid,
        mode=cfg.mode,
        gram=gram,
        proj=proj_v,
        imag_proj=imag_v,
        a1_norm2=float(a1_s @ a1_s),
        a0_norm2=a0_norm2,
        n_rows=npol * rows,
        guard=g,
        G=G_full,
        a1=a1_s if materialize else None,
        key=reference_key(pair, cfg),
    )


def regularization_matrix(cfg: EstimatorConfig) -> np.ndarray:
    m = cfg.grid.size
    if cfg.reg_matrix == "identity":
        r = np.eye(m)
    else:
        d = np.diff(np.eye(m), n=2, axis=0)
        r = d.T @ d
    return scipy.linalg.block_diag(*([r] * cfg.n_pol))


def solve_profile(model: LinearModel, cfg: EstimatorConfig, basis: tuple[float, float] = (0.0, 0.0)) -> ProfileEstimate:
    """Solve ``(Re[G^H G] + lambda R) gamma' = Re[G^H A1]``.

    Negative coefficients are kept as they are.
    """
    if model.mode != cfg.mode or model.grid.size != cfg.grid.size:
        raise InvalidInput("model was assembled for a different configuration")
    a = model.gram + cfg.lambda_reg * regularization_matrix(cfg) if cfg.lambda_reg else model.gram.copy()
    eig = np.linalg.eigvalsh(a)
    lo, hi = float(eig[0]), float(eig[-1])
    if not hi > 0 or lo <= hi * 1e3 * np.finfo(float).eps:
        raise ConditioningError(f"normal matrix is singular: smallest eigenvalue {lo:.6g} (largest {hi:.6g})")
    gp = scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), model.proj)
    resid2 = model.a1_norm2 - 2 * gp @ model.proj + gp @ model.gram @ gp
    m = cfg.grid.size
    diag = {
        "residual_norm": float(np.sqrt(max(resid2, 0.0))),
        "a1_norm": float(np.sqrt(model.a1_norm2)),
        "a0_norm": float(np.sqrt(model.a0_norm2)),
        "condition": hi / lo,
        "min_eigenvalue": lo,
        "imag_projection_norm": float(np.linalg.norm(model.imag_proj)),
        "rows": model.n_rows,
        "edge_guard": model.guard,
    }
    if cfg.mode == "dual_pol":
        return ProfileEstimate(cfg.grid, gp[:m], gp[m:], cfg.gamma_nominal, "dual_pol", basis, diag)
    return ProfileEstimate(cfg.grid, gp, None, cfg.gamma_nominal, "single_pol", basis, diag)


def estimate(pair: AlignedPair, cfg: EstimatorConfig, basis: tuple[float, float] = (0.0, 0.0)) -> ProfileEstimate:
    """Profile estimate for one aligned pair."""
    return solve_profile(assemble_model(pair, cfg), cfg, basis)


class ProfileEstimator:
    """Estimator that keeps the model columns of the last reference signal.

    Captures of a repeated transmit pattern share their columns, so only the
    right-hand side is recomputed for them. Results are identical to
    :func:`estimate` up to floating-point summation order.
    """

    def __init__(self, cfg: EstimatorConfig):
        self.cfg = cfg
        self._model: LinearModel | None = None

    def __call__(self, pair: AlignedPair, basis: tuple[float, float] = (0.0, 0.0)) -> ProfileEstimate:
        m = self._model
        if m is not None and m.key == reference_key(pair, self.cfg):
            model = m.with_received(pair, self.cfg)
        else:
            model = assemble_model(pair, self.cfg)
            self._model = model if model.G is not None else None
        return solve_profile(model, self.cfg, basis)
