"""Transmit symbol and waveform generation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy.optimize import brentq

from .waveforms import InvalidInput, Waveform, dbm_to_watts, rrc_filter

ConstellationKind = Literal["qpsk", "qam16", "pcs_qam64", "gaussian"]
KINDS = ("qpsk", "qam16", "pcs_qam64", "gaussian")

# y tributary PRNG seed = seed XOR this constant
Y_STREAM_XOR = 0x5DEECE66D
PCS_TARGET_ENTROPY = 5.5  # bit/symbol
MIN_ESTIMATION_SYMBOLS = 4096


def square_qam(m: int) -> np.ndarray:
    """Square M-QAM points scaled to unit average energy under uniform use."""
    k = int(round(np.sqrt(m)))
    if k * k != m:
        raise InvalidInput(f"{m}-QAM is not square")
    levels = np.arange(-(k - 1), k, 2, dtype=float)
    pts = (levels[None, :] + 1j * levels[:, None]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def maxwell_boltzmann(points: np.ndarray, nu: float) -> np.ndarray:
    """Probabilities proportional to ``exp(-nu |x|^2)``."""
    w = np.exp(-nu * np.abs(points) ** 2)
    return w / w.sum()


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


@lru_cache(maxsize=None)
def nu_for_entropy(entropy_bits: float = PCS_TARGET_ENTROPY, m: int = 64) -> float:
    """MB exponent giving ``entropy_bits`` on unit-energy M-QAM."""
    pts = square_qam(m)
    if not 0 < entropy_bits < np.log2(m):
        raise InvalidInput("target entropy must lie strictly between 0 and log2(M)")
    return brentq(lambda nu: _entropy_bits(maxwell_boltzmann(pts, nu)) - entropy_bits, 0.0, 50.0, xtol=1e-14)


@dataclass(frozen=True)
class ConstellationSpec:
    kind: ConstellationKind = "pcs_qam64"
    shaping_nu: float | None = None  # None: nu reaching PCS_TARGET_ENTROPY
    unit_energy: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown constellation kind {self.kind!r}")
        if self.shaping_nu is not None and self.shaping_nu < 0:
            raise InvalidInput("shaping_nu must be >= 0")

    @property
    def nu(self) -> float:
        if self.kind != "pcs_qam64":
            return 0.0
        return nu_for_entropy() if self.shaping_nu is None else float(self.shaping_nu)

    def alphabet(self) -> tuple[np.ndarray, np.ndarray]:
        """Points and their probabilities (discrete kinds only)."""
        if self.kind == "qpsk":
            pts = square_qam(4)
        elif self.kind == "qam16":
            pts = square_qam(16)
        elif self.kind == "pcs_qam64":
            pts = square_qam(64)
        else:
            raise InvalidInput("gaussian constellation has no discrete alphabet")
        probs = maxwell_boltzmann(pts, self.nu)
        if self.unit_energy:
            pts = pts / np.sqrt(np.sum(probs * np.abs(pts) ** 2))
        return pts, probs


@dataclass(frozen=True)
class TxConfig:
    """Transmitter settings. ``launch_power_dbm`` is total (x+y) channel power."""

    constellation: ConstellationSpec = field(default_factory=ConstellationSpec)
    symbol_rate: float = 128e9
    oversampling: int = 8
    rolloff: float = 0.1
    n_symbols: int = 1 << 16
    launch_power_dbm: float = 3.0
    seed: int = 0
    center_frequency: float = 193.4e12

    def __post_init__(self):
        if int(self.oversampling) != self.oversampling or self.oversampling < 2:
            raise InvalidInput("oversampling must be an integer >= 2")
        if not self.symbol_rate > 0:
            raise InvalidInput("symbol_rate must be > 0")
        if not 0 <= self.rolloff <= 1:
            raise InvalidInput("rolloff must lie in [0, 1]")
        if self.n_symbols < 0 or int(self.n_symbols) != self.n_symbols:
            raise InvalidInput("n_symbols must be a non-negative integer")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInput("seed must fit in an unsigned 64-bit integer")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * self.oversampling

    def with_(self, **changes) -> "TxConfig":
        return replace(self, **changes)


def _stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.MT19937(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _draw(spec: ConstellationSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.kind == "gaussian":
        s = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
        if spec.unit_energy and n:
            s = s / np.sqrt(np.mean(np.abs(s) ** 2))
        return s
    pts, probs = spec.alphabet()
    return pts[rng.choice(pts.size, size=n, p=probs)]


def generate_symbols(cfg: TxConfig) -> np.ndarray:
    """Dual-polarization symbols, shape ``(2, n_symbols)``.

    x and y come from separate Mersenne-twister streams seeded with
    ``seed`` and ``seed ^ Y_STREAM_XOR``.
    """
    if cfg.constellation.kind not in KINDS:
        raise InvalidInput(f"unknown constellation kind {cfg.constellation.kind!r}")
    n = int(cfg.n_symbols)
    x = _draw(cfg.constellation, _stream(cfg.seed), n)
    y = _draw(cfg.constellation, _stream(int(cfg.seed) ^ Y_STREAM_XOR), n)
    return np.stack([x, y])


def shape_symbols(symbols: np.ndarray, cfg: TxConfig, oversampling: int | None = None) -> Waveform:
    """Upsample and RRC-shape symbols, scaled to the configured launch power."""
    os_ = int(cfg.oversampling if oversampling is None else oversampling)
    n = symbols.shape[1]
    up = np.zeros((2, n * os_), dtype=np.complex128)
    up[:, ::os_] = symbols
    w = Waveform(up[0], up[1], cfg.symbol_rate * os_, cfg.center_frequency)
    w = rrc_filter(w, cfg.symbol_rate, cfg.rolloff)
    p = w.total_power()
    if p <= 0:
        raise InvalidInput("shaped waveform has zero power")
    return w.with_samples(w.samples * np.sqrt(dbm_to_watts(cfg.launch_power_dbm) / p))


def build_tx_waveform(cfg: TxConfig, oversampling: int | None = None) -> Waveform:
    """Shaped transmit waveform for ``cfg``.

    ``oversampling`` overrides ``cfg.oversampling``; the same symbols are
    used, so e.g. a 2 samples/symbol reference matches the simulated signal.
    """
    if cfg.n_symbols == 0:
        raise InvalidInput("n_symbols must be > 0")
    if cfg.n_symbols < MIN_ESTIMATION_SYMBOLS:
        warnings.warn(
            f"{cfg.n_symbols} symbols is below the {MIN_ESTIMATION_SYMBOLS} recommended for estimation",
            stacklevel=2,
        )
    return shape_symbols(generate_symbols(cfg), cfg, oversampling)
