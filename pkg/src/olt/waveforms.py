"""Signal containers, unit conversions and frequency-domain primitives.

Propagation convention used everywhere in the package::

    dA/dz = -(alpha/2) A + j (beta2/2) d2A/dt2 - j (8/9) gamma (|Ax|^2 + |Ay|^2) A

with ``A(t) = sum_k A_k exp(+j w_k t)`` (numpy FFT ordering). Forward
dispersion over a length ``L`` therefore multiplies the spectrum by
``exp(-j (beta2/2) w^2 L)``. For anomalous fibers (beta2 < 0) higher
frequencies travel faster, and the Kerr term is self-focusing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.signal

C_NM_PER_PS = 299792.458  # speed of light [nm/ps]
C_M_PER_S = 299792458.0
PLANCK = 6.62607015e-34
PS2 = 1e-24  # ps^2 -> s^2

WAVEFORM_MAGIC = b"OLTW"
WAVEFORM_VERSION = 1
_HEADER = struct.Struct("<4sIQddd")


class InvalidInput(ValueError):
    """Raised when an operation receives arguments outside its domain."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Dual-polarization complex baseband samples in sqrt(W).

    Attributes
    ----------
    samples_x, samples_y : ndarray of complex128
        Field samples of the two polarization tributaries.
    sample_rate : float
        Sampling rate in Hz.
    center_frequency : float
        Optical carrier frequency in Hz.
    t0_offset : float
        Time of the first sample in seconds (alignment reference).
    """

    samples_x: np.ndarray
    samples_y: np.ndarray
    sample_rate: float
    center_frequency: float = 193.4e12
    t0_offset: float = 0.0

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples_x, dtype=np.complex128)
        y = np.ascontiguousarray(self.samples_y, dtype=np.complex128)
        if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
            raise InvalidInput("samples_x and samples_y must be 1-D with equal length")
        if x.size < 2:
            raise InvalidInput("waveform needs at least 2 samples")
        if not self.sample_rate > 0:
            raise InvalidInput("sample_rate must be positive")
        object.__setattr__(self, "samples_x", x)
        object.__setattr__(self, "samples_y", y)

    @classmethod
    def from_array(cls, samples, sample_rate, center_frequency=193.4e12, t0_offset=0.0):
        """Build from a ``(2, n)`` array."""
        samples = np.asarray(samples)
        return cls(samples[0], samples[1], float(sample_rate), float(center_frequency), float(t0_offset))

    @property
    def samples(self) -> np.ndarray:
        return np.stack([self.samples_x, self.samples_y])

    @property
    def n_samples(self) -> int:
        return self.samples_x.size

    def with_samples(self, samples) -> "Waveform":
        samples = np.asarray(samples)
        return replace(self, samples_x=samples[0], samples_y=samples[1])

    def power(self) -> np.ndarray:
        """Mean power per polarization in W."""
        return np.array([np.mean(np.abs(self.samples_x) ** 2), np.mean(np.abs(self.samples_y) ** 2)])

    def total_power(self) -> float:
        return float(self.power().sum())

    def frequencies(self) -> np.ndarray:
        """Baseband frequency of each FFT bin in Hz."""
        return np.fft.fftfreq(self.n_samples, d=1.0 / self.sample_rate)

    @property
    def wavelength_nm(self) -> float:
        return C_M_PER_S / self.center_frequency * 1e9


@dataclass(frozen=True)
class FiberParams:
    """Homogeneous fiber section.

    ``dispersion_D`` is in ps/nm/km, ``gamma`` in 1/(W km).
    """

    alpha_db_per_km: float = 0.2
    dispersion_D: float = 17.0
    gamma: float = 1.3
    length_km: float = 50.0

    def __post_init__(self):
        if self.alpha_db_per_km < 0:
            raise InvalidInput("alpha_db_per_km must be >= 0")
        if self.gamma < 0:
            raise InvalidInput("gamma must be >= 0")
        if not self.length_km > 0:
            raise InvalidInput("length_km must be > 0")

    @property
    def alpha_neper_per_km(self) -> float:
        """Power attenuation coefficient in 1/km."""
        return self.alpha_db_per_km * np.log(10.0) / 10.0

    def beta2(self, center_frequency: float) -> float:
        """GVD coefficient in ps^2/km at the given carrier frequency."""
        return dispersion_to_beta2(self.dispersion_D, center_frequency)


@dataclass(frozen=True)
class PositionGrid:
    """Uniform grid of cell centers covering ``[0, length_km]``."""

    z_positions: np.ndarray = field(repr=False)
    delta_z_km: float

    def __post_init__(self):
        z = np.asarray(self.z_positions, dtype=float)
        if z.ndim != 1 or z.size < 1:
            raise InvalidInput("grid needs at least one position")
        if not self.delta_z_km > 0:
            raise InvalidInput("delta_z_km must be > 0")
        if z.size > 1:
            steps = np.diff(z)
            if np.any(steps <= 0):
                raise InvalidInput("grid positions must be strictly increasing")
            if np.max(np.abs(steps - self.delta_z_km)) > 1e-9 * self.delta_z_km:
                raise InvalidInput("grid spacing must be uniform and equal to delta_z_km")
        object.__setattr__(self, "z_positions", z)

    @classmethod
    def uniform(cls, length_km: float, delta_z_km: float = 1.0) -> "PositionGrid":
        """Cells of (about) ``delta_z_km`` tiling ``[0, length_km]``.

        The spacing is adjusted so that an integer number of cells fits the
        length exactly.
        """
        if not length_km > 0 or not delta_z_km > 0:
            raise InvalidInput("length and spacing must be positive")
        n = max(1, int(round(length_km / delta_z_km)))
        dz = length_km / n
        return cls((np.arange(n) + 0.5) * dz, dz)

    @property
    def size(self) -> int:
        return self.z_positions.size

    @property
    def length_km(self) -> float:
        return float(self.z_positions[-1] + 0.5 * self.delta_z_km)

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.z_positions - 0.5 * self.delta_z_km, self.length_km)

    def same_as(self, other: "PositionGrid") -> bool:
        return (
            self.size == other.size
            and np.allclose(self.z_positions, other.z_positions, rtol=1e-9, atol=1e-12)
            and abs(self.delta_z_km - other.delta_z_km) <= 1e-9 * self.delta_z_km
        )


def dbm_to_watts(p_dbm):
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0) * 1e-3


def watts_to_dbm(p_w):
    p_w = np.asarray(p_w, dtype=float)
    if np.any(p_w <= 0):
        raise InvalidInput("power must be > 0 W to convert to dBm")
    return 10.0 * np.log10(p_w * 1e3)


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def dispersion_to_beta2(D, center_frequency):
    """D [ps/nm/km] -> beta2 [ps^2/km] at carrier ``center_frequency`` [Hz]."""
    lam_nm = C_M_PER_S / center_frequency * 1e9
    return -D * lam_nm**2 / (2 * np.pi * C_NM_PER_PS)


def beta2_to_dispersion(beta2, center_frequency):
    """Inverse of :func:`dispersion_to_beta2`."""
    lam_nm = C_M_PER_S / center_frequency * 1e9
    return -beta2 * 2 * np.pi * C_NM_PER_PS / lam_nm**2


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def dispersion_phase(freqs, beta2, length):
    """Spectral phase of forward dispersion, ``-(beta2/2) w^2 L`` in rad.

    ``beta2`` in ps^2/km, ``length`` in km, ``freqs`` in Hz.
    """
    w = 2 * np.pi * np.asarray(freqs)
    return -0.5 * beta2 * PS2 * length * w**2


def apply_dispersion(
    w: Waveform,
    beta2: float,
    length: float,
    sign: Literal["forward", "inverse"] = "forward",
) -> Waveform:
    """Apply (or undo) chromatic dispersion over ``length`` km.

    The whole capture goes through one FFT. Lengths that are not a power of
    two are zero-padded and trimmed back afterwards, which makes the
    operation non-circular for those lengths.
    """
    if length < 0:
        raise InvalidInput("length must be >= 0")
    if sign not in ("forward", "inverse"):
        raise InvalidInput(f"unknown sign {sign!r}")
    if length == 0 or beta2 == 0:
        return w
    n = w.n_samples
    nfft = _next_pow2(n)
    freqs = np.fft.fftfreq(nfft, d=1.0 / w.sample_rate)
    phase = dispersion_phase(freqs, beta2, length)
    if sign == "inverse":
        phase = -phase
    spec = np.fft.fft(w.samples, n=nfft, axis=-1)
    out = np.fft.ifft(spec * np.exp(1j * phase), axis=-1)[:, :n]
    return w.with_samples(out)


def rrc_response(freqs, symbol_rate: float, rolloff: float) -> np.ndarray:
    """Root-raised-cosine amplitude response with unit passband."""
    f = np.abs(np.asarray(freqs, dtype=float))
    f1 = (1 - rolloff) * symbol_rate / 2
    f2 = (1 + rolloff) * symbol_rate / 2
    h = np.zeros_like(f)
    h[f <= f1] = 1.0
    if rolloff > 0:
        band = (f > f1) & (f <= f2)
        h[band] = np.sqrt(0.5 * (1 + np.cos(np.pi / (rolloff * symbol_rate) * (f[band] - f1))))
    return h


def rrc_transfer(n: int, sample_rate: float, symbol_rate: float, rolloff: float) -> np.ndarray:
    """FFT-domain RRC response scaled to a unit-energy impulse response."""
    if not 0 <= rolloff <= 1:
        raise InvalidInput("rolloff must lie in [0, 1]")
    if sample_rate < (1 + rolloff) * symbol_rate * (1 - 1e-12):
        raise InvalidInput("sample rate too low for the RRC bandwidth")
    h = rrc_response(np.fft.fftfreq(n, d=1.0 / sample_rate), symbol_rate, rolloff)
    return h * np.sqrt(n / np.sum(h**2))


def rrc_filter(w: Waveform, symbol_rate: float, rolloff: float) -> Waveform:
    """Filter both tributaries with a root-raised-cosine response.

    Applied in the frequency domain over the whole (circular) capture.
    """
    h = rrc_transfer(w.n_samples, w.sample_rate, symbol_rate, rolloff)
    return w.with_samples(np.fft.ifft(np.fft.fft(w.samples, axis=-1) * h, axis=-1))


def _rate_ratio(old: float, new: float) -> Fraction:
    try:
        ratio = Fraction(new) / Fraction(old)
    except (OverflowError, ValueError) as exc:
        raise InvalidInput(f"cannot form a rational resampling ratio: {exc}") from None
    approx = ratio.limit_denominator(1 << 16)
    if abs(float(approx) - float(ratio)) > 1e-12 * float(ratio):
        raise InvalidInput(f"resampling ratio {float(ratio)!r} is not a small rational number")
    return approx


def resample(w: Waveform, new_rate: float) -> Waveform:
    """Band-limited (FFT) resampling to ``new_rate``.

    On decimation everything outside the new Nyquist band is discarded.
    """
    if not new_rate > 0:
        raise InvalidInput("new_rate must be > 0")
    ratio = _rate_ratio(w.sample_rate, new_rate)
    n_new = w.n_samples * ratio
    if n_new.denominator != 1:
        raise InvalidInput("capture length times resampling ratio must be an integer")
    n_new = int(n_new)
    if n_new == w.n_samples:
        return replace(w, sample_rate=float(new_rate))
    out = scipy.signal.resample(w.samples, n_new, axis=-1)
    return Waveform(out[0], out[1], float(new_rate), w.center_frequency, w.t0_offset)


def jones_matrix(theta: float, phi: float) -> np.ndarray:
    """Unitary basis rotation ``U(theta, phi)``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -np.exp(-1j * phi) * s], [np.exp(1j * phi) * s, c]])


def jones_rotate(w: Waveform, theta: float, phi: float, inverse: bool = False) -> Waveform:
    """Rotate the polarization basis; ``inverse`` applies ``U^dagger``."""
    u = jones_matrix(theta, phi)
    if inverse:
        u = u.conj().T
    return w.with_samples(u @ w.samples)


def write_waveform(path, w: Waveform) -> None:
    """Binary little-endian waveform file (magic ``OLTW``)."""
    data = np.empty((w.n_samples, 4), dtype="<f8")
    data[:, 0] = w.samples_x.real
    data[:, 1] = w.samples_x.imag
    data[:, 2] = w.samples_y.real
    data[:, 3] = w.samples_y.imag
    header = _HEADER.pack(
        WAVEFORM_MAGIC, WAVEFORM_VERSION, w.n_samples, w.sample_rate, w.center_frequency, w.t0_offset
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_waveform(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInput(f"{path}: truncated waveform header")
    magic, version, n, fs, fc, t0 = _HEADER.unpack_from(raw)
    if magic != WAVEFORM_MAGIC:
        raise InvalidInput(f"{path}: bad magic {magic!r}")
    if version != WAVEFORM_VERSION:
        raise InvalidInput(f"{path}: unsupported waveform version {version}")
    body = raw[_HEADER.size :]
    if len(body) != n * 32:
        raise InvalidInput(f"{path}: expected {n} samples, found {len(body) // 32}")
    data = np.frombuffer(body, dtype="<f8").reshape(n, 4)
    x = np.empty(n, dtype=np.complex128)
    y = np.empty(n, dtype=np.complex128)
    x.real, x.imag = data[:, 0], data[:, 1]
    y.real, y.imag = data[:, 2], data[:, 3]
    return Waveform(x, y, fs, fc, t0)
