"""Receiver conditioning: demodulation and data-aided alignment.

Adaptive equalization is not needed for simulated captures (no SOP drift,
frequency offset or phase noise), so an ideal alignment step produces the
(received, reference) pair directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .txgen import TxConfig
from .waveforms import (
    InvalidInput,
    Waveform,
    apply_dispersion,
    dispersion_to_beta2,
    resample,
    rrc_filter,
)

MIN_CORRELATION = 0.5


class AlignmentError(RuntimeError):
    """The received and reference signals could not be matched."""


@dataclass(frozen=True)
class RxFilter:
    """Receiver matched filter, applied to model columns as well."""

    symbol_rate: float
    rolloff: float

    def apply(self, w: Waveform) -> Waveform:
        return rrc_filter(w, self.symbol_rate, self.rolloff)


@dataclass(frozen=True, eq=False)
class AlignedPair:
    """Synchronized received / reference waveforms at the receiver.

    Attributes
    ----------
    rx : Waveform
        CD-compensated, matched-filtered received signal, divided by the
        per-polarization complex gain so that it lines up with ``ref``.
    ref : Waveform
        Matched-filtered transmit reference, lag-aligned with ``rx``.
    scale : ndarray of complex, shape (2,)
        Least-squares gain of the raw received tributaries against ``ref``;
        ``|scale|**2`` converts normalized units back to received watts.
    tx : Waveform
        Transmit-shaped reference (before the matched filter) normalized to
        unit mean power per polarization. The tomography model is built from
        this signal.
    rx_filter : RxFilter or None
        Filter relating ``tx`` to ``ref``; ``None`` means ``ref == tx``.
    lag : int
        Integer lag applied to the reference.
    correlation : ndarray, shape (2,)
        Normalized correlation peak per tributary.
    """

    rx: Waveform
    ref: Waveform
    scale: np.ndarray
    tx: Waveform
    rx_filter: RxFilter | None = None
    lag: int = 0
    correlation: np.ndarray | None = None

    def __post_init__(self):
        if self.rx.n_samples != self.ref.n_samples or self.rx.n_samples != self.tx.n_samples:
            raise InvalidInput("pair members must have equal lengths")
        if not (self.rx.sample_rate == self.ref.sample_rate == self.tx.sample_rate):
            raise InvalidInput("pair members must share a sample rate")

    @property
    def sample_rate(self) -> float:
        return self.rx.sample_rate

    @property
    def n_samples(self) -> int:
        return self.rx.n_samples

    @property
    def active(self) -> np.ndarray:
        """Which tributaries carry signal."""
        return self.tx.power() > 0

    def rotated(self, theta: float, phi: float) -> "AlignedPair":
        """Same pair seen in another polarization basis (re-normalized)."""
        from .waveforms import jones_rotate

        return align(
            jones_rotate(self.rx, theta, phi),
            jones_rotate(self.ref, theta, phi),
            tx=jones_rotate(self.tx, theta, phi),
            rx_filter=self.rx_filter,
        )

    def swapped(self) -> "AlignedPair":
        """x and y exchanged in every member."""

        def sw(w):
            return w.with_samples(w.samples[::-1])

        return AlignedPair(
            sw(self.rx), sw(self.ref), self.scale[::-1].copy(), sw(self.tx), self.rx_filter, self.lag,
            None if self.correlation is None else self.correlation[::-1].copy(),
        )


def demodulate(rx_raw: Waveform, link_total_cd: float, cfg: TxConfig) -> Waveform:
    """Resample to 2 samples/symbol, compensate ``link_total_cd`` [ps/nm], matched-filter."""
    if rx_raw.n_samples < 2:
        raise InvalidInput("empty capture")
    w = resample(rx_raw, 2 * cfg.symbol_rate)
    beta2_l = dispersion_to_beta2(link_total_cd, w.center_frequency)  # ps^2
    if beta2_l != 0:
        w = apply_dispersion(w, beta2_l, 1.0, sign="inverse")
    return rrc_filter(w, cfg.symbol_rate, cfg.rolloff)


def _circular_xcorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[k] = sum_t a[t] conj(b[t - k])``."""
    return np.fft.ifft(np.fft.fft(a) * np.conj(np.fft.fft(b)))


def find_lag(rx: Waveform, ref: Waveform) -> int:
    """Integer lag ``k`` such that ``rx[t] ~ ref[t - k]``."""
    acc = np.zeros(rx.n_samples)
    for a, b in zip(rx.samples, ref.samples):
        if np.any(b):
            acc += np.abs(_circular_xcorr(a, b))
    k = int(np.argmax(acc))
    return k if k <= rx.n_samples // 2 else k - rx.n_samples


def _norm_corr(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.abs(np.vdot(b, a)) / (na * nb))


def align(
    rx: Waveform,
    ref: Waveform,
    tx: Waveform | None = None,
    rx_filter: RxFilter | None = None,
) -> AlignedPair:
    """Lag-align ``ref`` (and ``tx``) to ``rx`` and normalize the pair.

    ``tx`` defaults to ``ref``. Each active tributary of ``tx`` is scaled to
    unit mean power (``ref`` gets the same factor); each tributary of ``rx``
    is divided by its least-squares complex gain against ``ref`` so that
    ``<rx, ref>`` is real and positive.
    """
    if rx.sample_rate != ref.sample_rate:
        raise InvalidInput("rx and ref sample rates differ")
    if rx.n_samples != ref.n_samples:
        raise InvalidInput("rx and ref lengths differ")
    tx = ref if tx is None else tx
    lag = find_lag(rx, ref)
    ref_s = np.roll(ref.samples, lag, axis=-1)
    tx_s = np.roll(tx.samples, lag, axis=-1)
    rx_s = rx.samples.copy()

    p_tx = np.mean(np.abs(tx_s) ** 2, axis=-1)
    active = p_tx > 0
    if not np.any(active):
        raise AlignmentError("reference carries no power")
    corr = np.zeros(2)
    scale = np.zeros(2, dtype=complex)
    for i in range(2):
        if not active[i]:
            continue
        k = 1.0 / np.sqrt(p_tx[i])
        tx_s[i] *= k
        ref_s[i] *= k
        corr[i] = _norm_corr(rx_s[i], ref_s[i])
        if corr[i] < MIN_CORRELATION:
            raise AlignmentError(f"correlation peak {corr[i]:.3f} on tributary {'xy'[i]} below {MIN_CORRELATION}")
        scale[i] = np.vdot(ref_s[i], rx_s[i]) / np.vdot(ref_s[i], ref_s[i]).real
        rx_s[i] = rx_s[i] / scale[i]
    if active.all():
        cross = max(_norm_corr(rx_s[0], ref_s[1]), _norm_corr(rx_s[1], ref_s[0]))
        if cross >= corr.min():
            raise AlignmentError("polarization tributaries do not map onto the reference identically")
    t0 = rx.t0_offset
    return AlignedPair(
        rx.with_samples(rx_s),
        Waveform(ref_s[0], ref_s[1], ref.sample_rate, ref.center_frequency, t0),
        scale,
        Waveform(tx_s[0], tx_s[1], tx.sample_rate, tx.center_frequency, t0),
        rx_filter,
        lag,
        corr,
    )


def reference_pair(tx_ref: Waveform, rx_filter: RxFilter | None = None) -> AlignedPair:
    """Pair whose received signal is the (filtered) reference itself.

    Useful when only the model columns are of interest.
    """
    ref = rx_filter.apply(tx_ref) if rx_filter else tx_ref
    return align(ref, ref, tx=tx_ref, rx_filter=rx_filter)


def prepare_pair(rx_raw: Waveform, tx: Waveform, link_total_cd: float, cfg: TxConfig) -> AlignedPair:
    """Demodulate a capture and align it against the transmit waveform.

    ``tx`` is the transmitted waveform at any oversampling; it is resampled
    to 2 samples/symbol to form the data-aided reference.
    """
    rx = demodulate(rx_raw, link_total_cd, cfg)
    tx2 = resample(tx, 2 * cfg.symbol_rate)
    filt = RxFilter(cfg.symbol_rate, cfg.rolloff)
    return align(rx, filt.apply(tx2), tx=tx2, rx_filter=filt)
