"""Signal preprocessing: zero-phase FIR filtering, resampling, z-scoring,
and gammatone-based broadband envelope extraction.

The EEG path is average reference -> 0.5-32 Hz band-pass -> resample to
64 Hz -> global z-score. The audio path replaces the reference step with
gammatone sub-band envelope extraction (power-law compressed, summed) and
then runs the same band-pass/resample/z-score chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np
from scipy.signal import fftconvolve, firwin, gammatone, lfilter, resample_poly

from .bundles import TrialBundle
from .errors import ConfigurationError, ContractError, DegenerateInputError

TARGET_FS = 64.0
EEG_BAND = (0.5, 32.0)

# Hamming window: ~53 dB stopband, normalized transition width ~3.3/numtaps
_HAMMING_TRANSITION = 3.3


@dataclass
class FirFilter:
    """Linear-phase FIR filter: odd, symmetric tap vector."""

    taps: np.ndarray
    fs: float
    band: Tuple[float, float]

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or len(self.taps) % 2 == 0:
            raise ConfigurationError("FIR taps must be a 1-d odd-length vector")
        if not np.allclose(self.taps, self.taps[::-1], atol=1e-12):
            raise ConfigurationError("FIR taps must be symmetric (linear phase)")

    @property
    def group_delay(self) -> int:
        return (len(self.taps) - 1) // 2

    def response_db(self, freqs) -> np.ndarray:
        """Magnitude response in dB at the given frequencies (Hz)."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
        n = np.arange(len(self.taps))
        phases = np.exp(-2j * np.pi * np.outer(freqs, n) / self.fs)
        mag = np.abs(phases @ self.taps)
        return 20.0 * np.log10(np.maximum(mag, 1e-300))


def _odd(n: int) -> int:
    n = int(math.ceil(n))
    return n if n % 2 == 1 else n + 1


def design_bandpass(low: float, high: float, fs: float,
                    transition: float = 0.5) -> FirFilter:
    """Hamming windowed-sinc band-pass with >= 50 dB stopbands.

    Stopband edges sit at low - transition and high + transition. A `high`
    at or above Nyquist degenerates to a high-pass (the upper edge becomes
    inactive), which covers band limits like 32 Hz at fs = 64.
    """
    if not (0.0 < low < high) or low >= fs / 2 or transition <= 0:
        raise ConfigurationError(
            f"infeasible band ({low}, {high}) Hz at fs={fs} Hz")
    numtaps = _odd(_HAMMING_TRANSITION * fs / transition)
    if high >= fs / 2 * (1.0 - 1e-9):
        taps = firwin(numtaps, low, pass_zero=False, fs=fs, window="hamming")
    else:
        taps = firwin(numtaps, [low, high], pass_zero=False, fs=fs, window="hamming")
    return FirFilter(taps=taps, fs=fs, band=(low, high))


def design_lowpass(cutoff: float, fs: float, transition: float) -> FirFilter:
    if not 0.0 < cutoff < fs / 2 or transition <= 0:
        raise ConfigurationError(f"infeasible low-pass {cutoff} Hz at fs={fs}")
    numtaps = _odd(_HAMMING_TRANSITION * fs / transition)
    taps = firwin(numtaps, cutoff, fs=fs, window="hamming")
    return FirFilter(taps=taps, fs=fs, band=(0.0, cutoff))


def _zero_phase(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Forward-backward FIR application with reflection padding.

    For symmetric taps the forward-backward pass equals convolution with
    the tap autocorrelation (squared magnitude response, zero net phase).
    """
    n = len(taps)
    T = x.shape[0]
    pad = min(n, T - 1)
    xp = np.pad(x, ((pad, pad),) + ((0, 0),) * (x.ndim - 1), mode="reflect")
    g = np.convolve(taps, taps)
    shape = (len(g),) + (1,) * (x.ndim - 1)
    y = fftconvolve(xp, g.reshape(shape), mode="full", axes=0)
    start = (n - 1) + pad
    return y[start:start + T]


def filt_zero_phase(x: np.ndarray, f: FirFilter) -> np.ndarray:
    """Zero-phase filtering of a (T,) or (T, C) signal; length preserved."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= 3 * len(f.taps):
        raise ContractError(
            f"signal length {x.shape[0]} must exceed 3x filter length {len(f.taps)}")
    return _zero_phase(x, f.taps)


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Anti-aliased polyphase resampling to a lower rate.

    Low-passes at 0.45 * fs_out (Hamming, transition 0.1 * fs_out), then
    applies rational-ratio polyphase resampling with reflection padding so
    edges stay clean. Output length is round(T * fs_out / fs_in).
    """
    x = np.asarray(x, dtype=np.float64)
    if fs_out > fs_in:
        raise ConfigurationError(f"resample only reduces rate ({fs_in} -> {fs_out})")
    ratio = Fraction(fs_out).limit_denominator(10 ** 6) / Fraction(fs_in).limit_denominator(10 ** 6)
    if ratio.denominator > 10000:
        raise ConfigurationError(
            f"rate ratio {fs_out}/{fs_in} is not a small rational number")
    up, down = ratio.numerator, ratio.denominator
    T = x.shape[0]
    n_out = int(round(T * fs_out / fs_in))
    if up == down:
        return x.copy()
    cutoff = 0.45 * fs_out
    trans = 0.1 * fs_out
    fs_up = fs_in * up
    numtaps = _odd(_HAMMING_TRANSITION * fs_up / trans)
    taps = firwin(numtaps, cutoff, fs=fs_up, window="hamming")
    # reflect-pad by a multiple of `down` input samples so the output grid
    # shifts by the integer amount m * up
    m = int(math.ceil(numtaps / up / down))
    pad = m * down
    if pad >= T:
        raise ContractError(
            f"signal too short to resample: needs > {pad} samples, has {T}")
    xp = np.pad(x, ((pad, pad),) + ((0, 0),) * (x.ndim - 1), mode="reflect")
    y = resample_poly(xp, up, down, axis=0, window=taps)
    out = y[m * up: m * up + n_out]
    if out.shape[0] != n_out:
        raise ContractError("resample produced unexpected length")
    return out


def zscore(x: np.ndarray) -> np.ndarray:
    """Standardize over all values at once (single global mean/std).

    Uses the population (1/N) standard deviation; a globally constant
    input is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateInputError("z-score of a globally constant signal")
    return (x - mu) / sd


def erb_bandwidth(freq_hz: float) -> float:
    """Glasberg-Moore equivalent rectangular bandwidth in Hz."""
    return 24.7 * (4.37 * freq_hz / 1000.0 + 1.0)


def _erb_number(freq_hz):
    return 21.4 * np.log10(1.0 + 0.00437 * freq_hz)


def _erb_number_inv(n):
    return (10.0 ** (n / 21.4) - 1.0) / 0.00437


@dataclass
class GammatoneBank:
    """4th-order gammatone filterbank on the ERB-number scale."""

    center_frequencies: np.ndarray
    bandwidths: np.ndarray
    fs: float
    order: int = 4

    def __post_init__(self):
        cf = np.asarray(self.center_frequencies, dtype=np.float64)
        if not np.all(np.diff(cf) > 0):
            raise ConfigurationError("center frequencies must be strictly increasing")
        if cf[0] < 150.0 - 1e-9 or cf[-1] > 4000.0 + 1e-9:
            raise ConfigurationError("center frequencies must lie within [150, 4000] Hz")
        if self.fs < 2.0 * cf[-1]:
            raise ConfigurationError(
                f"fs={self.fs} too low for top band at {cf[-1]:.0f} Hz")
        self.center_frequencies = cf
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64)


def build_gammatone_bank(fs: float, low: float = 150.0, high: float = 4000.0,
                         step_erbs: float = 1.0) -> GammatoneBank:
    """One filter per ERB step from `low` up to (at most) `high`."""
    if fs < 8000.0:
        raise ConfigurationError(f"gammatone bank needs fs >= 8000 Hz, got {fs}")
    n_lo, n_hi = _erb_number(low), _erb_number(high)
    steps = np.arange(n_lo, n_hi + 1e-9, step_erbs)
    centers = _erb_number_inv(steps)
    centers[0] = low
    return GammatoneBank(center_frequencies=centers,
                         bandwidths=erb_bandwidth(centers), fs=fs)


def gammatone_envelope(audio: np.ndarray, bank: GammatoneBank) -> np.ndarray:
    """Broadband envelope: per-band gammatone -> half-wave rectification ->
    150 Hz low-pass -> power-law compression (0.6) -> sum over bands.

    The rectify+low-pass stage replaces an analytic-signal magnitude; the
    downstream 0.5-32 Hz filtering makes the difference immaterial. Output
    is non-negative.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ConfigurationError("gammatone_envelope expects a 1-d waveform")
    lp = design_lowpass(150.0, bank.fs, transition=100.0)
    if audio.shape[0] <= 3 * len(lp.taps):
        raise ContractError("audio too short for envelope smoothing filter")
    env = np.zeros_like(audio)
    for fc in bank.center_frequencies:
        b, a = gammatone(fc, "iir", fs=bank.fs)
        sub = lfilter(b, a, audio)
        rect = np.maximum(sub, 0.0)
        smooth = np.maximum(_zero_phase(rect, lp.taps), 0.0)
        env += smooth ** 0.6
    return env


def average_reference(eeg: np.ndarray) -> np.ndarray:
    """Subtract the per-sample mean across channels."""
    eeg = np.asarray(eeg, dtype=np.float64)
    if eeg.ndim != 2:
        raise ConfigurationError("average_reference expects (T, C)")
    return eeg - eeg.mean(axis=1, keepdims=True)


def preprocess_eeg(raw_eeg: np.ndarray, fs_eeg: float,
                   transition: float = 0.5) -> np.ndarray:
    """Average reference -> band-pass 0.5-32 -> resample 64 -> z-score."""
    bp = design_bandpass(*EEG_BAND, fs=fs_eeg, transition=transition)
    x = average_reference(raw_eeg)
    x = filt_zero_phase(x, bp)
    x = resample(x, fs_eeg, TARGET_FS)
    return zscore(x)


def preprocess_audio(audio: np.ndarray, fs_audio: float, *,
                     audio_kind: str = "waveform",
                     bank: Optional[GammatoneBank] = None,
                     transition: float = 0.5) -> np.ndarray:
    """Envelope extraction (waveforms only) -> band-pass -> resample -> z-score."""
    x = np.asarray(audio, dtype=np.float64)
    if audio_kind == "waveform":
        bank = bank or build_gammatone_bank(fs_audio)
        x = gammatone_envelope(x, bank)
    elif audio_kind != "envelope":
        raise ConfigurationError(f"unknown audio_kind {audio_kind!r}")
    bp = design_bandpass(*EEG_BAND, fs=fs_audio, transition=transition)
    x = filt_zero_phase(x, bp)
    x = resample(x, fs_audio, TARGET_FS)
    return zscore(x)


def preprocess_trial(raw_eeg: np.ndarray, fs_eeg: float,
                     raw_audio_pair, fs_audio: float, *,
                     audio_kind: str = "waveform",
                     bank: Optional[GammatoneBank] = None,
                     subject_id: str = "s0", trial_id: str = "t0",
                     audio_id_attended: str = "audA",
                     audio_id_unattended: str = "audB",
                     attended: str = "A") -> TrialBundle:
    """Run the full pipeline on one trial and assemble a 64 Hz bundle.

    `raw_audio_pair` is (candidate A, candidate B) in presentation order;
    the attended label says which one carries `audio_id_attended`.
    """
    eeg = preprocess_eeg(raw_eeg, fs_eeg)
    env_a = preprocess_audio(raw_audio_pair[0], fs_audio,
                             audio_kind=audio_kind, bank=bank)
    env_b = preprocess_audio(raw_audio_pair[1], fs_audio,
                             audio_kind=audio_kind, bank=bank)
    n = min(len(eeg), len(env_a), len(env_b))
    return TrialBundle(
        subject_id=subject_id, trial_id=trial_id,
        audio_id_attended=audio_id_attended,
        audio_id_unattended=audio_id_unattended,
        eeg=eeg[:n], env_a=env_a[:n], env_b=env_b[:n],
        attended=attended, fs=TARGET_FS)
