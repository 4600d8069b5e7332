"""Synthetic cocktail-party cohorts with known ground truth.

A linear forward model maps the attended envelope through a temporal
response kernel onto a spatial mixing vector, adds a weaker independent
distractor pathway, and buries both in white sensor noise at a requested
SNR. Envelope content is keyed to the audio identifier, so two trials that
share an attended audio id really do share the signal (which is what makes
the harness leakage rules meaningful).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .bundles import TrialBundle
from .dsp import zscore
from .errors import ConfigurationError, ContractError

FS = 64.0
KERNEL_TAPS = 26  # 0..400 ms at 64 Hz


def _gamma_bump(taps: int, shape: float, scale_s: float, fs: float) -> np.ndarray:
    t = np.arange(taps) / fs
    g = t ** (shape - 1.0) * np.exp(-t / scale_s)
    return g / g.max()


def response_kernel(fs: float = FS, taps: int = KERNEL_TAPS) -> np.ndarray:
    """Difference-of-Gammas impulse response peaking near 125 ms.

    The positive deflection is deliberately sharp (about one sample wide at
    64 Hz): a smoother kernel suppresses the upper half of the 0.5-16 Hz
    envelope band and caps noiseless ridge reconstruction around r=0.91,
    well short of its verification target.
    """
    h = _gamma_bump(taps, 80.0, 0.0015, fs) - 0.35 * _gamma_bump(taps, 6.0, 0.040, fs)
    return h / np.linalg.norm(h)


def distractor_kernel(fs: float = FS, taps: int = KERNEL_TAPS) -> np.ndarray:
    h = _gamma_bump(taps, 3.0, 0.060, fs) - 0.4 * _gamma_bump(taps, 6.0, 0.045, fs)
    return h / np.linalg.norm(h)


@dataclass
class ForwardModel:
    """Per-subject generative parameters."""

    spatial: np.ndarray
    kernel: np.ndarray
    snr_db: float
    distractor_gain: float
    spatial_distractor: np.ndarray
    kernel_distractor: np.ndarray

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=np.float64)
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.spatial_distractor = np.asarray(self.spatial_distractor, dtype=np.float64)
        self.kernel_distractor = np.asarray(self.kernel_distractor, dtype=np.float64)
        if np.linalg.norm(self.spatial) == 0:
            raise ConfigurationError("spatial mixing vector must be nonzero")
        if len(self.kernel) > int(0.4 * FS) + 1:
            raise ConfigurationError("kernel support must stay within 0..400 ms")

    @property
    def n_channels(self) -> int:
        return len(self.spatial)


def _audio_seed(audio_id: str) -> int:
    return zlib.crc32(audio_id.encode("utf-8"))


def gen_envelope(duration_s: float, seed: int, fs: float = FS) -> np.ndarray:
    """Band-limited (0.5-16 Hz) non-negative modulated noise, z-scored.

    Band limiting happens in the frequency domain so any duration >= 2 s
    works; the envelope is shifted non-negative before the final z-score.
    """
    if duration_s < 2.0:
        raise ContractError("envelope duration must be at least 2 s")
    n = int(round(duration_s * fs))
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < 0.5) | (freqs > 16.0)] = 0.0
    x = np.fft.irfft(spec, n)
    x = x - x.min()  # non-negative modulation depth
    return zscore(x)


def gen_trial(fm: ForwardModel, duration_s: float, seed: int, *,
              subject_id: str = "s00", trial_id: Optional[str] = None,
              audio_id_attended: Optional[str] = None,
              audio_id_unattended: Optional[str] = None,
              fs: float = FS) -> TrialBundle:
    """One trial: EEG from the forward model plus the two candidate
    envelopes with a randomized presentation slot."""
    rng = np.random.default_rng(seed)
    trial_id = trial_id or f"t{seed:08d}"
    audio_id_attended = audio_id_attended or f"aud{seed:08d}a"
    audio_id_unattended = audio_id_unattended or f"aud{seed:08d}b"
    if audio_id_attended == audio_id_unattended:
        raise ConfigurationError("attended and unattended audio ids must differ")
    s_att = gen_envelope(duration_s, _audio_seed(audio_id_attended), fs)
    s_un = gen_envelope(duration_s, _audio_seed(audio_id_unattended), fs)
    T = len(s_att)
    resp_att = np.convolve(s_att, fm.kernel)[:T]
    resp_un = np.convolve(s_un, fm.kernel_distractor)[:T]
    clean = np.outer(resp_att, fm.spatial)
    clean += fm.distractor_gain * np.outer(resp_un, fm.spatial_distractor)
    p_signal = np.mean(clean ** 2)
    if np.isfinite(fm.snr_db):
        sigma = np.sqrt(p_signal / 10.0 ** (fm.snr_db / 10.0))
    else:
        sigma = 0.0
    eeg = clean + sigma * rng.standard_normal(clean.shape)
    attended = "A" if rng.random() < 0.5 else "B"
    env_a, env_b = (s_att, s_un) if attended == "A" else (s_un, s_att)
    return TrialBundle(
        subject_id=subject_id, trial_id=trial_id,
        audio_id_attended=audio_id_attended,
        audio_id_unattended=audio_id_unattended,
        eeg=eeg, env_a=env_a, env_b=env_b, attended=attended, fs=fs)


@dataclass
class CohortSpec:
    """Distribution the per-subject forward models are drawn from: a shared
    kernel family with jittered spatial vectors, plus a shared audio pool
    sized so attended tracks repeat across subjects."""

    n_channels: int = 16
    snr_db: float = 30.0
    distractor_gain: float = 0.5
    duration_s: float = 26.0
    spatial_jitter: float = 0.3
    audio_pool_factor: int = 4

    def __post_init__(self):
        if self.n_channels < 2:
            raise ConfigurationError("need at least 2 channels")
        if self.duration_s < 2.0:
            raise ConfigurationError("trials must last at least 2 s")


def gen_cohort(n_subjects: int, trials_per_subject: int,
               dist: Optional[CohortSpec] = None, seed: int = 0) -> List[TrialBundle]:
    """Seed-deterministic multi-subject cohort of trial bundles."""
    if n_subjects < 2:
        raise ConfigurationError("a cohort needs at least 2 subjects")
    dist = dist or CohortSpec()
    root = np.random.SeedSequence(seed)
    base_rng = np.random.default_rng(root.spawn(1)[0])
    base_att = base_rng.standard_normal(dist.n_channels)
    base_att /= np.linalg.norm(base_att)
    base_dis = base_rng.standard_normal(dist.n_channels)
    base_dis /= np.linalg.norm(base_dis)
    n_pool = max(dist.audio_pool_factor * trials_per_subject, 8)
    pool = [f"c{seed}-aud{k:04d}" for k in range(n_pool)]
    h_att = response_kernel()
    h_dis = distractor_kernel()

    trials = []
    subject_seeds = root.spawn(n_subjects)
    for si in range(n_subjects):
        sub_rng = np.random.default_rng(subject_seeds[si])
        spatial = base_att + dist.spatial_jitter * sub_rng.standard_normal(dist.n_channels)
        spatial /= np.linalg.norm(spatial)
        spatial_dis = base_dis + dist.spatial_jitter * sub_rng.standard_normal(dist.n_channels)
        spatial_dis /= np.linalg.norm(spatial_dis)
        fm = ForwardModel(spatial=spatial, kernel=h_att, snr_db=dist.snr_db,
                          distractor_gain=dist.distractor_gain,
                          spatial_distractor=spatial_dis, kernel_distractor=h_dis)
        for ti in range(trials_per_subject):
            att_idx = int(sub_rng.integers(n_pool))
            un_idx = int(sub_rng.integers(n_pool - 1))
            if un_idx >= att_idx:
                un_idx += 1
            trial_seed = int(sub_rng.integers(2 ** 31))
            trials.append(gen_trial(
                fm, dist.duration_s, trial_seed,
                subject_id=f"s{si:02d}", trial_id=f"t{ti:03d}",
                audio_id_attended=pool[att_idx],
                audio_id_unattended=pool[un_idx]))
    return trials
