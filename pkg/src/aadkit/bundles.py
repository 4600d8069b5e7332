"""Trial bundles and their on-disk format.

A processed trial holds EEG (T x C) and the two candidate envelopes at a
common sampling rate with equal lengths. On disk each trial is a directory
with `meta.json` plus raw little-endian float32 arrays `eeg.bin` (row-major
T x C), `envA.bin`, `envB.bin`. Raw-rate trials (before preprocessing) use
the same container with `audio_kind: "waveform"` and an `audio_fs` field;
their audio arrays may differ in length from the EEG.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DataError

META = "meta.json"
_FILES = {"eeg": "eeg.bin", "env_a": "envA.bin", "env_b": "envB.bin"}


@dataclass
class TrialBundle:
    """One experimental trial at a common sampling rate."""

    subject_id: str
    trial_id: str
    audio_id_attended: str
    audio_id_unattended: str
    eeg: np.ndarray
    env_a: np.ndarray
    env_b: np.ndarray
    attended: str
    fs: float = 64.0

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg, dtype=np.float64)
        self.env_a = np.asarray(self.env_a, dtype=np.float64)
        self.env_b = np.asarray(self.env_b, dtype=np.float64)
        if self.eeg.ndim != 2:
            raise DataError(f"eeg must be (T, C), got {self.eeg.shape}")
        if not (len(self.eeg) == len(self.env_a) == len(self.env_b)):
            raise DataError("eeg and envelopes must have equal length")
        if self.attended not in ("A", "B"):
            raise DataError(f"attended label must be 'A' or 'B', got {self.attended!r}")
        if not (self.subject_id and self.trial_id
                and self.audio_id_attended and self.audio_id_unattended):
            raise DataError("subject/trial/audio identifiers must be nonempty")

    @property
    def key(self):
        return (self.subject_id, self.trial_id)

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    @property
    def attended_env(self) -> np.ndarray:
        return self.env_a if self.attended == "A" else self.env_b

    @property
    def unattended_env(self) -> np.ndarray:
        return self.env_b if self.attended == "A" else self.env_a


@dataclass
class RawTrial:
    """Unprocessed trial: EEG at the acquisition rate, audio as waveform
    (or pre-extracted envelope) at its own rate."""

    subject_id: str
    trial_id: str
    audio_id_attended: str
    audio_id_unattended: str
    eeg: np.ndarray
    audio_a: np.ndarray
    audio_b: np.ndarray
    attended: str
    fs_eeg: float
    fs_audio: float
    audio_kind: str = "waveform"

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg, dtype=np.float64)
        self.audio_a = np.asarray(self.audio_a, dtype=np.float64)
        self.audio_b = np.asarray(self.audio_b, dtype=np.float64)
        if self.audio_kind not in ("waveform", "envelope"):
            raise DataError(f"audio_kind must be waveform|envelope, got {self.audio_kind!r}")


def _write_arrays(path: Path, eeg, env_a, env_b):
    (path / _FILES["eeg"]).write_bytes(
        np.ascontiguousarray(eeg, dtype="<f4").tobytes())
    (path / _FILES["env_a"]).write_bytes(
        np.ascontiguousarray(env_a, dtype="<f4").tobytes())
    (path / _FILES["env_b"]).write_bytes(
        np.ascontiguousarray(env_b, dtype="<f4").tobytes())


def trial_dirname(subject_id: str, trial_id: str) -> str:
    return f"{subject_id}__{trial_id}"


def save_trial(root, trial: TrialBundle) -> Path:
    root = Path(root)
    path = root / trial_dirname(trial.subject_id, trial.trial_id)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": trial.subject_id,
        "trial_id": trial.trial_id,
        "audio_id_attended": trial.audio_id_attended,
        "audio_id_unattended": trial.audio_id_unattended,
        "attended": trial.attended,
        "fs": trial.fs,
        "audio_kind": "envelope",
        "shapes": {
            "eeg": list(trial.eeg.shape),
            "envA": [int(trial.env_a.shape[0])],
            "envB": [int(trial.env_b.shape[0])],
        },
    }
    (path / META).write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_arrays(path, trial.eeg, trial.env_a, trial.env_b)
    return path


def save_raw_trial(root, trial: RawTrial) -> Path:
    root = Path(root)
    path = root / trial_dirname(trial.subject_id, trial.trial_id)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": trial.subject_id,
        "trial_id": trial.trial_id,
        "audio_id_attended": trial.audio_id_attended,
        "audio_id_unattended": trial.audio_id_unattended,
        "attended": trial.attended,
        "fs": trial.fs_eeg,
        "audio_fs": trial.fs_audio,
        "audio_kind": trial.audio_kind,
        "shapes": {
            "eeg": list(trial.eeg.shape),
            "envA": [int(trial.audio_a.shape[0])],
            "envB": [int(trial.audio_b.shape[0])],
        },
    }
    (path / META).write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_arrays(path, trial.eeg, trial.audio_a, trial.audio_b)
    return path


def _read_array(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DataError(f"{path} holds {data.size} values, expected {expected}")
    return data.reshape(shape).astype(np.float64)


def load_trial(path):
    """Load one trial directory; returns TrialBundle or RawTrial per meta."""
    path = Path(path)
    try:
        meta = json.loads((path / META).read_text())
    except FileNotFoundError:
        raise DataError(f"{path} has no {META}")
    shapes = meta["shapes"]
    eeg = _read_array(path / _FILES["eeg"], shapes["eeg"])
    env_a = _read_array(path / _FILES["env_a"], shapes["envA"])
    env_b = _read_array(path / _FILES["env_b"], shapes["envB"])
    common = dict(
        subject_id=meta["subject_id"], trial_id=meta["trial_id"],
        audio_id_attended=meta["audio_id_attended"],
        audio_id_unattended=meta["audio_id_unattended"],
        attended=meta["attended"],
    )
    if "audio_fs" in meta:
        return RawTrial(eeg=eeg, audio_a=env_a, audio_b=env_b,
                        fs_eeg=meta["fs"], fs_audio=meta["audio_fs"],
                        audio_kind=meta.get("audio_kind", "waveform"), **common)
    return TrialBundle(eeg=eeg, env_a=env_a, env_b=env_b, fs=meta["fs"], **common)


def save_cohort(root, trials) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t in trials:
        if isinstance(t, RawTrial):
            save_raw_trial(root, t)
        else:
            save_trial(root, t)
    return root


def load_cohort(root) -> List:
    """Load every trial directory under root, sorted by (subject, trial)."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / META).exists())
    if not dirs:
        raise DataError(f"no trial directories under {root}")
    return [load_trial(p) for p in dirs]
