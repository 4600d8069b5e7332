"""Cross-validation experiment harness.

Builds leakage-safe fold plans (8-fold cross-trial for subject-specific
runs, leave-one-subject-out for subject-independent runs), streams decision
windows with swap augmentation, trains/fine-tunes the convolutional
classifier with early stopping, and aggregates decision-window accuracies
into a results table.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, bce_with_logits
from .bundles import TrialBundle
from .checkpoint import Checkpoint
from .errors import ConfigurationError, ContractError, TrainingError
from .model import CATCNConfig, CATCNModel
from .optim import Adam

log = logging.getLogger("aadkit.harness")

MODE_SS = "SS"
MODE_SI = "SI"
EVAL_WINDOW_LENGTHS = (1.0, 2.0, 5.0, 10.0, 25.0, 50.0)
N_OUTER_FOLDS = 8


@dataclass
class TrainConfig:
    """Training hyperparameters (learning-rate halving for fine-tuning is
    derived automatically unless overridden)."""

    max_epochs: int = 200
    patience: int = 5
    window_s: float = 5.0
    overlap: float = 0.75
    lr_si: float = 5e-5
    lr_ss: Optional[float] = None
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.overlap < 1.0):
            raise ConfigurationError("overlap must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience and max_epochs must be >= 1")
        if self.lr_ss is None:
            self.lr_ss = self.lr_si / 2.0


@dataclass
class FoldAssignment:
    """One train/val/test partition with its leakage exclusions."""

    mode: str
    subject: str
    fold: int
    train: List[Tuple[str, str]]
    val: List[Tuple[str, str]]
    test: List[Tuple[str, str]]
    excluded: List[Tuple[str, str]] = field(default_factory=list)


@dataclass
class FoldPlan:
    mode: str
    folds: List[FoldAssignment]


def _stable_int(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _subject_map(trials: Sequence[TrialBundle]) -> Dict[str, List[TrialBundle]]:
    by_subject: Dict[str, List[TrialBundle]] = {}
    for t in sorted(trials, key=lambda t: t.key):
        by_subject.setdefault(t.subject_id, []).append(t)
    return by_subject


def _strip_leakage(keys, trials_by_key, test_attended_ids):
    kept, excluded = [], []
    for k in keys:
        if trials_by_key[k].audio_id_attended in test_attended_ids:
            excluded.append(k)
        else:
            kept.append(k)
    return kept, excluded


def make_folds(trials: Sequence[TrialBundle], mode: str, seed: int = 0) -> FoldPlan:
    """Construct the outer validation plan.

    SS: per subject, trials are seed-shuffled into 8 near-equal disjoint
    sets; each serves once as the test set, one of the remaining sets is
    the early-stopping validation split, and the rest train. SI: one
    partition per held-out subject; the validation split is a held-out
    eighth of the training trials. In both modes, any training/validation
    trial sharing an attended audio track with a test trial is excluded.
    """
    if mode not in (MODE_SS, MODE_SI):
        raise ConfigurationError(f"mode must be {MODE_SS} or {MODE_SI}")
    by_subject = _subject_map(trials)
    trials_by_key = {t.key: t for t in trials}
    folds: List[FoldAssignment] = []

    if mode == MODE_SS:
        for subject, subj_trials in by_subject.items():
            if len(subj_trials) < N_OUTER_FOLDS:
                raise ConfigurationError(
                    f"subject {subject} has {len(subj_trials)} trials; "
                    f"needs >= {N_OUTER_FOLDS}")
            keys = [t.key for t in subj_trials]
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, _stable_int(subject))))
            order = rng.permutation(len(keys))
            chunks = [list(np.array(keys, dtype=object)[idx])
                      for idx in np.array_split(order, N_OUTER_FOLDS)]
            chunks = [[tuple(k) for k in c] for c in chunks]
            for f in range(N_OUTER_FOLDS):
                test = chunks[f]
                rest = [c for i, c in enumerate(chunks) if i != f]
                pick = np.random.default_rng(np.random.SeedSequence(
                    (seed, _stable_int(subject), f))).integers(len(rest))
                val_chunk = rest[int(pick)]
                train_keys = [k for i, c in enumerate(chunks)
                              if i != f and c is not val_chunk for k in c]
                test_ids = {trials_by_key[k].audio_id_attended for k in test}
                train_kept, excl_t = _strip_leakage(train_keys, trials_by_key, test_ids)
                val_kept, excl_v = _strip_leakage(val_chunk, trials_by_key, test_ids)
                folds.append(FoldAssignment(
                    mode=MODE_SS, subject=subject, fold=f, train=train_kept,
                    val=val_kept, test=test, excluded=excl_t + excl_v))
        return FoldPlan(MODE_SS, folds)

    if len(by_subject) < 2:
        raise ConfigurationError("subject-independent folds need >= 2 subjects")
    for subject, subj_trials in by_subject.items():
        test = [t.key for t in subj_trials]
        pool = [t.key for s, ts in by_subject.items() if s != subject for t in ts]
        test_ids = {trials_by_key[k].audio_id_attended for k in test}
        eligible, excluded = _strip_leakage(pool, trials_by_key, test_ids)
        if not eligible:
            raise ConfigurationError(
                f"no training trials left for held-out subject {subject} "
                "after audio-leakage exclusion")
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, _stable_int(subject), 7)))
        order = rng.permutation(len(eligible))
        n_val = max(1, len(eligible) // 8)
        val = [eligible[i] for i in order[:n_val]]
        train = [eligible[i] for i in order[n_val:]]
        folds.append(FoldAssignment(
            mode=MODE_SI, subject=subject, fold=0, train=sorted(train),
            val=sorted(val), test=test, excluded=excluded))
    return FoldPlan(MODE_SI, folds)


def assert_no_leakage(plan: FoldPlan, trials: Sequence[TrialBundle]) -> None:
    """Raise if any fold leaks trials, attended audio, or (SI) subjects."""
    trials_by_key = {t.key: t for t in trials}
    for fold in plan.folds:
        train_val = set(fold.train) | set(fold.val)
        test = set(fold.test)
        if train_val & test:
            raise ContractError(f"trial leakage in fold {fold.subject}/{fold.fold}")
        test_ids = {trials_by_key[k].audio_id_attended for k in test}
        tv_ids = {trials_by_key[k].audio_id_attended for k in train_val}
        if test_ids & tv_ids:
            raise ContractError(f"audio leakage in fold {fold.subject}/{fold.fold}")
        if fold.mode == MODE_SI:
            tv_subjects = {k[0] for k in train_val}
            if fold.subject in tv_subjects:
                raise ContractError(f"subject leakage in SI fold {fold.subject}")


# ---------------------------------------------------------------------------
# decision windows
# ---------------------------------------------------------------------------

@dataclass
class Window:
    eeg: np.ndarray  # (T_w, C)
    env_a: np.ndarray
    env_b: np.ndarray
    label: str
    subject_id: str
    trial_id: str


def expected_window_count(n_samples: int, width: int, stride: int) -> int:
    if n_samples < width:
        return 0
    return (n_samples - width) // stride + 1


def window_stream(trials: Sequence[TrialBundle], window_s: float,
                  overlap: float) -> List[Window]:
    """Cut trials into decision windows; windows never cross trial bounds.

    stride = width * (1 - overlap); trials shorter than the window are
    skipped with a warning.
    """
    if not (0.0 <= overlap < 1.0):
        raise ConfigurationError("overlap must lie in [0, 1)")
    out: List[Window] = []
    for t in trials:
        width = int(round(window_s * t.fs))
        stride = max(1, int(round(width * (1.0 - overlap))))
        if t.n_samples < width:
            log.warning("trial %s/%s shorter than %.3gs window; skipped",
                        t.subject_id, t.trial_id, window_s)
            continue
        for st in range(0, t.n_samples - width + 1, stride):
            sl = slice(st, st + width)
            out.append(Window(eeg=t.eeg[sl], env_a=t.env_a[sl],
                              env_b=t.env_b[sl], label=t.attended,
                              subject_id=t.subject_id, trial_id=t.trial_id))
    return out


def augment_swap(windows: Sequence[Window]) -> List[Window]:
    """Append the candidate-swapped mirror of every window (exact doubling,
    exactly balanced labels)."""
    out = list(windows)
    for w in windows:
        out.append(Window(eeg=w.eeg, env_a=w.env_b, env_b=w.env_a,
                          label="B" if w.label == "A" else "A",
                          subject_id=w.subject_id, trial_id=w.trial_id))
    return out


def _window_arrays(windows: Sequence[Window]):
    eeg = np.stack([w.eeg.T for w in windows])  # (B, C, T)
    env_a = np.stack([w.env_a[None, :] for w in windows])
    env_b = np.stack([w.env_b[None, :] for w in windows])
    labels = np.array([1.0 if w.label == "A" else 0.0 for w in windows])
    return eeg, env_a, env_b, labels


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _validation_loss(model: CATCNModel, windows: Sequence[Window],
                     batch_size: int) -> float:
    total = 0.0
    count = 0
    with ad.no_grad():
        for idx in _batched(len(windows), batch_size):
            batch = [windows[i] for i in idx]
            eeg, ea, eb, y = _window_arrays(batch)
            logits = model.forward(Tensor(eeg), Tensor(ea), Tensor(eb),
                                   training=False)
            loss = bce_with_logits(logits, y)
            total += float(loss.data.sum())
            count += len(batch)
    return total / count


def _bn_initialized(model: CATCNModel) -> bool:
    blocks = model.eeg_blocks + model.stim_blocks
    return all(b.bn.stats.initialized for b in blocks)


def _fit(model: CATCNModel, train_windows: Sequence[Window],
         val_windows: Sequence[Window], lr: float, cfg: TrainConfig,
         rng: np.random.Generator) -> dict:
    """Adam + early stopping; restores the best-validation state in place."""
    if not train_windows:
        raise ConfigurationError("training window set is empty")
    if not val_windows:
        raise ConfigurationError("validation window set is empty")
    params = model.parameters()
    opt = Adam(params, lr=lr, weight_decay=cfg.weight_decay)
    best_state = model.clone_state()
    best_val = (_validation_loss(model, val_windows, cfg.batch_size)
                if _bn_initialized(model) else np.inf)
    best_epoch = 0
    history = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        epoch_loss = 0.0
        for idx in _batched(len(order), cfg.batch_size):
            batch = [train_windows[i] for i in order[idx]]
            eeg, ea, eb, y = _window_arrays(batch)
            logits = model.forward(Tensor(eeg), Tensor(ea), Tensor(eb),
                                   training=True)
            loss = bce_with_logits(logits, y).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            epoch_loss += value * len(batch)
            backward(loss, params)
            opt.step()
            opt.zero_grad()
        val = _validation_loss(model, val_windows, cfg.batch_size)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch,
                        "train_loss": epoch_loss / len(train_windows),
                        "val_loss": val})
        log.info("epoch %d: train %.5f val %.5f", epoch,
                 history[-1]["train_loss"], val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_state = model.clone_state()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    return {"best_epoch": best_epoch,
            "best_val_loss": None if not np.isfinite(best_val) else float(best_val),
            "epochs_run": len(history), "lr": lr, "history": history}


def _keyed(trials_by_key, keys) -> List[TrialBundle]:
    return [trials_by_key[k] for k in keys]


def _fold_rng(cfg: TrainConfig, fold: FoldAssignment, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        (cfg.seed, _stable_int(fold.subject), fold.fold, stream)))


def train_si(model: CATCNModel, fold: FoldAssignment,
             trials_by_key: Dict[Tuple[str, str], TrialBundle],
             cfg: TrainConfig) -> Checkpoint:
    """Train a subject-independent model on one LOSO partition; returns the
    best-validation checkpoint."""
    if fold.mode != MODE_SI:
        raise ConfigurationError("train_si needs an SI fold assignment")
    train_w = augment_swap(window_stream(_keyed(trials_by_key, fold.train),
                                         cfg.window_s, cfg.overlap))
    val_w = window_stream(_keyed(trials_by_key, fold.val), cfg.window_s, 0.0)
    meta = _fit(model, train_w, val_w, cfg.lr_si, cfg, _fold_rng(cfg, fold, 0))
    meta.update({"mode": MODE_SI, "subject": fold.subject, "fold": fold.fold,
                 "seed": cfg.seed})
    return Checkpoint.from_model(model, meta)


def finetune_ss(checkpoint: Checkpoint, fold: FoldAssignment,
                trials_by_key: Dict[Tuple[str, str], TrialBundle],
                cfg: TrainConfig) -> Checkpoint:
    """Fine-tune a pretrained checkpoint on the evaluated subject's training
    trials at half the SI learning rate, with fresh optimizer moments."""
    if fold.mode != MODE_SS:
        raise ConfigurationError("finetune_ss needs an SS fold assignment")
    model = checkpoint.to_model()
    sample = trials_by_key[fold.train[0]] if fold.train else None
    if sample is not None and model.config.n_channels != sample.n_channels:
        raise ConfigurationError(
            f"checkpoint expects {model.config.n_channels} channels, "
            f"data has {sample.n_channels}")
    train_w = augment_swap(window_stream(_keyed(trials_by_key, fold.train),
                                         cfg.window_s, cfg.overlap))
    val_w = window_stream(_keyed(trials_by_key, fold.val), cfg.window_s, 0.0)
    meta = _fit(model, train_w, val_w, cfg.lr_ss, cfg, _fold_rng(cfg, fold, 1))
    meta.update({"mode": MODE_SS, "subject": fold.subject, "fold": fold.fold,
                 "seed": cfg.seed, "pretrained_from": checkpoint.metadata})
    return Checkpoint.from_model(model, meta)


# ---------------------------------------------------------------------------
# deciders and evaluation
# ---------------------------------------------------------------------------

class CATCNDecider:
    """Eval-mode batch decisions from a trained model."""

    def __init__(self, model: CATCNModel, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def decide_many(self, windows: Sequence[Window]) -> List[str]:
        out: List[str] = []
        for idx in _batched(len(windows), self.batch_size):
            batch = [windows[i] for i in idx]
            eeg, ea, eb, _ = _window_arrays(batch)
            out.extend(self.model.decide_batch(eeg, ea, eb))
        return out


class PipelineDecider:
    """Adapter for the linear pipelines (ridge / CCA)."""

    def __init__(self, pipeline):
        self.pipeline = pipeline

    def decide_many(self, windows: Sequence[Window]) -> List[str]:
        return [self.pipeline.decide(w.eeg, w.env_a, w.env_b) for w in windows]


class RandomDecider:
    """Seeded coin flip (chance-level control)."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def decide_many(self, windows: Sequence[Window]) -> List[str]:
        return ["A" if self.rng.random() < 0.5 else "B" for _ in windows]


@dataclass
class ResultRow:
    dataset: str
    model: str
    mode: str
    subject: str
    fold: int
    window_s: float
    n_windows: int
    accuracy: float


class ResultsTable:
    """Accuracy records keyed by (subject, fold, window length)."""

    CSV_HEADER = ["dataset", "model", "mode", "subject", "fold", "window_s",
                  "n_windows", "accuracy"]

    def __init__(self, rows: Optional[List[ResultRow]] = None):
        self.rows: List[ResultRow] = list(rows or [])

    def extend(self, rows: Iterable[ResultRow]):
        self.rows.extend(rows)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for r in self.rows:
                writer.writerow([r.dataset, r.model, r.mode, r.subject, r.fold,
                                 f"{r.window_s:g}", r.n_windows,
                                 f"{r.accuracy:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "ResultsTable":
        rows = []
        with Path(path).open() as fh:
            for rec in csv.DictReader(fh):
                rows.append(ResultRow(
                    dataset=rec["dataset"], model=rec["model"], mode=rec["mode"],
                    subject=rec["subject"], fold=int(rec["fold"]),
                    window_s=float(rec["window_s"]),
                    n_windows=int(rec["n_windows"]),
                    accuracy=float(rec["accuracy"])))
        return cls(rows)

    def summary(self) -> dict:
        per_window: Dict[float, List[float]] = {}
        for r in self.rows:
            per_window.setdefault(r.window_s, []).append(r.accuracy)
        return {
            f"{w:g}": {"mean": float(np.mean(a)), "std": float(np.std(a)),
                       "n": len(a)}
            for w, a in sorted(per_window.items())
        }

    def write_summary_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def evaluate(decider, trials: Sequence[TrialBundle],
             window_lengths: Sequence[float] = EVAL_WINDOW_LENGTHS, *,
             dataset: str = "synthetic", model_name: str = "model",
             mode: str = MODE_SI, subject: str = "", fold: int = 0) -> List[ResultRow]:
    """Non-overlapping decision windows per length; window lengths longer
    than every trial are reported as absent (no row)."""
    if not trials:
        raise ConfigurationError("evaluate needs a nonempty test set")
    rows: List[ResultRow] = []
    for w_s in window_lengths:
        windows = window_stream(trials, w_s, overlap=0.0)
        if not windows:
            continue
        labels = decider.decide_many(windows)
        correct = sum(lab == w.label for lab, w in zip(labels, windows))
        rows.append(ResultRow(
            dataset=dataset, model=model_name, mode=mode,
            subject=subject or trials[0].subject_id, fold=fold,
            window_s=w_s, n_windows=len(windows),
            accuracy=correct / len(windows)))
    return rows
