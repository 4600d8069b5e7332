"""Linear decoding baselines.

Ridge backward model: reconstruct the attended envelope from a lagged EEG
matrix with an L2-regularized closed-form solve, then pick the candidate
whose envelope correlates best with the reconstruction.

CCA pipeline: jointly project lagged EEG (future lags) and lagged stimulus
(past lags) into maximally correlated components via the whitened-SVD
construction, then classify the per-component correlation differences with
a two-class LDA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .bundles import TrialBundle
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    NumericError,
    StateError,
)

FUTURE = "future"
PAST = "past"

RIDGE_LAGS = 26        # 0..400 ms of post-stimulus EEG at 64 Hz
CCA_EEG_LAGS = 16      # future EEG samples, right zero padding
CCA_STIM_LAGS = 80     # past stimulus samples, left zero padding
PEARSON_EPS = 1e-8

LAMBDA_GRID = tuple(10.0 ** k for k in range(-7, 8))  # one point per decade


def pearson_np(a: np.ndarray, b: np.ndarray, eps: float = PEARSON_EPS) -> float:
    """Plain-numpy Pearson correlation with the eps-stabilized convention
    (zero-variance operand gives exactly 0)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ac = a - a.mean()
    bc = b - b.mean()
    sa = np.sqrt(np.mean(ac * ac))
    sb = np.sqrt(np.mean(bc * bc))
    return float(np.mean(ac * bc) / ((sa + eps) * (sb + eps)))


@dataclass(frozen=True)
class LagSpec:
    """How to expand a signal into lagged column blocks.

    direction "future" stacks x(t+l) with zeros filling the trailing rows
    (right zero padding); "past" stacks x(t-l) with zeros at the start
    (left zero padding). Column order is channel-major within each lag.
    """

    n_lags: int
    direction: str = FUTURE

    def __post_init__(self):
        if self.n_lags < 1:
            raise ConfigurationError("n_lags must be >= 1")
        if self.direction not in (FUTURE, PAST):
            raise ConfigurationError(f"unknown lag direction {self.direction!r}")

    @property
    def padding_side(self) -> str:
        return "right" if self.direction == FUTURE else "left"


def build_lag_matrix(x: np.ndarray, spec: LagSpec) -> np.ndarray:
    """(T, C) -> (T, L*C) lagged design matrix with exact zero padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    T, C = x.shape
    L = spec.n_lags
    if T <= L:
        raise ContractError(f"need more than {L} samples, got {T}")
    out = np.zeros((T, L * C))
    for lag in range(L):
        block = out[:, lag * C:(lag + 1) * C]
        if spec.direction == FUTURE:
            block[:T - lag] = x[lag:]
        else:
            block[lag:] = x[:T - lag]
    return out


# ---------------------------------------------------------------------------
# ridge backward model
# ---------------------------------------------------------------------------

@dataclass
class RidgeDecoder:
    """Fitted backward model: filter vector over lagged channels."""

    d: np.ndarray
    lam: float
    lag: LagSpec
    n_channels: int

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError("lambda must be positive")
        if len(self.d) != self.lag.n_lags * self.n_channels:
            raise ConfigurationError("filter length must equal n_lags * n_channels")

    def reconstruct(self, eeg: np.ndarray) -> np.ndarray:
        return build_lag_matrix(eeg, self.lag) @ self.d


def ridge_fit(x_lag: np.ndarray, s: np.ndarray, lam: float) -> np.ndarray:
    """Solve (X^T X + lam I) d = X^T s by symmetric positive-definite solve."""
    if lam <= 0:
        raise ConfigurationError("lambda must be positive")
    x_lag = np.asarray(x_lag, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).ravel()
    if not (np.isfinite(x_lag).all() and np.isfinite(s).all()):
        raise DataError("non-finite values in ridge inputs")
    gram = x_lag.T @ x_lag
    rhs = x_lag.T @ s
    gram[np.diag_indices_from(gram)] += lam
    return sla.solve(gram, rhs, assume_a="pos")


@dataclass
class Decision:
    """Binary attended-candidate decision with its correlation scores."""

    label: str
    score_a: float = 0.0
    score_b: float = 0.0
    degenerate: bool = False
    tie: bool = False


def ridge_classify(dec: RidgeDecoder, eeg: np.ndarray, env_a: np.ndarray,
                   env_b: np.ndarray) -> Decision:
    """Reconstruct the envelope over the window and pick the better-matching
    candidate; exact ties and degenerate reconstructions resolve to A."""
    s_hat = dec.reconstruct(eeg)
    if s_hat.std() == 0.0:
        return Decision("A", degenerate=True)
    ra = pearson_np(s_hat, env_a)
    rb = pearson_np(s_hat, env_b)
    if ra == rb:
        return Decision("A", ra, rb, tie=True)
    return Decision("A" if ra > rb else "B", ra, rb)


def _trial_grams(trials: Sequence[TrialBundle], lag: LagSpec):
    grams, rhs = [], []
    for t in trials:
        x = build_lag_matrix(t.eeg, lag)
        grams.append(x.T @ x)
        rhs.append(x.T @ t.attended_env)
    return grams, rhs


def _round_robin_folds(n: int, k: int) -> List[np.ndarray]:
    return [np.arange(n)[i::k] for i in range(k)]


def _window_starts(n_samples: int, width: int) -> np.ndarray:
    if n_samples < width:
        return np.array([], dtype=int)
    return np.arange(0, n_samples - width + 1, width)


def select_lambda(trials: Sequence[TrialBundle], grid=LAMBDA_GRID,
                  n_folds: int = 5, window_s: float = 5.0,
                  lag: Optional[LagSpec] = None) -> float:
    """Inner trial-fold search for the ridge regularizer.

    Maximizes mean decision-window accuracy over 5 inner folds; ties pick
    the smallest lambda.
    """
    if len(trials) < n_folds:
        raise ConfigurationError(f"need at least {n_folds} trials for inner folds")
    lag = lag or LagSpec(RIDGE_LAGS, FUTURE)
    grid = np.asarray(sorted(grid), dtype=np.float64)
    trials = sorted(trials, key=lambda t: t.key)
    grams, rhs = _trial_grams(trials, lag)
    width = int(round(window_s * trials[0].fs))
    folds = _round_robin_folds(len(trials), n_folds)
    acc = np.zeros((len(grid), n_folds))
    for j, hold in enumerate(folds):
        hold_set = set(hold.tolist())
        gram = sum(g for i, g in enumerate(grams) if i not in hold_set)
        r = sum(c for i, c in enumerate(rhs) if i not in hold_set)
        evals, evecs = np.linalg.eigh(gram)
        proj = evecs.T @ r
        # window-local lag matrices are lambda-independent; build them once
        windows = []
        for i in hold:
            t = trials[i]
            for st in _window_starts(t.n_samples, width):
                sl = slice(st, st + width)
                windows.append((build_lag_matrix(t.eeg[sl], lag),
                                t.env_a[sl], t.env_b[sl], t.attended))
        for gi, lam in enumerate(grid):
            d = evecs @ (proj / (evals + lam))
            correct = 0
            for x_w, ea, eb, label in windows:
                s_hat = x_w @ d
                if s_hat.std() == 0.0:
                    lab = "A"
                else:
                    ra = pearson_np(s_hat, ea)
                    rb = pearson_np(s_hat, eb)
                    lab = "A" if ra >= rb else "B"
                correct += (lab == label)
            acc[gi, j] = correct / len(windows) if windows else 0.0
    mean_acc = acc.mean(axis=1)
    return float(grid[int(np.argmax(mean_acc))])


class RidgePipeline:
    """Ridge decoder trained on whole trials, lambda picked by inner folds."""

    def __init__(self, lam: Optional[float] = None,
                 lag: Optional[LagSpec] = None):
        self.lam = lam
        self.lag = lag or LagSpec(RIDGE_LAGS, FUTURE)
        self.decoder: Optional[RidgeDecoder] = None

    def fit(self, trials: Sequence[TrialBundle]) -> "RidgePipeline":
        trials = sorted(trials, key=lambda t: t.key)
        if self.lam is None:
            self.lam = select_lambda(trials, lag=self.lag)
        grams, rhs = _trial_grams(trials, self.lag)
        gram = sum(grams)
        r = sum(rhs)
        gram[np.diag_indices_from(gram)] += self.lam
        d = sla.solve(gram, r, assume_a="pos")
        self.decoder = RidgeDecoder(d, self.lam, self.lag, trials[0].n_channels)
        return self

    def decide(self, eeg: np.ndarray, env_a: np.ndarray,
               env_b: np.ndarray) -> str:
        if self.decoder is None:
            raise StateError("ridge pipeline not fitted")
        return ridge_classify(self.decoder, eeg, env_a, env_b).label


# ---------------------------------------------------------------------------
# CCA + LDA
# ---------------------------------------------------------------------------

def _inv_sqrt_psd(c: np.ndarray, floor_ratio: float = 1e-8) -> np.ndarray:
    """Symmetric inverse square root with an eigenvalue floor."""
    evals, evecs = np.linalg.eigh(c)
    top = float(evals[-1])
    if not np.isfinite(top) or top <= 0:
        raise NumericError("covariance matrix has no positive spectrum")
    evals = np.maximum(evals, floor_ratio * top)
    return (evecs / np.sqrt(evals)) @ evecs.T


@dataclass
class CCAModel:
    """Canonical coefficient sets plus the training covariances."""

    wx: np.ndarray
    ws: np.ndarray
    n_components: int
    correlations: np.ndarray
    cxx: np.ndarray = field(repr=False, default=None)
    css: np.ndarray = field(repr=False, default=None)
    cxs: np.ndarray = field(repr=False, default=None)
    mean_x: np.ndarray = field(repr=False, default=None)
    mean_s: np.ndarray = field(repr=False, default=None)

    def project_eeg(self, x_lag: np.ndarray) -> np.ndarray:
        return (x_lag - self.mean_x) @ self.wx

    def project_stim(self, s_lag: np.ndarray) -> np.ndarray:
        return (s_lag - self.mean_s) @ self.ws


def cca_fit(x_lag: np.ndarray, s_lag: np.ndarray, n_components: int,
            floor_ratio: float = 1e-8) -> CCAModel:
    """Whitened-SVD canonical correlation analysis.

    Computes 1/T-normalized covariance matrices after mean removal, whitens
    both sides via symmetric inverse square roots (eigenvalue-floored), and
    reads the canonical directions off the SVD of the whitened cross
    covariance.
    """
    x = np.asarray(x_lag, dtype=np.float64)
    s = np.asarray(s_lag, dtype=np.float64)
    T = x.shape[0]
    if s.shape[0] != T:
        raise ContractError("x_lag and s_lag must have equal sample counts")
    if T <= max(x.shape[1], s.shape[1]):
        raise ContractError("need more samples than lagged dimensions")
    if not (1 <= n_components <= min(x.shape[1], s.shape[1])):
        raise ConfigurationError(
            f"n_components must lie in [1, {min(x.shape[1], s.shape[1])}]")
    mean_x = x.mean(axis=0)
    mean_s = s.mean(axis=0)
    xc = x - mean_x
    sc = s - mean_s
    cxx = xc.T @ xc / T
    css = sc.T @ sc / T
    cxs = xc.T @ sc / T
    ix = _inv_sqrt_psd(cxx, floor_ratio)
    isq = _inv_sqrt_psd(css, floor_ratio)
    m = ix @ cxs @ isq
    u, sig, vt = np.linalg.svd(m, full_matrices=False)
    wx = ix @ u[:, :n_components]
    ws = isq @ vt[:n_components].T
    return CCAModel(wx=wx, ws=ws, n_components=n_components,
                    correlations=sig[:n_components], cxx=cxx, css=css,
                    cxs=cxs, mean_x=mean_x, mean_s=mean_s)


def cca_correlations_oracle(x_lag: np.ndarray, s_lag: np.ndarray) -> np.ndarray:
    """Independent route: canonical correlations from the generalized
    eigenvalue problem Cxs Css^-1 Csx w = rho^2 Cxx w (test oracle)."""
    x = np.asarray(x_lag, dtype=np.float64)
    s = np.asarray(s_lag, dtype=np.float64)
    T = x.shape[0]
    xc = x - x.mean(axis=0)
    sc = s - s.mean(axis=0)
    cxx = xc.T @ xc / T
    css = sc.T @ sc / T
    cxs = xc.T @ sc / T
    a = cxs @ np.linalg.solve(css, cxs.T)
    evals = sla.eigh(a, cxx, eigvals_only=True)
    evals = np.clip(evals, 0.0, None)
    return np.sqrt(np.sort(evals)[::-1])


@dataclass
class LDAClassifier:
    """Two-class Fisher discriminant: sign(w . f + b) decides."""

    weights: np.ndarray
    bias: float


def lda_fit(features: np.ndarray, labels: np.ndarray,
            ridge: float = 1e-6) -> LDAClassifier:
    """Pooled-covariance Fisher LDA; labels are 1 (A attended) or 0."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if f.ndim != 2 or len(f) != len(y):
        raise ContractError("features must be (N, J) aligned with labels")
    pos = f[y == 1]
    negf = f[y == 0]
    if len(pos) < 2 or len(negf) < 2:
        raise ConfigurationError("LDA needs at least 2 samples per class")
    mu1 = pos.mean(axis=0)
    mu0 = negf.mean(axis=0)
    centered = np.concatenate([pos - mu1, negf - mu0], axis=0)
    sw = centered.T @ centered / (len(f) - 2)
    sw[np.diag_indices_from(sw)] += ridge
    w = sla.solve(sw, mu1 - mu0, assume_a="pos")
    b = -float(w @ (mu1 + mu0)) / 2.0
    return LDAClassifier(weights=w, bias=b)


def cca_features(model: CCAModel, lag_x: LagSpec, lag_s: LagSpec,
                 eeg: np.ndarray, env_a: np.ndarray,
                 env_b: np.ndarray) -> np.ndarray:
    """Per-component correlation differences rho_A - rho_B (antisymmetric
    under candidate swap by construction)."""
    px = model.project_eeg(build_lag_matrix(eeg, lag_x))
    pa = model.project_stim(build_lag_matrix(env_a, lag_s))
    pb = model.project_stim(build_lag_matrix(env_b, lag_s))
    j = model.n_components
    feats = np.empty(j)
    for i in range(j):
        feats[i] = pearson_np(px[:, i], pa[:, i]) - pearson_np(px[:, i], pb[:, i])
    return feats


def cca_classify(model: CCAModel, lda: Optional[LDAClassifier],
                 eeg: np.ndarray, env_a: np.ndarray, env_b: np.ndarray,
                 lag_x: Optional[LagSpec] = None,
                 lag_s: Optional[LagSpec] = None) -> Decision:
    if lda is None:
        raise StateError("LDA classifier not trained")
    lag_x = lag_x or LagSpec(CCA_EEG_LAGS, FUTURE)
    lag_s = lag_s or LagSpec(CCA_STIM_LAGS, PAST)
    f = cca_features(model, lag_x, lag_s, eeg, env_a, env_b)
    score = float(lda.weights @ f + lda.bias)
    tie = bool(np.all(f == 0.0))
    return Decision("A" if score >= 0 else "B", score_a=score, tie=tie)


class CCAPipeline:
    """CCA projections plus LDA on correlation-difference features."""

    def __init__(self, n_components: Optional[int] = None,
                 lag_x: Optional[LagSpec] = None,
                 lag_s: Optional[LagSpec] = None,
                 window_s: float = 5.0):
        self.n_components = n_components
        self.lag_x = lag_x or LagSpec(CCA_EEG_LAGS, FUTURE)
        self.lag_s = lag_s or LagSpec(CCA_STIM_LAGS, PAST)
        self.window_s = window_s
        self.model: Optional[CCAModel] = None
        self.lda: Optional[LDAClassifier] = None

    def _stack(self, trials: Sequence[TrialBundle]):
        xs = [build_lag_matrix(t.eeg, self.lag_x) for t in trials]
        ss = [build_lag_matrix(t.attended_env, self.lag_s) for t in trials]
        return np.concatenate(xs, axis=0), np.concatenate(ss, axis=0)

    def _lda_training_set(self, trials: Sequence[TrialBundle],
                          model: CCAModel) -> Tuple[np.ndarray, np.ndarray]:
        width = int(round(self.window_s * trials[0].fs))
        feats, labels = [], []
        for t in trials:
            for st in _window_starts(t.n_samples, width):
                sl = slice(st, st + width)
                f = cca_features(model, self.lag_x, self.lag_s,
                                 t.eeg[sl], t.env_a[sl], t.env_b[sl])
                y = 1 if t.attended == "A" else 0
                # swap-augmented mirror keeps the classes exactly balanced
                feats.extend([f, -f])
                labels.extend([y, 1 - y])
        return np.asarray(feats), np.asarray(labels)

    def fit(self, trials: Sequence[TrialBundle]) -> "CCAPipeline":
        trials = sorted(trials, key=lambda t: t.key)
        if self.n_components is None:
            self.n_components = select_n_components(
                trials, lag_x=self.lag_x, lag_s=self.lag_s,
                window_s=self.window_s)
        x, s = self._stack(trials)
        self.model = cca_fit(x, s, self.n_components)
        feats, labels = self._lda_training_set(trials, self.model)
        self.lda = lda_fit(feats, labels)
        return self

    def decide(self, eeg: np.ndarray, env_a: np.ndarray,
               env_b: np.ndarray) -> str:
        if self.model is None:
            raise StateError("CCA pipeline not fitted")
        return cca_classify(self.model, self.lda, eeg, env_a, env_b,
                            self.lag_x, self.lag_s).label


def select_n_components(trials: Sequence[TrialBundle], n_folds: int = 5,
                        window_s: float = 5.0,
                        lag_x: Optional[LagSpec] = None,
                        lag_s: Optional[LagSpec] = None,
                        j_max: Optional[int] = None) -> int:
    """Inner trial-fold search for the CCA component count J.

    Candidates run 1..min(L_x, L_s); nested canonical directions let one
    J_max fit serve every candidate. Ties pick the smallest J.
    """
    if len(trials) < n_folds:
        raise ConfigurationError(f"need at least {n_folds} trials for inner folds")
    lag_x = lag_x or LagSpec(CCA_EEG_LAGS, FUTURE)
    lag_s = lag_s or LagSpec(CCA_STIM_LAGS, PAST)
    j_max = j_max or min(lag_x.n_lags, lag_s.n_lags)
    trials = sorted(trials, key=lambda t: t.key)
    width = int(round(window_s * trials[0].fs))
    folds = _round_robin_folds(len(trials), n_folds)
    acc = np.zeros((j_max, n_folds))

    def window_feats(model, subset):
        feats, labels = [], []
        for t in subset:
            for st in _window_starts(t.n_samples, width):
                sl = slice(st, st + width)
                feats.append(cca_features(model, lag_x, lag_s, t.eeg[sl],
                                          t.env_a[sl], t.env_b[sl]))
                labels.append(1 if t.attended == "A" else 0)
        return np.asarray(feats), np.asarray(labels)

    for fj, hold in enumerate(folds):
        hold_set = set(hold.tolist())
        train = [t for i, t in enumerate(trials) if i not in hold_set]
        held = [trials[i] for i in hold]
        x = np.concatenate([build_lag_matrix(t.eeg, lag_x) for t in train])
        s = np.concatenate([build_lag_matrix(t.attended_env, lag_s) for t in train])
        full = cca_fit(x, s, j_max)
        # canonical directions are nested, so J_max features cover every J
        f_train, y_train = window_feats(full, train)
        f_held, y_held = window_feats(full, held)
        for j in range(1, j_max + 1):
            aug_f = np.concatenate([f_train[:, :j], -f_train[:, :j]])
            aug_y = np.concatenate([y_train, 1 - y_train])
            lda = lda_fit(aug_f, aug_y)
            scores = f_held[:, :j] @ lda.weights + lda.bias
            pred = scores >= 0
            acc[j - 1, fj] = np.mean(pred == (y_held == 1)) if len(y_held) else 0.0
    mean_acc = acc.mean(axis=1)
    return int(np.argmax(mean_acc)) + 1
