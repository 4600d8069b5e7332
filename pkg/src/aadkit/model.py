"""Causal/anticausal dilated temporal convolutional attention classifier.

Two stacked-dilated-convolution branches (EEG anticausal, stimulus causal)
on top of pointwise spatial-projection stems, fused by an all-pairs
correlation head and a single-logit linear classifier. Also provides the
closed-form receptive-field, parameter, and multiply-accumulate accounting
used for architecture ablations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ConfigurationError, ContractError, DimensionError

CAUSAL = "causal"
ANTICAUSAL = "anticausal"
CENTERED = "centered"
_MODES = (CAUSAL, ANTICAUSAL, CENTERED)


def receptive_field(kernel_size: int, depth: int) -> int:
    """Receptive field in samples of `depth` stacked dilated conv layers.

    Layer n uses dilation 2^(n-1), so RF = 1 + (K-1) * (2^N - 1).
    """
    if kernel_size < 1 or depth < 1:
        raise ConfigurationError("receptive_field needs kernel_size >= 1 and depth >= 1")
    return 1 + (kernel_size - 1) * (2 ** depth - 1)


def receptive_field_ms(kernel_size: int, depth: int, fs: float = 64.0) -> float:
    return receptive_field(kernel_size, depth) / fs * 1000.0


def pad_for_causality(kernel_size: int, dilation: int, mode: str) -> Tuple[int, int]:
    """(left, right) zero padding that keeps output length == input length.

    Causal pads only on the left (output at t sees inputs <= t), anticausal
    only on the right (inputs >= t). `centered` splits the padding evenly
    and is used by the non-causal ablation variants.
    """
    if mode not in _MODES:
        raise ConfigurationError(f"unknown causality mode {mode!r}")
    total = (kernel_size - 1) * dilation
    if mode == CAUSAL:
        return (total, 0)
    if mode == ANTICAUSAL:
        return (0, total)
    return (total - total // 2, total // 2)


@dataclass
class CATCNConfig:
    """Architecture hyperparameters plus derived receptive fields.

    `feat_eeg`/`feat_stim` are the per-branch feature channel counts,
    `depth_eeg`/`depth_stim` the number of stacked conv blocks (dilation of
    block n is 2^(n-1)). `use_stem=False` together with zero depths gives
    the raw-input ablation baseline (correlation head directly on inputs).
    """

    n_channels: int
    feat_eeg: int = 32
    feat_stim: int = 32
    depth_eeg: int = 3
    depth_stim: int = 5
    kernel_size: int = 3
    eeg_causality: str = ANTICAUSAL
    stim_causality: str = CAUSAL
    fs: float = 64.0
    use_stem: bool = True

    def __post_init__(self):
        if self.n_channels < 1:
            raise ConfigurationError("n_channels must be >= 1")
        if self.kernel_size < 1 or self.feat_eeg < 1 or self.feat_stim < 1:
            raise ConfigurationError("kernel_size and feature counts must be >= 1")
        if self.depth_eeg < 0 or self.depth_stim < 0:
            raise ConfigurationError("branch depths must be >= 0")
        for mode in (self.eeg_causality, self.stim_causality):
            if mode not in _MODES:
                raise ConfigurationError(f"unknown causality mode {mode!r}")
        if not self.use_stem and (self.depth_eeg or self.depth_stim):
            raise ConfigurationError("raw-input variant cannot carry TCN blocks")

    @property
    def eeg_features(self) -> int:
        return self.feat_eeg if self.use_stem else self.n_channels

    @property
    def stim_features(self) -> int:
        return self.feat_stim if self.use_stem else 1

    @property
    def rf_eeg(self) -> int:
        return receptive_field(self.kernel_size, self.depth_eeg) if self.depth_eeg else 1

    @property
    def rf_stim(self) -> int:
        return receptive_field(self.kernel_size, self.depth_stim) if self.depth_stim else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CATCNConfig":
        return cls(**d)


def _block_params(features: int, kernel_size: int) -> int:
    # spatial 1x1 + depthwise K + pointwise 1x1 (all biased) + affine BN
    return (features * features + features
            + kernel_size * features + features
            + features * features + features
            + 2 * features)


def count_params(config: CATCNConfig) -> int:
    """Closed-form trainable parameter count of the configured model."""
    fx, fs_ = config.eeg_features, config.stim_features
    n = 0
    if config.use_stem:
        n += config.n_channels * config.feat_eeg + config.feat_eeg
        n += 1 * config.feat_stim + config.feat_stim
    n += config.depth_eeg * _block_params(fx, config.kernel_size)
    n += config.depth_stim * _block_params(fs_, config.kernel_size)
    n += 2 * fx * fs_ + 1
    return n


@dataclass
class MacCount:
    """Multiply-accumulate counts for one decision-window forward pass.

    `layers` counts one MAC per weight-input product in conv/linear layers
    per output sample (biases not counted), with the stimulus path counted
    twice for the two candidate envelopes. `correlation` covers the
    correlation head separately: the covariance and variance products,
    2*I*J*T + I*T + 2*J*T for I EEG and J stimulus sequences.
    """

    layers: int
    correlation: int

    @property
    def total(self) -> int:
        return self.layers + self.correlation


def count_macs(config: CATCNConfig, window_samples: int) -> MacCount:
    T = int(window_samples)
    fx, fs_ = config.eeg_features, config.stim_features
    k = config.kernel_size
    layers = 0
    if config.use_stem:
        layers += config.n_channels * config.feat_eeg * T
        layers += 2 * (1 * config.feat_stim * T)
    per_block_eeg = (fx * fx + k * fx + fx * fx) * T
    per_block_stim = (fs_ * fs_ + k * fs_ + fs_ * fs_) * T
    layers += config.depth_eeg * per_block_eeg
    layers += 2 * config.depth_stim * per_block_stim
    layers += 2 * fx * fs_  # classifier, single output
    correlation = 2 * fx * fs_ * T + fx * T + 2 * fs_ * T
    return MacCount(layers=layers, correlation=correlation)


class Conv1dLayer:
    """Conv1d with owned weight/bias tensors, uniform(+-1/sqrt(fan_in)) init."""

    def __init__(self, cin: int, cout: int, kernel_size: int, rng: np.random.Generator,
                 dilation: int = 1, groups: int = 1, dtype=np.float64):
        fan_in = (cin // groups) * kernel_size
        bound = fan_in ** -0.5
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin // groups, kernel_size)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, cout), requires_grad=True, dtype=dtype)
        self.dilation = dilation
        self.groups = groups
        self.kernel_size = kernel_size

    def __call__(self, x: Tensor, pad=(0, 0)) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, dilation=self.dilation,
                         groups=self.groups, pad=pad)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BatchNorm1dLayer:
    def __init__(self, features: int, rng=None, dtype=np.float64,
                 momentum: float = 0.1, eps: float = 1e-8):
        self.gamma = Tensor(np.ones(features), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(features), requires_grad=True, dtype=dtype)
        self.stats = RunningStats()
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm1d(x, self.gamma, self.beta, self.stats, training,
                              momentum=self.momentum, eps=self.eps)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class ConvBlock:
    """Residual block: spatial 1x1 -> dilated depthwise -> pointwise -> BN -> ELU -> +x.

    The depthwise stage carries the causality padding; the residual add
    requires matching input/output channel counts.
    """

    def __init__(self, features: int, kernel_size: int, dilation: int, mode: str,
                 rng: np.random.Generator, dtype=np.float64):
        self.spatial = Conv1dLayer(features, features, 1, rng, dtype=dtype)
        self.depthwise = Conv1dLayer(features, features, kernel_size, rng,
                                     dilation=dilation, groups=features, dtype=dtype)
        self.pointwise = Conv1dLayer(features, features, 1, rng, dtype=dtype)
        self.bn = BatchNorm1dLayer(features, dtype=dtype)
        self.mode = mode
        self.dilation = dilation
        self.kernel_size = kernel_size

    def forward(self, x: Tensor, training: bool) -> Tensor:
        pad = pad_for_causality(self.kernel_size, self.dilation, self.mode)
        h = self.spatial(x)
        h = self.depthwise(h, pad)
        h = self.pointwise(h)
        h = self.bn(h, training)
        h = ad.elu(h)
        return ad.add(x, h)

    def parameters(self):
        out = []
        for prefix, layer in (("spatial", self.spatial), ("depthwise", self.depthwise),
                              ("pointwise", self.pointwise), ("bn", self.bn)):
            out.extend((f"{prefix}.{n}", t) for n, t in layer.parameters())
        return out


class CATCNModel:
    """Full classifier: stems, branches, correlation head, linear logit.

    The stimulus stem and branch are shared between the two candidate
    envelopes. Positive logit means candidate A is the attended one; an
    exact zero logit resolves to A.
    """

    def __init__(self, config: CATCNConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.eeg_stem: Optional[Conv1dLayer] = None
        self.stim_stem: Optional[Conv1dLayer] = None
        if config.use_stem:
            self.eeg_stem = Conv1dLayer(config.n_channels, config.feat_eeg, 1, rng,
                                        dtype=dtype)
        self.eeg_blocks: List[ConvBlock] = [
            ConvBlock(config.eeg_features, config.kernel_size, 2 ** n,
                      config.eeg_causality, rng, dtype=dtype)
            for n in range(config.depth_eeg)
        ]
        if config.use_stem:
            self.stim_stem = Conv1dLayer(1, config.feat_stim, 1, rng, dtype=dtype)
        self.stim_blocks: List[ConvBlock] = [
            ConvBlock(config.stim_features, config.kernel_size, 2 ** n,
                      config.stim_causality, rng, dtype=dtype)
            for n in range(config.depth_stim)
        ]
        n_corr = 2 * config.eeg_features * config.stim_features
        bound = n_corr ** -0.5
        self.classifier_w = Tensor(rng.uniform(-bound, bound, (1, n_corr)),
                                   requires_grad=True, dtype=dtype)
        self.classifier_b = Tensor(rng.uniform(-bound, bound, 1),
                                   requires_grad=True, dtype=dtype)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        out = []
        if self.eeg_stem is not None:
            out.extend((f"eeg_stem.{n}", t) for n, t in self.eeg_stem.parameters())
        for i, blk in enumerate(self.eeg_blocks):
            out.extend((f"eeg_blocks.{i}.{n}", t) for n, t in blk.parameters())
        if self.stim_stem is not None:
            out.extend((f"stim_stem.{n}", t) for n, t in self.stim_stem.parameters())
        for i, blk in enumerate(self.stim_blocks):
            out.extend((f"stim_blocks.{i}.{n}", t) for n, t in blk.parameters())
        out.append(("classifier.weight", self.classifier_w))
        out.append(("classifier.bias", self.classifier_b))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        """Initialized batch-norm running statistics, in parameter order."""
        out = []
        for branch, blocks in (("eeg_blocks", self.eeg_blocks),
                               ("stim_blocks", self.stim_blocks)):
            for i, blk in enumerate(blocks):
                if blk.bn.stats.initialized:
                    out.append((f"{branch}.{i}.bn.running_mean", blk.bn.stats.mean))
                    out.append((f"{branch}.{i}.bn.running_var", blk.bn.stats.var))
        return out

    def count_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def state_arrays(self):
        """(name, array, trainable) triples for checkpointing."""
        out = [(n, t.data, True) for n, t in self.named_parameters()]
        out.extend((n, a, False) for n, a in self.named_buffers())
        return out

    def load_state(self, arrays: dict):
        # always copy: optimizer steps mutate parameter arrays in place and
        # must never write through into the caller's (checkpoint's) buffers
        params = dict(self.named_parameters())
        for name, value in arrays.items():
            if name in params:
                t = params[name]
                if t.data.shape != value.shape:
                    raise ConfigurationError(
                        f"checkpoint tensor {name} has shape {value.shape}, "
                        f"model expects {t.data.shape}")
                t.data = np.array(value, dtype=self.dtype, order="C")
            elif name.endswith(".running_mean") or name.endswith(".running_var"):
                self._load_buffer(name, value)
            else:
                raise ConfigurationError(f"unknown tensor {name} in checkpoint")

    def _load_buffer(self, name: str, value: np.ndarray):
        parts = name.split(".")
        blocks = self.eeg_blocks if parts[0] == "eeg_blocks" else self.stim_blocks
        stats = blocks[int(parts[1])].bn.stats
        if parts[-1] == "running_mean":
            stats.mean = np.array(value, dtype=self.dtype, order="C")
        else:
            stats.var = np.array(value, dtype=self.dtype, order="C")

    def clone_state(self) -> dict:
        return {n: a.copy() for n, a, _ in self.state_arrays()}

    # -- forward ------------------------------------------------------------

    def embed_eeg(self, eeg: Tensor, training: bool = False) -> Tensor:
        if eeg.ndim != 3 or eeg.shape[1] != self.config.n_channels:
            raise DimensionError(
                f"eeg must be (B, {self.config.n_channels}, T), got {tuple(eeg.shape)}")
        h = self.eeg_stem(eeg) if self.eeg_stem is not None else eeg
        for blk in self.eeg_blocks:
            h = blk.forward(h, training)
        return h

    def embed_stim(self, env: Tensor, training: bool = False) -> Tensor:
        if env.ndim != 3 or env.shape[1] != 1:
            raise DimensionError(f"envelope must be (B, 1, T), got {tuple(env.shape)}")
        h = self.stim_stem(env) if self.stim_stem is not None else env
        for blk in self.stim_blocks:
            h = blk.forward(h, training)
        return h

    def forward(self, eeg: Tensor, env_a: Tensor, env_b: Tensor,
                training: bool = False) -> Tensor:
        """Batched logits, shape (B,). logit > 0 predicts candidate A."""
        if eeg.shape[2] < 2:
            raise ContractError("forward needs at least 2 time samples")
        if not (eeg.shape[2] == env_a.shape[2] == env_b.shape[2]
                and eeg.shape[0] == env_a.shape[0] == env_b.shape[0]):
            raise DimensionError("eeg and envelopes must share batch and length")
        B = eeg.shape[0]
        e = self.embed_eeg(eeg, training)
        a = self.embed_stim(env_a, training)
        b = self.embed_stim(env_b, training)
        n_pairs = e.shape[1] * a.shape[1]
        corr_a = ad.reshape(ad.correlate_pairs(e, a), (B, n_pairs))
        corr_b = ad.reshape(ad.correlate_pairs(e, b), (B, n_pairs))
        feats = ad.concat([corr_a, corr_b], axis=1)
        logit = ad.linear(feats, self.classifier_w, self.classifier_b)
        return ad.reshape(logit, (B,))

    def decide_batch(self, eeg: np.ndarray, env_a: np.ndarray,
                     env_b: np.ndarray) -> List[str]:
        """Eval-mode decisions for a batch of windows; exact ties go to A."""
        with ad.no_grad():
            logits = self.forward(Tensor(eeg, dtype=self.dtype),
                                  Tensor(env_a, dtype=self.dtype),
                                  Tensor(env_b, dtype=self.dtype),
                                  training=False).data
        return ["A" if z >= 0 else "B" for z in logits]


def ablation_variants(n_channels: int):
    """The architecture sweep: raw baseline up to the final asymmetric model."""
    return [
        ("raw_input", CATCNConfig(n_channels, depth_eeg=0, depth_stim=0,
                                  use_stem=False)),
        ("spatial_projection", CATCNConfig(n_channels, depth_eeg=0, depth_stim=0)),
        ("tcn", CATCNConfig(n_channels, depth_eeg=5, depth_stim=5,
                            eeg_causality=CENTERED, stim_causality=CENTERED)),
        ("causality", CATCNConfig(n_channels, depth_eeg=4, depth_stim=4)),
        ("asymmetric_rf", CATCNConfig(n_channels, depth_eeg=3, depth_stim=5)),
    ]
