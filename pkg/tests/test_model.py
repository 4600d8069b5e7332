"""Architecture contracts: receptive fields, padding, parameter/MAC
accounting, causality, and checkpoint round-trips."""

import numpy as np
import pytest

from aadkit.autodiff import Tensor, backward, bce_with_logits, no_grad
from aadkit.checkpoint import Checkpoint, load_model, save_model
from aadkit.errors import ConfigurationError, ContractError, DimensionError
from aadkit.model import (
    ANTICAUSAL,
    CAUSAL,
    CATCNConfig,
    CATCNModel,
    ConvBlock,
    ablation_variants,
    count_macs,
    count_params,
    pad_for_causality,
    receptive_field,
    receptive_field_ms,
)
from tests.util import grads_close, rel_error


def prime_batchnorm(model, mean=0.0, var=1.0):
    """Set identity-like running stats so eval-mode forwards work."""
    for blk in model.eeg_blocks + model.stim_blocks:
        c = blk.bn.gamma.size
        blk.bn.stats.mean = np.full(c, mean)
        blk.bn.stats.var = np.full(c, var)


def generic_weights(model, rng, scale=1.0):
    """Random O(1) weights with random signs (probe-friendly, no dead paths)."""
    for _, t in model.named_parameters():
        t.data = rng.uniform(0.5, 1.5, t.data.shape) * rng.choice([-1.0, 1.0], t.data.shape) * scale


class TestReceptiveField:
    def test_paper_values(self):
        assert receptive_field(3, 4) == 31
        assert abs(receptive_field_ms(3, 4) - 484.375) < 1e-9
        assert receptive_field(3, 3) == 15
        assert round(receptive_field_ms(3, 3)) == 234
        assert receptive_field(3, 5) == 63
        assert round(receptive_field_ms(3, 5)) == 984

    def test_pointwise(self):
        for n in (1, 3, 7):
            assert receptive_field(1, n) == 1

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            receptive_field(0, 3)


class TestPadForCausality:
    def test_causal(self):
        assert pad_for_causality(3, 4, CAUSAL) == (8, 0)

    def test_anticausal(self):
        assert pad_for_causality(3, 1, ANTICAUSAL) == (0, 2)

    def test_pointwise(self):
        assert pad_for_causality(1, 8, CAUSAL) == (0, 0)
        assert pad_for_causality(1, 1, ANTICAUSAL) == (0, 0)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            pad_for_causality(3, 1, "sideways")


class TestConvBlock:
    def test_zero_weights_pure_residual(self):
        rng = np.random.default_rng(0)
        blk = ConvBlock(4, 3, 2, CAUSAL, rng)
        for _, t in blk.parameters():
            t.data = np.zeros_like(t.data)
        blk.bn.gamma.data = np.ones(4)  # affine restored to identity scale
        x = Tensor(rng.normal(size=(2, 4, 16)))
        y = blk.forward(x, training=True)
        np.testing.assert_array_equal(y.data, x.data)

    @pytest.mark.parametrize("mode", [CAUSAL, ANTICAUSAL])
    def test_block_causality(self, mode):
        # a single dilated block touches only its kernel taps (holes between
        # taps see nothing); everything on the wrong temporal side must be
        # exactly invisible
        rng = np.random.default_rng(1)
        dilation = 2
        blk = ConvBlock(3, 3, dilation, mode, rng)
        blk.bn.stats.mean = np.zeros(3)
        blk.bn.stats.var = np.ones(3)
        x = rng.normal(size=(1, 3, 32))
        base = blk.forward(Tensor(x), training=False).data
        t = 16
        sign = -1 if mode == CAUSAL else 1
        taps = {t + sign * k * dilation for k in range(3)}
        for tp in range(32):
            xp = x.copy()
            xp[0, :, tp] += 1.0
            out = blk.forward(Tensor(xp), training=False).data
            delta = np.abs(out[0, :, t] - base[0, :, t]).max()
            if tp in taps:
                assert delta > 1e-12
            else:
                assert delta <= 1e-12


class TestParameterCounts:
    def test_block_parameter_count(self):
        cfg = CATCNConfig(n_channels=61)
        blk = ConvBlock(32, 3, 1, CAUSAL, np.random.default_rng(0))
        assert sum(t.size for _, t in blk.parameters()) == 2304

    @pytest.mark.parametrize("name,expected", [
        ("raw_input", 123),
        ("spatial_projection", 4097),
        ("tcn", 27137),
        ("asymmetric_rf", 22529),
    ])
    def test_table_rows(self, name, expected):
        variants = dict(ablation_variants(61))
        assert count_params(variants[name]) == expected

    def test_causality_row_matches_final_size(self):
        variants = dict(ablation_variants(61))
        assert count_params(variants["causality"]) == 22529

    def test_closed_form_matches_model(self):
        for _, cfg in ablation_variants(13):
            model = CATCNModel(cfg, seed=3)
            assert model.count_parameters() == count_params(cfg)

    def test_raw_variant_rejects_blocks(self):
        with pytest.raises(ConfigurationError):
            CATCNConfig(8, depth_eeg=1, depth_stim=0, use_stem=False)


class TestMacCounts:
    def test_raw_classifier_macs(self):
        cfg = dict(ablation_variants(61))["raw_input"]
        mc = count_macs(cfg, 320)
        # weights-only products: 2*61 features into one logit
        assert mc.layers == 122
        assert round(mc.layers / 100) * 100 == 100  # "0.1K"

    def test_stem_only_closed_form(self):
        cfg = dict(ablation_variants(61))["spatial_projection"]
        mc = count_macs(cfg, 320)
        assert mc.layers == 61 * 32 * 320 + 2 * 32 * 320 + 2048
        assert mc.layers == 645_120 + 2_048

    def test_linearity_in_window_length(self):
        cfg = dict(ablation_variants(61))["asymmetric_rf"]
        a = count_macs(cfg, 320)
        b = count_macs(cfg, 640)
        # classifier term is T-independent; everything else doubles
        assert b.layers - 2048 == 2 * (a.layers - 2048)
        assert b.correlation == 2 * a.correlation


class TestForward:
    def test_shape_and_finiteness(self):
        cfg = CATCNConfig(n_channels=8)
        model = CATCNModel(cfg, seed=0)
        rng = np.random.default_rng(0)
        logits = model.forward(Tensor(rng.normal(size=(4, 8, 320))),
                               Tensor(rng.normal(size=(4, 1, 320))),
                               Tensor(rng.normal(size=(4, 1, 320))),
                               training=True)
        assert logits.shape == (4,)
        assert np.isfinite(logits.data).all()

    def test_identical_candidates_swap_invariant(self):
        cfg = CATCNConfig(n_channels=6)
        model = CATCNModel(cfg, seed=1)
        prime_batchnorm(model)
        rng = np.random.default_rng(1)
        eeg = Tensor(rng.normal(size=(2, 6, 64)))
        env = rng.normal(size=(2, 1, 64))
        with no_grad():
            l1 = model.forward(eeg, Tensor(env), Tensor(env.copy())).data
            l2 = model.forward(eeg, Tensor(env.copy()), Tensor(env)).data
        np.testing.assert_array_equal(l1, l2)
        # deterministic tie rule: logit >= 0 resolves to A
        labels = model.decide_batch(eeg.data, env, env.copy())
        assert all(lab in ("A", "B") for lab in labels)

    def test_eeg_branch_ignores_past(self):
        # anticausal EEG branch: output at t only sees EEG[t .. t+RF-1]
        cfg = CATCNConfig(n_channels=4, feat_eeg=8, feat_stim=8)
        model = CATCNModel(cfg, seed=2)
        prime_batchnorm(model)
        rng = np.random.default_rng(2)
        eeg = rng.normal(size=(1, 4, 128))
        with no_grad():
            base = model.embed_eeg(Tensor(eeg)).data
        t = 64
        pert = eeg.copy()
        pert[0, :, :t] += rng.normal(size=(4, t))
        with no_grad():
            out = model.embed_eeg(Tensor(pert)).data
        assert np.abs(out[0, :, t:] - base[0, :, t:]).max() <= 1e-12

    def test_length_agnostic_eval(self):
        cfg = CATCNConfig(n_channels=5)
        model = CATCNModel(cfg, seed=3)
        rng = np.random.default_rng(3)
        # one training step initializes running stats
        model.forward(Tensor(rng.normal(size=(2, 5, 320))),
                      Tensor(rng.normal(size=(2, 1, 320))),
                      Tensor(rng.normal(size=(2, 1, 320))), training=True)
        for T in (2, 64, 3200):
            with no_grad():
                logits = model.forward(Tensor(rng.normal(size=(1, 5, T))),
                                       Tensor(rng.normal(size=(1, 1, T))),
                                       Tensor(rng.normal(size=(1, 1, T))))
            assert logits.shape == (1,) and np.isfinite(logits.data).all()

    def test_too_short_raises(self):
        model = CATCNModel(CATCNConfig(n_channels=3), seed=0)
        with pytest.raises(ContractError):
            model.forward(Tensor(np.zeros((1, 3, 1))), Tensor(np.zeros((1, 1, 1))),
                          Tensor(np.zeros((1, 1, 1))))

    def test_channel_mismatch_raises(self):
        model = CATCNModel(CATCNConfig(n_channels=3), seed=0)
        with pytest.raises(DimensionError):
            model.embed_eeg(Tensor(np.zeros((1, 4, 16))))


class TestAsymmetricAlignment:
    """Final config: EEG output at t sees EEG[t, t+14]; stimulus output at t
    sees env[t-62, t]."""

    def test_branch_supports(self):
        cfg = CATCNConfig(n_channels=3, feat_eeg=8, feat_stim=8)
        model = CATCNModel(cfg, seed=4)
        generic_weights(model, np.random.default_rng(4))
        prime_batchnorm(model)
        rng = np.random.default_rng(5)

        eeg = rng.normal(size=(1, 3, 180)) * 0.1
        with no_grad():
            base_e = model.embed_eeg(Tensor(eeg)).data
        t = 90
        for tp, expect in [(t - 1, False), (t, True), (t + 14, True), (t + 15, False)]:
            pert = eeg.copy()
            pert[0, :, tp] += 0.5
            with no_grad():
                out = model.embed_eeg(Tensor(pert)).data
            delta = np.abs(out[0, :, t] - base_e[0, :, t]).max()
            assert (delta > 1e-12) == expect, (tp, delta)

        env = rng.normal(size=(1, 1, 180)) * 0.1
        with no_grad():
            base_s = model.embed_stim(Tensor(env)).data
        for tp, expect in [(t + 1, False), (t, True), (t - 62, True), (t - 63, False)]:
            pert = env.copy()
            pert[0, :, tp] += 0.5
            with no_grad():
                out = model.embed_stim(Tensor(pert)).data
            delta = np.abs(out[0, :, t] - base_s[0, :, t]).max()
            assert (delta > 1e-12) == expect, (tp, delta)


class TestModelGradients:
    def test_small_model_matches_finite_differences(self):
        cfg = CATCNConfig(n_channels=3, feat_eeg=4, feat_stim=4,
                          depth_eeg=1, depth_stim=2)
        model = CATCNModel(cfg, seed=7)
        rng = np.random.default_rng(7)
        eeg = rng.normal(size=(2, 3, 24))
        ea = rng.normal(size=(2, 1, 24))
        eb = rng.normal(size=(2, 1, 24))
        y = np.array([1.0, 0.0])

        def loss_value():
            logits = model.forward(Tensor(eeg), Tensor(ea), Tensor(eb), training=True)
            return bce_with_logits(logits, y).mean()

        loss = loss_value()
        params = model.parameters()
        backward(loss, params)
        grads = [p.grad.copy() for p in params]
        for p, g in zip(params, grads):
            fd = np.zeros_like(p.data)
            flat_p = p.data.reshape(-1)
            flat_fd = fd.reshape(-1)
            for i in range(flat_p.size):
                orig = flat_p[i]
                h = 1e-6 * max(1.0, abs(orig))
                flat_p[i] = orig + h
                fp = loss_value().item()
                flat_p[i] = orig - h
                fm = loss_value().item()
                flat_p[i] = orig
                flat_fd[i] = (fp - fm) / (2 * h)
            assert grads_close(g, fd), rel_error(g, fd)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = CATCNConfig(n_channels=5)
        model = CATCNModel(cfg, seed=6)
        rng = np.random.default_rng(6)
        model.forward(Tensor(rng.normal(size=(2, 5, 320))),
                      Tensor(rng.normal(size=(2, 1, 320))),
                      Tensor(rng.normal(size=(2, 1, 320))), training=True)
        meta = {"lr": 2.5e-05, "epoch": 3}
        save_model(tmp_path / "ckpt", model, meta)
        restored, meta2 = load_model(tmp_path / "ckpt")
        assert meta2 == meta
        for (n1, t1), (n2, t2) in zip(model.named_parameters(),
                                      restored.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)
        for (n1, a1), (n2, a2) in zip(model.named_buffers(), restored.named_buffers()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)
        probe = rng.normal(size=(1, 5, 64))
        pa = rng.normal(size=(1, 1, 64))
        pb = rng.normal(size=(1, 1, 64))
        with no_grad():
            np.testing.assert_array_equal(
                model.forward(Tensor(probe), Tensor(pa), Tensor(pb)).data,
                restored.forward(Tensor(probe), Tensor(pa), Tensor(pb)).data)

    def test_serialization_is_deterministic(self, tmp_path):
        model = CATCNModel(CATCNConfig(n_channels=4), seed=9)
        save_model(tmp_path / "a", model, {"k": 1})
        save_model(tmp_path / "b", model, {"k": 1})
        assert (tmp_path / "a" / "params.bin").read_bytes() == \
               (tmp_path / "b" / "params.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_text() == \
               (tmp_path / "b" / "manifest.json").read_text()

    def test_same_seed_same_init(self):
        a = CATCNModel(CATCNConfig(n_channels=4), seed=11)
        b = CATCNModel(CATCNConfig(n_channels=4), seed=11)
        for (_, t1), (_, t2) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_wrong_channels_rejected_on_load(self, tmp_path):
        model = CATCNModel(CATCNConfig(n_channels=4), seed=0)
        ckpt = Checkpoint.from_model(model)
        other = CATCNModel(CATCNConfig(n_channels=5), seed=0)
        with pytest.raises(ConfigurationError):
            other.load_state(ckpt.arrays)
