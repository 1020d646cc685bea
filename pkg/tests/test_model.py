import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dyntask.autodiff as ad
from dyntask import losses, model
from dyntask.errors import CompatibilityError, ConfigError, DataError, FormatError
from dyntask.model import ConvBlockSpec, ModelConfig


def tiny_config(**kw):
    base = dict(input_hw=(8, 8), trunk=(ConvBlockSpec(4), ConvBlockSpec(8)),
                embedding_dim=8, k_id=3, k_expr=7, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def forward_all(state, images, mode="eval", rng=None):
    tape = ad.Tape()
    lifted = model.lift_params(state, tape)
    shared = model.forward_shared(state, lifted, images, mode)
    emb, id_logits = model.forward_branch1(state, lifted, shared, mode, rng)
    expr_logits = model.forward_branch2(state, lifted, shared, mode, rng)
    w1, w2 = model.dynamic_weights(state, lifted, shared)
    return tape, lifted, shared, emb, id_logits, expr_logits, w1, w2


class TestForwardShared:
    def test_zero_trunk_gives_zero_features(self):
        state = model.init_model(tiny_config(), seed=0)
        for name in state.params:
            if name.startswith("trunk.") and not name.endswith("bn.gamma"):
                state.params[name][:] = 0.0
        tape = ad.Tape()
        lifted = model.lift_params(state, tape)
        out = model.forward_shared(state, lifted, np.zeros((2, 1, 8, 8)), "eval")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_eval_mode_deterministic(self):
        state = model.init_model(tiny_config(), seed=1)
        imgs = np.random.default_rng(0).random((3, 1, 8, 8))
        a = forward_all(state, imgs)[2].data
        b = forward_all(state, imgs)[2].data
        np.testing.assert_array_equal(a, b)

    def test_shared_width_matches_analytic_flatten_size(self):
        cfg = ModelConfig()  # 32x32, pools 3x -> 4x4 at 64 filters
        assert cfg.shared_dim() == 64 * 4 * 4 == 1024
        state = model.init_model(tiny_config(), seed=2)
        out = forward_all(state, np.zeros((2, 1, 8, 8)))[2]
        assert out.shape == (2, state.config.shared_dim())

    def test_wrong_input_shape_rejected(self):
        state = model.init_model(tiny_config(), seed=3)
        tape = ad.Tape()
        lifted = model.lift_params(state, tape)
        with pytest.raises(DataError):
            model.forward_shared(state, lifted, np.zeros((2, 1, 9, 9)), "eval")


class TestBranches:
    def test_embedding_and_logit_shapes(self):
        state = model.init_model(tiny_config(embedding_dim=8, k_id=5), seed=4)
        _, _, _, emb, id_logits, expr_logits, _, _ = forward_all(
            state, np.zeros((6, 1, 8, 8)))
        assert emb.shape == (6, 8)
        assert id_logits.shape == (6, 5)
        assert expr_logits.shape == (6, 7)

    def test_expression_softmax_rows_sum_to_one(self):
        from dyntask.layers import softmax_rows
        state = model.init_model(tiny_config(), seed=5)
        imgs = np.random.default_rng(1).random((4, 1, 8, 8))
        tape, lifted, shared, *_ = forward_all(state, imgs)
        probs = softmax_rows(forward_all(state, imgs)[5])
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_branch2_has_exactly_one_extra_dense_layer_of_parameters(self):
        cfg = tiny_config(k_id=7, k_expr=7)  # equal classifier sizes isolate the extra layer
        state = model.init_model(cfg, seed=6)
        n1 = sum(state.params[n].size for n in state.names("branch1."))
        n2 = sum(state.params[n].size for n in state.names("branch2."))
        e = cfg.embedding_dim
        assert n2 - n1 == e * e + e

    def test_gradient_reaches_trunk_from_identity_logits(self):
        state = model.init_model(tiny_config(), seed=7)
        imgs = np.random.default_rng(2).random((4, 1, 8, 8))
        tape, lifted, shared, emb, id_logits, *_ = forward_all(state, imgs, mode="train")
        loss = losses.cross_entropy(id_logits, [0, 1, 2, 0])
        grads = ad.backward(loss)
        g = grads.of(lifted["trunk.block0.conv.w"])
        assert np.any(g != 0.0)


class TestDynamicWeights:
    def test_zero_unit_gives_half_half(self):
        state = model.init_model(tiny_config(), seed=8)
        state.params["dwu.w"][:] = 0.0
        state.params["dwu.b"][:] = 0.0
        imgs = np.random.default_rng(3).random((5, 1, 8, 8))
        *_, w1, w2 = forward_all(state, imgs)
        assert w1.item() == pytest.approx(0.5, abs=1e-12)
        assert w2.item() == pytest.approx(0.5, abs=1e-12)

    def test_closed_form_logits(self):
        state = model.init_model(tiny_config(), seed=9)
        state.params["dwu.w"][:] = 0.0
        state.params["dwu.b"][:] = [np.log(3.0), 0.0]
        imgs = np.random.default_rng(4).random((3, 1, 8, 8))
        *_, w1, w2 = forward_all(state, imgs)
        assert w1.item() == pytest.approx(0.75, abs=1e-12)
        assert w2.item() == pytest.approx(0.25, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_simplex_invariant(self, seed):
        rng = np.random.default_rng(seed)
        state = model.init_model(tiny_config(), seed=int(seed % 1000))
        state.params["dwu.w"][:] = rng.standard_normal(state.params["dwu.w"].shape)
        state.params["dwu.b"][:] = rng.standard_normal(2) * 5
        imgs = rng.random((4, 1, 8, 8))
        *_, w1, w2 = forward_all(state, imgs)
        assert 0.0 <= w1.item() <= 1.0
        assert 0.0 <= w2.item() <= 1.0
        assert abs(w1.item() + w2.item() - 1.0) <= 1e-12

    def test_unit_receives_gradient_from_overall_loss(self):
        state = model.init_model(tiny_config(), seed=10)
        imgs = np.random.default_rng(5).random((4, 1, 8, 8))
        labels = np.array([0, 1, 2, 0])
        bank = losses.CenterBank(3, 8)
        tape, lifted, shared, emb, id_logits, expr_logits, w1, w2 = forward_all(
            state, imgs, mode="train")
        losses.update_centers(bank, emb.data, labels)
        cfg = losses.LossConfig(k_id=3, margin=1.0)
        l1 = losses.verification_loss(id_logits, labels, emb, bank, cfg)
        l2 = losses.expression_loss(expr_logits, [0, 1, 2, 3])
        l3 = losses.overall_loss(l1, l2, w1, w2)
        grads = ad.backward(l3)
        assert np.any(grads.of(lifted["dwu.w"]) != 0.0)

    def test_trunk_gradient_decomposition_with_frozen_weights(self):
        state = model.init_model(tiny_config(), seed=11)
        imgs = np.random.default_rng(6).random((4, 1, 8, 8))
        id_labels = np.array([0, 1, 2, 0])
        expr_labels = np.array([0, 1, 2, 3])
        bank = losses.CenterBank(3, 8)
        cfg = losses.LossConfig(k_id=3, margin=1.0)
        probe = "trunk.block1.conv.w"

        tape, lifted, shared, emb, id_logits, expr_logits, w1, w2 = forward_all(state, imgs)
        losses.update_centers(bank, emb.data, id_labels)
        l1 = losses.verification_loss(id_logits, id_labels, emb, bank, cfg)
        l2 = losses.expression_loss(expr_logits, expr_labels)
        g_full = ad.backward(losses.overall_loss(l1, l2, w1, w2)).of(lifted[probe])
        w1_val, w2_val = w1.item(), w2.item()
        l1_val, l2_val = l1.item(), l2.item()

        # frozen-weight variant: constants in place of the live weight nodes
        tape2, lifted2, _, emb2, idl2, exl2, _, _ = forward_all(state, imgs)
        f1 = losses.verification_loss(idl2, id_labels, emb2, bank, cfg)
        f2 = losses.expression_loss(exl2, expr_labels)
        frozen = losses.overall_loss(f1, f2, tape2.leaf(np.asarray(w1_val)),
                                     tape2.leaf(np.asarray(w2_val)))
        g_frozen = ad.backward(frozen).of(lifted2[probe])

        # path through the weight nodes only: loss values as constants
        tape3, lifted3, shared3, *_ = forward_all(state, imgs)
        w1_3, w2_3 = model.dynamic_weights(state, lifted3, shared3)
        through = ad.add(ad.mul(w1_3, l1_val), ad.mul(w2_3, l2_val))
        g_through = ad.backward(through).of(lifted3[probe])

        np.testing.assert_allclose(g_full, g_frozen + g_through, rtol=1e-10, atol=1e-12)


class TestTransfer:
    def test_trunk_and_bottleneck_copied_heads_fresh(self):
        state = model.init_model(tiny_config(), seed=12)
        rng = np.random.default_rng(7)
        for name in state.params:
            state.params[name][:] = rng.standard_normal(state.params[name].shape)
        new = model.transfer_branch1_to_branch2(state, seed=99)
        for name in state.names("trunk."):
            np.testing.assert_array_equal(new.params[name], state.params[name])
        np.testing.assert_array_equal(new.params["branch2.bottleneck.w"],
                                      state.params["branch1.bottleneck.w"])
        np.testing.assert_array_equal(new.params["branch2.bottleneck.b"],
                                      state.params["branch1.bottleneck.b"])
        assert not np.array_equal(new.params["branch2.extra.w"],
                                  state.params["branch2.extra.w"])
        np.testing.assert_array_equal(new.params["branch2.classifier.b"], 0.0)

    def test_incompatible_shapes_listed(self):
        state = model.init_model(tiny_config(), seed=13)
        state.params["branch2.bottleneck.w"] = np.zeros((3, 3))
        with pytest.raises(CompatibilityError, match="bottleneck.w"):
            model.transfer_branch1_to_branch2(state, seed=0)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        state = model.init_model(tiny_config(), seed=14)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save_checkpoint(state, p1)
        loaded = model.load_checkpoint(p1)
        model.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_reproduces_parameters_bit_exactly(self, tmp_path):
        state = model.init_model(tiny_config(), seed=15)
        path = tmp_path / "m.ckpt"
        model.save_checkpoint(state, path)
        loaded = model.load_checkpoint(path)
        assert set(loaded.params) == set(state.params)
        for name in state.params:
            np.testing.assert_array_equal(loaded.params[name], state.params[name])
        for name in state.buffers:
            np.testing.assert_array_equal(loaded.buffers[name], state.buffers[name])

    def test_truncated_file_rejected(self, tmp_path):
        state = model.init_model(tiny_config(), seed=16)
        path = tmp_path / "m.ckpt"
        model.save_checkpoint(state, path)
        raw = path.read_bytes()
        for cut in (2, 8, len(raw) // 2, len(raw) - 1):
            clipped = tmp_path / f"cut{cut}.ckpt"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                model.load_checkpoint(clipped)

    def test_bad_magic_and_version_rejected(self, tmp_path):
        state = model.init_model(tiny_config(), seed=17)
        path = tmp_path / "m.ckpt"
        model.save_checkpoint(state, path)
        raw = bytearray(path.read_bytes())
        bad_magic = tmp_path / "magic.ckpt"
        bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
        with pytest.raises(FormatError, match="magic"):
            model.load_checkpoint(bad_magic)
        bad_version = tmp_path / "ver.ckpt"
        bad_version.write_bytes(bytes(raw[:4]) + struct.pack("<I", 77) + bytes(raw[8:]))
        with pytest.raises(FormatError, match="version"):
            model.load_checkpoint(bad_version)

    def test_header_self_describes_default_config(self, tmp_path):
        state = model.init_model(ModelConfig(), seed=18)
        path = tmp_path / "default.ckpt"
        model.save_checkpoint(state, path)
        raw = path.read_bytes()
        header_len = struct.unpack("<I", raw[8:12])[0]
        header = json.loads(raw[12:12 + header_len])
        assert header["config"]["embedding_dim"] == 64
        assert header["config"]["k_expr"] == 7


class TestConfigValidation:
    def test_bad_configs_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(embedding_dim=1)
        with pytest.raises(ConfigError):
            ModelConfig(k_id=1)
        with pytest.raises(ConfigError):
            ModelConfig(k_expr=9)
        with pytest.raises(ConfigError):
            ModelConfig(input_hw=(6, 6))  # 3 pools don't divide 6x6
