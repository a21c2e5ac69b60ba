"""Tests for the two-stream model: shapes, mask contracts, gating, dims."""

import numpy as np
import pytest

from attrparts import autodiff as ad
from attrparts.autodiff import ConfigError, Tensor, backward
from attrparts.data import AttributeGroup, AttributeSchema, default_schema
from attrparts.model import AttrPartModel, ModelConfig


def tiny_schema():
    g = AttributeGroup
    return AttributeSchema(
        groups=(g("a0", 2, 0), g("a1", 3, 0), g("a2", 2, 1)),
        num_mask_groups=2,
        mask_group_names=("m0", "m1"),
    )


def tiny_config(**overrides):
    base = dict(
        schema=tiny_schema(),
        num_train_ids=4,
        image_size=(16, 8),
        stem_widths=(4, 6, 8),
        global_mid=8,
        attr_width=8,
        part_width=8,
        feat_dim=16,
        attr_feat_dim=8,
        fusion_dim=12,
        gate_hidden=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build(cfg=None, seed=0, dtype=np.float32):
    return AttrPartModel(cfg or tiny_config(), np.random.default_rng(seed), dtype=dtype)


def rand_images(cfg, n, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, cfg.in_channels, *cfg.image_size)).astype(dtype))


class TestBackbone:
    def test_default_resolution_relationship(self):
        # 64x32 input with the default stem: GF 4x2, AF and PF 8x4
        cfg = ModelConfig(num_train_ids=4)
        model = AttrPartModel(cfg, np.random.default_rng(0))
        x = rand_images(cfg, 2)
        gf, af, pf = model.forward_backbone(x, training=True)
        assert gf.shape[2:] == (4, 2)
        assert af.shape[2:] == (8, 4)
        assert pf.shape[2:] == (8, 4)
        assert af.shape[2] == 2 * gf.shape[2] and af.shape[3] == 2 * gf.shape[3]

    def test_single_sample_eval_batch_dim(self):
        cfg = tiny_config()
        model = build(cfg)
        gf, af, pf = model.forward_backbone(rand_images(cfg, 1), training=False)
        assert gf.shape[0] == af.shape[0] == pf.shape[0] == 1

    def test_identical_images_identical_maps(self):
        cfg = tiny_config()
        model = build(cfg)
        one = rand_images(cfg, 1, seed=5)
        x = Tensor(np.concatenate([one.data, one.data], axis=0))
        gf, af, pf = model.forward_backbone(x, training=False)
        np.testing.assert_array_equal(gf.data[0], gf.data[1])
        np.testing.assert_array_equal(af.data[0], af.data[1])

    def test_wrong_image_size_raises(self):
        cfg = tiny_config()
        model = build(cfg)
        bad = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
        with pytest.raises(ConfigError, match="images"):
            model.forward_backbone(bad, training=True)


class TestDetectMasks:
    def test_zero_detector_gives_half(self):
        cfg = tiny_config()
        model = build(cfg)
        for k in range(cfg.num_masks):
            model.det_w[k].data[:] = 0.0
            model.det_b[k].data[:] = 0.0
        _, af, _ = model.forward_backbone(rand_images(cfg, 2), training=False)
        for m in model.detect_masks(af):
            np.testing.assert_array_equal(m.data, np.full_like(m.data, 0.5))

    def test_saturated_negative_bias(self):
        cfg = tiny_config()
        model = build(cfg)
        for k in range(cfg.num_masks):
            model.det_w[k].data[:] = 0.0
            model.det_b[k].data[:] = -20.0
        _, af, _ = model.forward_backbone(rand_images(cfg, 2), training=False)
        for m in model.detect_masks(af):
            assert np.all(m.data < 1e-8)

    def test_mask_open_interval_and_shape(self):
        cfg = tiny_config()
        model = build(cfg, seed=3)
        _, af, _ = model.forward_backbone(rand_images(cfg, 3, seed=1), training=False)
        masks = model.detect_masks(af)
        assert len(masks) == cfg.num_masks
        for m in masks:
            assert m.shape == (3, 1, af.shape[2], af.shape[3])
            assert np.all(m.data > 0.0) and np.all(m.data < 1.0)

    def test_mask_evaluations_equal_k_regardless_of_batch(self):
        cfg = tiny_config()
        model = build(cfg)
        for n in (cfg.num_masks, cfg.num_masks + 3):
            before = model.mask_eval_count
            model.stage1_forward(rand_images(cfg, n), training=False)
            assert model.mask_eval_count - before == cfg.num_masks


class TestAttributeHeads:
    def test_shared_mask_distinct_features(self):
        cfg = tiny_config()
        model = build(cfg, seed=2)
        out = model.stage1_forward(rand_images(cfg, 3, seed=2), training=False)
        # groups 0 and 1 share mask 0 yet produce different features
        assert cfg.schema.groups[0].mask_group == cfg.schema.groups[1].mask_group
        assert not np.allclose(out.attr_feats[0].data, out.attr_feats[1].data)
        assert out.attr_logits[0].shape == (3, 2)
        assert out.attr_logits[1].shape == (3, 3)

    def test_zero_mask_gives_bias_only_feature(self):
        cfg = tiny_config()
        model = build(cfg)
        af = Tensor(np.random.default_rng(0).random((3, cfg.attr_width, 4, 2)).astype(np.float32))
        zero = Tensor(np.zeros((3, 1, 4, 2), dtype=np.float32))
        feats, _ = model.attribute_heads(af, [zero, zero], training=False)
        for a in feats:
            # pooled feature is 0 for every sample, so rows are identical
            np.testing.assert_allclose(a.data, np.repeat(a.data[:1], 3, axis=0), atol=1e-7)

    def test_unit_inputs_match_direct_evaluation(self):
        cfg = tiny_config()
        model = build(cfg, seed=4)
        af = Tensor(np.ones((2, cfg.attr_width, 4, 2), dtype=np.float32))
        ones = Tensor(np.ones((2, 1, 4, 2), dtype=np.float32))
        feats, _ = model.attribute_heads(af, [ones, ones], training=False)
        # pooled vector is exactly the channelwise one-vector
        pooled = np.ones((2, cfg.attr_width), dtype=np.float32)
        head = model.heads[0]
        expect = pooled @ head.w.data + head.b.data
        inv = 1.0 / np.sqrt(head.state.var + 1e-5)
        expect = (expect - head.state.mean) * inv * head.gamma.data + head.beta.data
        np.testing.assert_allclose(feats[0].data, expect, rtol=1e-5)


class TestFusion:
    def test_zero_weights_zero_output(self):
        cfg = tiny_config()
        model = build(cfg)
        model.fusion_w.data[:] = 0.0
        model.fusion_b.data[:] = 0.0
        feats = [Tensor(np.random.default_rng(k).random((2, cfg.attr_feat_dim)).astype(np.float32))
                 for k in range(cfg.schema.num_groups)]
        assert np.all(model.fuse_attributes(feats).data == 0.0)

    def test_identity_extended_weights_reproduce_first_input(self):
        cfg = tiny_config()
        model = build(cfg)
        d = cfg.attr_feat_dim
        w = np.zeros_like(model.fusion_w.data)
        w[:d, :d] = np.eye(d)
        model.fusion_w.data[:] = w
        model.fusion_b.data[:] = 0.0
        feats = [Tensor(np.random.default_rng(k).random((3, d)).astype(np.float32))
                 for k in range(cfg.schema.num_groups)]
        out = model.fuse_attributes(feats)
        np.testing.assert_allclose(out.data[:, :d], feats[0].data, rtol=1e-6)
        assert np.all(out.data[:, d:] == 0.0)

    def test_matches_concat_then_matmul(self):
        cfg = tiny_config()
        model = build(cfg, seed=9)
        feats = [Tensor(np.random.default_rng(k).standard_normal((4, cfg.attr_feat_dim)).astype(np.float32))
                 for k in range(cfg.schema.num_groups)]
        out = model.fuse_attributes(feats)
        flat = np.concatenate([f.data for f in feats], axis=1)
        np.testing.assert_allclose(out.data, flat @ model.fusion_w.data + model.fusion_b.data, rtol=1e-5)


class TestExtractParts:
    def test_unit_mask_reduces_to_gap(self):
        cfg = tiny_config()
        model = build(cfg)
        pf = Tensor(np.random.default_rng(1).random((2, cfg.part_width, 4, 2)).astype(np.float32))
        ones = Tensor(np.ones((2, 1, 4, 2), dtype=np.float32))
        parts = model.extract_parts(pf, [ones, ones])
        np.testing.assert_array_equal(parts[0].data, pf.data.mean(axis=(2, 3)))

    def test_zero_mask_zero_part(self):
        cfg = tiny_config()
        model = build(cfg)
        pf = Tensor(np.random.default_rng(2).random((2, cfg.part_width, 4, 2)).astype(np.float32))
        zero = Tensor(np.zeros((2, 1, 4, 2), dtype=np.float32))
        parts = model.extract_parts(pf, [zero, zero])
        assert np.all(parts[0].data == 0.0)

    def test_hand_weighted_case(self):
        pf = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
        mask = Tensor(np.array([[[[0.5, 0.5], [1.0, 0.0]]]], dtype=np.float32))
        out = ad.weighted_average_pool(pf, mask)
        assert out.data[0, 0] == pytest.approx((0.5 + 1.0 + 3.0 + 0.0) / 4.0)


class TestRefinePart:
    def test_zero_gate_params_halve_part(self):
        cfg = tiny_config()
        model = build(cfg)
        for k in range(cfg.num_masks):
            model.gate_wl[k].data[:] = 0.0
            model.gate_wh[k].data[:] = 0.0
            model.gate_b[k].data[:] = 0.0
            model.gate_wp[k].data[:] = 0.0
        l = Tensor(np.random.default_rng(3).standard_normal((2, cfg.part_width)).astype(np.float32))
        fa = Tensor(np.random.default_rng(4).standard_normal((2, cfg.fusion_dim)).astype(np.float32))
        p = model.refine_part(l, fa, 0)
        np.testing.assert_allclose(p.data, 0.5 * l.data, rtol=1e-6)

    def test_saturated_gate_passes_part_through(self):
        cfg = tiny_config()
        model = build(cfg)
        model.gate_wl[0].data[:] = 0.0
        model.gate_wh[0].data[:] = 0.0
        model.gate_b[0].data[:] = 20.0   # tanh saturates at ~1
        model.gate_wp[0].data[:] = 5.0   # large positive rows drive sigmoid to 1
        l = Tensor(np.random.default_rng(5).standard_normal((2, cfg.part_width)).astype(np.float32))
        fa = Tensor(np.zeros((2, cfg.fusion_dim), dtype=np.float32))
        p = model.refine_part(l, fa, 0)
        np.testing.assert_allclose(p.data, l.data, rtol=1e-4)

    def test_matches_hand_computed_chain(self):
        cfg = tiny_config()
        model = build(cfg, seed=6)
        rng = np.random.default_rng(7)
        l = Tensor(rng.standard_normal((3, cfg.part_width)).astype(np.float32))
        fa = Tensor(rng.standard_normal((3, cfg.fusion_dim)).astype(np.float32))
        p = model.refine_part(l, fa, 1)
        pre = l.data @ model.gate_wl[1].data + fa.data @ model.gate_wh[1].data + model.gate_b[1].data
        gate = 1.0 / (1.0 + np.exp(-(np.tanh(pre) @ model.gate_wp[1].data)))
        np.testing.assert_allclose(p.data, l.data * gate, rtol=1e-5)

    def test_gate_attenuation_componentwise(self):
        cfg = tiny_config()
        model = build(cfg, seed=8)
        rng = np.random.default_rng(9)
        l = Tensor(rng.standard_normal((4, cfg.part_width)).astype(np.float32))
        fa = Tensor(rng.standard_normal((4, cfg.fusion_dim)).astype(np.float32))
        for k in range(cfg.num_masks):
            p = model.refine_part(l, fa, k)
            assert np.all(np.abs(p.data) <= np.abs(l.data) + 1e-7)


class TestFinalDescriptor:
    def test_dims_default_config(self):
        cfg = ModelConfig(num_train_ids=4)
        model = AttrPartModel(cfg, np.random.default_rng(0))
        out = model.full_forward(rand_images(cfg, 2, seed=1), training=False)
        assert out.f_p.shape == (2, 256)
        assert out.g.shape == (2, 256)
        assert out.f.shape == (2, 512)

    def test_zero_projection_keeps_global_tail(self):
        cfg = tiny_config()
        model = build(cfg)
        model.proj_w.data[:] = 0.0
        model.proj_b.data[:] = 0.0
        out = model.full_forward(rand_images(cfg, 2, seed=2), training=False)
        assert np.all(out.f_p.data == 0.0)
        np.testing.assert_array_equal(out.f.data[:, cfg.feat_dim:], out.g.data)

    def test_batch_permutation_equivariance(self):
        cfg = tiny_config()
        model = build(cfg, seed=1)
        x = rand_images(cfg, 4, seed=3)
        out = model.full_forward(x, training=False)
        perm = np.array([2, 0, 3, 1])
        out_p = model.full_forward(Tensor(x.data[perm]), training=False)
        np.testing.assert_allclose(out_p.f.data, out.f.data[perm], atol=1e-6)


class TestEvalModeConsistency:
    def test_single_sample_matches_batched_row(self):
        cfg = tiny_config()
        model = build(cfg, seed=11)
        # populate running stats with a couple of train-mode passes
        for s in range(3):
            model.stage1_forward(rand_images(cfg, 4, seed=20 + s), training=True)
        x = rand_images(cfg, 5, seed=30)
        batched = model.full_forward(x, training=False)
        single = model.full_forward(Tensor(x.data[2:3]), training=False)
        np.testing.assert_allclose(single.f.data[0], batched.f.data[2], atol=1e-5)


class TestEndToEndGradients:
    def test_stage2_loss_gradients_match_finite_differences(self):
        # tiny 8x8 config at float64; directional finite differences per
        # parameter tensor against the analytic gradient
        from attrparts.losses import stage2_loss, mine_triplets
        from attrparts.data import Batch

        g = AttributeGroup
        schema = AttributeSchema((g("a", 2, 0), g("b", 2, 1)), 2, ("m0", "m1"))
        cfg = ModelConfig(
            schema=schema, num_train_ids=2, image_size=(8, 8), stem_widths=(3, 4, 5),
            global_mid=5, attr_width=6, part_width=6, feat_dim=7, attr_feat_dim=5,
            fusion_dim=6, gate_hidden=5,
        )
        model = AttrPartModel(cfg, np.random.default_rng(0), dtype=np.float64)
        rng = np.random.default_rng(1)
        images = rng.random((4, 3, 8, 8))
        batch = Batch(
            images=Tensor(images.astype(np.float64)),
            identities=np.array([0, 0, 1, 1]),
            id_indices=np.array([0, 0, 1, 1]),
            cameras=np.zeros(4, dtype=np.int64),
            attr_labels=np.array([[0, 1], [0, 1], [1, 0], [1, 0]]),
        )

        # freeze BN stats and mining so the loss is a smooth function of params
        states = {k: v.copy() for k, v in model.bn_states.items()}

        def restore():
            for k, v in states.items():
                model.bn_states[k].mean = v.mean.copy()
                model.bn_states[k].var = v.var.copy()

        probe = model.full_forward(batch.images, training=True)
        restore()
        trips = mine_triplets(probe.f, batch.identities)

        def loss_value():
            out = model.full_forward(batch.images, training=True)
            lb = stage2_loss(out, batch, triplets=trips)
            restore()
            return lb.total.item()

        model.params.zero_grad()
        out = model.full_forward(batch.images, training=True)
        restore()
        lb = stage2_loss(out, batch, triplets=trips)
        ad.backward(lb.total)

        step = 1e-5
        rng = np.random.default_rng(2)
        worst = 0.0
        for name, p in model.params.items():
            t = p.tensor
            grad = np.zeros_like(t.data) if t.grad is None else t.grad
            v = rng.standard_normal(t.data.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            t.data += step * v
            hi = loss_value()
            t.data -= 2 * step * v
            lo = loss_value()
            t.data += step * v
            numeric = (hi - lo) / (2 * step)
            analytic = float((grad * v).sum())
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
            assert err < 1e-3, f"{name}: directional gradient error {err:.2e}"
        assert worst < 1e-3
