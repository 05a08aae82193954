import dataclasses

import numpy as np
import pytest

from crtnet import autodiff as ad
from crtnet import model as mdl
from crtnet.autodiff import Tensor
from crtnet.model import BoundingBox, ModelConfig
from crtnet.rng import Rng


def tiny_setup(seed=0, **overrides):
    cfg = dataclasses.replace(mdl.tiny_config(), **overrides)
    params = mdl.init_params(cfg, Rng(seed))
    return cfg, params


def random_image(rng, side=24):
    return rng.uniform(0.0, 1.0, (3, side, side))


# ---------------------------------------------------------------------------
# input preparation
# ---------------------------------------------------------------------------

def bilinear_oracle(img, out_h, out_w):
    """Direct per-pixel bilinear formula (half-pixel centers)."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
                sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                out[ch, i, j] = (img[ch, y0, x0] * (1 - fy) * (1 - fx)
                                 + img[ch, y0, x1] * (1 - fy) * fx
                                 + img[ch, y1, x0] * fy * (1 - fx)
                                 + img[ch, y1, x1] * fy * fx)
    return out


class TestPrepareInputs:
    def test_full_image_box_matches_context_stream(self):
        cfg, _ = tiny_setup()
        img = random_image(Rng(1))
        i_t, i_c = mdl.prepare_inputs(Tensor(img), BoundingBox(0, 0, 24, 24), cfg)
        np.testing.assert_allclose(i_t.data, i_c.data, atol=1e-6)

    def test_constant_image_stays_constant(self):
        cfg, _ = tiny_setup()
        img = np.full((3, 24, 24), 0.3)
        i_t, i_c = mdl.prepare_inputs(Tensor(img), BoundingBox(5, 7, 6, 4), cfg)
        np.testing.assert_allclose(i_t.data, 0.3, atol=1e-12)
        np.testing.assert_allclose(i_c.data, 0.3, atol=1e-12)

    def test_upsample_matches_direct_formula(self):
        img = Rng(2).uniform(0, 1, (3, 2, 2))
        got = mdl.bilinear_resize(img, 4, 4)
        np.testing.assert_allclose(got, bilinear_oracle(img, 4, 4), atol=1e-9)

    def test_downsample_matches_direct_formula(self):
        img = Rng(3).uniform(0, 1, (3, 9, 7))
        got = mdl.bilinear_resize(img, 4, 5)
        np.testing.assert_allclose(got, bilinear_oracle(img, 4, 5), atol=1e-9)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 4)

    def test_box_outside_image_rejected(self):
        cfg, _ = tiny_setup()
        with pytest.raises(ValueError):
            mdl.prepare_inputs(Tensor(random_image(Rng(0))), BoundingBox(20, 20, 8, 8), cfg)

    def test_uint8_input_scaled_to_unit_range(self):
        cfg, _ = tiny_setup()
        img = np.full((3, 24, 24), 255, dtype=np.uint8)
        i_t, _ = mdl.prepare_inputs(img, BoundingBox(0, 0, 24, 24), cfg)
        np.testing.assert_allclose(i_t.data, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class TestEncode:
    def test_output_shape_contract(self):
        cfg = ModelConfig()
        params = mdl.init_params(cfg, Rng(0))
        img = Tensor(Rng(1).uniform(0, 1, (3, cfg.image_side, cfg.image_side)))
        out = mdl.encode("target", img, params)
        assert out.shape == (cfg.feat_channels, cfg.feat_h, cfg.feat_w)

    def test_shared_encoders_agree_bitwise(self):
        cfg, params = tiny_setup(share_encoders=True)
        img = Tensor(Rng(4).uniform(0, 1, (3, cfg.image_side, cfg.image_side)))
        a = mdl.encode("target", img, params)
        b = mdl.encode("context", img, params)
        assert a.data.tobytes() == b.data.tobytes()

    def test_separate_encoders_differ(self):
        for seed in range(5):
            cfg, params = tiny_setup(seed=seed, share_encoders=False)
            img = Tensor(Rng(seed + 100).uniform(0, 1, (3, cfg.image_side, cfg.image_side)))
            a = mdl.encode("target", img, params)
            b = mdl.encode("context", img, params)
            assert np.abs(a.data - b.data).max() > 0

    def test_wrong_input_shape(self):
        cfg, params = tiny_setup()
        with pytest.raises(ad.ShapeError):
            mdl.encode("target", Tensor(np.zeros((3, 8, 8))), params)


# ---------------------------------------------------------------------------
# tokenization and pooling
# ---------------------------------------------------------------------------

class TestTokens:
    def test_relabeling(self):
        a = Tensor(np.array([[[1.0, 3.0]], [[2.0, 4.0]]]))  # D=2, H=1, W=2
        tokens = mdl.tokenize_context(a)
        np.testing.assert_array_equal(tokens[0].data, [1.0, 2.0])
        np.testing.assert_array_equal(tokens[1].data, [3.0, 4.0])

    def test_token_count(self):
        a = Tensor(Rng(0).uniform(-1, 1, (5, 3, 4)))
        assert len(mdl.tokenize_context(a)) == 12

    def test_reconstruction_is_bitwise(self):
        a = Tensor(Rng(1).uniform(-1, 1, (4, 2, 3)))
        tokens = mdl.tokenize_context(a)
        rebuilt = np.stack([t.data for t in tokens]).T.reshape(a.shape)
        assert rebuilt.tobytes() == a.data.tobytes()

    def test_pool_constant_field(self):
        out = mdl.pool_target(Tensor(np.full((6, 2, 2), 1.25)))
        np.testing.assert_array_equal(out.data, np.full(6, 1.25))

    def test_pool_single_channel_mean(self):
        out = mdl.pool_target(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        np.testing.assert_array_equal(out.data, [2.5])

    def test_pool_equals_token_mean_bitwise(self):
        a = Tensor(Rng(2).uniform(-1, 1, (8, 4, 4)))
        pooled = mdl.pool_target(a)
        token_mean = np.stack([t.data for t in mdl.tokenize_context(a)]).mean(axis=0)
        assert pooled.data.tobytes() == token_mean.tobytes()


class TestGridCell:
    def test_paper_scale_midpoint(self):
        cfg = ModelConfig(image_side=224, feat_channels=64, feat_h=7, feat_w=7,
                          heads=4, num_classes=8)
        # midpoint (100, 30): row floor(30/32)=0, col floor(100/32)=3 -> index 3
        box = BoundingBox(98, 28, 4, 4)
        assert box.midpoint() == (100.0, 30.0)
        assert mdl.grid_cell_index(box, 224, 224, cfg) == 3

    def test_corner_midpoint(self):
        cfg, _ = tiny_setup()
        assert mdl.grid_cell_index(BoundingBox(0, 0, 1, 1), 96, 96, cfg) == 0

    def test_bottom_right_clamps_to_last_cell(self):
        cfg, _ = tiny_setup()
        box = BoundingBox(94, 94, 2, 2)  # midpoint (95, 95) on a 96x96 image
        assert mdl.grid_cell_index(box, 96, 96, cfg) == cfg.num_tokens - 1


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

class TestDecoder:
    def test_identical_keys_give_uniform_attention(self):
        cfg, params = tiny_setup()
        lp = params.layers[0]
        z_t = Tensor(Rng(5).uniform(-1, 1, (1, cfg.feat_channels)))
        z_c = Tensor(np.tile(Rng(6).uniform(-1, 1, (1, cfg.feat_channels)),
                             (cfg.num_tokens, 1)))
        rows = []
        mdl.decoder_layer(z_t, z_c, lp, cfg, None, False, attn_rows=rows)
        for row in rows:
            np.testing.assert_allclose(row, 1.0 / cfg.num_tokens, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        cfg, params = tiny_setup()
        for seed in range(10):
            z_t = Tensor(Rng(seed).uniform(-2, 2, (1, cfg.feat_channels)))
            z_c = Tensor(Rng(seed + 50).uniform(-2, 2, (cfg.num_tokens, cfg.feat_channels)))
            rows = []
            mdl.decoder_layer(z_t, z_c, params.layers[0], cfg, None, False, attn_rows=rows)
            for row in rows:
                assert abs(row.sum() - 1.0) < 1e-9

    def test_single_head_matches_attention_oracle(self):
        # The grid size does not constrain the attention op; two context
        # rows are passed in directly.
        cfg, params = tiny_setup(feat_channels=2, heads=1, feat_h=1, feat_w=1,
                                 mlp_hidden=4)
        lp = params.layers[0]
        z_t = np.array([[0.3, -0.7]])
        z_c = np.array([[1.0, 0.5], [-0.25, 0.75]])

        q = z_t @ lp.wq[0].data
        k = z_c @ lp.wk[0].data
        v = z_c @ lp.wv[0].data
        scores = (q @ k.T) / np.sqrt(2.0)
        e = np.exp(scores - scores.max())
        attn = e / e.sum()
        expected = attn @ v @ lp.wo[0].data + lp.bo.data

        got = mdl._multi_head_attention(Tensor(z_t), Tensor(z_c), lp, cfg)
        np.testing.assert_allclose(got.data, expected, atol=1e-9)

    def test_stack_of_one_equals_single_layer(self):
        cfg, params = tiny_setup()
        z_t = Tensor(Rng(7).uniform(-1, 1, (1, cfg.feat_channels)))
        z_c = Tensor(Rng(8).uniform(-1, 1, (cfg.num_tokens, cfg.feat_channels)))
        a = mdl.decode_stack(z_t, z_c, params, cfg, None, False)
        b = mdl.decoder_layer(z_t, z_c, params.layers[0], cfg, None, False)
        assert a.data.tobytes() == b.data.tobytes()

    def test_output_shape_for_deeper_stacks(self):
        for x in (1, 2, 3):
            cfg, params = tiny_setup(decoder_layers=x)
            z_t = Tensor(Rng(1).uniform(-1, 1, (1, cfg.feat_channels)))
            z_c = Tensor(Rng(2).uniform(-1, 1, (cfg.num_tokens, cfg.feat_channels)))
            out = mdl.decode_stack(z_t, z_c, params, cfg, None, False)
            assert out.shape == (1, cfg.feat_channels)

    def test_two_layer_stack_equals_manual_composition(self):
        cfg, params = tiny_setup(decoder_layers=2)
        z_t = Tensor(Rng(3).uniform(-1, 1, (1, cfg.feat_channels)))
        z_c = Tensor(Rng(4).uniform(-1, 1, (cfg.num_tokens, cfg.feat_channels)))
        stacked = mdl.decode_stack(z_t, z_c, params, cfg, Rng(42), True)
        rng = Rng(42)
        manual = mdl.decoder_layer(z_t, z_c, params.layers[0], cfg, rng, True)
        manual = mdl.decoder_layer(manual, z_c, params.layers[1], cfg, rng, True)
        assert stacked.data.tobytes() == manual.data.tobytes()

    def test_permuting_tokens_with_embeddings_is_invariant(self):
        cfg, params = tiny_setup()
        rng = Rng(21)
        z_t = Tensor(rng.uniform(-1, 1, (1, cfg.feat_channels)))
        z_c_data = rng.uniform(-1, 1, (cfg.num_tokens, cfg.feat_channels))
        perm = Rng(22).permutation(cfg.num_tokens)
        base = mdl.decode_stack(z_t, Tensor(z_c_data), params, cfg, None, False)
        permuted = mdl.decode_stack(z_t, Tensor(z_c_data[perm]), params, cfg, None, False)
        np.testing.assert_allclose(permuted.data, base.data, atol=1e-9)


# ---------------------------------------------------------------------------
# forward / fusion
# ---------------------------------------------------------------------------

def tiny_forward(seed=0, **overrides):
    cfg, params = tiny_setup(seed=seed, **overrides)
    img = Rng(seed + 1000).uniform(0, 1, (3, 24, 24))
    box = BoundingBox(6, 8, 9, 7)
    return cfg, params, img, box


class TestForward:
    def test_distributions_sum_to_one(self):
        cfg, params, img, box = tiny_forward()
        pred = mdl.forward(img, box, params)
        for dist in (pred.y_t, pred.y_tc, pred.y_p):
            assert abs(dist.data.sum() - 1.0) < 1e-6

    def test_fusion_formula(self):
        cfg, params, img, box = tiny_forward(seed=3)
        pred = mdl.forward(img, box, params)
        p = pred.p.item()
        expected = p * pred.y_t.data + (1 - p) * pred.y_tc.data
        np.testing.assert_allclose(pred.y_p.data, expected, atol=1e-12)

    def test_fusion_endpoints_via_saturated_confidence(self):
        # A huge confidence bias saturates the sigmoid to exactly 1 (or 0).
        for bias, want in ((800.0, "y_t"), (-800.0, "y_tc")):
            cfg, params, img, box = tiny_forward(seed=4)
            params.u_w2.data[:] = 0.0
            params.u_b2.data[:] = bias
            pred = mdl.forward(img, box, params)
            assert pred.p.item() == (1.0 if want == "y_t" else 0.0)
            target = pred.y_t.data if want == "y_t" else pred.y_tc.data
            np.testing.assert_array_equal(pred.y_p.data, target)

    def test_halfway_fusion_of_opposed_heads(self):
        y_t = Tensor(np.array([1.0, 0.0]))
        y_tc = Tensor(np.array([0.0, 1.0]))
        p = Tensor(np.array([0.5]))
        one = Tensor(np.ones(1))
        y_p = ad.add(ad.scalar_mul(p, y_t), ad.scalar_mul(ad.sub(one, p), y_tc))
        np.testing.assert_array_equal(y_p.data, [0.5, 0.5])

    def test_fusion_modes(self):
        cfg, params, img, box = tiny_forward(seed=5)
        base = mdl.forward(img, box, params)
        t_only = mdl.forward(img, box, params,
                             dataclasses.replace(cfg, fusion_mode="target_only"))
        c_only = mdl.forward(img, box, params,
                             dataclasses.replace(cfg, fusion_mode="context_only"))
        assert t_only.y_p.data.tobytes() == base.y_t.data.tobytes()
        assert c_only.y_p.data.tobytes() == base.y_tc.data.tobytes()

    def test_fusion_convexity(self):
        for seed in range(30):
            cfg, params, img, box = tiny_forward(seed=seed)
            pred = mdl.forward(img, box, params)
            lo = np.minimum(pred.y_t.data, pred.y_tc.data)
            hi = np.maximum(pred.y_t.data, pred.y_tc.data)
            assert np.all(pred.y_p.data >= lo - 1e-12)
            assert np.all(pred.y_p.data <= hi + 1e-12)

    def test_attention_shape(self):
        cfg, params, img, box = tiny_forward(seed=6)
        pred = mdl.forward(img, box, params, collect_attention=True)
        assert pred.attention.shape == (cfg.decoder_layers, cfg.heads, cfg.num_tokens)

    def test_context_locality_of_target_head(self):
        cfg, params, img, box = tiny_forward(seed=7)
        pred = mdl.forward(img, box, params)
        tampered = img.copy()
        tampered[:, 0:3, 0:3] = 0.0  # strictly outside the box
        pred2 = mdl.forward(tampered, box, params)
        assert pred.y_t.data.tobytes() == pred2.y_t.data.tobytes()
        assert pred.y_tc.data.tobytes() != pred2.y_tc.data.tobytes()

    def test_detachment_blocks_target_encoder_exactly(self):
        cfg, params, img, box = tiny_forward(seed=8)
        pred = mdl.forward(img, box, params)
        loss = ad.add(ad.cross_entropy(pred.y_t, 0), ad.cross_entropy(pred.y_p, 0))
        params.zero_grad()
        ad.backward(loss)
        for t in params.target_encoder.conv_w + params.target_encoder.conv_b:
            assert t.grad is None
        # the context-integrated loss does reach the target encoder
        params.zero_grad()
        pred = mdl.forward(img, box, params)
        ad.backward(ad.cross_entropy(pred.y_tc, 0))
        total = sum(np.abs(t.grad).sum() for t in params.target_encoder.conv_w)
        assert total > 0

    def test_detachment_does_not_change_forward_values(self):
        cfg, params, img, box = tiny_forward(seed=9)
        plain = mdl.forward(img, box, params, cfg)
        detached_off = mdl.forward(img, box, params,
                                   dataclasses.replace(cfg, detach_target_heads=False))
        assert plain.y_p.data.tobytes() == detached_off.y_p.data.tobytes()

    def test_shared_encoder_halves_distinct_parameters(self):
        _, shared = tiny_setup(share_encoders=True)
        _, separate = tiny_setup(share_encoders=False)
        assert len(shared.encoder_tensors()) * 2 == len(separate.encoder_tensors())


class TestConfigValidation:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ValueError):
            ModelConfig(feat_channels=10, heads=4)

    def test_fusion_mode_checked(self):
        with pytest.raises(ValueError):
            ModelConfig(fusion_mode="mystery")

    def test_grid_compatible_with_conv_stack(self):
        with pytest.raises(ValueError):
            ModelConfig(image_side=64, feat_h=3, feat_w=3)
