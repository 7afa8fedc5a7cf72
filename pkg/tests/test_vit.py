"""Encoder pieces: patch embedding, attention, block update, full encode."""

import math

import numpy as np
import pytest

from proxbundle.errors import ConfigError
from proxbundle.rng import Rng
from proxbundle.tensor import Tape, Tensor, backward, cross_entropy, sumsq
from proxbundle.vit import (
    PatchEmbedConfig,
    VitConfig,
    attention_head,
    attention_matrix,
    block_param_dict,
    embed_patches,
    encode,
    extract_patches,
    init_block,
    init_vit,
    load_checkpoint,
    save_checkpoint,
    transformer_block,
    vit_param_dict,
)

from conftest import assert_gradients_match


def tiny_cfg(layers=2, heads=2, d=8, ffn=12, img=8, patch=4, pos=True):
    pcfg = PatchEmbedConfig(img, img, 1, patch, d)
    return VitConfig(num_layers=layers, num_heads=heads, embed_dim=d, ffn_dim=ffn,
                     patch=pcfg, positional_embedding=pos)


class TestPatchEmbedding:
    def test_identity_embedding_zero_patch(self):
        cfg = PatchEmbedConfig(2, 2, 1, 2, 4)
        seq = embed_patches(np.zeros((2, 2)), cfg, Tensor(np.eye(4)),
                            Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(seq.data, np.zeros((2, 4)))

    def test_patch_order_row_major(self):
        # 4x4 image, patch 2 -> 4 patches; values encode (row, col) blocks
        img = np.arange(16, dtype=float).reshape(4, 4)
        cfg = PatchEmbedConfig(4, 4, 1, 2, 4)
        patches = extract_patches(img, cfg)
        np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])
        np.testing.assert_array_equal(patches[3], [10, 11, 14, 15])

    def test_each_token_is_embedding_times_patch(self, rng):
        cfg = PatchEmbedConfig(8, 8, 1, 4, 6)
        img = rng.normal(8, 8)
        e = rng.normal(6, 16)
        cls = rng.normal(1, 6)
        seq = embed_patches(img, cfg, Tensor(e), Tensor(cls)).data
        np.testing.assert_array_equal(seq[0], cls[0])
        # independent flattening: walk the patch grid by hand
        for gi in range(2):
            for gj in range(2):
                patch = img[gi * 4 : gi * 4 + 4, gj * 4 : gj * 4 + 4].ravel()
                np.testing.assert_allclose(seq[1 + gi * 2 + gj], e @ patch, atol=1e-12)

    def test_positional_embedding_added(self, rng):
        cfg = PatchEmbedConfig(4, 4, 1, 2, 3)
        img = rng.normal(4, 4)
        e, cls = Tensor(rng.normal(3, 4)), Tensor(rng.normal(1, 3))
        pos = rng.normal(5, 3)
        without = embed_patches(img, cfg, e, cls).data
        with_pos = embed_patches(img, cfg, e, cls, Tensor(pos)).data
        np.testing.assert_allclose(with_pos, without + pos, atol=1e-14)

    def test_dimension_mismatch(self):
        cfg = PatchEmbedConfig(4, 4, 1, 2, 3)
        with pytest.raises(ConfigError):
            embed_patches(np.zeros((5, 4)), cfg, Tensor(np.zeros((3, 4))),
                          Tensor(np.zeros((1, 3))))
        with pytest.raises(ConfigError):
            PatchEmbedConfig(5, 4, 1, 2, 3)


class TestAttention:
    def test_single_token_softmax(self, rng):
        tokens = Tensor(rng.normal(1, 4))
        wq, wk, wv = (Tensor(rng.normal(4, 3)) for _ in range(3))
        a = attention_matrix(tokens, wq, wk, 3)
        np.testing.assert_array_equal(a.data, [[1.0]])
        h = attention_head(tokens, wq, wk, wv, 3)
        np.testing.assert_allclose(h.data, tokens.data @ wv.data, atol=1e-14)

    def test_zero_logits_give_uniform_mean(self, rng):
        tokens = Tensor(rng.normal(4, 5))
        wq = Tensor(np.zeros((5, 2)))  # Q = 0 -> QK^T = 0
        wk, wv = Tensor(rng.normal(5, 2)), Tensor(rng.normal(5, 2))
        a = attention_head(tokens, wq, wk, wv, 2)
        v = tokens.data @ wv.data
        np.testing.assert_allclose(a.data, np.tile(v.mean(axis=0), (4, 1)), atol=1e-12)

    def test_matches_two_loop_formula(self, rng):
        tokens = rng.normal(3, 4)
        wq, wk, wv = rng.normal(4, 2), rng.normal(4, 2), rng.normal(4, 2)
        out = attention_head(Tensor(tokens), Tensor(wq), Tensor(wk), Tensor(wv), 2).data
        q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
        expected = np.zeros((3, 2))
        for i in range(3):
            logits = np.array([q[i] @ k[j] / math.sqrt(2) for j in range(3)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for j in range(3):
                expected[i] += weights[j] * v[j]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        tokens = Tensor(rng.normal(6, 5) * 3)
        a = attention_matrix(tokens, Tensor(rng.normal(5, 3)), Tensor(rng.normal(5, 3)), 3)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((a.data >= 0) & (a.data <= 1))


class TestTransformerBlock:
    def test_zero_weights_identity(self, rng):
        cfg = tiny_cfg()
        block = init_block(cfg, Rng(3))
        for mats in (block.wq, block.wk, block.wv):
            for t in mats:
                t.data = np.zeros_like(t.data)
        block.wo.data = np.zeros_like(block.wo.data)
        block.w1.data = np.zeros_like(block.w1.data)
        block.w2.data = np.zeros_like(block.w2.data)
        tokens = rng.normal(5, 8)
        out = transformer_block(Tensor(tokens), block, cfg.dk)
        np.testing.assert_allclose(out.data, tokens, atol=1e-14)

    def test_single_head_reduction(self, rng):
        # h = 1, W_o = I, FFN zero -> out = tokens + attention head
        cfg = tiny_cfg(heads=1, d=4, ffn=6)
        block = init_block(cfg, Rng(4))
        block.wo.data = np.eye(4)
        block.w1.data = np.zeros_like(block.w1.data)
        block.w2.data = np.zeros_like(block.w2.data)
        tokens = Tensor(rng.normal(3, 4))
        head = attention_head(tokens, block.wq[0], block.wk[0], block.wv[0], cfg.dk)
        out = transformer_block(tokens, block, cfg.dk)
        np.testing.assert_allclose(out.data, tokens.data + head.data, atol=1e-12)

    def test_matches_step_by_step_reference(self, rng):
        from scipy.special import erf

        cfg = tiny_cfg(heads=2, d=6, ffn=9)
        block = init_block(cfg, Rng(5))
        for t in [*block.wq, *block.wk, *block.wv, block.wo, block.w1, block.w2]:
            t.data = t.data + 0.1 * Rng(6).normal(*t.shape)
        block.b1.data = 0.1 * Rng(7).normal(1, 9)
        block.b2.data = 0.1 * Rng(8).normal(1, 6)
        block.ln_gain.data = 1.0 + 0.1 * Rng(9).normal(1, 6)
        block.ln_bias.data = 0.1 * Rng(10).normal(1, 6)
        tokens = rng.normal(4, 6)

        heads = []
        for j in range(2):
            q = tokens @ block.wq[j].data
            k = tokens @ block.wk[j].data
            v = tokens @ block.wv[j].data
            logits = q @ k.T / math.sqrt(cfg.dk)
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            heads.append(w @ v)
        multi = np.concatenate(heads, axis=1) @ block.wo.data
        z_res = tokens + multi
        mu = z_res.mean(axis=1, keepdims=True)
        var = z_res.var(axis=1, keepdims=True)
        z_norm = (z_res - mu) / np.sqrt(var + 1e-5)
        z_norm = z_norm * block.ln_gain.data + block.ln_bias.data
        pre = z_norm @ block.w1.data + block.b1.data
        hidden = pre * 0.5 * (1.0 + erf(pre / math.sqrt(2.0)))
        expected = z_res + hidden @ block.w2.data + block.b2.data

        out = transformer_block(Tensor(tokens), block, cfg.dk)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)


class TestEncode:
    def test_degenerate_weights_keep_class_token(self):
        cfg = tiny_cfg(layers=1, pos=False)
        params = init_vit(cfg, Rng(11))
        for block in params.blocks:
            for mats in (block.wq, block.wk, block.wv):
                for t in mats:
                    t.data = np.zeros_like(t.data)
            block.wo.data = np.zeros_like(block.wo.data)
            block.w1.data = np.zeros_like(block.w1.data)
            block.w2.data = np.zeros_like(block.w2.data)
        imgs = np.zeros((2, 8, 8))
        feats, _ = encode(imgs, cfg, params)
        np.testing.assert_allclose(feats.data[:, 0], params.class_token.data[0], atol=1e-14)

    def test_single_sample_single_column(self, rng):
        cfg = tiny_cfg()
        params = init_vit(cfg, Rng(12))
        img = rng.normal(8, 8)
        feats, _ = encode([img], cfg, params)
        assert feats.shape == (8, 1)

    def test_composition_oracle(self, rng):
        cfg = tiny_cfg(layers=2, heads=2, d=8)
        params = init_vit(cfg, Rng(13))
        imgs = [rng.normal(8, 8) for _ in range(3)]
        feats, taps = encode(imgs, cfg, params, tap_points={1})
        for j, img in enumerate(imgs):
            seq = embed_patches(img, cfg.patch, params.embed, params.class_token, params.pos)
            seq = transformer_block(seq, params.blocks[0], cfg.dk)
            np.testing.assert_allclose(taps[1].data[:, j], seq.data[0], atol=1e-10)
            seq = transformer_block(seq, params.blocks[1], cfg.dk)
            np.testing.assert_allclose(feats.data[:, j], seq.data[0], atol=1e-10)

    def test_tap_point_out_of_range(self):
        cfg = tiny_cfg(layers=2)
        params = init_vit(cfg, Rng(14))
        with pytest.raises(ConfigError):
            encode(np.zeros((1, 8, 8)), cfg, params, tap_points={3})

    def test_permutation_invariance_without_positions(self, rng):
        cfg = tiny_cfg(layers=2, pos=False)
        params = init_vit(cfg, Rng(15))
        img = rng.normal(8, 8)
        seq = embed_patches(img, cfg.patch, params.embed, params.class_token)
        out = seq
        for block in params.blocks:
            out = transformer_block(out, block, cfg.dk)

        perm = np.array([2, 0, 3, 1])
        permuted = seq.data.copy()
        permuted[1:] = seq.data[1:][perm]
        out_p = Tensor(permuted)
        for block in params.blocks:
            out_p = transformer_block(out_p, block, cfg.dk)
        np.testing.assert_allclose(out_p.data[0], out.data[0], atol=1e-10)
        np.testing.assert_allclose(out_p.data[1:], out.data[1:][perm], atol=1e-10)

    def test_logit_shift_leaves_attention_unchanged(self, rng):
        # adding a constant to every entry of QK^T == shifting all rows
        tokens = rng.normal(4, 5)
        wq, wk = rng.normal(5, 3), rng.normal(5, 3)
        logits = (tokens @ wq) @ (tokens @ wk).T / math.sqrt(3)
        from proxbundle.tensor import softmax_rows

        base = softmax_rows(Tensor(logits)).data
        shifted = softmax_rows(Tensor(logits + 11.3)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)


class TestEncodeGradients:
    def test_all_parameters_pass_fd(self, rng):
        cfg = tiny_cfg(layers=2, heads=2, d=6, ffn=8)
        params = init_vit(cfg, Rng(17))
        imgs = [rng.normal(8, 8) for _ in range(2)]
        labels = np.array([0, 1])
        clf = Tensor(Rng(18).normal(6, 2) * 0.3)
        checked = {**vit_param_dict(params), "clf": clf}

        def loss():
            feats, _ = encode(imgs, cfg, params)
            from proxbundle.tensor import matmul, transpose

            logits = matmul(transpose(feats), clf)
            return cross_entropy(logits, labels)

        assert assert_gradients_match(loss, list(checked.values()), reject_kinks=False)


class TestCheckpoints:
    def test_roundtrip(self, tmp_path, rng):
        cfg = tiny_cfg()
        params = init_vit(cfg, Rng(19))
        tensors = {name: t.data for name, t in vit_param_dict(params).items()}
        meta = {"layers": cfg.num_layers, "embed_dim": cfg.embed_dim}
        save_checkpoint(tmp_path / "ckpt", tensors, meta)
        loaded, meta2 = load_checkpoint(tmp_path / "ckpt")
        assert meta2 == meta
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_block_param_names_stable(self):
        cfg = tiny_cfg(heads=2)
        block = init_block(cfg, Rng(20))
        names = set(block_param_dict(block, "block0"))
        assert "block0.wq0" in names and "block0.wq1" in names
        assert "block0.ln_gain" in names and "block0.b2" in names
