"""Patchify/embed/encode contracts of the stage-1 encoder."""

import numpy as np
import pytest

from fingermatch import tensorops as T
from fingermatch.encoder import (
    EncoderConfig,
    EncoderParams,
    embed_patches,
    encode,
    init_encoder_params,
    patchify,
)
from fingermatch.errors import ConfigError, ShapeError

TINY = EncoderConfig(image_size=8, patch_size=4, width=8, layers=1, heads=2,
                     mlp_hidden=16, embed_dim=8)


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ConfigError):
            EncoderConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigError):
            EncoderConfig(width=30, heads=4)

    def test_token_count(self):
        assert EncoderConfig(image_size=32, patch_size=8).tokens == 16


class TestPatchify:
    def test_constant_image(self):
        out = patchify(np.full((4, 4), 0.5), 2)
        assert out.shape == (4, 4)
        np.testing.assert_array_equal(out, 0.5)

    def test_index_arithmetic(self):
        img = np.arange(16.0).reshape(4, 4)
        out = patchify(img, 2)
        np.testing.assert_array_equal(out[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(out[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(out[2], [8, 9, 12, 13])

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((6, 6)), 4)

    def test_nonsquare_rejected(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((4, 8)), 2)


class TestEmbedPatches:
    def test_zero_positional_identity_projection(self):
        patches = np.arange(8.0).reshape(2, 4)
        tokens = embed_patches(patches, np.eye(4), np.zeros(4), np.zeros((2, 4)))
        np.testing.assert_array_equal(tokens, patches)

    def test_positions_shift_equal_patches(self):
        patches = np.tile(np.arange(4.0), (2, 1))
        pos = np.array([[0.0, 0, 0, 0], [1.0, 2, 3, 4]])
        tokens = embed_patches(patches, np.eye(4), np.zeros(4), pos)
        np.testing.assert_allclose(tokens[1] - tokens[0], pos[1] - pos[0], atol=1e-12)

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(3)
        patches = rng.normal(size=(5, 6))
        w, b = rng.normal(size=(6, 4)), rng.normal(size=4)
        pos = rng.normal(size=(5, 4))
        got = embed_patches(patches, w, b, pos)
        want = patches @ w + b + pos
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gap_invariant_under_joint_shuffle(self):
        rng = np.random.default_rng(5)
        patches = rng.normal(size=(6, 4))
        w, b = rng.normal(size=(4, 4)), rng.normal(size=4)
        pos = rng.normal(size=(6, 4))
        perm = rng.permutation(6)
        base = T.gap(embed_patches(patches, w, b, pos))
        shuffled = T.gap(embed_patches(patches[perm], w, b, pos[perm]))
        np.testing.assert_allclose(base, shuffled, atol=1e-12)


class TestEncode:
    def test_deterministic(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(size=(8, 8)).astype(np.float32)
        params = init_encoder_params(TINY, seed=0)
        t1, e1 = encode(img, params, TINY)
        t2, e2 = encode(img, params, TINY)
        np.testing.assert_array_equal(t1.data, t2.data)
        np.testing.assert_array_equal(e1.data, e2.data)

    def test_unit_norm_for_100_random_images(self):
        rng = np.random.default_rng(11)
        params = init_encoder_params(TINY, seed=1)
        for _ in range(100):
            img = rng.uniform(size=(8, 8)).astype(np.float32)
            _, emb = encode(img, params, TINY)
            assert abs(np.linalg.norm(emb.data) - 1.0) < 1e-6

    def test_token_count_matches_config(self):
        params = init_encoder_params(TINY, seed=2)
        tokens, _ = encode(np.zeros((8, 8), dtype=np.float32) + 0.3, params, TINY)
        assert tokens.data.shape == (TINY.tokens, TINY.width)

    def test_wrong_image_size_rejected(self):
        params = init_encoder_params(TINY, seed=3)
        with pytest.raises(ShapeError):
            encode(np.zeros((16, 16)), params, TINY)

    def test_zero_blocks_identity_head_reduction(self):
        """L=0 and an exact-identity MLP head: embedding = l2n(gap(tokens)).

        The two-layer head computes identity via x = relu(x) - relu(-x).
        """
        d = 6
        cfg = EncoderConfig(image_size=6, patch_size=3, width=d, layers=0,
                            heads=1, mlp_hidden=2 * d, embed_dim=d)
        rng = np.random.default_rng(13)
        make = lambda shape: T.Tensor(rng.normal(size=shape))
        eye = np.eye(d)
        params = EncoderParams(
            config=cfg,
            embed_w=make((cfg.patch_dim, d)),
            embed_b=make((d,)),
            pos=make((cfg.tokens, d)),
            blocks=[],
            head_w1=T.Tensor(np.concatenate([eye, -eye], axis=1)),
            head_b1=T.Tensor(np.zeros(2 * d)),
            head_w2=T.Tensor(np.concatenate([eye, -eye], axis=0)),
            head_b2=T.Tensor(np.zeros(d)),
        )
        img = rng.uniform(size=(6, 6))
        tokens, emb = encode(img, params, cfg)
        expected = T.l2_normalize(T.gap(tokens.data))
        np.testing.assert_allclose(emb.data, expected, atol=1e-12)

    def test_init_is_order_independent_and_reproducible(self):
        a = init_encoder_params(TINY, seed=9).named_parameters()
        b = init_encoder_params(TINY, seed=9).named_parameters()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
        c = init_encoder_params(TINY, seed=10).named_parameters()
        assert any(not np.array_equal(a[n].data, c[n].data) for n in a)

    def test_full_forward_gradient_tiny_dims(self):
        """Whole encoder backward against finite differences (float64)."""
        cfg = EncoderConfig(image_size=4, patch_size=2, width=4, layers=1,
                            heads=2, mlp_hidden=6, embed_dim=4)
        rng = np.random.default_rng(17)
        ref = init_encoder_params(cfg, seed=0, dtype=np.float64)
        named = ref.named_parameters()
        inputs = {k: v.data.copy() for k, v in named.items() if not k.endswith(".bk")}
        frozen = {k: v.data.copy() for k, v in named.items() if k.endswith(".bk")}
        img = rng.uniform(size=(4, 4))
        target = rng.normal(size=4) * 0.1

        def fn(t):
            from fingermatch.encoder import build_encoder_params

            def make(name, shape, kind):
                return t[name] if name in t else T.Tensor(frozen[name])

            params = build_encoder_params(cfg, make)
            _, emb = encode(img, params, cfg)
            return T.dot(emb, target)

        err = T.grad_check(fn, inputs, eps=1e-4, max_elements=4, seed=1)
        assert err < 1e-4
