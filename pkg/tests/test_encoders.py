"""Image and sentence encoders: forward math, gradients, locality."""

import numpy as np
import pytest

from limi.encoders import (FeatureGrid, GlobalFeature, ImageEncoderConfig,
                           ImageSample, ReportSample, SentencePack,
                           TextEncoderConfig, _col2im, _im2col,
                           encode_image_global, encode_image_local,
                           encode_sentences, freeze_split,
                           grid_receptive_field, image_backward,
                           image_forward, init_image_params, init_text_params,
                           text_backward, text_forward)
from limi.errors import DimensionMismatch
from limi.numeric import ParamVector, grad_check
from limi.seeding import substream

TINY = ImageEncoderConfig(image_size=8, channels=(2, 3), global_channels=4,
                          global_dim=3, activation="tanh")


class TestConvPrimitive:
    def test_hand_summed_patches(self):
        # 4x4 ramp, kernel of ones: each output is the sum of a 3x3 window
        # centered on the even pixel grid, zero padded at the border.
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        w = np.ones((9, 1))
        cols = _im2col(x)
        out = cols @ w
        # cell (0,0): pixels (0..1, 0..1) = 0+1+4+5 = 10
        # cell (0,1): pixels (0..1, 1..3) = 1+2+3+5+6+7 = 24
        # cell (1,0): pixels (1..3, 0..1) = 4+5+8+9+12+13 = 51
        # cell (1,1): pixels (1..3, 1..3) = 5+6+7+9+10+11+13+14+15 = 90
        want = np.array([[10.0, 24.0], [51.0, 90.0]])
        np.testing.assert_array_equal(out[0, :, :, 0], want)

    def test_kernel_position_selects_pixel(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        for ki in range(3):
            for kj in range(3):
                w = np.zeros((9, 1))
                w[ki * 3 + kj, 0] = 1.0
                out = (_im2col(x) @ w)[0, :, :, 0]
                # output cell (i, j) reads pixel (2i + ki - 1, 2j + kj - 1)
                for i in range(2):
                    for j in range(2):
                        r, c = 2 * i + ki - 1, 2 * j + kj - 1
                        want = x[0, r, c, 0] if 0 <= r < 4 and 0 <= c < 4 else 0.0
                        assert out[i, j] == want

    def test_col2im_is_the_adjoint(self):
        for seed in range(20):
            rng = substream(seed, "adjoint")
            b, h, w, c = 2, int(rng.integers(2, 5)) * 2, int(rng.integers(2, 5)) * 2, 3
            x = rng.standard_normal((b, h, w, c))
            cols = _im2col(x)
            d_cols = rng.standard_normal(cols.shape)
            lhs = float(np.sum(cols * d_cols))
            rhs = float(np.sum(x * _col2im(d_cols, h, w, c)))
            np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


class TestImageEncoder:
    def test_output_shapes(self):
        rng = substream(0, "img")
        params = init_image_params(TINY, rng)
        images = rng.random((5, 8, 8))
        grid, gfeat, _ = image_forward(TINY, params, images)
        assert grid.shape == (5, 2, 2, 3)
        assert gfeat.shape == (5, 3)
        grid2, none, _ = image_forward(TINY, params, images, with_global=False)
        assert none is None
        np.testing.assert_array_equal(grid, grid2)

    def test_zero_images_zero_weights_give_zeros(self):
        params = init_image_params(TINY, substream(1, "img")).zeros_like()
        grid, gfeat, _ = image_forward(TINY, params, np.zeros((2, 8, 8)))
        assert np.all(grid == 0.0) and np.all(gfeat == 0.0)

    def test_param_gradients_match_finite_differences(self):
        rng = substream(2, "img-fd")
        params = init_image_params(TINY, rng)
        images = rng.random((2, 8, 8))
        u_grid = rng.standard_normal((2, 2, 2, 3))
        u_glob = rng.standard_normal((2, 3))

        def fn(flat):
            pv = ParamVector(flat, params.layout)
            grid, gfeat, cache = image_forward(TINY, pv, images)
            loss = float(np.sum(u_grid * grid) + np.sum(u_glob * gfeat))
            grad = image_backward(TINY, pv, cache, d_grid=u_grid, d_global=u_glob)
            return loss, grad.values

        assert grad_check(fn, params.values.copy()) < 1e-6

    def test_grid_only_gradients(self):
        rng = substream(3, "img-fd2")
        params = init_image_params(TINY, rng)
        images = rng.random((2, 8, 8))
        u_grid = rng.standard_normal((2, 2, 2, 3))

        def fn(flat):
            pv = ParamVector(flat, params.layout)
            grid, _, cache = image_forward(TINY, pv, images, with_global=False)
            grad = image_backward(TINY, pv, cache, d_grid=u_grid)
            return float(np.sum(u_grid * grid)), grad.values

        assert grad_check(fn, params.values.copy()) < 1e-6
        # the global stage receives no gradient on this path
        pv = ParamVector(params.values, params.layout)
        _, _, cache = image_forward(TINY, pv, images, with_global=False)
        grad = image_backward(TINY, pv, cache, d_grid=u_grid)
        assert np.all(grad.segment("global_w") == 0.0)
        assert np.all(grad.segment("conv2_w") == 0.0)

    def test_wrong_image_size_rejected(self):
        params = init_image_params(TINY, substream(4, "img"))
        with pytest.raises(DimensionMismatch):
            image_forward(TINY, params, np.zeros((1, 9, 9)))

    def test_freeze_split_partitions_at_the_grid(self):
        params = init_image_params(TINY, substream(5, "img"))
        frozen, tunable = freeze_split(params, TINY)
        assert sorted(frozen + tunable) == sorted(params.names())
        assert set(frozen) == {"conv0_w", "conv0_b", "conv1_w", "conv1_b"}
        assert "global_w" in tunable and "conv2_w" in tunable


class TestReceptiveField:
    CFG = ImageEncoderConfig(image_size=32, channels=(8, 16, 32),
                             global_channels=16, global_dim=8)

    def test_field_arithmetic(self):
        assert grid_receptive_field(self.CFG, 0, 0) == ((0, 8), (0, 8))
        assert grid_receptive_field(self.CFG, 1, 2) == ((1, 16), (9, 24))
        assert grid_receptive_field(self.CFG, 3, 3) == ((17, 32), (17, 32))
        with pytest.raises(DimensionMismatch):
            grid_receptive_field(self.CFG, 4, 0)

    def test_pixels_outside_the_field_cannot_move_a_cell(self):
        cfg = ImageEncoderConfig(image_size=16, channels=(4, 8),
                                 global_channels=8, global_dim=4, activation="tanh")
        rng = substream(0, "rf")
        params = init_image_params(cfg, rng)
        base = rng.random((1, 16, 16))
        grid0, _, _ = image_forward(cfg, params, base, with_global=False)
        cell = (3, 0)
        (r0, r1), (c0, c1) = grid_receptive_field(cfg, *cell)
        inside = np.zeros((16, 16), dtype=bool)
        inside[r0:r1, c0:c1] = True

        bumped = base.copy()
        bumped[0][~inside] = np.clip(bumped[0][~inside] + 0.37, 0.0, 1.0)
        grid1, _, _ = image_forward(cfg, params, bumped, with_global=False)
        np.testing.assert_array_equal(grid0[0, cell[0], cell[1]],
                                      grid1[0, cell[0], cell[1]])

        poked = base.copy()
        poked[0][inside] = np.clip(poked[0][inside] + 0.37, 0.0, 1.0)
        grid2, _, _ = image_forward(cfg, params, poked, with_global=False)
        assert np.any(grid2[0, cell[0], cell[1]] != grid0[0, cell[0], cell[1]])


class TestTextEncoder:
    def test_mean_embedding_hand_case(self):
        cfg = TextEncoderConfig(vocab_size=3, embed_dim=2, hidden_dim=2,
                                text_dim=2, activation="identity")
        params = init_text_params(cfg, substream(0, "txt"))
        params.segment("embed")[:] = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]
        params.segment("w0")[:] = np.eye(2)
        params.segment("b0")[:] = 0.0
        params.segment("w1")[:] = np.eye(2)
        params.segment("b1")[:] = 0.0
        feats, _ = text_forward(cfg, params, [np.array([0, 1]), np.array([2, 2, 2])])
        np.testing.assert_allclose(feats, [[0.5, 0.5], [2.0, 2.0]], atol=1e-15)

    def test_token_order_is_ignored(self):
        cfg = TextEncoderConfig(vocab_size=8, embed_dim=4, hidden_dim=6, text_dim=3)
        params = init_text_params(cfg, substream(1, "txt"))
        a, _ = text_forward(cfg, params, [np.array([1, 5, 2])])
        b, _ = text_forward(cfg, params, [np.array([2, 1, 5])])
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_param_gradients_match_finite_differences(self):
        cfg = TextEncoderConfig(vocab_size=4, embed_dim=2, hidden_dim=3,
                                text_dim=2, activation="tanh")
        rng = substream(2, "txt-fd")
        params = init_text_params(cfg, rng)
        sentences = [np.array([0, 1, 3]), np.array([2]), np.array([3, 3])]
        u = rng.standard_normal((3, 2))

        def fn(flat):
            pv = ParamVector(flat, params.layout)
            feats, cache = text_forward(cfg, pv, sentences)
            grad = text_backward(cfg, pv, cache, u)
            return float(np.sum(u * feats)), grad.values

        assert grad_check(fn, params.values.copy()) < 1e-6

    def test_repeated_token_gradient_accumulates(self):
        cfg = TextEncoderConfig(vocab_size=4, embed_dim=2, hidden_dim=2,
                                text_dim=2, activation="identity")
        params = init_text_params(cfg, substream(3, "txt"))
        feats, cache = text_forward(cfg, params, [np.array([1, 1, 2])])
        grad = text_backward(cfg, params, cache, np.ones((1, 2)))
        d_embed = grad.segment("embed")
        assert np.all(d_embed[0] == 0.0) and np.all(d_embed[3] == 0.0)
        assert np.any(d_embed[1] != 0.0) and np.any(d_embed[2] != 0.0)
        # token 1 appears twice as often as token 2 in the mean
        np.testing.assert_allclose(d_embed[1], 2.0 * d_embed[2], rtol=1e-12)

    def test_unknown_token_rejected(self):
        cfg = TextEncoderConfig(vocab_size=4, embed_dim=2, hidden_dim=2, text_dim=2)
        params = init_text_params(cfg, substream(4, "txt"))
        with pytest.raises(DimensionMismatch):
            text_forward(cfg, params, [np.array([0, 4])])
        with pytest.raises(DimensionMismatch):
            text_forward(cfg, params, [np.array([], dtype=np.int64)])


class TestDomainTypes:
    def test_single_sample_wrappers(self):
        icfg = TINY
        tcfg = TextEncoderConfig(vocab_size=6, embed_dim=3, hidden_dim=4, text_dim=3)
        rng = substream(0, "types")
        iparams = init_image_params(icfg, rng)
        tparams = init_text_params(tcfg, rng)
        img = ImageSample(rng.random((8, 8)))
        rep = ReportSample([[0, 1, 2], [5, 5]])

        grid = encode_image_local(img, icfg, iparams)
        assert isinstance(grid, FeatureGrid)
        assert grid.side == 2 and grid.width == 3
        assert grid.cells().shape == (4, 3)

        gfeat = encode_image_global(img, icfg, iparams)
        assert isinstance(gfeat, GlobalFeature) and gfeat.vector.shape == (3,)

        pack = encode_sentences(rep, tcfg, tparams)
        assert isinstance(pack, SentencePack) and len(pack) == 2
        assert pack.stacked().shape == (2, 3)

    def test_validation(self):
        with pytest.raises(DimensionMismatch):
            ImageSample(np.full((4, 4), 1.5))
        with pytest.raises(DimensionMismatch):
            ReportSample([])
        with pytest.raises(DimensionMismatch):
            ReportSample([[0, -1]])
        with pytest.raises(DimensionMismatch):
            FeatureGrid(np.zeros((2, 3, 4)))

    def test_grid_cells_are_row_major(self):
        feats = np.arange(2 * 2 * 1.0).reshape(2, 2, 1)
        grid = FeatureGrid(feats)
        np.testing.assert_array_equal(grid.cells()[:, 0], [0.0, 1.0, 2.0, 3.0])
