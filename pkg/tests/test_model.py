"""Network wiring, the focal loss, and checkpoint bundles."""

import numpy as np
import pytest

from clickseg.autodiff import Tensor, bias_add, conv2d, relu
from clickseg.clicks import Click, encode_clicks
from clickseg.errors import DimensionError
from clickseg.model import (
    ArchConfig, EncodedInput, ModelParams, backbone_features, forward,
    fuse_guidance, init_params, load_bundle, nfl_loss, save_bundle,
)

H, W = 32, 48


def make_input(rng, h=H, w=W, clicks=()):
    image = rng.random((3, h, w))
    guidance = encode_clicks(list(clicks), h, w, radius=3)
    return EncodedInput(image=image, guidance=guidance, prev_prob=np.zeros((h, w)))


class TestBackbone:
    def test_feature_scales(self):
        rng = np.random.default_rng(0)
        params = init_params(ArchConfig(), seed=0)
        x = make_input(rng, 64, 96)
        f_low, f_high = backbone_features(x, params)
        assert f_low.shape == (16, 32, 48)
        assert f_high.shape == (32, 16, 24)

    def test_zero_weights_zero_features(self):
        params = init_params(ArchConfig(), seed=0)
        for t in params.tensors.values():
            t.data[:] = 0.0
        rng = np.random.default_rng(1)
        f_low, f_high = backbone_features(make_input(rng), params)
        assert not f_low.data.any() and not f_high.data.any()

    def test_indivisible_dims_rejected(self):
        rng = np.random.default_rng(2)
        params = init_params(ArchConfig(), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            backbone_features(make_input(rng, 30, 48), params)

    def test_zero_fusion_weights_match_pure_image_branch(self):
        rng = np.random.default_rng(3)
        params = init_params(ArchConfig(), seed=0)
        for name in ("fuse1.w", "fuse1.b", "fuse2.w", "fuse2.b"):
            params.tensors[name].data[:] = 0.0
        x = make_input(rng)
        fused = fuse_guidance(x, params)
        t1 = relu(bias_add(conv2d(Tensor(x.image), params["img1.w"], pad=1), params["img1.b"]))
        t2 = bias_add(conv2d(t1, params["img2.w"], stride=2, pad=1), params["img2.b"])
        np.testing.assert_allclose(fused.data, np.maximum(t2.data, 0.0), atol=1e-12)

    def test_guidance_reaches_features(self):
        rng = np.random.default_rng(4)
        params = init_params(ArchConfig(), seed=0)
        image = rng.random((3, H, W))
        a = EncodedInput(image=image, guidance=encode_clicks([Click(5, 5, True, 1)], H, W, 3),
                         prev_prob=np.zeros((H, W)))
        b = EncodedInput(image=image, guidance=encode_clicks([Click(20, 30, True, 1)], H, W, 3),
                         prev_prob=np.zeros((H, W)))
        fa = fuse_guidance(a, params)
        fb = fuse_guidance(b, params)
        assert np.abs(fa.data - fb.data).max() > 1e-9

    def test_receptive_field_bounded(self):
        rng = np.random.default_rng(5)
        params = init_params(ArchConfig(), seed=0)
        x = make_input(rng, 64, 96)
        _, f0 = backbone_features(x, params)
        image = x.image.copy()
        image[:, 32, 48] += 1.0
        _, f1 = backbone_features(
            EncodedInput(image=image, guidance=x.guidance, prev_prob=x.prev_prob), params)
        diff = np.abs(f1.data - f0.data).sum(axis=0) > 1e-12
        rows, cols = np.nonzero(diff)
        # stacked 3x3 convs: rf = 3 (img1) +2 (img2,s2) +4 (down,s2)
        #                    +32 (aspp dil4 at jump 4) = 41 full-res pixels,
        # so cells within ceil((41//2 + 3)/4) = 6 of (32, 48)//4.
        assert rows.size > 0
        assert np.abs(rows - 8).max() <= 6 and np.abs(cols - 12).max() <= 6


class TestForward:
    def test_zero_weights_give_half(self):
        params = init_params(ArchConfig(), seed=0)
        for t in params.tensors.values():
            t.data[:] = 0.0
        rng = np.random.default_rng(6)
        out = forward(make_input(rng), [], params)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-15)

    def test_output_strictly_in_unit_interval(self):
        rng = np.random.default_rng(7)
        for variant in ("none", "sgm", "sgm_fuse", "sgm_fuse_sgm", "hsgm"):
            params = init_params(ArchConfig(fpm=variant), seed=3)
            clicks = [Click(10, 10, True, 1), Click(20, 40, False, 2)]
            x = make_input(rng, clicks=clicks)
            out = forward(x, clicks, params).data
            assert out.shape == (H, W)
            assert (out > 0).all() and (out < 1).all()

    def test_click_path_isolated_by_message_weights(self):
        # Same guidance maps, different click lists: with zero message
        # transforms the propagation blocks cannot move information, so
        # predictions must be identical.
        rng = np.random.default_rng(8)
        params = init_params(ArchConfig(fpm="hsgm"), seed=4)
        params.tensors["sgm.w_c"].data[:] = 0.0
        params.tensors["hsgm.w_f"].data[:] = 0.0
        click = Click(12, 20, True, 1)
        x = make_input(rng, clicks=[click])
        out_with = forward(x, [click], params).data
        out_without = forward(x, [], params).data
        np.testing.assert_allclose(out_with, out_without, atol=1e-12)

    def test_clicks_matter_with_nonzero_messages(self):
        rng = np.random.default_rng(9)
        params = init_params(ArchConfig(fpm="hsgm"), seed=4)
        params.tensors["sgm.w_c"].data[:] = rng.standard_normal((32, 32)) * 0.3
        click = Click(12, 20, True, 1)
        x = make_input(rng, clicks=[click])
        out_with = forward(x, [click], params).data
        out_without = forward(x, [], params).data
        assert np.abs(out_with - out_without).max() > 1e-9


class TestNflLoss:
    @staticmethod
    def scalar_oracle(p, y, gamma):
        num = den = 0.0
        for pi, yi in zip(p.reshape(-1), y.reshape(-1)):
            pt = pi if yi else 1.0 - pi
            pt = max(pt, 1e-12)
            wgt = (1.0 - pt) ** gamma
            num += wgt * -np.log(pt)
            den += wgt
        return num / max(den, 1e-12)

    def test_gamma_zero_is_mean_bce(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.01, 0.99, (8, 8))
        y = rng.random((8, 8)) > 0.5
        ours = nfl_loss(Tensor(p), y, gamma=0.0).item()
        bce = float(np.mean(-np.where(y, np.log(p), np.log(1 - p))))
        assert abs(ours - bce) <= 1e-12

    def test_perfect_prediction_near_zero(self):
        y = np.ones((4, 4), dtype=bool)
        p = Tensor(np.full((4, 4), 1.0 - 1e-7))
        assert nfl_loss(p, y, gamma=2.0).item() < 1e-6

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(0.01, 0.99, (8, 8))
        y = rng.random((8, 8)) > 0.5
        ours = nfl_loss(Tensor(p), y, gamma=2.0).item()
        assert abs(ours - self.scalar_oracle(p, y, 2.0)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nfl_loss(Tensor(np.zeros((4, 4))), np.zeros((4, 5), dtype=bool))

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            nfl_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 2), dtype=bool), gamma=-1)


class TestBundles:
    def test_round_trip_reproduces_forward_bit_exactly(self, tmp_path):
        rng = np.random.default_rng(12)
        coarse = init_params(ArchConfig(), seed=5)
        fine = init_params(ArchConfig(), seed=6)
        clicks = [Click(8, 9, True, 1)]
        x = make_input(rng, clicks=clicks)
        before = forward(x, clicks, coarse).data

        path = tmp_path / "pair.ckpt"
        save_bundle(path, coarse, fine)
        coarse2, fine2 = load_bundle(path)
        after = forward(x, clicks, coarse2).data
        assert before.tobytes() == after.tobytes()
        assert fine2 is not None and fine2.arch == fine.arch

    def test_coarse_only_bundle(self, tmp_path):
        coarse = init_params(ArchConfig(fpm="none"), seed=7)
        path = tmp_path / "solo.ckpt"
        save_bundle(path, coarse)
        loaded, fine = load_bundle(path)
        assert fine is None
        assert loaded.arch.fpm == "none"
        assert loaded.checksum() == coarse.checksum()

    def test_missing_checkpoint_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_bundle(tmp_path / "nope.ckpt")

    def test_parameter_count_deterministic(self):
        a = init_params(ArchConfig(), seed=0)
        b = init_params(ArchConfig(), seed=99)
        assert a.n_parameters() == b.n_parameters() > 0
