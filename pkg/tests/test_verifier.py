import timeit

import numpy as np
import pytest

from hyperverify import tensor as T
from hyperverify.tensor import ConfigError, ShapeError, Tensor
from hyperverify.verifier import (DESK, LARGER, PAPER_SCALE, Conv, LayerStack, Linear, ThetaLayout,
                                  VerifierArchitecture, WeightSet, batched_predict, count_flops,
                                  count_params, forward_logits, get_architecture, predict_pairs,
                                  verify)

from _oracles import reference_verify

SMALL = VerifierArchitecture(input_size=8, stem_channels=4, blocks=((8, 2, 2), (8, 4, 1)),
                             name="small")


def random_theta(arch, rng, scale=0.3):
    return rng.normal(size=count_params(arch)) * scale


def random_images(n, size, rng):
    return rng.uniform(-1, 1, (n, 3, size, size))


class TestCountParams:
    def test_desk_default(self):
        assert count_params(DESK) == 4065 == 448 + 1184 + 2368 + 65

    def test_single_linear(self):
        assert count_params(LayerStack(1, (Linear(7, 5),))) == 7 * 5 + 5

    def test_doubling_channels(self):
        base = VerifierArchitecture(stem_channels=8, blocks=((16, 4, 2), (32, 8, 2)))
        wide = VerifierArchitecture(stem_channels=16, blocks=((32, 4, 2), (64, 8, 2)))

        def conv_weights(a):
            return sum(int(np.prod(c.weight_shape)) for _, c in a.convs())

        # stem keeps 3 input channels so it only doubles; grouped blocks quadruple
        assert conv_weights(base) == 8 * 27 + 16 * 2 * 9 + 32 * 2 * 9
        assert conv_weights(wide) == 16 * 27 + 4 * (16 * 2 * 9 + 32 * 2 * 9)
        assert 3.5 < conv_weights(wide) / conv_weights(base) < 4.0

    def test_layout_totality(self):
        for arch in (DESK, LARGER, PAPER_SCALE, SMALL):
            lay = arch.layout()
            assert lay.size == count_params(arch)
            off = 0
            for e in lay:
                assert e.offset == off
                off += e.size
            assert len(set(lay.names())) == len(lay)


class TestCountFlops:
    # five micro-architectures with hand-computed totals
    CASES = [
        (LayerStack(6, (Conv(1, 1, 3, 1, 0, 1),)), 10, 2 * 9 * 16 + 16),
        (LayerStack(1, (Linear(64, 1),)), 65, 2 * 64 + 1),
        (LayerStack(8, (Conv(4, 8, 3, 2, 1, 2),)), 8 * 2 * 9 + 8, 4 * 4 * 8 * (2 * 18 + 1)),
        (LayerStack(5, (Conv(8, 8, 3, 1, 1, 8),)), 8 * 9 + 8, 5 * 5 * 8 * (2 * 9 + 1)),
        (DESK, 4065, 16 * 16 * 16 * 55 + 8 * 8 * 32 * 73 + 4 * 4 * 64 * 73 + 129),
    ]

    @pytest.mark.parametrize("arch,params,flops", CASES)
    def test_closed_form(self, arch, params, flops):
        assert count_params(arch) == params
        assert count_flops(arch) == flops

    def test_hand_304(self):
        assert count_flops(LayerStack(6, (Conv(1, 1, 3, 1, 0, 1),))) == 304

    def test_grouped_is_dense_over_g(self):
        dense = LayerStack(8, (Conv(8, 16, 3, 1, 1, 1),))
        for g in (2, 4, 8):
            grouped = LayerStack(8, (Conv(8, 16, 3, 1, 1, g),))
            bias = 8 * 8 * 16
            assert (count_flops(grouped) - bias) * g == count_flops(dense) - bias

    def test_paper_scale_budget(self):
        assert PAPER_SCALE.input_size == 112
        assert 15_000 <= count_params(PAPER_SCALE) <= 35_000
        assert 3e6 <= count_flops(PAPER_SCALE) <= 8e6


class TestArchitecture:
    def test_groups_validated(self):
        with pytest.raises(ConfigError):
            Conv(16, 30, groups=4)

    def test_json_roundtrip(self):
        for arch in (DESK, LARGER, PAPER_SCALE):
            assert VerifierArchitecture.from_json(arch.to_json()) == arch

    def test_get_architecture(self):
        assert get_architecture("desk") == DESK
        assert get_architecture("desk", 48).input_size == 48
        with pytest.raises(ConfigError):
            get_architecture("huge")


class TestWeightSet:
    def test_views_share_memory(self):
        ws = WeightSet(np.zeros(count_params(DESK)), DESK.layout())
        ws.flat[ws.layout["head.bias"].offset] = 7.0
        assert ws["head.bias"][0] == 7.0
        ws["stem.weight"][0, 0, 0, 0] = 3.0
        assert ws.flat[0] == 3.0

    def test_size_mismatch(self):
        with pytest.raises(ConfigError):
            WeightSet(np.zeros(10), DESK.layout())

    def test_from_tensors(self):
        ws = WeightSet.from_tensors({"a": np.ones((2, 3)), "b": np.zeros(4)})
        assert ws.layout.size == 10 and ws["a"].shape == (2, 3)


class TestVerify:
    def test_zero_theta_is_half(self):
        img = np.random.default_rng(0).uniform(-1, 1, (3, 32, 32))
        assert verify(DESK, img, WeightSet(np.zeros(4065), DESK.layout())) == 0.5

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            p = verify(DESK, random_images(1, 32, rng)[0], random_theta(DESK, rng))
            assert 0.0 < p < 1.0

    def test_matches_nested_loop_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            img, th = random_images(1, 8, rng)[0], random_theta(SMALL, rng, 1.0)
            assert abs(verify(SMALL, img, th) - reference_verify(SMALL, img, th)) <= 1e-12

    def test_layout_mismatch(self):
        other = WeightSet(np.zeros(count_params(SMALL)), SMALL.layout())
        with pytest.raises(ConfigError):
            verify(DESK, np.zeros((3, 32, 32)), other)

    def test_wrong_image_shape(self):
        with pytest.raises(ShapeError):
            verify(DESK, np.zeros((3, 16, 16)), np.zeros(4065))


def looped(arch, X, thetas):
    conv = lambda x, w, b, s, p, g: T.conv2d_grouped(Tensor(x), Tensor(w), Tensor(b), s, p, g).data
    return np.array([[reference_verify(arch, X[k], thetas[j], conv) for k in range(len(X))]
                     for j in range(len(thetas))])


class TestBatchedPredict:
    @pytest.mark.parametrize("nB", [1, 2, 4, 8, 16])
    def test_matches_double_loop(self, nB):
        rng = np.random.default_rng(nB)
        X, th = random_images(nB, 32, rng), random_theta(DESK, rng, 0.2)[None].repeat(nB, 0)
        th = th + rng.normal(size=th.shape) * 0.1
        Y = batched_predict(DESK, X, th).data
        assert Y.shape == (nB, nB)
        assert np.abs(Y - looped(DESK, X, th)).max() <= 1e-6

    def test_one_is_verify(self):
        rng = np.random.default_rng(0)
        X, th = random_images(1, 32, rng), random_theta(DESK, rng)[None]
        assert batched_predict(DESK, X, th).data[0, 0] == pytest.approx(verify(DESK, X[0], th[0]),
                                                                        abs=1e-12)

    def test_identical_rows(self):
        rng = np.random.default_rng(1)
        X = random_images(5, 32, rng)
        th = np.tile(random_theta(DESK, rng), (5, 1))
        Y = batched_predict(DESK, X, th).data
        for j in range(1, 5):
            np.testing.assert_array_equal(Y[j], Y[0])

    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            batched_predict(DESK, np.zeros((3, 3, 32, 32)), np.zeros((2, 4065)))

    def test_predict_pairs_is_diagonal(self):
        rng = np.random.default_rng(2)
        X, th = random_images(6, 32, rng), rng.normal(size=(6, 4065)) * 0.2
        np.testing.assert_allclose(predict_pairs(DESK, X, th),
                                   np.diag(batched_predict(DESK, X, th).data), atol=1e-12)

    def test_differentiable_wrt_thetas(self):
        rng = np.random.default_rng(3)
        th = Tensor(rng.normal(size=(4, count_params(SMALL))) * 0.3, requires_grad=True)
        T.backward(T.tsum(batched_predict(SMALL, random_images(4, 8, rng), th)))
        assert th.grad.shape == th.shape and np.abs(th.grad).sum() > 0

    def test_float32_inference(self):
        rng = np.random.default_rng(4)
        img = random_images(1, 32, rng)[0].astype(np.float32)
        th = random_theta(DESK, rng).astype(np.float32)
        p32 = verify(DESK, img, th)
        p64 = verify(DESK, img.astype(np.float64), th.astype(np.float64))
        assert abs(p32 - p64) < 1e-4

    def test_float32_prediction_matrix(self):
        rng = np.random.default_rng(6)
        X = random_images(3, 32, rng).astype(np.float32)
        th = (rng.normal(size=(3, 4065)) * 0.2).astype(np.float32)
        assert batched_predict(DESK, X, th).dtype == np.float32

    def test_throughput_vs_loop(self):
        rng = np.random.default_rng(5)
        # float32 is the precision training and deployed verifiers run at
        X = random_images(32, 32, rng).astype(np.float32)
        th = (rng.normal(size=(32, 4065)) * 0.2).astype(np.float32)
        batched_predict(DESK, X, th)
        loop = lambda: [verify(DESK, X[k], th[j]) for j in range(32) for k in range(32)]
        # best of three on both sides, like timeit, so one scheduler hiccup cannot decide it
        tb = min(timeit.repeat(lambda: batched_predict(DESK, X, th), number=1, repeat=3))
        tl = min(timeit.repeat(loop, number=1, repeat=3))
        assert tl >= 3 * tb, f"loop {tl:.3f}s vs batched {tb:.3f}s"
