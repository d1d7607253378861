"""Engine tests: op semantics, shape errors, and gradient oracles."""

import numpy as np
import pytest

from promptad import tensor as T
from promptad.errors import ConfigError, NumericError, ShapeError
from promptad.optim import adamw_step, clip_grad_norm

from gradcheck import check_gradients, dtype, fd_settings, rel_error


def proj_loss(out_fn, rng):
    """Random-projection scalarizer: sum(r * f(...)) with fixed r."""
    probe = {}

    def make():
        out = out_fn()
        if "r" not in probe:
            probe["r"] = T.Tensor(rng.normal(size=out.shape))
        return T.sum_all(T.mul(out, probe["r"]))

    return make


class TestMatmul:
    def test_identity(self):
        a = np.arange(9, dtype=np.float32).reshape(3, 3)
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
        assert np.allclose(out.data, a)

    def test_hand_checked(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
        assert np.allclose(out.data, [[3.0], [7.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self, rng):
        a = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        T.sum_all(T.matmul(a, b)).backward()
        assert np.allclose(a.grad, np.ones((5, 3)) @ b.data.T, atol=1e-5)

    @pytest.mark.parametrize("shapes", [((5, 4), (4, 3)), ((2, 3, 4), (2, 4, 2)), ((6, 1), (1, 6))])
    def test_fd(self, rng, shapes):
        with dtype(np.float64):
            a = T.Tensor(rng.normal(size=shapes[0]), requires_grad=True)
            b = T.Tensor(rng.normal(size=shapes[1]), requires_grad=True)
            check_gradients(proj_loss(lambda: T.matmul(a, b), rng), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_last_axis(T.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_saturation_is_stable(self):
        out = T.softmax_last_axis(T.Tensor([1000.0, 0.0]))
        assert abs(out.data[0] - 1.0) < 1e-9
        assert abs(out.data[1]) < 1e-9

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_last_axis(T.Tensor([np.nan, 1.0]))

    def test_rows_sum_to_one(self, rng):
        for _ in range(50):
            x = T.Tensor(rng.normal(scale=5.0, size=(4, 7)))
            out = T.softmax_last_axis(x)
            assert np.all(out.data >= 0) and np.all(out.data <= 1)
            assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_fd(self, rng):
        with dtype(np.float64):
            x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            check_gradients(proj_loss(lambda: T.softmax_last_axis(x), rng), [x])


class TestMaskedSoftmax:
    def test_forced_zero(self):
        out = T.masked_softmax(T.Tensor([1.0, 2.0, 3.0]), np.array([False, False, True]))
        e = np.exp([1.0, 2.0])
        assert np.allclose(out.data[:2], e / e.sum(), atol=1e-6)
        assert out.data[2] == 0.0

    def test_degenerate_mask_matches_softmax_bitwise(self, rng):
        x = T.Tensor(rng.normal(size=(5, 6)))
        plain = T.softmax_last_axis(x).data
        masked = T.masked_softmax(x, np.zeros((5, 6), dtype=bool)).data
        assert np.array_equal(plain, masked)

    def test_random_masks_renormalize(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            x = T.Tensor(r.normal(size=(6, 6)))
            mask = r.random((6, 6)) < 0.4
            mask[:, 0] = False  # keep every row feasible
            out = T.masked_softmax(x, mask)
            assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(out.data[mask] == 0.0)

    def test_fully_masked_slice_rejected(self):
        with pytest.raises(NumericError):
            T.masked_softmax(T.Tensor([1.0, 2.0]), np.array([True, True]))

    def test_fd(self, rng):
        with dtype(np.float64):
            x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            mask = rng.random((4, 5)) < 0.3
            mask[:, 2] = False
            check_gradients(proj_loss(lambda: T.masked_softmax(x, mask), rng), [x])


class TestNormalization:
    def test_layer_norm_constant_slice_is_zero(self):
        x = T.Tensor(np.full((2, 5), 3.7))
        out = T.layer_norm(x, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.0)

    def test_layer_norm_fd(self, rng):
        with dtype(np.float64):
            for shape in [(3, 4), (2, 3, 5), (7, 2)]:
                x = T.Tensor(rng.normal(size=shape), requires_grad=True)
                g = T.Tensor(rng.normal(size=shape[-1:]), requires_grad=True)
                b = T.Tensor(rng.normal(size=shape[-1:]), requires_grad=True)
                check_gradients(proj_loss(lambda: T.layer_norm(x, g, b), rng), [x, g, b])

    def test_batch_norm_train_updates_running_stats(self, rng):
        x = T.Tensor(rng.normal(loc=2.0, size=(4, 3, 3, 2)))
        g = T.Tensor(np.ones(2))
        b = T.Tensor(np.zeros(2))
        rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
        T.batch_norm(x, g, b, rm, rv, training=True)
        assert not np.allclose(rm, 0.0)

    def test_batch_norm_eval_uses_running_stats(self, rng):
        x = T.Tensor(rng.normal(size=(2, 2, 2, 3)))
        g = T.Tensor(np.ones(3))
        b = T.Tensor(np.zeros(3))
        rm = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        rv = np.array([4.0, 4.0, 4.0], dtype=np.float32)
        out = T.batch_norm(x, g, b, rm, rv, training=False)
        expected = (x.data - rm) / np.sqrt(rv + 1e-5)
        assert np.allclose(out.data, expected, atol=1e-6)
        assert np.allclose(rm, [1.0, 2.0, 3.0])  # untouched in eval

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm_fd(self, rng, training):
        with dtype(np.float64):
            x = T.Tensor(rng.normal(size=(3, 4, 4, 2)), requires_grad=True)
            g = T.Tensor(rng.normal(size=(2,)), requires_grad=True)
            b = T.Tensor(rng.normal(size=(2,)), requires_grad=True)
            rm = rng.normal(size=2)
            rv = rng.random(2) + 0.5

            def out_fn():
                return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)

            check_gradients(proj_loss(out_fn, rng), [x, g, b])


class TestSpatialOps:
    def test_deconv_doubles_shape(self, rng):
        x = T.Tensor(rng.normal(size=(7, 7, 3)))
        w = T.Tensor(rng.normal(size=(2, 2, 3, 5)))
        b = T.Tensor(np.zeros(5))
        assert T.deconv2d_2x2_stride2(x, w, b).shape == (14, 14, 5)

    def test_conv_keeps_shape(self, rng):
        x = T.Tensor(rng.normal(size=(6, 5, 2)))
        w = T.Tensor(rng.normal(size=(3, 3, 2, 4)))
        out = T.conv2d_3x3(x, w, T.Tensor(np.zeros(4)))
        assert out.shape == (6, 5, 4)

    def test_conv_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d_3x3(T.Tensor(np.zeros((4, 4, 3))), T.Tensor(np.zeros((3, 3, 2, 4))),
                         T.Tensor(np.zeros(4)))

    def test_avg_pool(self):
        x = T.Tensor(np.arange(16, dtype=np.float32).reshape(4, 4, 1))
        out = T.avg_pool2x2(x)
        assert np.allclose(out.data[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    @pytest.mark.parametrize("op", ["conv", "deconv", "conv1x1", "pool"])
    def test_fd(self, rng, op):
        with dtype(np.float64):
            for shape in [(1, 4, 4, 2), (2, 3, 5, 3), (1, 6, 2, 1)]:
                x = T.Tensor(rng.normal(size=shape), requires_grad=True)
                cin = shape[-1]
                if op == "conv":
                    w = T.Tensor(rng.normal(size=(3, 3, cin, 2)), requires_grad=True)
                    b = T.Tensor(rng.normal(size=(2,)), requires_grad=True)
                    fn = lambda: T.conv2d_3x3(x, w, b)
                    params = [x, w, b]
                elif op == "deconv":
                    w = T.Tensor(rng.normal(size=(2, 2, cin, 2)), requires_grad=True)
                    b = T.Tensor(rng.normal(size=(2,)), requires_grad=True)
                    fn = lambda: T.deconv2d_2x2_stride2(x, w, b)
                    params = [x, w, b]
                elif op == "conv1x1":
                    w = T.Tensor(rng.normal(size=(cin, 3)), requires_grad=True)
                    b = T.Tensor(rng.normal(size=(3,)), requires_grad=True)
                    fn = lambda: T.conv2d_1x1(x, w, b)
                    params = [x, w, b]
                else:
                    if shape[1] % 2 or shape[2] % 2:
                        continue
                    fn = lambda: T.avg_pool2x2(x)
                    params = [x]
                check_gradients(proj_loss(fn, rng), params)


def bilinear_reference(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Scalar-loop half-pixel bilinear oracle."""
    in_h, in_w, c = src.shape
    out = np.zeros((out_h, out_w, c))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            for ch in range(c):
                top = src[y0, x0, ch] * (1 - fx) + src[y0, x1, ch] * fx
                bot = src[y1, x0, ch] * (1 - fx) + src[y1, x1, ch] * fx
                out[oy, ox, ch] = top * (1 - fy) + bot * fy
    return out


class TestBilinearResize:
    def test_same_size_identity(self, rng):
        x = T.Tensor(rng.normal(size=(5, 7, 2)))
        assert np.allclose(T.bilinear_resize(x, 5, 7).data, x.data)

    def test_constant_stays_constant(self):
        x = T.Tensor(np.full((3, 3, 1), 2.5))
        out = T.bilinear_resize(x, 9, 5)
        assert np.allclose(out.data, 2.5, atol=1e-6)

    def test_matches_scalar_oracle(self, rng):
        src = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
        got = T.bilinear_resize(T.Tensor(src), 4, 4).data
        want = bilinear_reference(src, 4, 4)
        assert np.allclose(got, want, atol=1e-6)
        # frozen expectation from the oracle
        assert np.allclose(want[:, :, 0], [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ])

    def test_random_sizes_match_oracle(self, rng):
        for _ in range(5):
            h, w = rng.integers(2, 7, size=2)
            oh, ow = rng.integers(1, 9, size=2)
            src = rng.normal(size=(h, w, 3))
            got = T.bilinear_resize(T.Tensor(src), int(oh), int(ow)).data
            assert np.allclose(got, bilinear_reference(src, int(oh), int(ow)), atol=1e-5)

    def test_fd(self, rng):
        with dtype(np.float64):
            x = T.Tensor(rng.normal(size=(1, 3, 4, 2)), requires_grad=True)
            check_gradients(proj_loss(lambda: T.bilinear_resize(x, 5, 3), rng), [x])


class TestElementwiseAndStructure:
    @pytest.mark.parametrize("name", ["relu", "sigmoid", "abs", "square", "add", "mul", "div",
                                      "sub", "concat", "narrow", "expand0", "transpose",
                                      "mean_axes", "sum_axes", "linear", "dropout"])
    def test_fd(self, rng, name):
        with dtype(np.float64):
            x = T.Tensor(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.2,
                         requires_grad=True)
            y = T.Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)
            if name == "relu":
                fn, params = lambda: T.relu(x), [x]
            elif name == "sigmoid":
                fn, params = lambda: T.sigmoid(x), [x]
            elif name == "abs":
                fn, params = lambda: T.abs_(x), [x]
            elif name == "square":
                fn, params = lambda: T.square(x), [x]
            elif name == "add":
                fn, params = lambda: T.add(x, y), [x, y]
            elif name == "sub":
                fn, params = lambda: T.sub(x, y), [x, y]
            elif name == "mul":
                fn, params = lambda: T.mul(x, y), [x, y]
            elif name == "div":
                fn, params = lambda: T.div(x, y), [x, y]
            elif name == "concat":
                fn, params = lambda: T.concat([x, y], axis=0), [x, y]
            elif name == "narrow":
                fn, params = lambda: T.narrow(x, 1, 3), [x]
            elif name == "expand0":
                fn, params = lambda: T.expand0(x, 4), [x]
            elif name == "transpose":
                fn, params = lambda: T.transpose(x, (1, 0)), [x]
            elif name == "mean_axes":
                fn, params = lambda: T.mean_axes(x, (0,)), [x]
            elif name == "sum_axes":
                fn, params = lambda: T.sum_axes(x, (1,)), [x]
            elif name == "linear":
                w = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
                b = T.Tensor(rng.normal(size=(5,)), requires_grad=True)
                fn, params = lambda: T.linear(x, w, b), [x, w, b]
            else:  # dropout: mask must stay fixed across FD evals
                keep_rng = np.random.default_rng(3)
                mask = (keep_rng.random((3, 4)) >= 0.3) / 0.7
                fn, params = lambda: T.mul(x, T.Tensor(mask)), [x]
            check_gradients(proj_loss(fn, rng), params)

    def test_add_broadcast_bias(self, rng):
        x = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(4,)), requires_grad=True)
        T.sum_all(T.add(x, b)).backward()
        assert np.allclose(b.grad, 6.0)

    def test_dropout_zero_rate_is_identity(self, rng):
        x = T.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        assert T.dropout(x, 0.0, rng) is x

    def test_dropout_scales_kept_entries(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(np.ones((100, 100)))
        out = T.dropout(x, 0.4, rng)
        kept = out.data[out.data > 0]
        assert np.allclose(kept, 1.0 / 0.6, atol=1e-6)
        assert abs((out.data > 0).mean() - 0.6) < 0.05


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        T.sum_all(x).backward()
        assert np.allclose(x.grad, 1.0)

    def test_non_scalar_rejected(self, rng):
        x = T.Tensor(rng.normal(size=(4,)), requires_grad=True)
        with pytest.raises(ShapeError):
            T.relu(x).backward()

    def test_grad_accumulates_across_uses(self, rng):
        x = T.Tensor(rng.normal(size=(3,)) + 2.0, requires_grad=True)
        T.sum_all(T.add(T.square(x), x)).backward()
        assert np.allclose(x.grad, 2 * x.data + 1, atol=1e-5)

    def test_all_reachable_parameters_get_grads(self, rng):
        a = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        T.sum_all(T.matmul(a, b)).backward()
        assert a.grad is not None and b.grad is not None

    def test_collect_parameters(self, rng):
        a = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        c = T.matmul(a, b)
        found = T.collect_parameters(c)
        assert {id(a), id(b)} == {id(t) for t in found}


class TestAdamW:
    def test_pure_decay_step(self):
        p = np.array([1.0])
        state = {}
        adamw_step([p], [np.array([0.0])], state, lr=0.1, weight_decay=0.1)
        assert np.allclose(p, [0.99])

    def test_quadratic_bowl_descends(self):
        p = np.array([3.0, -2.0])
        state = {}
        losses = []
        for _ in range(10):
            losses.append(float((p ** 2).sum()))
            adamw_step([p], [2.0 * p], state, lr=0.1)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_matches_adam_reference_without_decay(self, rng):
        # independent Adam implementation as oracle
        p_ref = rng.normal(size=(4,)).astype(np.float64)
        p = p_ref.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        state = {}
        for t in range(1, 6):
            g = np.sin(p_ref * t)  # deterministic pseudo-gradients
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            p_ref = p_ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
            adamw_step([p], [g], state, lr=0.01, weight_decay=0.0)
        assert np.allclose(p, p_ref, atol=1e-6)

    def test_state_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step([np.zeros(3)], [np.zeros(4)], {}, lr=0.1)

    def test_clip_grad_norm(self):
        t1 = T.Tensor(np.zeros(3), requires_grad=True)
        t1.grad = np.array([3.0, 0.0, 0.0], dtype=np.float32)
        t2 = T.Tensor(np.zeros(3), requires_grad=True)
        t2.grad = np.array([0.0, 4.0, 0.0], dtype=np.float32)
        norm = clip_grad_norm([t1, t2], 1.0)
        assert abs(norm - 5.0) < 1e-6
        total = np.sqrt((t1.grad ** 2).sum() + (t2.grad ** 2).sum())
        assert abs(total - 1.0) < 1e-6


class TestDtypeSwitch:
    def test_switch_changes_new_tensors(self):
        T.set_default_dtype(np.float64)
        assert T.Tensor([1.0]).data.dtype == np.float64
        T.set_default_dtype(np.float32)
        assert T.Tensor([1.0]).data.dtype == np.float32

    def test_bad_dtype_rejected(self):
        with pytest.raises(ConfigError):
            T.set_default_dtype(np.int32)

    def test_f32_fd_within_loose_tolerance(self, rng):
        # the same checks the acceptance suite runs at float32
        h, tol = fd_settings()
        assert T.get_default_dtype() == np.float32
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        check_gradients(proj_loss(lambda: T.matmul(x, w), rng), [x, w], h=h, tol=tol)
