import numpy as np
import pytest

from latentvideo import autodiff as ad


def fd_grad(f, x, h=1e-3):
    """Central finite differences of a scalar function over one array input."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def check_grads(build, shapes, seed=0, tol=1e-6, h=1e-4):
    """Compare reverse-mode grads of build(*leaves) against finite differences.

    build maps leaf tensors to a scalar Tensor; all leaves use float64 so the
    comparison can be tight.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-0.5, 0.5, s) for s in shapes]
    leaves = [ad.Tensor(a, dtype=np.float64) for a in arrays]
    loss = build(*leaves)
    grads = ad.gradient(loss, {f"p{i}": t for i, t in enumerate(leaves)})
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [ad.Tensor(arr, dtype=np.float64) for arr in arrays]
            args[i] = ad.Tensor(v, dtype=np.float64)
            return build(*args).item()

        g_fd = fd_grad(f, a, h=h)
        g = grads[f"p{i}"].data
        np.testing.assert_allclose(g, g_fd, rtol=tol, atol=tol, err_msg=f"input {i}")


class TestForward:
    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
        out = ad.matmul(ad.Tensor(np.eye(3, dtype=np.float32)), ad.Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_shape_mismatch_reports_both(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_transposed_conv_output_extent(self):
        # (in-1)*s - 2p + k = (4-1)*2 - 2 + 4 = 8
        x = ad.Tensor(np.zeros((2, 4, 4), dtype=np.float32))
        w = ad.Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32))
        out = ad.conv_transpose2d(x, w, stride=2, padding=1)
        assert out.shape == (3, 8, 8)

    def test_conv_ones_hand_summed(self):
        # 3x3 all-ones kernel on all-ones 5x5, pad 1: interior 9, corners 4
        x = ad.Tensor(np.ones((1, 5, 5), dtype=np.float32))
        w = ad.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = ad.conv2d(x, w, stride=1, padding=1).data[0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0 and out[4, 4] == 4.0
        assert out[0, 2] == 6.0

    def test_pointwise_basics(self):
        z = ad.Tensor(np.zeros(4, dtype=np.float32))
        assert np.all(ad.tanh(z).data == 0.0)
        assert np.all(ad.sigmoid(z).data == 0.5)
        x = ad.Tensor(np.arange(4, dtype=np.float32))
        assert np.all(ad.mul(x, z).data == 0.0)

    def test_activation_ranges(self):
        # moderate inputs stay strictly inside; float32 saturates at the
        # boundary for huge inputs but never escapes it
        vals = np.clip(np.random.default_rng(1).normal(scale=3, size=1000), -5, 5)
        x = ad.Tensor(vals.astype(np.float32))
        t = ad.tanh(x).data
        s = ad.sigmoid(x).data
        assert np.all(t > -1) and np.all(t < 1)
        assert np.all(s > 0) and np.all(s < 1)
        big = ad.Tensor(np.array([-1e4, 1e4], dtype=np.float32))
        assert np.all(np.abs(ad.tanh(big).data) <= 1)
        assert np.all((ad.sigmoid(big).data >= 0) & (ad.sigmoid(big).data <= 1))

    def test_reductions(self):
        assert ad.l1(ad.Tensor([1.0, -2.0, 3.0])).item() == 6.0
        assert ad.sq_l2(ad.Tensor([3.0, 4.0])).item() == 25.0

    def test_mean_matches_serial_64bit_sum(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, 16).astype(np.float32)
        serial = 0.0
        for v in x:
            serial += float(v)
        assert abs(ad.mean(ad.Tensor(x)).item() - serial / 16) <= 1e-6

    def test_empty_reduction_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.l1(ad.Tensor(np.zeros(0, dtype=np.float32)))

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.ones(3))
        with pytest.raises(ad.ShapeError):
            ad.gradient(ad.add(x, x), {"x": x})

    def test_non_leaf_param_rejected(self):
        x = ad.Tensor(np.ones(3))
        y = ad.add(x, x)
        with pytest.raises(ValueError):
            ad.gradient(ad.l1(y), {"y": y})

    def test_unused_param_gets_zero_grad(self):
        x = ad.Tensor(np.ones(3))
        z = ad.Tensor(np.ones(5))
        g = ad.gradient(ad.l1(x), {"x": x, "z": z})
        np.testing.assert_array_equal(g["z"].data, np.zeros(5))
        assert g["z"].shape == z.shape


class TestResample:
    def test_downsample_preserves_constants(self):
        x = ad.Tensor(np.full((3, 8, 8), 0.37, dtype=np.float32))
        out = ad.downsample2(x)
        assert out.shape == (3, 4, 4)
        np.testing.assert_allclose(out.data, 0.37, rtol=1e-6)

    def test_upsample_preserves_constants(self):
        x = ad.Tensor(np.full((3, 4, 4), 0.8, dtype=np.float32))
        out = ad.upsample2(x)
        assert out.shape == (3, 8, 8)
        np.testing.assert_allclose(out.data, 0.8, rtol=1e-6)

    def test_odd_extent_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.downsample2(ad.Tensor(np.zeros((1, 5, 6))))

    def test_down_up_matches_convolution_oracle(self):
        # explicit mirrored 1-D convolution, applied per axis
        kern = np.array([1, 4, 6, 4, 1]) / 16.0

        def blur1d(v):
            n = len(v)
            out = np.zeros(n)
            for i in range(n):
                for t in range(-2, 3):
                    j = i + t
                    while j < 0 or j >= n:
                        j = -j if j < 0 else 2 * (n - 1) - j
                    out[i] += kern[t + 2] * v[j]
            return out

        def blur2d(img, gain=1.0):
            # the gain applies once per separable pass
            img = gain * np.apply_along_axis(blur1d, -1, img)
            return gain * np.apply_along_axis(blur1d, -2, img)

        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (1, 8, 8))
        down = blur2d(x)[:, ::2, ::2]
        zi = np.zeros((1, 8, 8))
        zi[:, ::2, ::2] = down
        up = blur2d(zi, gain=2.0)

        got_down = ad.downsample2(ad.Tensor(x, dtype=np.float64)).data
        np.testing.assert_allclose(got_down, down, atol=1e-12)
        got = ad.upsample2(ad.Tensor(down, dtype=np.float64)).data
        np.testing.assert_allclose(got, up, atol=1e-12)
        # low-pass: smoother than the input but still close to it
        assert np.max(np.abs(got - x)) < 0.8

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (4, 3, 8, 8)).astype(np.float32)
        whole = ad.downsample2(ad.Tensor(x)).data
        for i in range(4):
            one = ad.downsample2(ad.Tensor(x[i])).data
            np.testing.assert_array_equal(whole[i], one)


class TestGradients:
    def test_sq_l2_scalar(self):
        x = ad.Tensor([3.0])
        g = ad.gradient(ad.sq_l2(x), {"x": x})
        np.testing.assert_allclose(g["x"].data, [6.0])

    def test_l1_sign_convention(self):
        x = ad.Tensor([-2.0])
        g = ad.gradient(ad.l1(x), {"x": x})
        np.testing.assert_allclose(g["x"].data, [-1.0])
        z = ad.Tensor([0.0])
        g0 = ad.gradient(ad.l1(z), {"z": z})
        np.testing.assert_array_equal(g0["z"].data, [0.0])

    def test_matmul_fd(self):
        check_grads(lambda a, b: ad.sq_l2(ad.matmul(a, b)), [(3, 4), (4, 2)])
        check_grads(lambda a, b: ad.sq_l2(ad.matmul(a, b)), [(3, 4), (4,)])
        check_grads(lambda a, b: ad.sq_l2(ad.matmul(a, b)), [(4,), (4, 2)])

    def test_bias_add_fd(self):
        check_grads(lambda x, b: ad.sq_l2(ad.bias_add(x, b)), [(5, 3), (3,)])
        check_grads(lambda x, b: ad.sq_l2(ad.bias_add(x, b)), [(3, 4, 4), (3,)])
        check_grads(lambda x, b: ad.sq_l2(ad.bias_add(x, b)), [(2, 3, 4, 4), (3,)])

    def test_pointwise_fd(self):
        check_grads(lambda x: ad.l1(ad.tanh(x)), [(4, 3)])
        check_grads(lambda x: ad.sq_l2(ad.sigmoid(x)), [(6,)])
        check_grads(lambda a, b: ad.sq_l2(ad.mul(ad.sub(a, b), ad.add(a, b))), [(5,), (5,)])
        check_grads(lambda x: ad.mean(ad.relu(x)), [(7,)], seed=3)
        check_grads(lambda x: ad.sq_l2(ad.scale(x, -1.7)), [(4,)])

    def test_conv2d_fd(self):
        check_grads(
            lambda x, w: ad.sq_l2(ad.conv2d(x, w, stride=1, padding=1)),
            [(2, 5, 5), (3, 2, 3, 3)],
        )
        check_grads(
            lambda x, w: ad.sq_l2(ad.conv2d(x, w, stride=2, padding=1)),
            [(1, 2, 6, 6), (2, 2, 3, 3)],
        )

    def test_conv2d_fd_nondivisible_grid(self):
        # (6 + 0 - 3) % 2 != 0: last row/col never enter a window
        check_grads(
            lambda x, w: ad.sq_l2(ad.conv2d(x, w, stride=2, padding=0)),
            [(1, 6, 6), (2, 1, 3, 3)],
        )

    def test_conv_transpose2d_fd(self):
        check_grads(
            lambda x, w: ad.sq_l2(ad.conv_transpose2d(x, w, stride=2, padding=1)),
            [(2, 3, 3), (2, 3, 4, 4)],
        )
        check_grads(
            lambda x, w: ad.sq_l2(ad.conv_transpose2d(x, w, stride=1, padding=0)),
            [(1, 2, 2), (1, 2, 3, 3)],
        )

    def test_structural_ops_fd(self):
        check_grads(lambda a, b: ad.sq_l2(ad.concat([a, b], axis=0)), [(2, 3), (4, 3)])
        check_grads(lambda a, b: ad.sq_l2(ad.stack([a, b], axis=1)), [(3,), (3,)])
        check_grads(lambda x: ad.sq_l2(ad.take(x, 1, axis=1)), [(3, 4)])
        check_grads(lambda x: ad.sq_l2(ad.reshape(x, (6,))), [(2, 3)])
        check_grads(lambda x: ad.sq_l2(ad.transpose(x)), [(2, 5)])

    def test_resample_fd(self):
        check_grads(lambda x: ad.sq_l2(ad.downsample2(x)), [(1, 4, 4)])
        check_grads(lambda x: ad.sq_l2(ad.upsample2(x)), [(1, 3, 3)])

    def test_reduction_fd(self):
        check_grads(lambda x: ad.mean(x), [(3, 5)])
        check_grads(lambda x: ad.sq_l2(x), [(8,)])
        # keep values away from the l1 kink
        rng = np.random.default_rng(11)
        a = rng.uniform(0.2, 0.8, (4,)) * np.array([1, -1, 1, -1])
        x = ad.Tensor(a, dtype=np.float64)
        g = ad.gradient(ad.l1(x), {"x": x})["x"].data
        np.testing.assert_allclose(g, fd_grad(lambda v: float(np.sum(np.abs(v))), a))

    def test_reused_node_accumulates(self):
        def build(x):
            y = ad.tanh(x)
            return ad.add(ad.sq_l2(y), ad.l1(ad.mul(y, y)))

        check_grads(build, [(5,)])

    def test_gradient_linearity(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.normal(size=(6,)), dtype=np.float64)

        def f(t):
            return ad.sq_l2(ad.tanh(t))

        def g(t):
            return ad.l1(ad.sigmoid(t))

        a, b = 1.7, -0.4
        combo = ad.add(ad.scale(f(x), a), ad.scale(g(x), b))
        gc = ad.gradient(combo, {"x": x})["x"].data
        gf = ad.gradient(f(x), {"x": x})["x"].data
        gg = ad.gradient(g(x), {"x": x})["x"].data
        np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(3, 3)).astype(np.float32)

        def run():
            x = ad.Tensor(a)
            w = ad.Tensor(np.ones((2, 3, 3, 3), dtype=np.float32) * 0.1)
            loss = ad.sq_l2(ad.conv2d(ad.stack([x, x, x], axis=0), w, padding=1))
            return loss.item(), ad.gradient(loss, {"w": w})["w"].data

        l0, g0 = run()
        l1_, g1 = run()
        assert l0 == l1_
        np.testing.assert_array_equal(g0, g1)
