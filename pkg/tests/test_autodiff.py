import numpy as np
import pytest

import cogload.autodiff as ad
from cogload.autodiff import BatchNormState, Tensor

# All gradient checks run in the engine's 64-bit mode against central finite
# differences evaluated on forward passes only.

FD_H = 1e-5


def _objective(build, params):
    """Scalar objective: sum(proj * op_output) evaluated via a forward pass."""
    y = build(*params)
    return y


def fd_grad(build, arrays, idx, coord, h=FD_H):
    a_plus = [a.copy() for a in arrays]
    a_minus = [a.copy() for a in arrays]
    a_plus[idx][coord] += h
    a_minus[idx][coord] -= h
    return (_objective(build, a_plus) - _objective(build, a_minus)) / (2 * h)


def check_op(make_arrays, forward, n_instances=20, rel=1e-4, coords_per_input=3, seed=0):
    """Compare engine gradients with finite differences on random instances.

    `forward(*arrays)` must return a float when given plain arrays, and is
    separately invoked through Tensors for the backward pass.
    """
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        for _ in range(n_instances):
            arrays = make_arrays(rng)
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            loss = forward(*tensors)
            assert loss.data.size == 1
            loss.backward()

            def plain(*arrs):
                plain_tensors = [Tensor(a) for a in arrs]
                return float(forward(*plain_tensors).data)

            for idx, t in enumerate(tensors):
                if t.grad is None:
                    continue
                flat = [tuple(rng.integers(0, s) for s in t.data.shape)
                        for _ in range(min(coords_per_input, t.data.size))]
                for coord in flat:
                    got = t.grad[coord]
                    ok = False
                    # shrink h when a step straddles a relu kink / pool tie
                    for h in (FD_H, 1e-7):
                        fd = fd_grad(plain, arrays, idx, coord, h=h)
                        scale = max(abs(fd), abs(got), 1e-8)
                        if abs(fd - got) <= rel * scale + 1e-10:
                            ok = True
                            break
                    assert ok, f"input {idx} coord {coord}: ad={got} fd={fd}"


def _proj_loss(y, proj):
    return ad.sum_all(ad.mul(y, Tensor(proj)))


# --- per-op gradient checks -------------------------------------------------


def test_fc_gradients():
    def make(rng):
        n, fin, fout = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 5)
        return [rng.standard_normal((n, fin)), rng.standard_normal((fin, fout)),
                rng.standard_normal(fout), rng.standard_normal((n, fout))]

    check_op(make, lambda x, w, b, p: _proj_loss(ad.fc(x, w, b), p.data))


def test_fc_identity_and_bias_grad():
    with ad.precision(np.float64):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w = Tensor(np.eye(2))
        b = Tensor(np.zeros(2), requires_grad=True)
        y = ad.fc(x, w, b)
        assert np.allclose(y.data, x.data)
        loss = ad.sum_all(ad.mul(y, Tensor(np.array([[1.0, 2.0], [3.0, 5.0]]))))
        loss.backward()
        # bias gradient is the column sum of the upstream gradient
        assert np.allclose(b.grad, [4.0, 7.0])


def test_conv1d_gradients_shift_path():
    def make(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = rng.integers(1, 5)
        length = k + rng.integers(0, 12)
        return [rng.standard_normal((n, ci, length)),
                rng.standard_normal((co, ci, k)),
                rng.standard_normal((n, co, length - k + 1))]

    check_op(make, lambda x, w, p: _proj_loss(ad.conv1d(x, w), p.data))


def test_conv1d_gradients_fft_path():
    def make(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        k = int(rng.choice([3, 8, 16, 32]))
        length = 256 + int(rng.integers(0, 512))
        return [rng.standard_normal((n, ci, length)),
                rng.standard_normal((co, ci, k)),
                rng.standard_normal((n, co, length - k + 1))]

    check_op(make, lambda x, w, p: _proj_loss(ad.conv1d(x, w), p.data), n_instances=20)


def test_conv1d_forward_matches_loop_oracle():
    def loop(x, w):
        n, ci, length = x.shape
        co, _, k = w.shape
        y = np.zeros((n, co, length - k + 1))
        for b in range(n):
            for o in range(co):
                for l in range(length - k + 1):
                    y[b, o, l] = np.sum(x[b, :, l:l + k] * w[o])
        return y

    rng = np.random.default_rng(1)
    with ad.precision(np.float64):
        for length in (9, 40, 300, 700):
            x = rng.standard_normal((2, 3, length))
            w = rng.standard_normal((4, 3, 7))
            y = ad.conv1d(Tensor(x), Tensor(w))
            assert np.allclose(y.data, loop(x, w), atol=1e-9)


def test_conv1d_shapes_and_identity():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 1, 2560)).astype(np.float32))
    w = Tensor(np.random.default_rng(3).standard_normal((1, 1, 32)).astype(np.float32))
    assert ad.conv1d(x, w).shape == (1, 1, 2529)
    ident = Tensor(np.ones((1, 1, 1), dtype=np.float32))
    y = ad.conv1d(x, ident)
    assert np.allclose(y.data, x.data, rtol=1e-4, atol=1e-5)
    with pytest.raises(ValueError):
        ad.conv1d(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 9))))


def test_conv2d_gradients():
    def make(rng):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        h, w = rng.integers(2, 7), rng.integers(2, 7)
        return [rng.standard_normal((n, ci, h, w)),
                rng.standard_normal((co, ci, 3, 3)),
                rng.standard_normal((n, co, h, w))]

    check_op(make, lambda x, w, p: _proj_loss(ad.conv2d(x, w), p.data))


def test_conv2d_delta_kernel_identity_and_shape():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 6, 6))
    delta = np.zeros((3, 3, 3, 3))
    for c in range(3):
        delta[c, c, 1, 1] = 1.0
    with ad.precision(np.float64):
        y = ad.conv2d(Tensor(x), Tensor(delta))
        assert y.shape == x.shape
        assert np.allclose(y.data, x)


def test_conv2d_matches_loop_oracle():
    def loop(x, w):
        n, ci, h, wid = x.shape
        co, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
        y = np.zeros((n, co, h, wid))
        for b in range(n):
            for o in range(co):
                for i in range(h):
                    for j in range(wid):
                        y[b, o, i, j] = np.sum(xp[b, :, i:i + kh, j:j + kw] * w[o])
        return y

    rng = np.random.default_rng(5)
    with ad.precision(np.float64):
        x = rng.standard_normal((2, 4, 5, 7))
        w = rng.standard_normal((3, 4, 3, 3))
        y = ad.conv2d(Tensor(x), Tensor(w))
        assert np.allclose(y.data, loop(x, w), atol=1e-9)


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(6)
    with ad.precision(np.float64):
        x = Tensor(rng.standard_normal((8, 3, 50)) * 4 + 2)
        gamma = Tensor(np.ones(3))
        beta = Tensor(np.zeros(3))
        state = BatchNormState.create(3)
        y = ad.batchnorm(x, gamma, beta, state, train=True)
        yr = y.data.reshape(8, 3, -1)
        assert np.allclose(yr.mean(axis=(0, 2)), 0.0, atol=1e-5)
        assert np.allclose(yr.var(axis=(0, 2)), 1.0, atol=1e-4)


def test_batchnorm_eval_affine_only():
    with ad.precision(np.float64):
        x = Tensor(np.array([[1.0, -2.0], [3.0, 4.0]]))
        gamma = Tensor(np.array([2.0, 0.5]))
        beta = Tensor(np.array([1.0, -1.0]))
        state = BatchNormState.create(2)  # running mean 0, var 1
        y = ad.batchnorm(x, gamma, beta, state, train=False)
        expected = x.data * gamma.data / np.sqrt(1 + state.eps) + beta.data
        assert np.allclose(y.data, expected, atol=1e-9)


def test_batchnorm_batch_of_one_rejected():
    x = Tensor(np.zeros((1, 3)))
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        ad.batchnorm(x, gamma, beta, BatchNormState.create(3), train=True)


def test_batchnorm_gradients():
    def make(rng):
        n, c, length = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(2, 8))
        return [rng.standard_normal((n, c, length)), rng.uniform(0.5, 1.5, c),
                rng.standard_normal(c), rng.standard_normal((n, c, length))]

    def fwd(x, g, b, p):
        return _proj_loss(ad.batchnorm(x, g, b, BatchNormState.create(g.data.size), True), p.data)

    check_op(make, fwd, rel=1e-3)


def test_batchnorm_relu_matches_composition():
    rng = np.random.default_rng(7)
    with ad.precision(np.float64):
        x = rng.standard_normal((6, 4, 20))
        gamma = rng.uniform(0.5, 2.0, 4)
        beta = rng.standard_normal(4)
        proj = rng.standard_normal(x.shape)

        xa = Tensor(x, requires_grad=True)
        ya = ad.batchnorm_relu(xa, Tensor(gamma), Tensor(beta),
                               BatchNormState.create(4), True)
        la = ad.sum_all(ad.mul(ya, Tensor(proj)))
        la.backward()

        xb = Tensor(x, requires_grad=True)
        yb = ad.relu(ad.batchnorm(xb, Tensor(gamma), Tensor(beta),
                                  BatchNormState.create(4), True))
        lb = ad.sum_all(ad.mul(yb, Tensor(proj)))
        lb.backward()

        assert np.allclose(ya.data, yb.data, atol=1e-12)
        assert np.allclose(xa.grad, xb.grad, atol=1e-12)


def test_maxpool1d_basics():
    y = ad.maxpool1d(Tensor(np.array([[[1.0, 3.0, 2.0, 2.0]]])))
    assert np.allclose(y.data, [[[3.0, 2.0]]])
    # odd length drops the trailing element
    y5 = ad.maxpool1d(Tensor(np.arange(5.0).reshape(1, 1, 5)))
    assert y5.shape == (1, 1, 2)


def test_maxpool1d_tie_routes_to_first():
    with ad.precision(np.float64):
        x = Tensor(np.array([[[2.0, 2.0]]]), requires_grad=True)
        y = ad.maxpool1d(x)
        y.backward()
        assert np.allclose(x.grad, [[[1.0, 0.0]]])


def test_maxpool2d_tie_routes_to_first_row_major():
    with ad.precision(np.float64):
        x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        y = ad.maxpool2d(x)
        y.backward()
        grad = x.grad.reshape(2, 2)
        assert grad[0, 0] == 1.0 and grad.sum() == 1.0


def test_maxpool_gradients():
    def make1(rng):
        n, c, length = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 9))
        return [rng.standard_normal((n, c, length)),
                rng.standard_normal((n, c, length // 2))]

    check_op(make1, lambda x, p: _proj_loss(ad.maxpool1d(x), p.data))

    def make2(rng):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        return [rng.standard_normal((n, c, h, w)),
                rng.standard_normal((n, c, h // 2, w // 2))]

    check_op(make2, lambda x, p: _proj_loss(ad.maxpool2d(x), p.data))


def test_activation_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]))
    assert np.allclose(ad.relu(x).data, [0.0, 0.0, 2.0])
    assert np.allclose(ad.sigmoid(Tensor(np.zeros(1))).data, [0.5])
    assert np.allclose(ad.tanh(Tensor(np.zeros(1))).data, [0.0])


def test_activation_gradients():
    for op in (ad.relu, ad.tanh, ad.sigmoid):
        def make(rng):
            n = int(rng.integers(2, 12))
            return [rng.standard_normal(n) * 2, rng.standard_normal(n)]

        check_op(make, lambda x, p, op=op: _proj_loss(op(x), p.data))


def test_relu_zero_subgradient():
    with ad.precision(np.float64):
        x = Tensor(np.array([0.0]), requires_grad=True)
        y = ad.relu(x)
        ad.sum_all(y).backward()
        assert x.grad[0] == 0.0


def test_dropout_eval_and_p0_identity():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal(100))
    assert np.array_equal(ad.dropout(x, 0.5, train=False, rng=rng).data, x.data)
    assert np.array_equal(ad.dropout(x, 0.0, train=True, rng=rng).data, x.data)


def test_dropout_keep_fraction():
    rng = np.random.default_rng(9)
    x = Tensor(np.ones(100000, dtype=np.float32))
    y = ad.dropout(x, 0.5, train=True, rng=rng)
    kept = np.count_nonzero(y.data) / y.data.size
    assert abs(kept - 0.5) < 0.01
    # survivors are scaled by 1/(1-p)
    assert np.allclose(y.data[y.data != 0], 2.0)


def test_dropout_deterministic_per_seed():
    x = Tensor(np.ones(1000))
    a = ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(5))
    b = ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(5))
    assert np.array_equal(a.data, b.data)


def test_softmax_cross_entropy_values():
    with ad.precision(np.float64):
        logits = Tensor(np.array([[0.0, 0.0]]))
        loss = ad.softmax_cross_entropy(logits, np.array([0]))
        assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-9)
        big = Tensor(np.array([[1000.0, 0.0]]))
        loss2 = ad.softmax_cross_entropy(big, np.array([0]))
        assert np.isfinite(float(loss2.data))
        assert float(loss2.data) == pytest.approx(0.0, abs=1e-9)


def test_softmax_cross_entropy_gradient_formula():
    with ad.precision(np.float64):
        logits = Tensor(np.array([[0.3, -0.7], [1.2, 0.1]]), requires_grad=True)
        labels = np.array([1, 0])
        loss = ad.softmax_cross_entropy(logits, labels)
        loss.backward()
        probs = ad.softmax(logits.data)
        onehot = np.eye(2)[labels]
        assert np.allclose(logits.grad, (probs - onehot) / 2, atol=1e-12)


def test_softmax_cross_entropy_fd():
    def make(rng):
        n = int(rng.integers(1, 6))
        return [rng.standard_normal((n, 2))]

    rng_labels = np.random.default_rng(10)

    def fwd(logits):
        n = logits.data.shape[0]
        labels = np.arange(n) % 2
        return ad.softmax_cross_entropy(logits, labels)

    check_op(make, fwd)


def test_global_avg_pool():
    with ad.precision(np.float64):
        x = Tensor(np.arange(12.0).reshape(1, 2, 6), requires_grad=True)
        y = ad.global_avg_pool(x)
        assert np.allclose(y.data, [[2.5, 8.5]])
        ad.sum_all(y).backward()
        assert np.allclose(x.grad, 1.0 / 6.0)


def test_elementwise_ops_fd():
    def make(rng):
        n = int(rng.integers(2, 8))
        return [rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)]

    check_op(make, lambda a, b, p: _proj_loss(ad.add(a, b), p.data))
    check_op(make, lambda a, b, p: _proj_loss(ad.mul(a, b), p.data))
    check_op(make, lambda a, b, p: _proj_loss(ad.one_minus(a), p.data))
    check_op(make, lambda a, b, p: _proj_loss(ad.scale(a, 0.37), p.data))

    def make_concat(rng):
        n = int(rng.integers(2, 8))
        return [rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(2 * n)]

    check_op(make_concat, lambda a, b, p: _proj_loss(ad.concat(a, b, axis=0), p.data),
             coords_per_input=2)


# --- engine semantics ----------------------------------------------------------


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        y.backward()


def test_backward_simple_cases():
    with ad.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        ad.sum_all(x).backward()
        assert np.allclose(x.grad, 1.0)

        z = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.sum_all(ad.mul(z, z))
        loss.backward()
        assert np.allclose(z.grad, 6.0)


def test_backward_accumulates_on_second_call():
    with ad.precision(np.float64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = ad.sum_all(ad.scale(x, 3.0))
        loss.backward()
        first = x.grad.copy()
        loss.grad = None
        loss.backward()
        assert np.allclose(x.grad, 2 * first)


def test_backward_linearity():
    rng = np.random.default_rng(11)
    with ad.precision(np.float64):
        base = rng.standard_normal(5)
        p1 = rng.standard_normal(5)
        p2 = rng.standard_normal(5)

        def grad_of(alpha, beta):
            x = Tensor(base, requires_grad=True)
            l1 = ad.sum_all(ad.mul(x, Tensor(p1)))
            l2 = ad.sum_all(ad.mul(ad.mul(x, x), Tensor(p2)))
            total = ad.add(ad.scale(l1, alpha), ad.scale(l2, beta))
            total.backward()
            return x.grad.copy()

        g = grad_of(2.0, 1.0)
        expected = 2.0 * grad_of(1.0, 0.0) + grad_of(0.0, 1.0)
        assert np.allclose(g, expected, atol=1e-12)


def test_forward_determinism():
    rng_a = np.random.default_rng(12)
    x = rng_a.standard_normal((4, 3, 300)).astype(np.float32)
    w = rng_a.standard_normal((2, 3, 16)).astype(np.float32)
    y1 = ad.conv1d(Tensor(x), Tensor(w)).data
    y2 = ad.conv1d(Tensor(x), Tensor(w)).data
    assert np.array_equal(y1, y2)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert y._backward is None and not y.requires_grad


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    entries = [
        ("enc.w1", rng.standard_normal((3, 4)).astype(np.float32)),
        ("enc.b1", rng.standard_normal(4).astype(np.float32)),
        ("head.scalar", np.float32(2.5)),
    ]
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(entries, path)
    loaded = ad.load_checkpoint(path)
    assert [n for n, _ in loaded] == [n for n, _ in entries]
    for (_, a), (_, b) in zip(entries, loaded):
        assert np.allclose(a, b)
    with pytest.raises(ValueError):
        ad.load_checkpoint(__file__)
