import numpy as np
import pytest

from mixflowlm import autodiff as ad
from mixflowlm.autodiff import Tensor


def _scalarize(fn, seed=123):
    """Reduce an op's output to a scalar through a fixed random weighting."""
    def wrapped(*xs):
        out = fn(*xs)
        w = np.random.default_rng(seed).standard_normal(out.shape)
        return ad.reduce_sum(ad.mul(out, Tensor(w)))
    return wrapped


def _spd(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


IDS = np.array([[0, 2, 1], [3, 3, 0]])
MASK = np.array([[True, False, False, True]] * 3)

# (name, fn, input factory)
OPS = [
    ("add", ad.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    ("sub", ad.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    ("mul", ad.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    ("div", ad.div, lambda r: [r.normal(size=(3, 4)), _spd(r, 3, 4)]),
    ("neg", ad.neg, lambda r: [r.normal(size=(5,))]),
    ("scalar_ops", lambda a: (a * 2.5 + 1.0 - 0.5) / 3.0, lambda r: [r.normal(size=(4,))]),
    ("matmul", ad.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    ("matmul_batched", ad.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))]),
    ("matmul_shared", ad.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    ("affine", ad.affine, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))]),
    ("add_bias", ad.add_bias, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))]),
    ("expand", lambda a: ad.expand(a, (3, 2, 4)), lambda r: [r.normal(size=(2, 1))]),
    ("exp", ad.exp, lambda r: [r.normal(size=(3, 4))]),
    ("log", ad.log, lambda r: [_spd(r, 3, 4)]),
    ("tanh", ad.tanh, lambda r: [r.normal(size=(3, 4))]),
    ("gelu", ad.gelu, lambda r: [r.normal(size=(3, 4)) * 2]),
    ("softplus", ad.softplus, lambda r: [r.normal(size=(3, 4)) * 3]),
    ("square", ad.square, lambda r: [r.normal(size=(3, 4))]),
    ("softmax0", lambda a: ad.softmax(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
    ("softmax1", lambda a: ad.softmax(a, axis=-1), lambda r: [r.normal(size=(3, 4))]),
    ("log_softmax", lambda a: ad.log_softmax(a, axis=-1), lambda r: [r.normal(size=(3, 4))]),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
    ("layer_norm", ad.layer_norm, lambda r: [r.normal(size=(2, 3, 6)), r.normal(size=(6,)), r.normal(size=(6,))]),
    ("embedding", lambda t: ad.embedding_lookup(t, IDS), lambda r: [r.normal(size=(4, 3))]),
    ("slice_basic", lambda a: a[1:, ::2], lambda r: [r.normal(size=(3, 4))]),
    ("slice_advanced", lambda a: a[np.array([0, 2, 0]), :], lambda r: [r.normal(size=(3, 4))]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), lambda r: [r.normal(size=(3, 4))]),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
    ("flip", lambda a: ad.flip(a, 1), lambda r: [r.normal(size=(2, 3))]),
    ("masked_fill", lambda a: ad.masked_fill(a, MASK, -3.0), lambda r: [r.normal(size=(3, 4))]),
    ("sum_axis", lambda a: ad.reduce_sum(a, axis=1, keepdims=True), lambda r: [r.normal(size=(3, 4))]),
    ("mean_axis", lambda a: ad.reduce_mean(a, axis=(0, 2)), lambda r: [r.normal(size=(2, 3, 4))]),
]


@pytest.mark.parametrize("name,fn,make", OPS, ids=[o[0] for o in OPS])
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_random_projection(name, fn, make, seed):
    r = np.random.default_rng(seed)
    inputs = make(r)
    for analytic, numeric in ad.check_grad(_scalarize(fn, seed), inputs, seed=seed):
        assert ad.rel_error(analytic, numeric) <= 1e-4, (name, analytic, numeric)


class TestForwardValues:
    def test_softmax_uniform(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_identity_matmul(self, rng):
        a = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_layer_norm_statistics(self, rng):
        x = rng.normal(size=(5, 8)) * 3 + 1
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1, atol=1e-3)

    def test_gelu_reference_points(self):
        y = ad.gelu(Tensor([0.0, 1.0, -1.0])).data
        np.testing.assert_allclose(y, [0.0, 0.8411919906082768, -0.15880800939172324], rtol=1e-12)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.reduce_sum(ad.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_product(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        ad.reduce_sum(a * b).backward()
        np.testing.assert_array_equal(a.grad, [3.0, 4.0])
        np.testing.assert_array_equal(b.grad, [1.0, 2.0])

    def test_reuse_accumulates(self):
        x = Tensor(1.5, requires_grad=True)
        ad.reduce_sum(x + x).backward()
        assert float(x.grad) == 2.0

    def test_accumulates_across_calls(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        ad.reduce_sum(x * 3.0).backward()
        ad.reduce_sum(x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.UsageError):
            ad.backward(x * 2.0)

    def test_diamond_graph_visits_once(self):
        x = Tensor(2.0, requires_grad=True)
        y = ad.exp(x)
        z = ad.reduce_sum(y * y + y)
        z.backward()
        e = np.exp(2.0)
        assert float(x.grad) == pytest.approx(2 * e * e + e, rel=1e-14)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        ad.reduce_sum(y).backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._node is None

    def test_deterministic(self, rng):
        w = rng.normal(size=(6, 5))
        xs = rng.normal(size=(4, 6))

        def run():
            W = Tensor(w, requires_grad=True)
            out = ad.reduce_sum(ad.softmax(ad.tanh(ad.matmul(Tensor(xs), W)), axis=-1) * 1.7)
            out.backward()
            return W.grad

        assert np.array_equal(run(), run())

    def test_tape_freed(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        node = y._node
        ad.reduce_sum(y).backward()
        assert node.inputs == () and node.vjp is None


class TestShapeErrors:
    def test_add_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError) as ei:
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        msg = str(ei.value)
        assert "add" in msg and "(2, 3)" in msg and "(3, 2)" in msg

    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_bad_softmax_axis(self):
        with pytest.raises(ad.ShapeError):
            ad.softmax(Tensor(np.zeros((2, 3))), axis=2)

    def test_layer_norm_gain_shape(self):
        with pytest.raises(ad.ShapeError):
            ad.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestCustom:
    def test_custom_square_matches_builtin(self, rng):
        sq = ad.register_custom(lambda x: x * x, lambda i, o, g: [2 * i[0] * g[0]])
        x0 = rng.normal(size=5)
        a = Tensor(x0, requires_grad=True)
        b = Tensor(x0, requires_grad=True)
        ad.reduce_sum(ad.mul(sq(a), Tensor(np.arange(5.0)))).backward()
        ad.reduce_sum(ad.mul(ad.mul(b, b), Tensor(np.arange(5.0)))).backward()
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_zero_backward(self):
        op = ad.register_custom(lambda x: np.sin(x), lambda i, o, g: [np.zeros_like(i[0])])
        x = Tensor([0.3, 1.0], requires_grad=True)
        ad.reduce_sum(op(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_multi_output(self, rng):
        def fwd(x):
            return np.sin(x), np.cos(x)

        def bwd(i, o, g):
            return [g[0] * np.cos(i[0]) - g[1] * np.sin(i[0])]

        op = ad.register_custom(fwd, bwd, n_inputs=1, n_outputs=2)
        pairs = ad.check_grad(lambda x: ad.reduce_sum(ad.mul(op(x)[0], op(x)[1])),
                              [rng.normal(size=4)], n_dirs=3)
        for a, n in pairs:
            assert ad.rel_error(a, n) <= 1e-6

    def test_unused_output_gets_zero_cotangent(self):
        seen = {}

        def bwd(i, o, g):
            seen["g1"] = g[1].copy()
            return [g[0]]

        op = ad.register_custom(lambda x: (x * 1.0, x * 2.0), bwd, n_inputs=1)
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.reduce_sum(op(x)[0]).backward()
        np.testing.assert_array_equal(seen["g1"], [0.0, 0.0])

    def test_declared_arity_mismatch(self):
        with pytest.raises(ad.UsageError):
            ad.register_custom(lambda x, y: x, lambda i, o, g: [g[0], g[0]], n_inputs=3)

    def test_call_arity_mismatch(self):
        op = ad.register_custom(lambda x, y: x + y, lambda i, o, g: [g[0], g[0]])
        with pytest.raises(ad.UsageError):
            op(Tensor([1.0]))

    def test_backward_wrong_count(self):
        op = ad.register_custom(lambda x, y: x + y, lambda i, o, g: [g[0]])
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.UsageError):
            ad.reduce_sum(op(x, Tensor([2.0]))).backward()

    def test_backward_signature_checked(self):
        with pytest.raises(ad.UsageError):
            ad.register_custom(lambda x: x, lambda g: [g])
