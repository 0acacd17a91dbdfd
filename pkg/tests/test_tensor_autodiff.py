import threading

import numpy as np
import pytest

import tensor_autodiff as ad
from errors import ContractError, ShapeError
from tensor_autodiff import Tensor

SEEDS = range(5)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def project(t: Tensor, seed: int = 99) -> Tensor:
    """Réduit un tenseur à un scalaire par produit avec un tenseur aléatoire fixe."""
    weights = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.sum(ad.mul(t, Tensor(weights)))


def assert_gradcheck(fn, *arrays, tol=1e-5):
    """Compare ad.grad à des différences finies centrées, pour chaque argument."""
    with ad.precision(np.float64):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        grads = ad.grad(fn(*inputs), inputs)
        for i, a in enumerate(arrays):
            def scalar(v, i=i):
                args = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
                return fn(*args).item()

            numeric = ad.numerical_grad(scalar, a)
            assert rel_err(grads[i].data, numeric) < tol, f"argument {i}"


def _shape(seed: int, ndim: int = 2) -> tuple:
    return tuple(int(n) for n in np.random.default_rng(seed).integers(2, 5, size=ndim))


# ============================================================
# Gradcheck des primitives
# ============================================================

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_binary(seed):
    rng = np.random.default_rng(seed)
    shape = _shape(seed)
    a = rng.standard_normal(shape)
    b = rng.uniform(0.5, 2.0, shape)
    assert_gradcheck(lambda x, y: project(ad.add(x, y)), a, b)
    assert_gradcheck(lambda x, y: project(ad.sub(x, y)), a, b)
    assert_gradcheck(lambda x, y: project(ad.mul(x, y)), a, b)
    assert_gradcheck(lambda x, y: project(ad.div(x, y)), a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcasting_binary(seed):
    rng = np.random.default_rng(seed)
    rows, cols = _shape(seed)
    a = rng.standard_normal((rows, cols))
    b = rng.uniform(0.5, 2.0, (1, cols))
    assert_gradcheck(lambda x, y: project(ad.mul(x, y)), a, b)
    assert_gradcheck(lambda x, y: project(ad.div(x, y)), a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_unary(seed):
    rng = np.random.default_rng(seed)
    shape = _shape(seed, 3)
    a = rng.standard_normal(shape)
    a[np.abs(a) < 0.05] = 0.3  # loin du pli de relu
    assert_gradcheck(lambda x: project(ad.exp(x)), a)
    assert_gradcheck(lambda x: project(ad.sqrt(x)), np.abs(a) + 0.5)
    assert_gradcheck(lambda x: project(ad.relu(x)), a)
    assert_gradcheck(lambda x: project(ad.neg(x)), a)
    assert_gradcheck(lambda x: ad.sq_norm(x), a)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul(seed):
    rng = np.random.default_rng(seed)
    m, k = _shape(seed)
    n = int(rng.integers(2, 5))
    assert_gradcheck(lambda x, y: project(ad.matmul(x, y)), rng.standard_normal((m, k)), rng.standard_normal((k, n)))


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_primitives(seed):
    rng = np.random.default_rng(seed)
    shape = _shape(seed, 3)
    a = rng.standard_normal(shape)
    assert_gradcheck(lambda x: project(ad.reshape(x, (shape[0], -1))), a)
    assert_gradcheck(lambda x: project(ad.flatten(x)), a)
    assert_gradcheck(lambda x: project(ad.transpose(x, (2, 0, 1))), a)
    assert_gradcheck(lambda x: project(ad.broadcast_to(x, (2,) + shape)), a)
    assert_gradcheck(lambda x: project(ad.sum(x, axis=1)), a)
    assert_gradcheck(lambda x: project(ad.sum(x, axis=(0, 2), keepdims=True)), a)
    assert_gradcheck(lambda x: project(ad.mean(x, axis=(1, 2))), a)
    assert_gradcheck(lambda x: project(ad.sum_to(x, (1,) + shape[1:])), a)


@pytest.mark.parametrize("seed", SEEDS)
def test_indexing_primitives(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 9))
    a = rng.standard_normal((n, 3))
    index = rng.integers(0, n, size=5)  # répétitions possibles
    assert_gradcheck(lambda x: project(ad.take_rows(x, index)), a)
    flat = rng.standard_normal(n * 2)
    assert_gradcheck(lambda x: project(ad.slice_flat(x, 1, n)), flat)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_and_pool(seed):
    rng = np.random.default_rng(seed)
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    x = rng.standard_normal((2, c, h, w))
    weight = rng.standard_normal((o, c, 3, 3))
    bias = rng.standard_normal(o)
    assert_gradcheck(lambda a, b, d: project(ad.conv2d(a, b, d)), x, weight, bias)
    assert_gradcheck(lambda a, b: project(ad.conv2d(a, b, padding="valid")), x, weight)
    assert_gradcheck(lambda a: project(ad.avg_pool2d(a, 2)), x)
    assert_gradcheck(lambda a: project(ad.im2col(a, 3, 3, pad=1)), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_losses(seed):
    rng = np.random.default_rng(seed)
    b, k = _shape(seed)
    logits = rng.standard_normal((b, k))
    labels = rng.integers(0, k, size=b)
    assert_gradcheck(lambda x: project(ad.log_softmax(x)), logits)
    assert_gradcheck(lambda x: ad.cross_entropy(x, labels), logits)


@pytest.mark.parametrize("seed", SEEDS)
def test_unrolled_sgd_composite(seed):
    """Deux pas de SGD différentiables sur une régression logistique, gradient par rapport aux données et au lr."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3))
    labels = np.array([0, 1, 0, 1])
    w0 = rng.standard_normal((3, 2))
    target = rng.standard_normal((3, 2))

    def objective(data, lr):
        w = Tensor(w0, requires_grad=True)
        for _ in range(2):
            (w,) = ad.sgd_step_differentiable([w], ad.cross_entropy(ad.matmul(data, w), labels), lr)
        return ad.sq_norm(ad.sub(w, Tensor(target)))

    assert_gradcheck(objective, x, np.array(0.3))


# ============================================================
# Contrat du moteur
# ============================================================

def test_conv_same_padding_and_pool_shapes():
    x = Tensor(np.zeros((2, 1, 7, 9)))
    y = ad.conv2d(x, Tensor(np.zeros((4, 1, 3, 3))))
    assert y.shape == (2, 4, 7, 9)
    assert ad.avg_pool2d(y, 2).shape == (2, 4, 3, 4)


def test_conv2d_matches_direct_correlation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    with ad.precision(np.float64):
        out = ad.conv2d(Tensor(x), Tensor(w), padding="valid").data
    expected = np.zeros((1, 3, 3, 4))
    for o in range(3):
        for i in range(3):
            for j in range(4):
                expected[0, o, i, j] = np.sum(x[0, :, i : i + 3, j : j + 3] * w[o])
    assert np.allclose(out, expected, atol=1e-12)


def test_one_by_one_conv_is_scaled_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 5))
    weight = (2.5 * np.eye(3)).reshape(3, 3, 1, 1)
    with ad.precision(np.float64):
        out = ad.conv2d(Tensor(x), Tensor(weight)).data
    assert np.allclose(out, 2.5 * x, atol=1e-12)


def test_sq_norm_gradient_example():
    with ad.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (g,) = ad.grad(ad.sq_norm(x), [x])
    assert np.allclose(g.data, [2.0, 4.0])


def test_sgd_step_with_zero_lr_is_identity():
    with ad.precision(np.float64):
        theta = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
        loss = ad.sq_norm(ad.mul(theta, Tensor(np.array([1.0, 2.0, 3.0]))))
        (out,) = ad.sgd_step_differentiable([theta], loss, Tensor(0.0))
    assert np.array_equal(out.data, theta.data)


def test_sgd_step_on_half_squared_norm():
    """θ0 = [2], lr = 0.5, perte ½||θ||² : θ1 = [1] et dθ1/dlr = -θ0 = -2."""
    with ad.precision(np.float64):
        theta = Tensor(np.array([2.0]), requires_grad=True)
        lr = Tensor(0.5, requires_grad=True)
        (theta1,) = ad.sgd_step_differentiable([theta], ad.mul(ad.sq_norm(theta), 0.5), lr)
        (g_lr,) = ad.grad(ad.sum(theta1), [lr])
    assert np.allclose(theta1.data, [1.0])
    assert g_lr.item() == pytest.approx(-2.0)


def test_second_order_gradient():
    with ad.precision(np.float64):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        v = np.array([0.3, 1.0, -1.0])
        (g,) = ad.grad(ad.sum(ad.mul(ad.mul(x, x), x)), [x], create_graph=True)
        assert np.allclose(g.data, 3 * x.data**2)
        (h,) = ad.grad(ad.sum(ad.mul(g, Tensor(v))), [x])
        assert np.allclose(h.data, 6 * x.data * v)


def test_gradients_accumulate_over_reuse():
    with ad.precision(np.float64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (g,) = ad.grad(ad.sum(ad.add(ad.mul(x, x), ad.mul(x, 3.0))), [x])
    assert g.data.tolist() == [7.0]


def test_unreached_input_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    gx, gu = ad.grad(ad.sum(x), [x, unused])
    assert gx.data.tolist() == [1.0, 1.0, 1.0]
    assert gu.shape == (2, 2) and not np.any(gu.data)


def test_intermediate_wrt_stops_traversal():
    with ad.precision(np.float64):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ad.mul(x, 2.0)
        gy, gx = ad.grad(ad.sum(ad.mul(y, y)), [y, x])
    assert gy.data.tolist() == [12.0]
    assert gx.data.tolist() == [0.0]


def test_non_scalar_loss_is_a_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.grad(ad.mul(x, 2.0), [x])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert y.node is None and not y.requires_grad
    assert ad.mul(x, 2.0).node is not None


@pytest.mark.parametrize("op", [ad.add, ad.mul, ad.sub])
def test_incompatible_shapes(op):
    with pytest.raises(ShapeError):
        op(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_matmul_and_reshape_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.reshape(Tensor(np.ones(6)), (4, 2))


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["dtype"] = Tensor(1.0).data.dtype

    with ad.precision(np.float64):
        assert Tensor(1.0).data.dtype == np.float64
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["dtype"] == np.float32
    assert Tensor(1.0).data.dtype == np.float32
