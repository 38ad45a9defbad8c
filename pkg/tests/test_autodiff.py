import numpy as np
import pytest
import scipy.sparse as sp

from conftest import check_grad
from dosegnn import autodiff as ad
from dosegnn.autodiff import ShapeError, Tensor, backward

R = np.random.default_rng(42)


def away_from_zero(shape):
    # relu kinks at 0 break finite differences
    x = R.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


def test_grad_add_broadcast():
    check_grad(ad.add, R.normal(size=(3, 4)), R.normal(size=(1, 4)))


def test_grad_mul():
    check_grad(ad.mul, R.normal(size=(3, 4)), R.normal(size=(3, 4)))


def test_grad_scale():
    check_grad(lambda a: ad.scale(a, -2.5), R.normal(size=(2, 3)))


def test_grad_matmul():
    check_grad(ad.matmul, R.normal(size=(3, 4)), R.normal(size=(4, 2)))


def test_grad_linear():
    check_grad(ad.linear, R.normal(size=(5, 3)), R.normal(size=(3, 4)), R.normal(size=(4,)))


def test_grad_concat():
    check_grad(lambda a, b: ad.concat([a, b], axis=1), R.normal(size=(3, 2)), R.normal(size=(3, 5)))


def test_grad_reshape():
    check_grad(lambda a: ad.reshape(a, (6, 2)), R.normal(size=(3, 4)))


def test_grad_relu():
    check_grad(ad.relu, away_from_zero((4, 5)))


def test_grad_mean_rows():
    check_grad(ad.mean_rows, R.normal(size=(6, 3)))


def test_grad_spmm():
    m = sp.random(5, 7, density=0.4, random_state=1, format="csr")
    check_grad(lambda a: ad.spmm(m, a), R.normal(size=(7, 3)))
    check_grad(lambda a: ad.spmm(m, a, m.T.tocsr()), R.normal(size=(7, 3)))


def test_grad_sum_all():
    check_grad(lambda a: ad.reshape(ad.sum_all(a), (1,)), R.normal(size=(3, 3)))


def test_grad_mse_loss():
    check_grad(lambda a, b: ad.reshape(ad.mse_loss(a, b), (1,)), R.normal(size=(4, 1)), R.normal(size=(4, 1)))


def test_grad_conv3d():
    check_grad(ad.conv3d_valid, R.normal(size=(2, 4, 4, 4)), R.normal(size=(3, 2, 2, 2)), R.normal(size=(3,)))


def test_grad_composite_mlp():
    def net(x, w1, b1, w2, b2):
        return ad.linear(ad.relu(ad.linear(x, w1, b1)), w2, b2)

    check_grad(net, R.normal(size=(6, 3)), R.normal(size=(3, 5)), away_from_zero((5,)),
               R.normal(size=(5, 2)), R.normal(size=(2,)), seed=3)


def test_conv3d_matches_loop():
    x = R.normal(size=(2, 5, 5, 5))
    k = R.normal(size=(2, 3, 3, 3))
    b = R.normal(size=(2,))
    out = ad.conv3d_valid(x, k, b).data
    assert out.shape == (2, 2, 3, 3, 3)
    for n in range(2):
        for c in range(2):
            for i, j, l in np.ndindex(3, 3, 3):
                want = np.sum(x[n, i:i + 3, j:j + 3, l:l + 3] * k[c]) + b[c]
                assert out[n, c, i, j, l] == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_relu_example():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_identity_linear():
    x = R.normal(size=(4, 3))
    y = ad.linear(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y.data, x)


def test_gradient_of_reused_node_accumulates():
    x = Tensor([[2.0, -3.0]], requires_grad=True)
    loss = ad.sum_all(ad.add(ad.mul(x, x), x))  # sum(x^2 + x)
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_grads_accumulate_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ad.sum_all(ad.scale(x, 3.0)))
    backward(ad.sum_all(ad.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.scale(x, 2.0))


def test_constant_inputs_get_no_grad():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0], [1.0]], requires_grad=True)
    backward(ad.sum_all(ad.matmul(x, w)))
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, [[1.0], [2.0]])


@pytest.mark.parametrize(
    "call",
    [
        lambda: ad.matmul(np.zeros((2, 3)), np.zeros((2, 3))),
        lambda: ad.add(np.zeros((2, 3)), np.zeros((3, 2))),
        lambda: ad.mse_loss(np.zeros((2, 1)), np.zeros((3, 1))),
        lambda: ad.spmm(sp.eye(3), np.zeros((4, 2))),
        lambda: ad.conv3d_valid(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1)),
        lambda: ad.reshape(Tensor(np.zeros(5)), (2, 3)),
    ],
)
def test_shape_errors(call):
    with pytest.raises(ShapeError):
        call()


def test_backward_is_deterministic():
    x0 = R.normal(size=(8, 4))
    w0 = R.normal(size=(4, 3))
    grads = []
    for _ in range(2):
        w = Tensor(w0, requires_grad=True)
        backward(ad.mse_loss(ad.relu(ad.matmul(x0, w)), np.ones((8, 3))))
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]
