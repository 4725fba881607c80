import math

import pytest
import torch

from models.ops import (
    DTYPE, Conv, DimensionError, FullyConnected, backward, check_gradients, conv2d, elementwise_sum, fully_connected,
    relu, smooth_l1, softmax_cross_entropy,
)
from utils.optim import CascadeOptimizer, sgd_step

GRAD_SEEDS = list(range(10))


def t(data):
    return torch.tensor(data, dtype=DTYPE)


def test_fully_connected():
    assert torch.equal(fully_connected(t([[1., 2.]]), torch.eye(2, dtype=DTYPE), t([0., 0.])), t([[1., 2.]]))
    assert torch.equal(fully_connected(t([[0., 0.]]), torch.randn(2, 2, dtype=DTYPE), t([3., -1.])), t([[3., -1.]]))
    assert torch.equal(fully_connected(t([[1., 1.]]), t([[1., 2.], [3., 4.]]), t([0., 0.])), t([[4., 6.]]))
    with pytest.raises(DimensionError, match=r'\(1, 3\).*\(2, 2\)'):
        fully_connected(t([[1., 2., 3.]]), torch.eye(2, dtype=DTYPE), t([0., 0.]))


def test_conv2d():
    x = torch.randn(1, 1, 5, 5, dtype=DTYPE)
    assert torch.equal(conv2d(x, torch.ones(1, 1, 1, 1, dtype=DTYPE), t([0.])), x)

    y = conv2d(x, torch.zeros(1, 1, 3, 3, dtype=DTYPE), t([2.5]), pad=1)
    assert y.shape == x.shape and torch.all(y == 2.5)

    y = conv2d(torch.ones(1, 1, 3, 3, dtype=DTYPE), torch.ones(1, 1, 3, 3, dtype=DTYPE), t([0.]), pad=1)
    assert y[0, 0, 1, 1] == 9 and y[0, 0, 0, 0] == 4 and y[0, 0, 2, 2] == 4

    with pytest.raises(DimensionError):
        conv2d(torch.ones(1, 1, 2, 2, dtype=DTYPE), torch.ones(1, 1, 3, 3, dtype=DTYPE), t([0.]), pad=0)


def test_relu():
    assert torch.equal(relu(t([-1., 0., 2.])), t([0., 0., 2.]))
    x = torch.rand(8, dtype=DTYPE) + 0.1
    assert torch.equal(relu(x), x)

    x = t([-0.5, 0.5, 0.]).requires_grad_()
    relu(x).sum().backward()
    assert torch.equal(x.grad, t([0., 1., 0.]))


def test_elementwise_sum():
    a = torch.randn(3, 4, dtype=DTYPE)
    assert torch.equal(elementwise_sum([a]), a)
    assert torch.equal(elementwise_sum([a, -a]), torch.zeros_like(a))
    assert torch.equal(elementwise_sum([t([1., 2.]), t([3., 4.]), t([5., 6.])]), t([9., 12.]))

    xs = [torch.randn(2, 3, dtype=DTYPE) for _ in range(4)]
    assert torch.allclose(elementwise_sum(xs), elementwise_sum(xs[::-1]), rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        elementwise_sum([])
    with pytest.raises(DimensionError):
        elementwise_sum([torch.zeros(2), torch.zeros(3)])


def test_softmax_cross_entropy():
    labels = torch.tensor([0, 3, 1])
    assert math.isclose(float(softmax_cross_entropy(torch.zeros(3, 4, dtype=DTYPE), labels)), math.log(4), abs_tol=1e-12)

    logits = torch.zeros(1, 4, dtype=DTYPE)
    logits[0, 2] = 100
    assert float(softmax_cross_entropy(logits, torch.tensor([2]))) < 1e-6

    assert math.isclose(float(softmax_cross_entropy(t([[1., 2.]]), torch.tensor([1]))), 0.31326168751822286, abs_tol=1e-9)

    logits = torch.randn(5, 4, dtype=DTYPE)
    labels = torch.randint(0, 4, (5,))
    shifted = logits + torch.randn(5, 1, dtype=DTYPE) * 50
    assert math.isclose(float(softmax_cross_entropy(logits, labels)), float(softmax_cross_entropy(shifted, labels)), abs_tol=1e-9)

    with pytest.raises(ValueError, match='labels'):
        softmax_cross_entropy(torch.zeros(2, 4, dtype=DTYPE), torch.tensor([0, 4]))


def test_smooth_l1():
    p = torch.randn(3, 4, dtype=DTYPE)
    assert float(smooth_l1(p, p.clone())) == 0
    beta = 0.7
    assert math.isclose(float(smooth_l1(torch.full((1, 4), beta, dtype=DTYPE), torch.zeros(1, 4, dtype=DTYPE), beta)), 0.5 * beta, abs_tol=1e-12)
    assert math.isclose(float(smooth_l1(torch.full((1, 4), 2., dtype=DTYPE), torch.zeros(1, 4, dtype=DTYPE), 1.)), 1.5, abs_tol=1e-12)
    with pytest.raises(ValueError):
        smooth_l1(p, p, beta=0.)


def test_backward():
    fc_used, fc_unused = FullyConnected(3, 2), FullyConnected(3, 2)
    fc_used.init_weights(0.1)
    fc_unused.init_weights(0.1)
    x = torch.randn(4, 3, dtype=DTYPE)
    loss = fc_used(x).sum()
    named = [(f'used.{n}', p) for n, p in fc_used.named_parameters()] + [(f'unused.{n}', p) for n, p in fc_unused.named_parameters()]
    grads = backward(loss, named)
    assert set(grads) == {'used.weight', 'used.bias', 'unused.weight', 'unused.bias'}
    assert torch.equal(grads['used.bias'], torch.full((2,), 4., dtype=DTYPE))
    assert torch.count_nonzero(grads['unused.weight']) == 0 and torch.count_nonzero(grads['unused.bias']) == 0

    x = torch.randn(5, dtype=DTYPE, requires_grad=True)
    backward(x.sum(), [])
    assert torch.equal(x.grad, torch.ones(5, dtype=DTYPE))

    with pytest.raises(DimensionError):
        backward(torch.ones(2, dtype=DTYPE, requires_grad=True) * 2, [])


@pytest.mark.parametrize('seed', GRAD_SEEDS)
def test_gradients(seed):
    torch.manual_seed(seed)
    rnd = lambda *shape: torch.randn(*shape, dtype=DTYPE, requires_grad=True)

    assert check_gradients(fully_connected, [rnd(3, 4), rnd(4, 2), rnd(2)])
    assert check_gradients(lambda x, k, b: conv2d(x, k, b, pad=1), [rnd(1, 2, 4, 4), rnd(2, 2, 3, 3), rnd(2)])
    assert check_gradients(lambda x, k, b: conv2d(x, k, b, stride=2, pad=1), [rnd(1, 2, 4, 4), rnd(1, 2, 3, 3), rnd(1)])
    assert check_gradients(lambda x, k, b: conv2d(x, k, b), [rnd(1, 3, 3, 3), rnd(2, 3, 1, 1), rnd(2)])
    # keep relu inputs away from the kink
    x = torch.randn(16, dtype=DTYPE)
    x = (x + 0.1 * x.sign()).requires_grad_()
    assert check_gradients(relu, [x])
    assert check_gradients(lambda a, b, c: elementwise_sum([a, b, c]), [rnd(2, 3), rnd(2, 3), rnd(2, 3)])
    labels = torch.randint(0, 4, (5,))
    assert check_gradients(lambda z: softmax_cross_entropy(z, labels), [rnd(5, 4)])
    target = torch.randn(4, 4, dtype=DTYPE)
    # residuals on both branches, away from |d| = beta
    mag = torch.where(torch.rand(4, 4) < 0.5, 0.1 + 0.7 * torch.rand(4, 4), 1.2 + torch.rand(4, 4)).to(DTYPE)
    pred = (target + torch.randn(4, 4, dtype=DTYPE).sign() * mag).requires_grad_()
    assert check_gradients(lambda p: smooth_l1(p, target), [pred])


def test_conv_module_same_padding():
    conv = Conv(4, 6, kernel_size=3)
    conv.init_weights(-1)
    assert conv(torch.randn(2, 4, 7, 7, dtype=DTYPE)).shape == (2, 6, 7, 7)
    down = Conv(4, 6, kernel_size=3, stride=2)
    assert down(torch.randn(1, 4, 8, 8, dtype=DTYPE)).shape == (1, 6, 4, 4)


def _single_param_optimizer(w0: float, momentum: float, weight_decay: float = 0.):
    w = torch.nn.Parameter(torch.tensor([w0], dtype=DTYPE))
    return w, CascadeOptimizer(['w'], [w], lr=0.1, momentum=momentum, weight_decay=weight_decay)


def test_sgd_step():
    w, opt = _single_param_optimizer(1., momentum=0.)
    sgd_step(opt, {'w': t([1.])}, lr=0.1)
    assert math.isclose(float(w), 0.9, abs_tol=1e-12)

    w, opt = _single_param_optimizer(0.3, momentum=0.9)
    sgd_step(opt, {'w': t([0.])}, lr=0.1)
    assert float(w) == 0.3

    w, opt = _single_param_optimizer(0., momentum=0.9)
    sgd_step(opt, {'w': t([1.])}, lr=0.1)
    sgd_step(opt, {'w': t([1.])}, lr=0.1)
    assert math.isclose(float(w), -0.29, abs_tol=1e-12)
    assert math.isclose(float(opt.momentum_buffer('w')), 1.9, abs_tol=1e-12)

    with pytest.raises(KeyError, match="'w'"):
        sgd_step(opt, {}, lr=0.1)


def test_sgd_weight_decay():
    w, opt = _single_param_optimizer(2., momentum=0., weight_decay=0.5)
    sgd_step(opt, {'w': t([0.])}, lr=0.1)
    assert math.isclose(float(w), 1.9, abs_tol=1e-12)
