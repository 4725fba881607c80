import math
from typing import Callable, Dict, Iterable, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64

Ten = torch.Tensor
ITen = torch.LongTensor


# this file holds the only differentiable operations the cascade heads use
__all__ = [
    "DimensionError",
    "fully_connected",
    "conv2d",
    "relu",
    "elementwise_sum",
    "softmax_cross_entropy",
    "smooth_l1",
    "backward",
    "check_gradients",
    "FullyConnected",
    "Conv",
]


class DimensionError(ValueError):
    pass


def _shape(t: Ten) -> Tuple[int, ...]:
    return tuple(t.shape)


def fully_connected(x: Ten, w: Ten, b: Ten) -> Ten:
    # w is stored (D_in, D_out): out = x @ w + b
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(f'[fully_connected] x{_shape(x)} incompatible with w{_shape(w)}, b{_shape(b)}')
    return torch.addmm(b, x, w)


def conv2d(x: Ten, k: Ten, b: Ten, stride: int = 1, pad: int = 0) -> Ten:
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1] or b.shape != (k.shape[0],):
        raise DimensionError(f'[conv2d] x{_shape(x)} incompatible with k{_shape(k)}, b{_shape(b)}')
    kH, kW = k.shape[-2:]
    if kH not in (1, 3) or kW not in (1, 3):
        raise DimensionError(f'[conv2d] only 1x1 and 3x3 kernels are supported, got k{_shape(k)}')
    H, W = x.shape[-2:]
    oH, oW = (H + 2 * pad - kH) // stride + 1, (W + 2 * pad - kW) // stride + 1
    if oH <= 0 or oW <= 0:
        raise DimensionError(f'[conv2d] non-positive output {oH}x{oW} for x{_shape(x)}, k{_shape(k)}, {stride=}, {pad=}')
    return F.conv2d(x, k, b, stride=stride, padding=pad)


def relu(x: Ten) -> Ten:
    # torch's threshold backward gives a zero subgradient at 0
    return F.relu(x)


def elementwise_sum(xs: Sequence[Ten]) -> Ten:
    if len(xs) == 0:
        raise DimensionError('[elementwise_sum] empty tensor list')
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise DimensionError(f'[elementwise_sum] shape mismatch: {_shape(xs[0])} vs {_shape(t)}')
    if len(xs) == 1:
        return xs[0]
    return torch.stack(tuple(xs), dim=0).sum(dim=0)


def softmax_cross_entropy(logits: Ten, labels: ITen) -> Ten:
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f'[softmax_cross_entropy] logits{_shape(logits)} incompatible with labels{_shape(labels)}')
    K1 = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= K1):
        raise ValueError(f'[softmax_cross_entropy] labels must lie in [0, {K1 - 1}], got [{int(labels.min())}, {int(labels.max())}]')
    return F.cross_entropy(logits, labels, reduction='mean')


def smooth_l1(pred: Ten, target: Ten, beta: float = 1.0) -> Ten:
    if beta <= 0:
        raise ValueError(f'[smooth_l1] beta must be positive, got {beta}')
    if pred.shape != target.shape:
        raise DimensionError(f'[smooth_l1] pred{_shape(pred)} vs target{_shape(target)}')
    return F.smooth_l1_loss(pred, target, beta=beta, reduction='mean')


def backward(loss: Ten, named_params: Iterable[Tuple[str, nn.Parameter]]) -> Dict[str, Ten]:
    """
    Reverse-mode pass from a scalar loss. Gradients accumulate into `.grad` of every
    reachable parameter; the returned map has an entry for every parameter, zeros
    for the unreachable ones.
    """
    if loss.numel() != 1:
        raise DimensionError(f'[backward] loss must be a scalar, got shape {_shape(loss)}')
    named_params = list(named_params)
    loss.reshape(()).backward()
    grads = {}
    for name, p in named_params:
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p, memory_format=torch.contiguous_format).detach()
    return grads


def check_gradients(fn: Callable[..., Ten], inputs: Sequence[Ten], eps: float = 1e-5, atol: float = 1e-6, rtol: float = 1e-4) -> bool:
    """Central finite differences against the analytic Jacobian (float64 inputs)."""
    return torch.autograd.gradcheck(fn, tuple(inputs), eps=eps, atol=atol, rtol=rtol, raise_exception=True)


class FullyConnected(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.zeros(d_in, d_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def init_weights(self, std: float):
        if std < 0:     # fan-in scaled for a following ReLU
            std = math.sqrt(2.0 / self.d_in)
        nn.init.trunc_normal_(self.weight.data, mean=0.0, std=std, a=-2 * std, b=2 * std)
        nn.init.zeros_(self.bias.data)

    def forward(self, x: Ten, detach_params: bool = False) -> Ten:
        w, b = (self.weight.detach(), self.bias.detach()) if detach_params else (self.weight, self.bias)
        return fully_connected(x, w, b)

    def extra_repr(self) -> str:
        return f'{self.d_in} -> {self.d_out}'


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1):
        super().__init__()
        assert kernel_size in (1, 3), f'kernel_size must be 1 or 3, got {kernel_size}'
        self.c_in, self.c_out, self.kernel_size, self.stride = c_in, c_out, kernel_size, stride
        self.pad = kernel_size // 2
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, kernel_size, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=DTYPE))

    def init_weights(self, std: float):
        if std < 0:
            std = math.sqrt(2.0 / (self.c_in * self.kernel_size * self.kernel_size))
        nn.init.trunc_normal_(self.weight.data, mean=0.0, std=std, a=-2 * std, b=2 * std)
        nn.init.zeros_(self.bias.data)

    def forward(self, x: Ten) -> Ten:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def extra_repr(self) -> str:
        return f'{self.c_in} -> {self.c_out}, k={self.kernel_size}, s={self.stride}, p={self.pad}'
