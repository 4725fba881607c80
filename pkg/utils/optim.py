# Adapted from https://github.com/FoundationVision/VAR/blob/main/utils/amp_sc.py (AmpOptimizer): float64 throughout, so no autocast or grad scaler.

from typing import Dict, List, Mapping, Optional, Tuple

import torch

from models.ops import backward


class CascadeOptimizer:
    """
    Owns the named parameters of one model and a momentum SGD instance. The
    momentum buffer of each parameter is `optimizer.state[p]['momentum_buffer']`;
    a parameter that has never been stepped has an all-zero buffer.
    """
    def __init__(
        self,
        names: List[str], paras: List[torch.nn.Parameter],
        lr: float, momentum: float, weight_decay: float, grad_clip: float = 0.,
    ):
        if not 0 <= momentum < 1:
            raise ValueError(f'[CascadeOptimizer] momentum must lie in [0, 1), got {momentum}')
        if lr < 0:
            raise ValueError(f'[CascadeOptimizer] lr must be non-negative, got {lr}')
        if len(set(names)) != len(names):
            raise ValueError('[CascadeOptimizer] parameter names must be unique')
        self.names, self.paras = names, paras
        self.optimizer = torch.optim.SGD(paras, lr=lr, momentum=momentum, dampening=0, weight_decay=weight_decay, nesterov=False)
        self.grad_clip = grad_clip

    @property
    def named_parameters(self) -> List[Tuple[str, torch.nn.Parameter]]:
        return list(zip(self.names, self.paras))

    def backward(self, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
        self.optimizer.zero_grad(set_to_none=True)
        return backward(loss, self.named_parameters)

    def step(self, grads: Mapping[str, torch.Tensor], lr: float) -> Optional[float]:
        """v <- momentum * v + (g + wd * w);  w <- w - lr * v"""
        if lr < 0:
            raise ValueError(f'[CascadeOptimizer.step] lr must be non-negative, got {lr}')
        for name, p in zip(self.names, self.paras):
            if name not in grads:
                raise KeyError(f'[CascadeOptimizer.step] missing gradient for parameter {name!r}')
            p.grad = grads[name].detach().clone()
        orig_norm = None
        if self.grad_clip > 0:
            orig_norm = float(torch.nn.utils.clip_grad_norm_(self.paras, self.grad_clip))
        for param_group in self.optimizer.param_groups:
            param_group['lr'] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        return orig_norm

    def momentum_buffer(self, name: str) -> torch.Tensor:
        p = self.paras[self.names.index(name)]
        buf = self.optimizer.state.get(p, {}).get('momentum_buffer', None)
        return torch.zeros_like(p).detach() if buf is None else buf

    def set_momentum_buffer(self, name: str, buf: torch.Tensor):
        p = self.paras[self.names.index(name)]
        self.optimizer.state[p]['momentum_buffer'] = buf.detach().clone().to(p)


def sgd_step(optimizer: CascadeOptimizer, grads: Mapping[str, torch.Tensor], lr: float) -> Optional[float]:
    return optimizer.step(grads, lr)
