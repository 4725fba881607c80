# Adapted from: https://github.com/FoundationVision/VAR/blob/main/utils/lr_control.py

from pprint import pformat
from typing import TYPE_CHECKING, List, Tuple

import torch.nn

if TYPE_CHECKING:
    from trainer import TrainConfig


def lr_at(epoch: float, cfg: 'TrainConfig') -> float:
    """Warmup at base_lr * decay_factor, then step decay by decay_factor at each decay epoch."""
    if epoch < 0:
        raise ValueError(f'[lr_at] epoch must be non-negative, got {epoch}')
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * cfg.decay_factor
    cur_lr = cfg.base_lr
    for e in cfg.decay_epochs:
        if epoch >= e:
            cur_lr *= cfg.decay_factor
    return cur_lr


def filter_params(model: torch.nn.Module) -> Tuple[List[str], List[torch.nn.Parameter]]:
    names, paras = [], []
    names_no_grad = []
    count, numel = 0, 0
    for name, para in model.named_parameters():
        if not para.requires_grad:
            names_no_grad.append(name)
            continue
        count += 1
        numel += para.numel()
        names.append(name)
        paras.append(para)

    print(f'[filter_params] {type(model).__name__} {count=}, {numel=}')
    assert len(names_no_grad) == 0, f'[filter_params] names_no_grad = \n{pformat(names_no_grad, indent=2, width=240)}\n'
    return names, paras
