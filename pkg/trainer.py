import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import torch

from models import CascadeModel, StageOutput, cascade_forward
from models.ops import smooth_l1, softmax_cross_entropy
from utils.lr_control import filter_params, lr_at
from utils.optim import CascadeOptimizer, sgd_step
from utils.targets import Assignment, assign_targets, subsample_rois

Ten = torch.Tensor
ITen = torch.LongTensor


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 0.01
    warmup_epochs: float = 1
    decay_epochs: Tuple[float, ...] = (10, 16)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rois_per_image: int = 64
    fg_fraction: float = 0.25
    stage_loss_weights: Tuple[float, ...] = (1.0, 0.5, 0.25)
    seed: int = 0
    grad_clip: float = 0.          # <= 0: no clipping
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        self.stage_loss_weights = tuple(float(w) for w in self.stage_loss_weights)
        if self.epochs < 1:
            raise ValueError(f'[TrainConfig] epochs must be >= 1, got {self.epochs}')
        if self.base_lr < 0:
            raise ValueError(f'[TrainConfig] base_lr must be non-negative, got {self.base_lr}')
        if self.warmup_epochs < 0:
            raise ValueError(f'[TrainConfig] warmup_epochs must be non-negative, got {self.warmup_epochs}')
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f'[TrainConfig] decay_epochs must be strictly increasing, got {self.decay_epochs}')
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f'[TrainConfig] decay_factor must lie in (0, 1], got {self.decay_factor}')
        if not 0 <= self.momentum < 1:
            raise ValueError(f'[TrainConfig] momentum must lie in [0, 1), got {self.momentum}')
        if not 0 < self.fg_fraction < 1:
            raise ValueError(f'[TrainConfig] fg_fraction must lie in (0, 1), got {self.fg_fraction}')
        if self.rois_per_image < 1:
            raise ValueError(f'[TrainConfig] rois_per_image must be positive, got {self.rois_per_image}')
        if not self.stage_loss_weights or any(w <= 0 for w in self.stage_loss_weights):
            raise ValueError(f'[TrainConfig] stage_loss_weights must be positive, got {self.stage_loss_weights}')


@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    current_lr: float = 0.
    running: Dict[str, float] = field(default_factory=dict)    # e.g. 'cls1', 'box3'


class CascadeTrainer(object):
    def __init__(self, model: CascadeModel, cfg: TrainConfig):
        super(CascadeTrainer, self).__init__()
        if len(cfg.stage_loss_weights) < model.num_stages:
            raise ValueError(f'[CascadeTrainer] {model.num_stages} stages need as many stage_loss_weights, got {cfg.stage_loss_weights}')
        self.model, self.cfg = model, cfg
        names, paras = filter_params(model)
        self.optimizer = CascadeOptimizer(
            names, paras, lr=lr_at(0, cfg), momentum=cfg.momentum, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip,
        )
        self.state = TrainState(current_lr=lr_at(0, cfg))

    def stage_loss(self, output: StageOutput, assignment: Assignment, sampled: ITen) -> Tuple[Ten, Ten]:
        """cls: cross-entropy over the sampled RoIs; box: smooth-L1 mean over the sampled foreground RoIs (0 if none)."""
        labels = assignment.labels[sampled]
        cls_loss = softmax_cross_entropy(output.class_logits[sampled], labels)
        fg = sampled[labels > 0]
        if fg.numel() == 0:
            box_loss = output.deltas.sum() * 0.
        else:
            box_loss = smooth_l1(output.deltas[fg], assignment.reg_targets[fg], beta=self.cfg.smooth_l1_beta)
        return cls_loss, box_loss

    def compute_losses(
        self, image: Ten, gt_boxes: Ten, gt_labels: Ten, proposals: Ten, generator: torch.Generator,
    ) -> Tuple[Ten, Dict[str, Ten]]:
        outputs: List[StageOutput] = cascade_forward(image, proposals, self.model)
        total, parts = 0., {}
        for i, (head, out) in enumerate(zip(self.model.stages, outputs), 1):
            a = assign_targets(out.rois, gt_boxes, gt_labels, head.fg_iou_threshold, head.delta_stds)
            sampled = subsample_rois(a.labels, self.cfg.rois_per_image, self.cfg.fg_fraction, generator)
            cls_loss, box_loss = self.stage_loss(out, a, sampled)
            parts[f'cls{i}'], parts[f'box{i}'] = cls_loss, box_loss
            total = total + self.cfg.stage_loss_weights[i - 1] * (cls_loss + box_loss)
        return total, parts

    def train_step(
        self, it: int, lr: float, image: Ten, gt_boxes: Ten, gt_labels: Ten, proposals: Ten, generator: torch.Generator,
    ) -> Dict[str, float]:
        self.model.train()
        total, parts = self.compute_losses(image, gt_boxes, gt_labels, proposals, generator)
        loss_val = float(total)
        if not math.isfinite(loss_val):
            detail = ', '.join(f'{k}={float(v):g}' for k, v in parts.items())
            raise FloatingPointError(f'[CascadeTrainer] non-finite loss {loss_val} at iteration {it} ({detail})')
        grads = self.optimizer.backward(total)
        grad_norm = sgd_step(self.optimizer, grads, lr)

        self.state.iteration, self.state.current_lr = it + 1, lr
        stats = {'loss': loss_val, **{k: float(v) for k, v in parts.items()}}
        if grad_norm is not None:
            stats['tnm'] = grad_norm
        return stats

    def get_config(self):
        return {k: getattr(self.cfg, k) for k in self.cfg.__dataclass_fields__}

    def state_dict(self):
        return {
            'config': self.get_config(),
            'state': {'epoch': self.state.epoch, 'iteration': self.state.iteration, 'current_lr': self.state.current_lr},
        }


def weighted_total(parts: Dict[str, float], weights: Sequence[float]) -> float:
    n = sum(1 for k in parts if k.startswith('cls'))
    return sum(weights[i - 1] * (parts[f'cls{i}'] + parts[f'box{i}']) for i in range(1, n + 1))
