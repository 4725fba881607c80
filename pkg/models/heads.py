from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from models.ops import Conv, DimensionError, FullyConnected, elementwise_sum, relu

VARIANTS = ('baseline', 'cfs', 'lfs', 'fscascade', 'conv')


def shares_cls(variant: str) -> bool:
    return variant in ('cfs', 'fscascade')


def shares_box(variant: str) -> bool:
    return variant in ('lfs', 'fscascade')


def conv_box_head(variant: str) -> bool:
    return variant != 'baseline'


def check_variant(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f'unknown variant {variant!r}, expected one of {VARIANTS}')


class StageHead(nn.Module):
    """
    One cascade stage.

    classification: pooled -> cls_fc1 -> ReLU -> cls_fc2 -> ReLU -> cls_predictor (K+1 logits)
    localisation (conv variants): stage 1 uses two 3x3 convs (box_conv1, box_conv2);
    later stages use one 3x3 conv (box_conv1) and one 1x1 conv (box_proj). The
    baseline variant has no conv trunk and regresses from the classification trunk.
    """
    def __init__(
        self, stage_index: int, variant: str, channels: int, hidden_width: int, num_classes: int,
        pooled_size: int, fg_iou_threshold: float, delta_stds: Sequence[float],
    ):
        super().__init__()
        check_variant(variant)
        if stage_index < 1:
            raise ValueError(f'[StageHead] stage_index is 1-based, got {stage_index}')
        if not 0 < fg_iou_threshold < 1:
            raise ValueError(f'[StageHead] fg_iou_threshold must lie in (0, 1), got {fg_iou_threshold}')
        if len(delta_stds) != 4:
            raise ValueError(f'[StageHead] delta_stds needs 4 values, got {delta_stds}')
        self.stage_index, self.variant = stage_index, variant
        self.channels, self.hidden_width, self.num_classes, self.pooled_size = channels, hidden_width, num_classes, pooled_size
        self.fg_iou_threshold = float(fg_iou_threshold)
        self.delta_stds: Tuple[float, ...] = tuple(float(s) for s in delta_stds)

        flat = channels * pooled_size * pooled_size
        self.cls_fc1 = FullyConnected(flat, hidden_width)
        self.cls_fc2 = FullyConnected(hidden_width, hidden_width)
        self.cls_predictor = FullyConnected(hidden_width, num_classes + 1)

        if conv_box_head(variant):
            self.box_conv1 = Conv(channels, channels, kernel_size=3)
            if stage_index == 1:
                self.box_conv2 = Conv(channels, channels, kernel_size=3)
            else:
                self.box_proj = Conv(channels, channels, kernel_size=1)
            self.box_predictor = FullyConnected(flat, 4)
        else:
            self.box_predictor = FullyConnected(hidden_width, 4)

    def init_weights(self, init_std: float = -1, init_cls: float = 0.01, init_box: float = 0.001):
        self.cls_fc1.init_weights(init_std)
        self.cls_fc2.init_weights(init_std)
        self.cls_predictor.init_weights(init_cls)
        for name in ('box_conv1', 'box_conv2', 'box_proj'):
            if hasattr(self, name):
                getattr(self, name).init_weights(init_std)
        self.box_predictor.init_weights(init_box)

    def cls_path(self, pooled: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        x = pooled.flatten(1)
        h = relu(self.cls_fc1(x, detach_params=detach_params))
        return relu(self.cls_fc2(h, detach_params=detach_params))

    def classify(self, cls_feature: torch.Tensor) -> torch.Tensor:
        return self.cls_predictor(cls_feature)

    def regress(self, box_feature: torch.Tensor) -> torch.Tensor:
        return self.box_predictor(box_feature.flatten(1))

    def extra_repr(self) -> str:
        return f'stage={self.stage_index}, variant={self.variant}, u={self.fg_iou_threshold}, stds={self.delta_stds}'


def cfs_forward(pooled: torch.Tensor, heads: Sequence[StageHead], variant: str, detach_shared_cls: bool = False) -> torch.Tensor:
    """
    Classification feature of stage i = len(heads).
    Sharing variants run the pooled features through every stage's FC stack in
    parallel and sum the (post-ReLU) outputs; the others use stage i alone.
    """
    check_variant(variant)
    if len(heads) == 0:
        raise ValueError('[cfs_forward] empty head list')
    if pooled.ndim != 4:
        raise DimensionError(f'[cfs_forward] pooled must be (N, C, P, P), got {tuple(pooled.shape)}')
    for j, h in enumerate(heads, 1):
        if h.stage_index != j:
            raise ValueError(f'[cfs_forward] heads must be ordered by stage index, position {j} holds stage {h.stage_index}')
    if not shares_cls(variant):
        return heads[-1].cls_path(pooled)
    last = len(heads) - 1
    return elementwise_sum([h.cls_path(pooled, detach_params=detach_shared_cls and j < last) for j, h in enumerate(heads)])


def lfs_forward(pooled: torch.Tensor, prev_box_feature: Optional[torch.Tensor], head: StageHead, stage_index: int, variant: str) -> torch.Tensor:
    """
    Box feature B_i of a conv variant.
      stage 1:                  B_1 = ReLU(F2(ReLU(F1(X))))
      stage i > 1, serial:      B_i = X + G(ReLU(F(B_{i-1})))
      stage i > 1, no sharing:  B_i = ReLU(G(ReLU(F(X))))
    """
    check_variant(variant)
    if not conv_box_head(variant):
        raise ValueError('[lfs_forward] the baseline variant localises from the classification trunk')
    if head.stage_index != stage_index:
        raise ValueError(f'[lfs_forward] head belongs to stage {head.stage_index}, called for stage {stage_index}')
    needs_prev = stage_index > 1 and shares_box(variant)
    if needs_prev and prev_box_feature is None:
        raise ValueError(f'[lfs_forward] stage {stage_index} of {variant} needs the previous box feature')
    if not needs_prev and prev_box_feature is not None:
        raise ValueError(f'[lfs_forward] stage {stage_index} of {variant} takes no previous box feature')

    if stage_index == 1:
        return relu(head.box_conv2(relu(head.box_conv1(pooled))))
    if needs_prev:
        if prev_box_feature.shape != pooled.shape:
            raise DimensionError(f'[lfs_forward] B_(i-1){tuple(prev_box_feature.shape)} vs X{tuple(pooled.shape)}')
        return pooled + head.box_proj(relu(head.box_conv1(prev_box_feature)))
    return relu(head.box_proj(relu(head.box_conv1(pooled))))
