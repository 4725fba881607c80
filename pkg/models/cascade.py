from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from models.backbone import BackboneConfig, TinyBackbone, backbone_forward
from models.heads import StageHead, VARIANTS, cfs_forward, check_variant, conv_box_head, lfs_forward, shares_box, shares_cls
from models.ops import DimensionError
from models.roi_pool import roi_pool
from utils.box_ops import DEFAULT_STAGE_STDS, decode_boxes, ensure_min_size


@dataclass
class CascadeConfig:
    variant: str = 'fscascade'
    num_stages: int = 3
    num_classes: int = 3
    hidden_width: int = 256
    pooled_size: int = 7
    fg_iou_thresholds: Tuple[float, ...] = (0.5, 0.6, 0.7)
    delta_stds: Tuple[Tuple[float, ...], ...] = DEFAULT_STAGE_STDS
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detach_shared_cls: bool = False
    init_std: float = -1        # < 0: fan-in scaled
    init_cls: float = 0.01
    init_box: float = 0.001

    def __post_init__(self):
        check_variant(self.variant)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.fg_iou_thresholds = tuple(float(u) for u in self.fg_iou_thresholds)
        self.delta_stds = tuple(tuple(float(s) for s in stds) for stds in self.delta_stds)
        if not 1 <= self.num_stages <= len(self.fg_iou_thresholds):
            raise ValueError(f'[CascadeConfig] num_stages={self.num_stages} needs as many fg_iou_thresholds, got {self.fg_iou_thresholds}')
        if len(self.delta_stds) < self.num_stages:
            raise ValueError(f'[CascadeConfig] num_stages={self.num_stages} needs as many delta_stds, got {len(self.delta_stds)}')
        us = self.fg_iou_thresholds[:self.num_stages]
        if any(b <= a for a, b in zip(us, us[1:])):
            raise ValueError(f'[CascadeConfig] fg_iou_thresholds must be strictly increasing, got {us}')
        if self.num_classes < 1 or self.hidden_width < 1 or self.pooled_size < 1:
            raise ValueError(f'[CascadeConfig] num_classes, hidden_width and pooled_size must be positive')

    @property
    def image_size(self) -> Tuple[int, int]:
        H, W = self.backbone.input_size
        return W, H


@dataclass
class StageOutput:
    class_logits: torch.Tensor      # (N, K+1)
    deltas: torch.Tensor            # (N, 4)
    refined_boxes: torch.Tensor     # (N, 4), detached, clipped
    box_feature: torch.Tensor       # (N, C, P, P); (N, hidden) for baseline
    rois: torch.Tensor              # (N, 4) boxes this stage pooled on
    pooled: torch.Tensor            # (N, C, P, P)


class CascadeModel(nn.Module):
    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant
        self.num_classes = cfg.num_classes
        self.backbone = TinyBackbone(cfg.backbone)
        self.stages = nn.ModuleList([
            StageHead(
                stage_index=i + 1, variant=cfg.variant, channels=cfg.backbone.channels,
                hidden_width=cfg.hidden_width, num_classes=cfg.num_classes, pooled_size=cfg.pooled_size,
                fg_iou_threshold=cfg.fg_iou_thresholds[i], delta_stds=cfg.delta_stds[i],
            )
            for i in range(cfg.num_stages)
        ])

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def init_weights(self):
        self.backbone.init_weights(self.cfg.init_std)
        for head in self.stages:
            head.init_weights(self.cfg.init_std, self.cfg.init_cls, self.cfg.init_box)

    def pool(self, feature: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return roi_pool(feature, boxes, spatial_scale=1. / self.cfg.backbone.stride, out_size=self.cfg.pooled_size)

    def classify_with(self, pooled: torch.Tensor, upto_stage: int) -> torch.Tensor:
        """Logits of stage `upto_stage`'s classifier on the given pooled features."""
        heads = list(self.stages)[:upto_stage]
        return heads[-1].classify(cfs_forward(pooled, heads, self.variant, self.cfg.detach_shared_cls))

    def forward(self, image: torch.Tensor, proposals: torch.Tensor) -> List[StageOutput]:
        if proposals.ndim != 2 or proposals.shape[1] != 4:
            raise DimensionError(f'[CascadeModel] proposals must be (N, 4), got {tuple(proposals.shape)}')
        if proposals.shape[0] == 0:
            raise ValueError('[CascadeModel] proposals must be non-empty')
        image_size = self.cfg.image_size
        feature = backbone_forward(image, self.backbone)
        heads: List[StageHead] = list(self.stages)

        outputs: List[StageOutput] = []
        boxes = proposals.detach().to(feature.dtype)
        prev_box: Optional[torch.Tensor] = None
        for i, head in enumerate(heads, 1):
            pooled = self.pool(feature, boxes)
            cls_feature = cfs_forward(pooled, heads[:i], self.variant, self.cfg.detach_shared_cls)
            logits = head.classify(cls_feature)
            if conv_box_head(self.variant):
                box_feature = lfs_forward(pooled, prev_box if (i > 1 and shares_box(self.variant)) else None, head, i, self.variant)
            else:
                box_feature = cls_feature
            deltas = head.regress(box_feature)
            # box coordinates are constants for the following stages
            refined = decode_boxes(boxes, deltas.detach(), head.delta_stds, image_size)
            refined = ensure_min_size(refined, image_size)
            outputs.append(StageOutput(logits, deltas, refined, box_feature, boxes, pooled))
            boxes, prev_box = refined, box_feature
        return outputs


def cascade_forward(image: torch.Tensor, initial_proposals: torch.Tensor, model: CascadeModel) -> List[StageOutput]:
    return model(image, initial_proposals)


COMPONENTS = ('backbone', 'cls_heads', 'box_heads', 'cls_predictors', 'box_predictors')


def _component_of(name: str) -> str:
    if name.startswith('backbone.'):
        return 'backbone'
    leaf = name.split('.')[2]
    if leaf in ('cls_fc1', 'cls_fc2'):
        return 'cls_heads'
    if leaf in ('box_conv1', 'box_conv2', 'box_proj'):
        return 'box_heads'
    if leaf == 'cls_predictor':
        return 'cls_predictors'
    if leaf == 'box_predictor':
        return 'box_predictors'
    raise KeyError(f'[count_parameters] unexpected parameter {name!r}')


def count_parameters(model: CascadeModel) -> Dict[str, int]:
    counts = {c: 0 for c in COMPONENTS}
    for name, p in model.named_parameters():
        counts[_component_of(name)] += p.numel()
    counts['total'] = sum(counts[c] for c in COMPONENTS)
    return counts


def count_parameters_for(cfg: CascadeConfig) -> Dict[str, int]:
    # meta tensors: exact shapes, no storage, so benchmark-scale widths are cheap to audit
    with torch.device('meta'):
        model = CascadeModel(cfg)
    return count_parameters(model)


def parameter_deltas(base_cfg: CascadeConfig, variants: Sequence[str] = VARIANTS) -> Dict[str, Dict[str, int]]:
    """
    Per-variant component counts plus the extra parameters over `baseline`.
    `mechanism_delta` is the cls-side delta when classification features are
    shared plus the box-trunk delta when localisation features are shared.
    """
    kw = {k: getattr(base_cfg, k) for k in base_cfg.__dataclass_fields__}
    counts = {v: count_parameters_for(CascadeConfig(**{**kw, 'variant': v})) for v in variants}
    ref = counts['baseline'] if 'baseline' in counts else count_parameters_for(CascadeConfig(**{**kw, 'variant': 'baseline'}))
    ret = {}
    for v, c in counts.items():
        cls_delta = c['cls_heads'] - ref['cls_heads']
        box_delta = c['box_heads'] - ref['box_heads']
        mech = (cls_delta if shares_cls(v) else 0) + (box_delta if shares_box(v) else 0)
        ret[v] = {**c, 'cls_delta': cls_delta, 'box_delta': box_delta, 'total_delta': c['total'] - ref['total'], 'mechanism_delta': mech}
    return ret
