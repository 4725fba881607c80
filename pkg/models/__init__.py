from typing import Sequence, Tuple

from .backbone import BackboneConfig, TinyBackbone
from .cascade import CascadeConfig, CascadeModel, StageOutput, cascade_forward, count_parameters, parameter_deltas
from .heads import VARIANTS, StageHead, cfs_forward, lfs_forward


def build_cascade(
    variant='fscascade',
    num_stages=3,
    num_classes=3,
    input_size=(96, 96),
    channels=64,
    num_blocks=3,
    hidden_width=256,
    pooled_size=7,
    fg_iou_thresholds: Sequence[float] = (0.5, 0.6, 0.7),
    delta_stds: Sequence[Sequence[float]] = None,
    detach_shared_cls=False,
    init_std=-1,  # init_std < 0: automated
    init_cls=0.01,
    init_box=0.001,
) -> Tuple[CascadeConfig, CascadeModel]:
    kw = {} if delta_stds is None else dict(delta_stds=delta_stds)
    cfg = CascadeConfig(
        variant=variant,
        num_stages=num_stages,
        num_classes=num_classes,
        hidden_width=hidden_width,
        pooled_size=pooled_size,
        fg_iou_thresholds=tuple(fg_iou_thresholds),
        backbone=BackboneConfig(input_size=tuple(input_size), channels=channels, num_blocks=num_blocks),
        detach_shared_cls=detach_shared_cls,
        init_std=init_std,
        init_cls=init_cls,
        init_box=init_box,
        **kw,
    )
    model = CascadeModel(cfg)
    model.init_weights()
    return cfg, model
