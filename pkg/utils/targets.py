from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch

from utils.box_ops import Box, LabeledBox, boxes_to_tensor, encode_boxes, pairwise_iou


class Assignment(NamedTuple):
    labels: torch.Tensor        # (N,) long, 0 = background
    reg_targets: torch.Tensor   # (N, 4), zero rows for background
    fg_mask: torch.Tensor       # (N,) bool
    max_iou: torch.Tensor       # (N,)


def assign_targets(
    proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
    fg_iou_threshold: float, stds: Sequence[float],
) -> Assignment:
    """A proposal takes the class of its best-IoU gt when that IoU >= fg_iou_threshold, background otherwise."""
    if not 0 < fg_iou_threshold < 1:
        raise ValueError(f'[assign_targets] fg_iou_threshold must lie in (0, 1), got {fg_iou_threshold}')
    N = proposals.shape[0]
    labels = torch.zeros(N, dtype=torch.long)
    reg_targets = proposals.new_zeros(N, 4)
    if gt_boxes.shape[0] == 0 or N == 0:
        return Assignment(labels, reg_targets, labels > 0, proposals.new_zeros(N))
    max_iou, matched = pairwise_iou(proposals, gt_boxes).max(dim=1)
    fg = max_iou >= fg_iou_threshold
    labels[fg] = gt_labels[matched[fg]].long()
    if bool(fg.any()):
        reg_targets[fg] = encode_boxes(proposals[fg], gt_boxes[matched[fg]].to(proposals.dtype), stds)
    return Assignment(labels, reg_targets, fg, max_iou)


def assign_box_targets(
    proposals: Sequence[Box], gts: Sequence[LabeledBox], fg_iou_threshold: float, stds: Sequence[float],
) -> List[Tuple[int, Optional[Tuple[float, float, float, float]]]]:
    """Per-proposal (label, deltas or None) over plain boxes."""
    a = assign_targets(
        boxes_to_tensor(proposals), boxes_to_tensor(g.box for g in gts),
        torch.tensor([g.class_id for g in gts], dtype=torch.long), fg_iou_threshold, stds,
    )
    return [
        (int(lbl), tuple(t.tolist()) if bool(f) else None)
        for lbl, t, f in zip(a.labels, a.reg_targets, a.fg_mask)
    ]


def subsample_rois(labels: torch.Tensor, rois_per_image: int, fg_fraction: float, generator: torch.Generator) -> torch.Tensor:
    """
    Foreground indices first (at most floor(fg_fraction * rois_per_image) unless
    background runs short), then background; each bucket drawn without replacement.
    """
    n = labels.shape[0]
    if n == 0:
        raise ValueError('[subsample_rois] no proposals to sample from')
    if rois_per_image <= 0:
        raise ValueError(f'[subsample_rois] rois_per_image must be positive, got {rois_per_image}')
    if not 0 < fg_fraction < 1:
        raise ValueError(f'[subsample_rois] fg_fraction must lie in (0, 1), got {fg_fraction}')
    fg_idx = torch.nonzero(labels > 0).flatten()
    bg_idx = torch.nonzero(labels == 0).flatten()
    num_fg = min(int(fg_fraction * rois_per_image), fg_idx.numel())
    num_bg = min(rois_per_image - num_fg, bg_idx.numel())
    num_fg = min(rois_per_image - num_bg, fg_idx.numel())   # background ran short: refill with foreground
    fg_pick = fg_idx[torch.randperm(fg_idx.numel(), generator=generator)[:num_fg]]
    bg_pick = bg_idx[torch.randperm(bg_idx.numel(), generator=generator)[:num_bg]]
    return torch.cat((fg_pick, bg_pick))
