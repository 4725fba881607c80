from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch

from utils.box_ops import Box, LabeledBox, boxes_to_tensor, clip_boxes, ensure_min_size, pairwise_iou, tensor_to_boxes


@dataclass
class ProposalConfig:
    per_gt: int = 16            # jittered copies of every ground-truth box
    num_random: int = 32        # uniform background boxes
    iou_low: float = 0.3
    iou_high: float = 0.95
    jitter: float = 1.0         # 0 reproduces the ground truth exactly
    candidates: int = 48        # jitter magnitudes tried per target IoU
    max_shift: float = 0.6      # centre shift, fraction of the gt side, at jitter 1
    max_log_scale: float = 0.7  # |log(side ratio)| at jitter 1
    random_size: Tuple[float, float] = (0.1, 0.6)

    def __post_init__(self):
        if self.per_gt < 0 or self.num_random < 0:
            raise ValueError(f'[ProposalConfig] per_gt and num_random must be >= 0, got {self.per_gt}, {self.num_random}')
        if not 0 <= self.iou_low < self.iou_high <= 1:
            raise ValueError(f'[ProposalConfig] need 0 <= iou_low < iou_high <= 1, got [{self.iou_low}, {self.iou_high}]')
        if self.jitter < 0 or self.candidates < 1:
            raise ValueError(f'[ProposalConfig] jitter must be >= 0 and candidates >= 1')
        lo, hi = self.random_size
        if not 0 < lo <= hi <= 1:
            raise ValueError(f'[ProposalConfig] random_size must satisfy 0 < lo <= hi <= 1, got {self.random_size}')


def _uniform(g: torch.Generator, *shape, lo=-1., hi=1.) -> torch.Tensor:
    return torch.rand(*shape, generator=g, dtype=torch.float64) * (hi - lo) + lo


def _jitter_candidates(gt: torch.Tensor, cfg: ProposalConfig, g: torch.Generator) -> torch.Tensor:
    # magnitudes sweep [0, jitter], so the candidate IoUs range from 1 down past iou_low
    n = cfg.candidates
    mag = torch.linspace(0, 1, n, dtype=torch.float64) * cfg.jitter
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    cx, cy = gt[0] + 0.5 * w, gt[1] + 0.5 * h
    shift = _uniform(g, n, 2) * mag[:, None] * cfg.max_shift
    scale = torch.exp(_uniform(g, n, 2) * mag[:, None] * cfg.max_log_scale)
    ncx, ncy = cx + shift[:, 0] * w, cy + shift[:, 1] * h
    nw, nh = w * scale[:, 0], h * scale[:, 1]
    return torch.stack((ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh), dim=1)


def sample_proposal_tensor(gt_boxes: torch.Tensor, image_size: Tuple[int, int], cfg: ProposalConfig, rng_seed: int) -> torch.Tensor:
    """
    (per_gt * M + num_random, 4) boxes. For every gt, per_gt target IoUs are
    stratified over [iou_low, iou_high]; each target takes the jittered
    candidate whose IoU with the gt is closest to it. Boxes are clipped to
    the image (W, H) and kept at least 1px wide.
    """
    if gt_boxes.shape[0] == 0:
        raise ValueError('[sample_proposals] at least one ground-truth box is required')
    W, H = image_size
    g = torch.Generator()
    g.manual_seed(int(rng_seed))
    out = []
    span = cfg.iou_high - cfg.iou_low
    for gt in (gt_boxes.to(torch.float64) if cfg.per_gt else []):
        targets = cfg.iou_low + (torch.arange(cfg.per_gt, dtype=torch.float64) + _uniform(g, cfg.per_gt, lo=0., hi=1.)) / cfg.per_gt * span
        for t in targets:
            cands = ensure_min_size(clip_boxes(_jitter_candidates(gt, cfg, g), (W, H)), (W, H))
            ious = pairwise_iou(cands, gt[None])[:, 0]
            out.append(cands[int(torch.argmin((ious - t).abs()))])
    if cfg.num_random:
        lo, hi = cfg.random_size
        wh = _uniform(g, cfg.num_random, 2, lo=lo, hi=hi) * gt_boxes.new_tensor([W, H], dtype=torch.float64)
        xy = _uniform(g, cfg.num_random, 2, lo=0., hi=1.) * (gt_boxes.new_tensor([W, H], dtype=torch.float64) - wh)
        rand = torch.cat((xy, xy + wh), dim=1)
        out.extend(ensure_min_size(clip_boxes(rand, (W, H)), (W, H)))
    return torch.stack(out, dim=0)


def sample_proposals(gts: Sequence[LabeledBox], image_size: Tuple[int, int], cfg: ProposalConfig, rng_seed: int) -> List[Box]:
    return tensor_to_boxes(sample_proposal_tensor(boxes_to_tensor(g.box for g in gts), image_size, cfg, rng_seed))
