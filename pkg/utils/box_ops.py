import json
import math
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import torch
from torchvision.ops import box_iou

Ten = torch.Tensor
DTYPE = torch.float64

# dw/dh clamp before exponentiation
BBOX_XFORM_CLIP = math.log(1000. / 16)

# per-stage (dx, dy, dw, dh) normalisation
DEFAULT_STAGE_STDS = (
    (0.1, 0.1, 0.2, 0.2),
    (0.05, 0.05, 0.1, 0.1),
    (0.033, 0.033, 0.067, 0.067),
)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.) * max(self.height, 0.)


class ScoredBox(NamedTuple):
    box: Box
    score: float
    class_id: int


class LabeledBox(NamedTuple):
    box: Box
    class_id: int


def boxes_to_tensor(boxes: Iterable[Box]) -> Ten:
    boxes = [tuple(b) for b in boxes]
    if not boxes:
        return torch.zeros(0, 4, dtype=DTYPE)
    return torch.tensor(boxes, dtype=DTYPE)


def tensor_to_boxes(t: Ten) -> List[Box]:
    return [Box(*row) for row in t.detach().cpu().tolist()]


def pairwise_iou(boxes1: Ten, boxes2: Ten) -> Ten:
    """IoU matrix (N, M); pairs with zero union get 0."""
    if boxes1.shape[0] == 0 or boxes2.shape[0] == 0:
        return boxes1.new_zeros(boxes1.shape[0], boxes2.shape[0])
    return box_iou(boxes1, boxes2).nan_to_num(nan=0.0)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.) * max(ih, 0.)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.


def _centers_sizes(boxes: Ten) -> Tuple[Ten, Ten, Ten, Ten]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(proposals: Ten, gts: Ten, stds: Sequence[float]) -> Ten:
    """Regression targets (N, 4) from proposals (N, 4) to their matched gts (N, 4)."""
    px, py, pw, ph = _centers_sizes(proposals)
    gx, gy, gw, gh = _centers_sizes(gts)
    if proposals.shape[0] and (bool((pw <= 0).any()) or bool((ph <= 0).any())):
        raise ValueError('[encode_boxes] proposals must have positive width and height')
    if gts.shape[0] and (bool((gw <= 0).any()) or bool((gh <= 0).any())):
        raise ValueError('[encode_boxes] ground-truth boxes must have positive width and height')
    s = proposals.new_tensor(stds)
    deltas = torch.stack(((gx - px) / pw, (gy - py) / ph, torch.log(gw / pw), torch.log(gh / ph)), dim=1)
    return deltas / s


def decode_boxes(proposals: Ten, deltas: Ten, stds: Sequence[float], image_size: Tuple[int, int]) -> Ten:
    """Inverse of encode_boxes, clipped to [0, W] x [0, H]. image_size is (W, H)."""
    W, H = image_size
    px, py, pw, ph = _centers_sizes(proposals)
    d = deltas * deltas.new_tensor(stds)
    dw = d[:, 2].clamp(max=BBOX_XFORM_CLIP)
    dh = d[:, 3].clamp(max=BBOX_XFORM_CLIP)
    cx, cy = px + d[:, 0] * pw, py + d[:, 1] * ph
    w, h = pw * torch.exp(dw), ph * torch.exp(dh)
    out = torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)
    return clip_boxes(out, (W, H))


def clip_boxes(boxes: Ten, image_size: Tuple[int, int]) -> Ten:
    W, H = image_size
    x = boxes[:, 0::2].clamp(min=0, max=W)
    y = boxes[:, 1::2].clamp(min=0, max=H)
    return torch.stack((x[:, 0], y[:, 0], x[:, 1], y[:, 1]), dim=1)


def ensure_min_size(boxes: Ten, image_size: Tuple[int, int], min_size: float = 1.0) -> Ten:
    """Widen degenerate boxes to min_size inside the image; other boxes are returned untouched."""
    W, H = image_size
    x1, y1, x2, y2 = boxes.unbind(dim=1)
    x2 = torch.where(x2 - x1 < min_size, torch.clamp(x1 + min_size, max=W), x2)
    x1 = torch.where(x2 - x1 < min_size, x2 - min_size, x1)
    y2 = torch.where(y2 - y1 < min_size, torch.clamp(y1 + min_size, max=H), y2)
    y1 = torch.where(y2 - y1 < min_size, y2 - min_size, y1)
    return torch.stack((x1, y1, x2, y2), dim=1)


def encode_deltas(proposal: Box, gt: Box, stds: Sequence[float]) -> Tuple[float, float, float, float]:
    return tuple(encode_boxes(boxes_to_tensor([proposal]), boxes_to_tensor([gt]), stds)[0].tolist())


def decode_deltas(proposal: Box, deltas: Sequence[float], stds: Sequence[float], image_size: Tuple[int, int]) -> Box:
    d = torch.tensor([list(deltas)], dtype=DTYPE)
    return tensor_to_boxes(decode_boxes(boxes_to_tensor([proposal]), d, stds, image_size))[0]


def nms(dets: Sequence[ScoredBox], iou_threshold: float) -> List[ScoredBox]:
    """
    Greedy per-class NMS. Candidates are visited by descending score, ties by
    lower input index; a box is dropped if it overlaps a kept box of the same
    class by IoU > iou_threshold. Output is sorted by descending score.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f'[nms] iou_threshold must lie in (0, 1], got {iou_threshold}')
    if len(dets) == 0:
        return []
    boxes = boxes_to_tensor(d.box for d in dets)
    scores = torch.tensor([d.score for d in dets], dtype=DTYPE)
    classes = torch.tensor([d.class_id for d in dets], dtype=torch.long)
    order = torch.sort(scores, descending=True, stable=True).indices
    ious = pairwise_iou(boxes, boxes)

    suppressed = torch.zeros(len(dets), dtype=torch.bool)
    keep = []
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (ious[i] > iou_threshold) & (classes == classes[i])
    return [dets[i] for i in keep]


def match_to_gt(dets: Sequence[ScoredBox], gts: Sequence[LabeledBox], iou_threshold: float) -> List[bool]:
    """
    Greedy matching by descending score (ties by input index). A detection is a
    true positive if an unmatched same-class gt has IoU >= iou_threshold; it takes
    the highest-IoU such gt. Flags are returned in input order.
    """
    flags = [False] * len(dets)
    if len(dets) == 0 or len(gts) == 0:
        return flags
    ious = pairwise_iou(boxes_to_tensor(d.box for d in dets), boxes_to_tensor(g.box for g in gts))
    gt_classes = torch.tensor([g.class_id for g in gts], dtype=torch.long)
    scores = torch.tensor([d.score for d in dets], dtype=DTYPE)
    gt_taken = torch.zeros(len(gts), dtype=torch.bool)
    for i in torch.sort(scores, descending=True, stable=True).indices.tolist():
        cand = (~gt_taken) & (gt_classes == dets[i].class_id) & (ious[i] >= iou_threshold)
        if not bool(cand.any()):
            continue
        j = int(torch.where(cand, ious[i], ious.new_tensor(-1.)).argmax())
        gt_taken[j] = True
        flags[i] = True
    return flags


# ===================== detection dump: one JSON object per line =====================
DET_FIELDS = ('image_id', 'class_id', 'score', 'x1', 'y1', 'x2', 'y2')


def save_detections(path: str, dets_by_image: Dict[int, List[ScoredBox]]):
    with open(path, 'w') as fp:
        for image_id in sorted(dets_by_image):
            for d in dets_by_image[image_id]:
                rec = dict(zip(DET_FIELDS, (int(image_id), int(d.class_id), float(d.score), *map(float, d.box))))
                fp.write(json.dumps(rec) + '\n')


def load_detections(path: str) -> Dict[int, List[ScoredBox]]:
    dets: Dict[int, List[ScoredBox]] = {}
    with open(path, 'r') as fp:
        for line_no, line in enumerate(fp, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in DET_FIELDS if k not in rec]
            if missing:
                raise ValueError(f'[load_detections] {path}:{line_no} missing fields {missing}')
            box = Box(rec['x1'], rec['y1'], rec['x2'], rec['y2'])
            dets.setdefault(int(rec['image_id']), []).append(ScoredBox(box, float(rec['score']), int(rec['class_id'])))
    return dets
