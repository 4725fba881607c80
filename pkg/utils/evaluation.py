import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import prettytable as pt
import torch
import torch.nn.functional as F

from models import CascadeModel, StageOutput, cascade_forward
from utils.box_ops import LabeledBox, ScoredBox, boxes_to_tensor, match_to_gt, nms, pairwise_iou, tensor_to_boxes
from utils.data import SceneRecord
from utils.proposals import ProposalConfig, sample_proposal_tensor

# 0.50, 0.55, ..., 0.95
IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REC_THRS = np.linspace(0.0, 1.00, 101, endpoint=True)

DetsByImage = Dict[int, List[ScoredBox]]
GtsByImage = Dict[int, List[LabeledBox]]


def threshold_names(thresholds: Sequence[float] = IOU_THRESHOLDS) -> List[str]:
    return [f'AP{int(round(t * 100))}' for t in thresholds]


# ============================== average precision ==============================

def average_precision(dets: DetsByImage, gts: GtsByImage, class_id: int, iou_threshold: float) -> Optional[float]:
    """
    101-point interpolated AP of one class over all images. Detections are
    matched greedily per image, then ranked by score across the dataset (ties
    keep image then input order). None when the class has no ground truth.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f'[average_precision] iou_threshold must lie in (0, 1), got {iou_threshold}')
    npos = sum(1 for g_list in gts.values() for g in g_list if g.class_id == class_id)
    if npos == 0:
        return None

    scores, tps = [], []
    for image_id in sorted(set(dets) | set(gts)):
        d = [x for x in dets.get(image_id, []) if x.class_id == class_id]
        if not d:
            continue
        g = [x for x in gts.get(image_id, []) if x.class_id == class_id]
        scores.extend(x.score for x in d)
        tps.extend(match_to_gt(d, g, iou_threshold))
    if not scores:
        return 0.0

    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='mergesort')
    tp = np.asarray(tps, dtype=np.float64)[order]
    tp_sum, fp_sum = np.cumsum(tp), np.cumsum(1.0 - tp)
    rc = tp_sum / npos
    pr = tp_sum / (tp_sum + fp_sum)

    # precision envelope: non-increasing from the right
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    inds = np.searchsorted(rc, REC_THRS, side='left')
    q = np.zeros(len(REC_THRS))
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return float(q.mean())


@dataclass
class APReport:
    aps: Tuple[float, ...]                          # one per threshold
    thresholds: Tuple[float, ...] = IOU_THRESHOLDS
    label: str = ''
    variant: str = ''
    mode: str = ''
    seed: Optional[int] = None
    undefined_classes: Tuple[int, ...] = ()         # classes with no ground truth, excluded from the means

    def __post_init__(self):
        self.aps = tuple(float(a) for a in self.aps)
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if len(self.aps) != len(self.thresholds):
            raise ValueError(f'[APReport] {len(self.aps)} APs for {len(self.thresholds)} thresholds')

    @property
    def mean(self) -> float:
        return float(np.mean(self.aps)) if self.aps else 0.0

    def ap_at(self, threshold: float) -> float:
        for t, a in zip(self.thresholds, self.aps):
            if abs(t - threshold) < 1e-9:
                return a
        raise KeyError(f'[APReport] no threshold {threshold} in {self.thresholds}')

    def field_names(self) -> List[str]:
        return ['label'] + threshold_names(self.thresholds) + ['mAP']

    def to_table(self, percent: bool = True) -> pt.PrettyTable:
        tb = pt.PrettyTable()
        tb.field_names = self.field_names()
        fmt = (lambda v: f'{100 * v:.1f}') if percent else float
        tb.add_row([self.label or f'{self.variant}/{self.mode}'] + [fmt(a) for a in self.aps] + [fmt(self.mean)])
        return tb


def ap_sweep(dets: DetsByImage, gts: GtsByImage, num_classes: Optional[int] = None, thresholds: Sequence[float] = IOU_THRESHOLDS, **meta) -> APReport:
    """AP at every threshold, averaged over the classes that have ground truth."""
    gt_classes = {g.class_id for g_list in gts.values() for g in g_list}
    if not gt_classes:
        raise ValueError('[ap_sweep] empty ground-truth set')
    classes = set(range(1, num_classes + 1)) if num_classes else gt_classes | {d.class_id for d_list in dets.values() for d in d_list}
    defined = sorted(c for c in classes if c in gt_classes)
    undefined = tuple(sorted(classes - gt_classes))
    aps = [float(np.mean([average_precision(dets, gts, c, t) for c in defined])) for t in thresholds]
    return APReport(aps=tuple(aps), thresholds=tuple(thresholds), undefined_classes=undefined, **meta)


# ============================== reports ==============================

@dataclass
class GapReport:
    label_a: str
    label_b: str
    deltas: Tuple[float, ...]
    thresholds: Tuple[float, ...] = IOU_THRESHOLDS

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.deltas)) if self.deltas else 0.0

    def to_table(self, percent: bool = True) -> pt.PrettyTable:
        tb = pt.PrettyTable()
        tb.field_names = ['label'] + threshold_names(self.thresholds) + ['mAP']
        fmt = (lambda v: f'{100 * v:+.1f}') if percent else float
        tb.add_row([f'{self.label_a} - {self.label_b}'] + [fmt(d) for d in self.deltas] + [fmt(self.mean_delta)])
        return tb


def gap_report(a: APReport, b: APReport) -> GapReport:
    if len(a.thresholds) != len(b.thresholds) or any(abs(x - y) > 1e-9 for x, y in zip(a.thresholds, b.thresholds)):
        raise ValueError(f'[gap_report] threshold grids differ: {a.thresholds} vs {b.thresholds}')
    return GapReport(
        label_a=a.label or f'{a.variant}/{a.mode}', label_b=b.label or f'{b.variant}/{b.mode}',
        deltas=tuple(x - y for x, y in zip(a.aps, b.aps)), thresholds=a.thresholds,
    )


@dataclass
class ConfidenceHistogram:
    edges: np.ndarray           # (bins + 1,)
    counts: np.ndarray          # (bins,)
    iou_low: float = 0.5
    iou_high: float = 0.75
    label: str = ''

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_table(self) -> pt.PrettyTable:
        tb = pt.PrettyTable()
        tb.field_names = ['bin_low', 'bin_high', 'count']
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            tb.add_row([round(float(lo), 4), round(float(hi), 4), int(c)])
        return tb


def confidence_histogram(dets: DetsByImage, gts: GtsByImage, iou_low: float = 0.5, iou_high: float = 0.75, bins: int = 20, label: str = '') -> ConfidenceHistogram:
    """Scores of the detections whose best same-class IoU lies in [iou_low, iou_high)."""
    if not 0 <= iou_low < iou_high <= 1:
        raise ValueError(f'[confidence_histogram] need 0 <= iou_low < iou_high <= 1, got [{iou_low}, {iou_high}]')
    picked = []
    for image_id, d_list in dets.items():
        g_list = gts.get(image_id, [])
        for d in d_list:
            same = [g for g in g_list if g.class_id == d.class_id]
            if not same:
                continue
            best = float(pairwise_iou(boxes_to_tensor([d.box]), boxes_to_tensor(g.box for g in same)).max())
            if iou_low <= best < iou_high:
                picked.append(d.score)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.asarray(picked, dtype=np.float64), bins=edges)
    return ConfidenceHistogram(edges=edges, counts=counts, iou_low=iou_low, iou_high=iou_high, label=label)


def write_csv(tb: pt.PrettyTable, path: str):
    with open(path, 'w', newline='') as fp:
        fp.write(tb.get_csv_string())


def save_ap_reports(reports: Sequence[APReport], path: str):
    tb = pt.PrettyTable()
    tb.field_names = reports[0].field_names() + ['variant', 'mode', 'seed']
    for r in reports:
        tb.add_row(r.to_table(percent=False).rows[0] + [r.variant, r.mode, '' if r.seed is None else r.seed])
    write_csv(tb, path)


def load_ap_report(path: str) -> List[APReport]:
    with open(path, 'r', newline='') as fp:
        rows = list(csv.DictReader(io.StringIO(fp.read())))
    if not rows:
        raise ValueError(f'[load_ap_report] {path} holds no report rows')
    names = [k for k in rows[0] if k.startswith('AP')]
    thresholds = tuple(int(k[2:]) / 100 for k in names)
    reports = []
    for row in rows:
        seed = row.get('seed', '')
        reports.append(APReport(
            aps=tuple(float(row[k]) for k in names), thresholds=thresholds, label=row.get('label', ''),
            variant=row.get('variant', ''), mode=row.get('mode', ''), seed=int(seed) if seed not in ('', None) else None,
        ))
    return reports


# ============================== inference ==============================

def parse_mode(mode: str, num_stages: int) -> Optional[int]:
    """Stage index for 'stageK', None for 'ensemble'."""
    if mode == 'ensemble':
        return None
    if mode.startswith('stage') and mode[5:].isdigit():
        k = int(mode[5:])
        if 1 <= k <= num_stages:
            return k
        raise ValueError(f'[infer] mode {mode!r} needs a model with at least {k} stages, this one has {num_stages}')
    raise ValueError(f'[infer] unknown mode {mode!r}, expected stage1..stage{num_stages} or ensemble')


def ensemble_scores(model: CascadeModel, outputs: Sequence[StageOutput], ensemble_type: Literal['prob', 'logit'] = 'prob') -> torch.Tensor:
    """Every stage's classifier on the last stage's pooled features, averaged. (N, K+1) probabilities."""
    pooled = outputs[-1].pooled
    logits = [model.classify_with(pooled, j) for j in range(1, len(outputs))] + [outputs[-1].class_logits]
    if ensemble_type == 'prob':
        return torch.stack([F.softmax(l, dim=1) for l in logits], dim=0).mean(dim=0)
    if ensemble_type == 'logit':
        return F.softmax(torch.stack(logits, dim=0).mean(dim=0), dim=1)
    raise ValueError(f'[ensemble_scores] unknown ensemble_type {ensemble_type!r}')


def scores_to_dets(boxes: torch.Tensor, probs: torch.Tensor, score_thresh: float, nms_thresh: float, max_dets: int) -> List[ScoredBox]:
    box_list = tensor_to_boxes(boxes)
    n_idx, c_idx = torch.nonzero(probs[:, 1:] >= score_thresh, as_tuple=True)
    cands = [ScoredBox(box_list[n], float(probs[n, c + 1]), int(c) + 1) for n, c in zip(n_idx.tolist(), c_idx.tolist())]
    return nms(cands, nms_thresh)[:max_dets]


@torch.no_grad()
def infer(
    model: CascadeModel, image: torch.Tensor, proposals: torch.Tensor, mode: str = 'ensemble',
    score_thresh: float = 0.05, nms_thresh: float = 0.5, max_dets: int = 100,
    ensemble_type: Literal['prob', 'logit'] = 'prob',
) -> List[ScoredBox]:
    stage = parse_mode(mode, model.num_stages)
    outputs = cascade_forward(image, proposals, model)
    if stage is None:
        boxes, probs = outputs[-1].refined_boxes, ensemble_scores(model, outputs, ensemble_type)
    else:
        boxes, probs = outputs[stage - 1].refined_boxes, F.softmax(outputs[stage - 1].class_logits, dim=1)
    return scores_to_dets(boxes, probs, score_thresh, nms_thresh, max_dets)


@dataclass
class EvalConfig:
    eval_seed: int = 10_000
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_dets: int = 100
    ensemble_type: Literal['prob', 'logit'] = 'prob'
    proposals: ProposalConfig = field(default_factory=ProposalConfig)


@torch.no_grad()
def detect_dataset(model: CascadeModel, records: Sequence[SceneRecord], mode: str, cfg: EvalConfig) -> Tuple[DetsByImage, GtsByImage]:
    parse_mode(mode, model.num_stages)
    model.eval()
    image_size = model.cfg.image_size
    dets, gts = {}, {}
    for rec in records:
        gt_boxes = boxes_to_tensor(g.box for g in rec.gts)
        proposals = sample_proposal_tensor(gt_boxes, image_size, cfg.proposals, cfg.eval_seed + rec.scene_id)
        dets[rec.scene_id] = infer(
            model, rec.image.unsqueeze(0), proposals, mode, cfg.score_thresh, cfg.nms_thresh, cfg.max_dets, cfg.ensemble_type,
        )
        gts[rec.scene_id] = list(rec.gts)
    return dets, gts


def evaluate_run(model: CascadeModel, records: Sequence[SceneRecord], mode: str, cfg: EvalConfig, **meta) -> Tuple[APReport, DetsByImage, GtsByImage]:
    dets, gts = detect_dataset(model, records, mode, cfg)
    report = ap_sweep(dets, gts, num_classes=model.num_classes, variant=model.variant, mode=mode, **meta)
    return report, dets, gts
