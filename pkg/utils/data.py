import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from utils.box_ops import Box, LabeledBox, boxes_to_tensor, iou

SHAPES = ('rectangle', 'ellipse', 'triangle')
MANIFEST = 'manifest.json'
SCENE_DIR = 'scenes'
DATASET_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    image_size: Tuple[int, int] = (96, 96)     # (H, W)
    classes: Tuple[str, ...] = SHAPES          # class id = position + 1
    objects_min: int = 1
    objects_max: int = 4
    size_min: float = 0.15                     # side length as a fraction of the image side
    size_max: float = 0.40
    max_gt_iou: float = 0.2
    noise: float = 0.35                        # background ~ U(0, noise)
    seed: int = 0
    max_retries: int = 200                     # placement attempts per object

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.classes = tuple(self.classes)
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ValueError(f'[SceneSpec] image_size must be (H, W) with sides >= 8, got {self.image_size}')
        if not self.classes or len(set(self.classes)) != len(self.classes) or not set(self.classes) <= set(SHAPES):
            raise ValueError(f'[SceneSpec] classes must be distinct names from {SHAPES}, got {self.classes}')
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError(f'[SceneSpec] need 1 <= objects_min <= objects_max, got [{self.objects_min}, {self.objects_max}]')
        if not 0 < self.size_min <= self.size_max < 1:
            raise ValueError(f'[SceneSpec] need 0 < size_min <= size_max < 1, got [{self.size_min}, {self.size_max}]')
        if not 0 <= self.max_gt_iou < 1:
            raise ValueError(f'[SceneSpec] max_gt_iou must lie in [0, 1), got {self.max_gt_iou}')
        if not 0 <= self.noise <= 1:
            raise ValueError(f'[SceneSpec] noise must lie in [0, 1], got {self.noise}')
        if self.max_retries < 1:
            raise ValueError(f'[SceneSpec] max_retries must be positive, got {self.max_retries}')

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d['image_size'], d['classes'] = list(self.image_size), list(self.classes)
        return d


class SceneRecord(NamedTuple):
    image: torch.Tensor         # (3, H, W) float64 in [0, 1]
    gts: List[LabeledBox]
    scene_id: int


def render_mask(kind: str, x0: int, y0: int, w: int, h: int, H: int, W: int) -> np.ndarray:
    """Boolean (H, W) mask of a filled shape inscribed in the pixel block [x0, x0+w) x [y0, y0+h)."""
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    inside = (px >= x0) & (px <= x0 + w) & (py >= y0) & (py <= y0 + h)
    if kind == 'rectangle':
        return inside
    if kind == 'ellipse':
        cx, cy, rx, ry = x0 + w / 2, y0 + h / 2, w / 2, h / 2
        return inside & (((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0)
    if kind == 'triangle':
        # apex at the top centre, base on the bottom edge
        t = (py - y0) / h
        half = 0.5 * w * t
        cx = x0 + w / 2
        return inside & (px >= cx - half) & (px <= cx + half)
    raise ValueError(f'[render_mask] unknown shape {kind!r}')


def mask_to_box(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    # pixel-edge coordinates: pixel (x, y) covers [x, x+1) x [y, y+1)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_scene_with_masks(spec: SceneSpec, scene_seed: int) -> Tuple[SceneRecord, List[np.ndarray]]:
    H, W = spec.image_size
    rng = np.random.default_rng([spec.seed, scene_seed])
    image = rng.uniform(0.0, spec.noise, size=(3, H, W))
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))

    gts: List[LabeledBox] = []
    masks: List[np.ndarray] = []
    for k in range(n_obj):
        class_id = int(rng.integers(1, spec.num_classes + 1))
        kind = spec.classes[class_id - 1]
        for _ in range(spec.max_retries):
            fw, fh = rng.uniform(spec.size_min, spec.size_max, size=2)
            w, h = max(2, int(round(fw * W))), max(2, int(round(fh * H)))
            w, h = min(w, W), min(h, H)
            x0, y0 = int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1))
            mask = render_mask(kind, x0, y0, w, h, H, W)
            box = mask_to_box(mask)
            if box is None or box.area < 4:
                continue
            # no occlusion: boxes stay tight to the visible pixels
            if any((mask & m).any() for m in masks):
                continue
            if all(iou(box, g.box) <= spec.max_gt_iou for g in gts):
                break
        else:
            raise ValueError(
                f'[generate_scene] could not place object {k + 1}/{n_obj} of scene {scene_seed} within {spec.max_retries} attempts; '
                f'loosen the spec (smaller objects_max or size_max, or larger max_gt_iou)'
            )
        color = rng.uniform(0.5, 1.0, size=3)
        image[:, mask] = color[:, None]
        gts.append(LabeledBox(box, class_id))
        masks.append(mask)

    return SceneRecord(torch.from_numpy(image), gts, int(scene_seed)), masks


def generate_scene(spec: SceneSpec, scene_seed: int) -> SceneRecord:
    return generate_scene_with_masks(spec, scene_seed)[0]


def default_splits(num_train: int = 500, num_val: int = 100) -> Dict[str, List[int]]:
    return {'train': list(range(num_train)), 'val': list(range(num_train, num_train + num_val))}


def generate_dataset(spec: SceneSpec, splits: Dict[str, Sequence[int]]) -> List[SceneRecord]:
    ids = sorted({i for ids in splits.values() for i in ids})
    return [generate_scene(spec, i) for i in ids]


# ============================== on-disk format ==============================
# <dir>/manifest.json          {"version", "spec", "splits": {name: [scene ids]}, "scene_ids"}
# <dir>/scenes/<id>.npy        float64 image (3, H, W), numpy header + raw data
# <dir>/scenes/<id>.json       {"scene_id", "image_size": [H, W], "gts": [{"class_id", "x1", "y1", "x2", "y2"}]}

def _scene_paths(directory: str, scene_id: int) -> Tuple[str, str]:
    base = os.path.join(directory, SCENE_DIR, f'{scene_id:06d}')
    return base + '.npy', base + '.json'


def save_dataset(records: Sequence[SceneRecord], directory: str, spec: Optional[SceneSpec] = None, splits: Optional[Dict[str, Sequence[int]]] = None):
    os.makedirs(os.path.join(directory, SCENE_DIR), exist_ok=True)
    for rec in records:
        img_path, ann_path = _scene_paths(directory, rec.scene_id)
        np.save(img_path, rec.image.detach().cpu().numpy().astype(np.float64), allow_pickle=False)
        ann = {
            'scene_id': rec.scene_id,
            'image_size': list(rec.image.shape[-2:]),
            'gts': [{'class_id': g.class_id, 'x1': g.box.x1, 'y1': g.box.y1, 'x2': g.box.x2, 'y2': g.box.y2} for g in rec.gts],
        }
        with open(ann_path, 'w') as fp:
            json.dump(ann, fp, indent=1)
    scene_ids = [rec.scene_id for rec in records]
    if splits is None:
        splits = {'all': scene_ids}
    manifest = {
        'version': DATASET_VERSION,
        'spec': spec.to_dict() if spec is not None else None,
        'splits': {k: [int(i) for i in v] for k, v in splits.items()},
        'scene_ids': scene_ids,
    }
    with open(os.path.join(directory, MANIFEST), 'w') as fp:
        json.dump(manifest, fp, indent=1)


def load_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise DatasetError(f'[load_dataset] missing manifest {path}')
    try:
        with open(path, 'r') as fp:
            manifest = json.load(fp)
        _ = manifest['splits'], manifest['scene_ids']
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f'[load_dataset] corrupt manifest {path}: {e}') from e
    if manifest.get('version') != DATASET_VERSION:
        raise DatasetError(f'[load_dataset] {path}: unsupported version {manifest.get("version")!r}')
    return manifest


def load_scene(directory: str, scene_id: int) -> SceneRecord:
    img_path, ann_path = _scene_paths(directory, scene_id)
    for p in (img_path, ann_path):
        if not os.path.isfile(p):
            raise DatasetError(f'[load_dataset] missing file {p}')
    try:
        image = np.load(img_path, allow_pickle=False)
    except (ValueError, OSError) as e:
        raise DatasetError(f'[load_dataset] corrupt image {img_path}: {e}') from e
    try:
        with open(ann_path, 'r') as fp:
            ann = json.load(fp)
        gts = [LabeledBox(Box(float(g['x1']), float(g['y1']), float(g['x2']), float(g['y2'])), int(g['class_id'])) for g in ann['gts']]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetError(f'[load_dataset] corrupt annotation {ann_path}: {e}') from e
    if image.ndim != 3 or image.shape[0] != 3 or list(image.shape[-2:]) != list(ann.get('image_size', image.shape[-2:])):
        raise DatasetError(f'[load_dataset] {img_path}: image shape {image.shape} does not match its annotation')
    return SceneRecord(torch.from_numpy(image), gts, int(scene_id))


def load_dataset(directory: str, split: Optional[str] = None) -> List[SceneRecord]:
    manifest = load_manifest(directory)
    if split is None:
        ids = manifest['scene_ids']
    elif split in manifest['splits']:
        ids = manifest['splits'][split]
    else:
        raise DatasetError(f'[load_dataset] {os.path.join(directory, MANIFEST)} has no split {split!r}, available: {sorted(manifest["splits"])}')
    return [load_scene(directory, int(i)) for i in ids]


class SceneDataset(Dataset):
    """Read-only view over loaded scenes; items are (image (1, 3, H, W), gt boxes (M, 4), gt labels (M,), scene id)."""
    def __init__(self, records: Sequence[SceneRecord]):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index):
        rec = self.records[index]
        gt_boxes = boxes_to_tensor(g.box for g in rec.gts)
        gt_labels = torch.tensor([g.class_id for g in rec.gts], dtype=torch.long)
        return rec.image.unsqueeze(0), gt_boxes, gt_labels, rec.scene_id

    def __str__(self):
        return f'SceneDataset(n={len(self)})'
