import os
import sys
from typing import List, Optional

from tap import Tap
from tqdm import tqdm

from utils import arg_util, misc
from utils.data import MANIFEST, SHAPES, SceneSpec, default_splits, generate_scene, save_dataset


class GenDataArgs(Tap):
    out_dir: str = ''               # '' -> $FSCASCADE_OUT/data
    seed: int = 0
    height: int = 96
    width: int = 96
    classes: List[str] = list(SHAPES)   # subset of rectangle, ellipse, triangle
    objects_min: int = 1
    objects_max: int = 4
    size_min: float = 0.15
    size_max: float = 0.40
    max_gt_iou: float = 0.2
    noise: float = 0.35
    num_train: int = 500
    num_val: int = 100


def main_gen_data(argv: Optional[List[str]] = None) -> str:
    parser = GenDataArgs(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    if args.size_min > args.size_max:
        parser.error(f'--size-min {args.size_min} must not exceed --size-max {args.size_max}')
    if args.objects_min > args.objects_max:
        parser.error(f'--objects-min {args.objects_min} must not exceed --objects-max {args.objects_max}')
    if args.num_train < 0 or args.num_val < 0:
        parser.error('--num-train and --num-val must be non-negative')
    try:
        spec = SceneSpec(
            image_size=(args.height, args.width), classes=tuple(args.classes),
            objects_min=args.objects_min, objects_max=args.objects_max,
            size_min=args.size_min, size_max=args.size_max, max_gt_iou=args.max_gt_iou,
            noise=args.noise, seed=args.seed,
        )
    except ValueError as e:
        parser.error(str(e))

    out_dir = args.out_dir or os.path.join(arg_util.out_root(), 'data')
    if os.path.exists(os.path.join(out_dir, MANIFEST)):
        parser.error(f'{out_dir} already holds a dataset; pick another --out-dir')
    os.makedirs(out_dir, exist_ok=True)
    misc.init_logging(None)

    splits = default_splits(args.num_train, args.num_val)
    ids = [i for ids in splits.values() for i in ids]
    records = [generate_scene(spec, i) for i in tqdm(ids, desc='[gen_data] scenes', disable=len(ids) < 50)]
    save_dataset(records, out_dir, spec=spec, splits=splits)
    print(f'[gen_data] {len(records)} scenes -> {out_dir}  (manifest {misc.file_hash(os.path.join(out_dir, MANIFEST))[:12]})')
    return out_dir


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_gen_data))
