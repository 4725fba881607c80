# Adapted from https://github.com/FoundationVision/VAR/blob/main/utils/arg_util.py

import json
import os
import random
import re
import sys
import traceback
from collections import OrderedDict
from typing import Callable, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
import yaml
from tap import Tap

CONFIG_ROOT = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config')


def out_root() -> str:
    return os.environ.get('FSCASCADE_OUT', './experiments')


def seed_everything(seed: int, threads: int = 1):
    os.environ['PYTHONHASHSEED'] = str(seed)
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(int(threads), 1))


def _get_yaml_loader():
    #https://stackoverflow.com/questions/30458977/yaml-loads-5e-6-as-string-and-not-a-number
    loader = yaml.SafeLoader
    loader.add_implicit_resolver(
        u'tag:yaml.org,2002:float',
        re.compile(u'''^(?:
        [-+]?(?:[0-9][0-9_]*)\\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?[0-9][0-9_]*(?::[0-5]?[0-9])+\\.[0-9_]*
        |[-+]?\\.(?:inf|Inf|INF)
        |\\.(?:nan|NaN|NAN))$''', re.X),
        list(u'-+0123456789.'))
    return loader


def load_yaml(path: str) -> dict:
    with open(path, 'r') as file:
        config = yaml.load(file, Loader=_get_yaml_loader())
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ValueError(f'[load_yaml] {path} must hold a mapping, got {type(config).__name__}')
    return config


def explicit_keys(argv: Sequence[str]) -> set:
    """Names of the flags given on the command line (dashes folded to underscores)."""
    keys = set()
    for a in argv:
        if a.startswith('--'):
            keys.add(a[2:].split('=', 1)[0].replace('-', '_'))
    return keys


class Args(Tap):
    # preset from config/experiment/<experiment>.yaml; explicit flags win over it
    experiment: str = ''
    data: str = ''                  # dataset directory written by gen_data.py
    out: str = ''                   # output root; '' -> $FSCASCADE_OUT or ./experiments
    seed: int = 0
    threads: int = 1                # intra-op threads

    # model
    variant: Literal['baseline', 'cfs', 'lfs', 'fscascade', 'conv'] = 'fscascade'
    stages: Literal[1, 3] = 3
    channels: int = 64
    hidden_width: int = 256
    num_blocks: int = 3
    pooled_size: int = 7
    fg_iou_thresholds: List[float] = [0.5, 0.6, 0.7]
    # (x, y, w, h) regression stds, 4 values per stage, stage 1 first
    delta_stds: List[float] = [0.1, 0.1, 0.2, 0.2, 0.05, 0.05, 0.1, 0.1, 0.033, 0.033, 0.067, 0.067]
    detach_shared_cls: bool = False
    ini: float = -1                 # -1: automated (fan-in) initialisation
    init_cls: float = 0.01
    init_box: float = 0.001

    # optimisation
    epochs: int = 20
    base_lr: float = 0.01
    warmup_epochs: float = 1
    decay_epochs: List[float] = [10, 16]
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.           # <=0 for not using grad clip
    rois_per_image: int = 64
    fg_fraction: float = 0.25
    stage_loss_weights: List[float] = [1.0, 0.5, 0.25]

    # proposals
    per_gt: int = 16
    num_random: int = 32
    jitter: float = 1.0
    max_scenes: int = 0             # >0: train on the first n training scenes only
    print_freq: int = 10            # progress lines per epoch

    # would be automatically set in runtime
    cmd: str = ' '.join(sys.argv[1:])  # [automatically set; don't specify this]
    run_id: str = ''                # [automatically set; don't specify this]
    run_dir: str = ''               # [automatically set; don't specify this]
    log_txt_path: str = ''          # [automatically set; don't specify this]
    last_ckpt_path: str = ''        # [automatically set; don't specify this]
    cur_ep: str = ''                # [automatically set; don't specify this]
    cur_lr: float = None            # [automatically set; don't specify this]
    ep_time: float = None           # [automatically set; don't specify this]
    remain_time: str = ''           # [automatically set; don't specify this]

    def state_dict(self, key_ordered=True) -> Union[OrderedDict, dict]:
        d = (OrderedDict if key_ordered else dict)()
        for k in self.class_variables.keys():
            d[k] = getattr(self, k)
        return d

    def dump_log(self, losses: dict, first: bool = False):
        if first:
            with open(self.log_txt_path, 'w') as fp:
                fp.write(json.dumps({'name': self.run_id, 'cmd': self.cmd}) + '\n')
        log_dict = {}
        for k, v in {
            'ep': self.cur_ep, 'lr': self.cur_lr, **losses,
            'time': self.ep_time, 'remain_time': self.remain_time,
        }.items():
            if hasattr(v, 'item'): v = v.item()
            log_dict[k] = v
        with open(self.log_txt_path, 'a') as fp:
            fp.write(json.dumps(log_dict) + '\n')

    def __str__(self):
        s = []
        for k in self.class_variables.keys():
            s.append(f'  {k:20s}: {getattr(self, k)}')
        s = '\n'.join(s)
        return f'{{\n{s}\n}}\n'


def get_args(argv: Optional[List[str]] = None) -> Args:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = Args(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    args.cmd = ' '.join(argv)

    if args.experiment:
        path = os.path.join(CONFIG_ROOT, 'experiment', f'{args.experiment}.yaml')
        if not os.path.isfile(path):
            parser.error(f'unknown experiment {args.experiment!r} (no {path})')
        given = explicit_keys(argv)
        for key, value in load_yaml(path).items():
            if key not in args.class_variables:
                parser.error(f'{path}: unknown key {key!r}')
            if key not in given:
                setattr(args, key, value)

    if args.variant not in ('baseline', 'cfs', 'lfs', 'fscascade', 'conv'):
        parser.error(f'unknown variant {args.variant!r}')
    if int(args.stages) not in (1, 3):
        parser.error(f'--stages must be 1 or 3, got {args.stages}')
    args.stages = int(args.stages)
    if not args.data:
        parser.error('please specify --data DIR (a dataset written by gen_data.py)')
    if not os.path.isfile(os.path.join(args.data, 'manifest.json')):
        parser.error(f'--data {args.data}: no manifest.json, run gen_data.py first')
    if len(args.fg_iou_thresholds) < args.stages or len(args.stage_loss_weights) < args.stages:
        parser.error(f'--stages {args.stages} needs as many --fg-iou-thresholds and --stage-loss-weights')
    # presets may nest the stds per stage
    args.delta_stds = [float(v) for s in args.delta_stds for v in (s if isinstance(s, (list, tuple)) else [s])]
    if len(args.delta_stds) % 4 or len(args.delta_stds) < 4 * args.stages:
        parser.error(f'--delta-stds takes 4 values (x, y, w, h) per stage, got {len(args.delta_stds)} for {args.stages} stage(s)')
    if any(s <= 0 for s in args.delta_stds):
        parser.error(f'--delta-stds must be positive, got {args.delta_stds}')
    return args


def run_cli(main: Callable[[Optional[List[str]]], None], argv: Optional[List[str]] = None) -> int:
    """0 on success, 2 on usage or validation errors, 1 on runtime failures."""
    from utils import misc
    try:
        main(argv)
    except SystemExit as e:
        code = e.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    except Exception:
        traceback.print_exc()
        return 1
    finally:
        misc.close_logging()
    return 0
