import os
import sys
from typing import Dict, List, Optional

import prettytable as pt
from tap import Tap

from models import CascadeConfig, parameter_deltas
from models.backbone import BackboneConfig
from models.cascade import COMPONENTS
from utils import arg_util, misc
from utils.evaluation import write_csv

PARAM_KEYS = ('num_stages', 'num_classes', 'channels', 'hidden_width', 'pooled_size', 'num_blocks', 'input_size')


class ParamsArgs(Tap):
    config: str = os.path.join(arg_util.CONFIG_ROOT, 'params', 'desk-scale.yaml')
    out: str = ''                   # optional CSV path


def config_from_yaml(path: str) -> CascadeConfig:
    raw = arg_util.load_yaml(path)
    unknown = set(raw) - set(PARAM_KEYS)
    if unknown:
        raise ValueError(f'[config_from_yaml] {path}: unknown keys {sorted(unknown)}, expected a subset of {PARAM_KEYS}')
    backbone = BackboneConfig(
        input_size=tuple(raw.get('input_size', (96, 96))), channels=raw.get('channels', 64), num_blocks=raw.get('num_blocks', 3),
    )
    return CascadeConfig(
        num_stages=raw.get('num_stages', 3), num_classes=raw.get('num_classes', 3),
        hidden_width=raw.get('hidden_width', 256), pooled_size=raw.get('pooled_size', 7), backbone=backbone,
    )


def params_table(deltas: Dict[str, Dict[str, int]]) -> pt.PrettyTable:
    tb = pt.PrettyTable()
    cols = list(COMPONENTS) + ['total', 'cls_delta', 'box_delta', 'total_delta', 'mechanism_delta']
    tb.field_names = ['variant'] + cols
    for v, c in deltas.items():
        tb.add_row([v] + [c[k] for k in cols])
    return tb


def main_params(argv: Optional[List[str]] = None) -> Dict[str, Dict[str, int]]:
    parser = ParamsArgs(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    if not os.path.isfile(args.config):
        parser.error(f'--config {args.config}: no such file')
    try:
        cfg = config_from_yaml(args.config)
    except ValueError as e:
        parser.error(str(e))
    misc.init_logging(None)

    deltas = parameter_deltas(cfg)
    print(f'[params] {args.config}  C={cfg.backbone.channels}  hidden={cfg.hidden_width}  stages={cfg.num_stages}')
    tb = params_table(deltas)
    print(tb, clean=True)
    if args.out:
        write_csv(tb, args.out)
    return deltas


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_params))
