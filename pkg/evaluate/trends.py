import os
import sys
from dataclasses import dataclass
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional, Sequence

import numpy as np
import prettytable as pt
from tap import Tap

from evaluate.compute_ap import check_run_dir, evaluate_run_dir
from train import RunRecord
from utils import arg_util, misc
from utils.evaluation import APReport, save_ap_reports, write_csv

TREND_MODES = ('stage2', 'stage3', 'ensemble')
ENSEMBLE_TOLERANCE = 0.01

RunReports = Dict[str, APReport]    # mode -> report, one run


@dataclass
class TrendCheck:
    name: str
    description: str
    fscascade: float
    baseline: float
    passed: bool


def _median(values: Sequence[float]) -> float:
    if not values:
        raise ValueError('[trend_checks] need at least one run per group')
    return float(np.median(np.asarray(values, dtype=np.float64)))


def trend_checks(baseline: Sequence[RunReports], fscascade: Sequence[RunReports], tolerance: float = ENSEMBLE_TOLERANCE) -> List[TrendCheck]:
    """
    Directional comparison of two groups of 3-stage runs, over seed medians:
      gap: |AP50(stage3) - AP50(stage2)| of fscascade is no larger than baseline's
      overall: stage3 mean AP of fscascade >= baseline's, both rounded to 3 decimals
      ensemble: fscascade stage3 mean AP >= baseline ensemble mean AP - tolerance
    """
    def gap(r: RunReports) -> float:
        return abs(r['stage3'].ap_at(0.5) - r['stage2'].ap_at(0.5))

    gap_f, gap_b = _median([gap(r) for r in fscascade]), _median([gap(r) for r in baseline])
    s3_f, s3_b = _median([r['stage3'].mean for r in fscascade]), _median([r['stage3'].mean for r in baseline])
    ens_b = _median([r['ensemble'].mean for r in baseline])
    return [
        TrendCheck('gap', '|AP50 stage3 - stage2| (lower is better)', gap_f, gap_b, gap_f <= gap_b),
        TrendCheck('overall', 'stage3 mean AP', s3_f, s3_b, round(s3_f, 3) >= round(s3_b, 3)),
        TrendCheck('ensemble', f'fscascade stage3 vs baseline ensemble (-{tolerance})', s3_f, ens_b, s3_f >= ens_b - tolerance),
    ]


def trends_table(checks: Sequence[TrendCheck]) -> pt.PrettyTable:
    tb = pt.PrettyTable()
    tb.field_names = ['trend', 'description', 'fscascade', 'baseline', 'result']
    for c in checks:
        tb.add_row([c.name, c.description, round(c.fscascade, 4), round(c.baseline, 4), 'PASS' if c.passed else 'FAIL'])
    return tb


class TrendsArgs(Tap):
    baseline: List[str] = []        # 3-stage baseline run directories, one per seed
    fscascade: List[str] = []       # 3-stage fscascade run directories, one per seed
    data: str = ''
    split: str = 'val'
    out: str = ''                   # '' -> $FSCASCADE_OUT/trends
    eval_seed: int = 10_000
    tolerance: float = ENSEMBLE_TOLERANCE
    workers: int = 1


def main_trends(argv: Optional[List[str]] = None) -> List[TrendCheck]:
    parser = TrendsArgs(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    if not args.baseline or not args.fscascade:
        parser.error('please give at least one run to each of --baseline and --fscascade')
    for r in args.baseline + args.fscascade:
        check_run_dir(parser, r)
        n = RunRecord.load(r).model_config['num_stages']
        if n != 3:
            parser.error(f'{r} has {n} stage(s), trends compare 3-stage runs')
    out = args.out or os.path.join(arg_util.out_root(), 'trends')
    os.makedirs(out, exist_ok=True)
    misc.init_logging(out)

    def _eval(run_dir: str) -> RunReports:
        _, results = evaluate_run_dir(run_dir, list(TREND_MODES), args.data, args.split, eval_seed=args.eval_seed)
        return {rep.mode: rep for rep, _, _ in results}

    with ThreadPool(max(args.workers, 1)) as pool:
        base = pool.map(_eval, args.baseline)
        fsc = pool.map(_eval, args.fscascade)

    save_ap_reports([rep for r in base + fsc for rep in r.values()], os.path.join(out, 'ap.csv'))
    checks = trend_checks(base, fsc, args.tolerance)
    tb = trends_table(checks)
    print(f'[trends] {len(base)} baseline runs, {len(fsc)} fscascade runs')
    print(tb, clean=True)
    write_csv(tb, os.path.join(out, 'trends.csv'))
    return checks


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_trends))
