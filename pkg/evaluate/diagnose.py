import os
import sys
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional

import prettytable as pt
from tap import Tap

from evaluate.compute_ap import check_run_dir, evaluate_run_dir
from train import RunRecord
from utils import arg_util, misc
from utils.evaluation import (
    APReport, GapReport, confidence_histogram, gap_report, save_ap_reports, threshold_names, write_csv,
)


class DiagnoseArgs(Tap):
    runs: List[str] = []            # run directories
    reference: str = ''             # optional single-head reference run (e.g. baseline, 1 stage)
    data: str = ''                  # '' -> each run's own dataset
    split: str = 'val'
    out: str = ''                   # '' -> $FSCASCADE_OUT/diagnose
    bins: int = 20
    iou_low: float = 0.5
    iou_high: float = 0.75
    eval_seed: int = 10_000
    workers: int = 1                # runs evaluated in parallel (read-only)


def run_modes(num_stages: int) -> List[str]:
    return [f'stage{k}' for k in range(1, num_stages + 1)] + ['ensemble']


def within_run_gaps(reports: Dict[str, APReport]) -> List[GapReport]:
    gaps = []
    if 'stage3' in reports and 'stage2' in reports:
        gaps.append(gap_report(reports['stage3'], reports['stage2']))
    last = max((m for m in reports if m.startswith('stage')), key=lambda m: int(m[5:]))
    if 'ensemble' in reports and last != 'stage1':
        gaps.append(gap_report(reports['ensemble'], reports[last]))
    return gaps


def gap_table(gaps: List[GapReport], percent: bool = False) -> pt.PrettyTable:
    tb = pt.PrettyTable()
    tb.field_names = ['label'] + threshold_names(gaps[0].thresholds) + ['mAP']
    for g in gaps:
        tb.add_row(g.to_table(percent=percent).rows[0])
    return tb


def main_diagnose(argv: Optional[List[str]] = None) -> List[GapReport]:
    parser = DiagnoseArgs(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    if not args.runs:
        parser.error('please specify at least one run with --runs')
    for r in args.runs + ([args.reference] if args.reference else []):
        check_run_dir(parser, r)
    if args.bins < 1 or not 0 <= args.iou_low < args.iou_high <= 1:
        parser.error('need --bins >= 1 and 0 <= --iou-low < --iou-high <= 1')
    out = args.out or os.path.join(arg_util.out_root(), 'diagnose')
    os.makedirs(out, exist_ok=True)
    misc.init_logging(out)

    run_dirs = list(args.runs) + ([args.reference] if args.reference else [])

    def _eval(run_dir: str):
        n = RunRecord.load(run_dir).model_config['num_stages']
        return evaluate_run_dir(run_dir, run_modes(n), args.data, args.split, eval_seed=args.eval_seed)

    with ThreadPool(max(args.workers, 1)) as pool:
        evaluated = pool.map(_eval, run_dirs)

    all_reports: List[APReport] = []
    by_run: List[Dict[str, APReport]] = []
    gaps: List[GapReport] = []
    for record, results in evaluated:
        reports = {}
        for report, dets, gts in results:
            reports[report.mode] = report
            all_reports.append(report)
            hist = confidence_histogram(dets, gts, args.iou_low, args.iou_high, args.bins, label=report.label)
            write_csv(hist.to_table(), os.path.join(out, f'hist-{record.run_id}-{report.mode}.csv'))
            print(f'[diagnose] {report.label}: {hist.total} detections with IoU in [{args.iou_low}, {args.iou_high})')
        by_run.append(reports)
        gaps.extend(within_run_gaps(reports))

    runs_only = by_run[:len(args.runs)]
    # every run against the first one, mode by mode
    for reports in runs_only[1:]:
        for mode, r in reports.items():
            if mode in runs_only[0]:
                gaps.append(gap_report(r, runs_only[0][mode]))
    if args.reference:
        ref = by_run[-1]['stage1']
        for reports in runs_only:
            for mode, r in reports.items():
                if mode.startswith('stage'):
                    gaps.append(gap_report(r, ref))

    save_ap_reports(all_reports, os.path.join(out, 'ap.csv'))
    if gaps:
        tb = gap_table(gaps)
        write_csv(tb, os.path.join(out, 'gaps.csv'))
        print(gap_table(gaps, percent=True), clean=True)
    return gaps


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_diagnose))
