import os
import sys
from typing import List, Literal, Optional, Tuple

from tap import Tap

from train import RunRecord, load_run
from utils import arg_util, misc
from utils.box_ops import save_detections
from utils.evaluation import APReport, DetsByImage, EvalConfig, GtsByImage, evaluate_run, parse_mode, save_ap_reports
from utils.data import load_dataset
from utils.proposals import ProposalConfig


class EvalArgs(Tap):
    run: str = ''                   # run directory written by train.py
    mode: Literal['stage1', 'stage2', 'stage3', 'ensemble'] = 'ensemble'
    data: str = ''                  # '' -> the dataset the run was trained on
    split: str = 'val'
    out: str = ''                   # '' -> the run directory
    ensemble_type: Literal['prob', 'logit'] = 'prob'
    eval_seed: int = 10_000
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_dets: int = 100
    dump_dets: bool = True


def check_run_dir(parser: Tap, run_dir: str):
    if not run_dir:
        parser.error('please specify a run directory')
    if not os.path.isfile(os.path.join(run_dir, 'run.json')):
        parser.error(f'{run_dir} is not a run directory (no run.json)')


def eval_config(record: RunRecord, eval_seed: int = 10_000, score_thresh: float = 0.05, nms_thresh: float = 0.5, max_dets: int = 100, ensemble_type: str = 'prob') -> EvalConfig:
    prop = dict(record.proposal_config)
    prop['random_size'] = tuple(prop.get('random_size', (0.1, 0.6)))
    return EvalConfig(
        eval_seed=eval_seed, score_thresh=score_thresh, nms_thresh=nms_thresh, max_dets=max_dets,
        ensemble_type=ensemble_type, proposals=ProposalConfig(**prop),
    )


def evaluate_run_dir(run_dir: str, modes: List[str], data: str = '', split: str = 'val', **eval_kw) -> Tuple[RunRecord, List[Tuple[APReport, DetsByImage, GtsByImage]]]:
    record, model = load_run(run_dir)
    records = load_dataset(data or record.dataset, split=split)
    cfg = eval_config(record, **eval_kw)
    seed = record.config.get('seed')
    results = [evaluate_run(model, records, m, cfg, label=f'{record.run_id}/{m}', seed=seed) for m in modes]
    return record, results


def main_eval(argv: Optional[List[str]] = None) -> APReport:
    parser = EvalArgs(explicit_bool=True, underscores_to_dashes=True)
    args = parser.parse_args(args=argv)
    check_run_dir(parser, args.run)
    record = RunRecord.load(args.run)
    try:
        parse_mode(args.mode, record.model_config['num_stages'])
    except ValueError as e:
        parser.error(str(e))
    misc.init_logging(None)

    _, [(report, dets, gts)] = evaluate_run_dir(
        args.run, [args.mode], args.data, args.split, eval_seed=args.eval_seed, score_thresh=args.score_thresh,
        nms_thresh=args.nms_thresh, max_dets=args.max_dets, ensemble_type=args.ensemble_type,
    )
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    print(f'[eval] {record.run_id}  mode={args.mode}  split={args.split}  images={len(gts)}')
    print(report.to_table(), clean=True)
    if report.undefined_classes:
        print(f'[eval] classes without ground truth (excluded from the means): {list(report.undefined_classes)}')
    save_ap_reports([report], os.path.join(out, f'ap-{args.mode}.csv'))
    if args.dump_dets:
        save_detections(os.path.join(out, f'dets-{args.mode}.jsonl'), dets)
    return report


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_eval))
