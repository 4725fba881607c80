# Adapted from https://github.com/FoundationVision/VAR/blob/main/train.py

import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import torch
import yaml

from models import CascadeConfig, CascadeModel, count_parameters
from models.backbone import BackboneConfig
from trainer import CascadeTrainer, TrainConfig
from utils import arg_util, misc
from utils.data import MANIFEST, SceneDataset, load_dataset, load_manifest
from utils.data_sampler import EpochShuffleSampler
from utils.lr_control import lr_at
from utils.proposals import ProposalConfig, sample_proposal_tensor


@dataclass
class RunRecord:
    run_id: str
    config: dict            # echo of every training flag
    model_config: dict      # resolved CascadeConfig
    proposal_config: dict
    checkpoint: str         # relative to the run directory
    metric_log: str
    dataset: str
    dataset_hash: str       # git-style blob hash of the dataset manifest

    def save(self, run_dir: str):
        with open(os.path.join(run_dir, 'run.json'), 'w') as fp:
            json.dump(dataclasses.asdict(self), fp, indent=1)

    @staticmethod
    def load(run_dir: str) -> 'RunRecord':
        path = os.path.join(run_dir, 'run.json')
        if not os.path.isfile(path):
            raise FileNotFoundError(f'[RunRecord] {run_dir} is not a run directory (no run.json)')
        with open(path, 'r') as fp:
            return RunRecord(**json.load(fp))


def train_proposal_seed(seed: int, ep: int, scene_id: int) -> int:
    return (seed * 1009 + ep) * 1_000_003 + scene_id


def model_config_from_args(args: arg_util.Args, data_dir: str) -> CascadeConfig:
    manifest = load_manifest(data_dir)
    spec = manifest['spec'] or {}
    if 'image_size' in spec:
        input_size = tuple(spec['image_size'])
    else:
        first = load_dataset(data_dir)[:1]
        if not first:
            raise ValueError(f'[model_config_from_args] {data_dir} holds no scenes')
        input_size = tuple(first[0].image.shape[-2:])
    num_classes = len(spec['classes']) if 'classes' in spec else 3
    return CascadeConfig(
        variant=args.variant, num_stages=args.stages, num_classes=num_classes,
        hidden_width=args.hidden_width, pooled_size=args.pooled_size,
        fg_iou_thresholds=tuple(args.fg_iou_thresholds),
        backbone=BackboneConfig(input_size=input_size, channels=args.channels, num_blocks=args.num_blocks),
        detach_shared_cls=args.detach_shared_cls, init_std=args.ini, init_cls=args.init_cls, init_box=args.init_box,
        delta_stds=tuple(tuple(args.delta_stds[i:i + 4]) for i in range(0, len(args.delta_stds), 4)),
    )


def train_config_from_args(args: arg_util.Args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, base_lr=args.base_lr, warmup_epochs=args.warmup_epochs, decay_epochs=tuple(args.decay_epochs),
        decay_factor=args.decay_factor, momentum=args.momentum, weight_decay=args.weight_decay,
        rois_per_image=args.rois_per_image, fg_fraction=args.fg_fraction,
        stage_loss_weights=tuple(args.stage_loss_weights), seed=args.seed, grad_clip=args.grad_clip,
    )


def build_model(cfg: CascadeConfig) -> CascadeModel:
    model = CascadeModel(cfg)
    model.init_weights()
    return model


def load_run(run_dir: str) -> Tuple[RunRecord, CascadeModel]:
    record = RunRecord.load(run_dir)
    model = CascadeModel(CascadeConfig(**record.model_config))
    misc.load_checkpoint(os.path.join(run_dir, record.checkpoint), model)
    model.eval()
    return record, model


def train_one_ep(
    ep: int, trainer: CascadeTrainer, dataset: SceneDataset, sampler: EpochShuffleSampler,
    proposal_cfg: ProposalConfig, generator: torch.Generator, print_freq: int,
) -> Dict[str, float]:
    cfg = trainer.cfg
    me = misc.MetricLogger(delimiter='  ')
    me.add_meter('tlr', misc.SmoothedValue(window_size=1, fmt='{value:.2g}'))
    header = f'[Ep]: [{ep:4d}/{cfg.epochs}]'
    sampler.set_epoch(ep)
    iters = len(sampler)
    image_size = trainer.model.cfg.image_size

    for it, idx in me.log_every(iters, sampler, print_freq, header):
        image, gt_boxes, gt_labels, scene_id = dataset[idx]
        g_it = ep * iters + it
        lr = lr_at(ep + it / iters, cfg)
        proposals = sample_proposal_tensor(gt_boxes, image_size, proposal_cfg, train_proposal_seed(cfg.seed, ep, scene_id))
        stats = trainer.train_step(g_it, lr, image, gt_boxes, gt_labels, proposals, generator)
        me.update(tlr=lr, **stats)

    trainer.state.epoch = ep + 1
    trainer.state.running = me.global_avgs()
    return trainer.state.running


def train(
    model: CascadeModel, dataset: SceneDataset, cfg: TrainConfig, proposal_cfg: ProposalConfig,
    on_epoch_end: Optional[Callable[[int, CascadeTrainer, Dict[str, float], float], None]] = None, print_freq: int = 10,
) -> Tuple[CascadeTrainer, List[Dict[str, float]]]:
    """Seeded single-image SGD over `dataset`; returns the trainer and one metric record per epoch."""
    if len(dataset) == 0:
        raise ValueError('[train] empty dataset')
    trainer = CascadeTrainer(model, cfg)
    sampler = EpochShuffleSampler(len(dataset), seed=cfg.seed, shuffle=True)
    generator = torch.Generator()
    generator.manual_seed(cfg.seed)

    history = []
    for ep in range(cfg.epochs):
        stt = time.time()
        stats = train_one_ep(ep, trainer, dataset, sampler, proposal_cfg, generator, print_freq)
        record = {'ep': ep + 1, 'lr': lr_at(ep, cfg), **stats}
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(ep, trainer, stats, time.time() - stt)
    return trainer, history


def main_training(argv: Optional[List[str]] = None):
    args: arg_util.Args = arg_util.get_args(argv)
    root = args.out or arg_util.out_root()
    os.makedirs(root, exist_ok=True)
    args.run_id, args.run_dir = misc.make_run_id(root, args.variant, args.stages, args.seed)
    os.makedirs(args.run_dir)
    misc.init_logging(args.run_dir)
    arg_util.seed_everything(args.seed, args.threads)
    args.log_txt_path = os.path.join(args.run_dir, 'log.txt')
    args.last_ckpt_path = os.path.join(args.run_dir, misc.CKPT_NAME)
    print(f'initial args:\n{str(args)}')

    model_cfg = model_config_from_args(args, args.data)
    train_cfg = train_config_from_args(args)
    proposal_cfg = ProposalConfig(per_gt=args.per_gt, num_random=args.num_random, jitter=args.jitter)
    with open(os.path.join(args.run_dir, 'config.yaml'), 'w') as fp:
        yaml.safe_dump(dict(args.state_dict(key_ordered=False)), fp, sort_keys=False)

    records = load_dataset(args.data, split='train')
    if args.max_scenes > 0:
        records = records[:args.max_scenes]
    dataset = SceneDataset(records)
    print(f'[build data] {dataset} from {args.data}')

    model = build_model(model_cfg)
    print(f'[INIT] CascadeModel = {model}\n')
    print(f'[INIT][#para] ' + ', '.join(f'{k}={v}' for k, v in count_parameters(model).items()))

    record = RunRecord(
        run_id=args.run_id, config=dict(args.state_dict(key_ordered=False)),
        model_config=dataclasses.asdict(model_cfg), proposal_config=dataclasses.asdict(proposal_cfg),
        checkpoint=misc.CKPT_NAME, metric_log='log.txt', dataset=os.path.abspath(args.data),
        dataset_hash=misc.file_hash(os.path.join(args.data, MANIFEST)),
    )

    start_time = time.time()

    def on_epoch_end(ep: int, trainer: CascadeTrainer, stats: Dict[str, float], sec: float):
        args.cur_ep = f'{ep + 1}/{train_cfg.epochs}'
        args.cur_lr = trainer.state.current_lr
        args.ep_time = sec
        args.remain_time = str(round(sec * (train_cfg.epochs - ep - 1)))
        args.dump_log({k: v for k, v in stats.items() if k != 'tlr'}, first=ep == 0)
        misc.save_checkpoint(
            args.last_ckpt_path, trainer.model, trainer.optimizer,
            epoch=ep + 1, iter=trainer.state.iteration, trainer=trainer.state_dict(),
            config=dataclasses.asdict(model_cfg), args=dict(args.state_dict(key_ordered=False)),
        )
        print(f'     [ep{ep}]  loss: {stats.get("loss", float("nan")):.4f},  Remain: {args.remain_time}s', flush=True)

    train(model, dataset, train_cfg, proposal_cfg, on_epoch_end=on_epoch_end, print_freq=args.print_freq)
    record.save(args.run_dir)

    total_time = f'{(time.time() - start_time) / 60:.1f}min'
    print(f'  [*] [training finished]  Total cost: {total_time},  run: {args.run_dir}')
    return record


if __name__ == '__main__':
    sys.exit(arg_util.run_cli(main_training))
