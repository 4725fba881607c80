# Adapted from https://github.com/FoundationVision/VAR/blob/main/utils/misc.py

import datetime
import hashlib
import os
import sys
import time
from collections import defaultdict, deque
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
import pytz
import torch

CKPT_VERSION = 'fscascade-ckpt-v1'
CKPT_NAME = 'ckpt-last.pth'


class CheckpointError(RuntimeError):
    pass


def time_str(fmt='[%m-%d %H:%M:%S]'):
    return datetime.datetime.now(tz=pytz.timezone(os.environ.get('FSCASCADE_TZ', 'America/Los_Angeles'))).strftime(fmt)


def init_logging(local_out_path: Optional[str]):
    """Timestamped print everywhere; tee stdout/stderr into the run directory."""
    _change_builtin_print()
    if local_out_path:
        os.makedirs(local_out_path, exist_ok=True)
        sys.stdout, sys.stderr = SyncPrint(local_out_path, sync_stdout=True), SyncPrint(local_out_path, sync_stdout=False)


def close_logging():
    for stream in (sys.stdout, sys.stderr):
        if isinstance(stream, SyncPrint):
            stream.close()


def _change_builtin_print():
    import builtins as __builtin__

    builtin_print = __builtin__.print
    if type(builtin_print) != type(open):
        return

    def prt(*args, **kwargs):
        clean = kwargs.pop('clean', False)
        deeper = kwargs.pop('deeper', False)
        if not clean:
            f_back = sys._getframe().f_back
            if deeper and f_back.f_back is not None:
                f_back = f_back.f_back
            file_desc = f'{f_back.f_code.co_filename:24s}'[-24:]
            builtin_print(f'{time_str()} ({file_desc}, line{f_back.f_lineno:-4d})=>', *args, **kwargs)
        else:
            builtin_print(*args, **kwargs)

    __builtin__.print = prt


class SyncPrint(object):
    def __init__(self, local_output_dir, sync_stdout=True):
        self.sync_stdout = sync_stdout
        self.terminal_stream = sys.stdout if sync_stdout else sys.stderr
        fname = os.path.join(local_output_dir, 'stdout.txt' if sync_stdout else 'stderr.txt')
        existing = os.path.exists(fname)
        self.file_stream = open(fname, 'a')
        if existing:
            self.file_stream.write('\n' * 3 + '=' * 40 + f'   RESTART {time_str()}   ' + '=' * 40 + '\n')
        self.file_stream.flush()
        self.enabled = True

    def write(self, message):
        self.terminal_stream.write(message)
        if self.enabled:
            self.file_stream.write(message)

    def flush(self):
        self.terminal_stream.flush()
        if self.enabled:
            self.file_stream.flush()

    def close(self):
        if not self.enabled:
            return
        self.enabled = False
        self.file_stream.flush()
        self.file_stream.close()
        if self.sync_stdout:
            sys.stdout = self.terminal_stream
            sys.stdout.flush()
        else:
            sys.stderr = self.terminal_stream
            sys.stderr.flush()

    def __del__(self):
        self.close()


class SmoothedValue(object):
    """Windowed median plus the global average of a scalar series."""

    def __init__(self, window_size=30, fmt=None):
        if fmt is None:
            fmt = "{median:.4f} ({global_avg:.4f})"
        self.deque = deque(maxlen=window_size)
        self.total = 0.0
        self.count = 0
        self.fmt = fmt

    def update(self, value, n=1):
        self.deque.append(value)
        self.count += n
        self.total += value * n

    @property
    def median(self):
        return np.median(self.deque) if len(self.deque) else 0

    @property
    def avg(self):
        return sum(self.deque) / (len(self.deque) or 1)

    @property
    def global_avg(self):
        return self.total / (self.count or 1)

    @property
    def value(self):
        return self.deque[-1] if len(self.deque) else 0

    def __str__(self):
        return self.fmt.format(
            median=self.median,
            avg=self.avg,
            global_avg=self.global_avg,
            value=self.value)


class MetricLogger(object):
    def __init__(self, delimiter='  '):
        self.meters = defaultdict(SmoothedValue)
        self.delimiter = delimiter
        self.iter_end_t = time.time()
        self.log_iters = set()

    def update(self, **kwargs):
        for k, v in kwargs.items():
            if v is None:
                continue
            if hasattr(v, 'item'): v = v.item()
            assert isinstance(v, (float, int)), f'[MetricLogger] {k} must be a number, got {type(v)}'
            self.meters[k].update(v)

    def add_meter(self, name, meter):
        self.meters[name] = meter

    def __getattr__(self, attr):
        if attr in self.meters:
            return self.meters[attr]
        if attr in self.__dict__:
            return self.__dict__[attr]
        raise AttributeError("'{}' object has no attribute '{}'".format(
            type(self).__name__, attr))

    def __str__(self):
        return self.delimiter.join(f'{name}: {meter}' for name, meter in self.meters.items() if len(meter.deque))

    def global_avgs(self) -> Dict[str, float]:
        return {name: meter.global_avg for name, meter in self.meters.items()}

    def log_every(self, max_iters: int, itrt: Iterable, print_freq: int, header: str = ''):
        self.log_iters = set(np.linspace(0, max(max_iters - 1, 0), max(print_freq, 1), dtype=int).tolist())
        start_time = time.time()
        self.iter_end_t = time.time()
        self.iter_time = SmoothedValue(fmt='{avg:.4f}')
        space_fmt = ':' + str(len(str(max_iters))) + 'd'
        log_msg = self.delimiter.join([header, '[{0' + space_fmt + '}/{1}]', 'eta: {eta}', '{meters}', 'time: {time}'])

        for i, obj in enumerate(itrt):
            yield i, obj
            self.iter_time.update(time.time() - self.iter_end_t)
            if i in self.log_iters:
                eta_seconds = self.iter_time.global_avg * (max_iters - i - 1)
                eta_string = str(datetime.timedelta(seconds=int(eta_seconds)))
                print(log_msg.format(i, max_iters, eta=eta_string, meters=str(self), time=str(self.iter_time)), flush=True)
            self.iter_end_t = time.time()

        total_time = time.time() - start_time
        total_time_str = str(datetime.timedelta(seconds=int(total_time)))
        print('{}   Total time:      {}   ({:.3f} s / it)'.format(header, total_time_str, total_time / max(max_iters, 1)), flush=True)


# ============================== checkpoints ==============================

def save_checkpoint(path: str, model: torch.nn.Module, optimizer=None, **extra: Any):
    """
    One file: a version tag, then one record per parameter in model order
    ({name, shape, data, momentum_buffer}), then anything passed in `extra`.
    """
    records = []
    for name, p in model.named_parameters():
        buf = optimizer.momentum_buffer(name) if optimizer is not None else torch.zeros_like(p)
        records.append({'name': name, 'shape': tuple(p.shape), 'data': p.detach().clone(), 'momentum_buffer': buf.detach().clone()})
    tmp = path + '.tmp'
    torch.save({'version': CKPT_VERSION, 'params': records, **extra}, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str, model: torch.nn.Module, optimizer=None) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise CheckpointError(f'[load_checkpoint] no checkpoint at {path}')
    try:
        ckpt = torch.load(path, map_location='cpu', weights_only=False)
    except Exception as e:
        raise CheckpointError(f'[load_checkpoint] cannot read {path}: {e}') from e
    if ckpt.get('version') != CKPT_VERSION:
        raise CheckpointError(f'[load_checkpoint] {path}: version {ckpt.get("version")!r}, expected {CKPT_VERSION!r}')
    named = dict(model.named_parameters())
    names = [r['name'] for r in ckpt['params']]
    if names != list(named):
        missing, unexpected = sorted(set(named) - set(names)), sorted(set(names) - set(named))
        raise CheckpointError(f'[load_checkpoint] {path}: parameter mismatch, {missing=}, {unexpected=}')
    with torch.no_grad():
        for r in ckpt['params']:
            p = named[r['name']]
            if tuple(r['shape']) != tuple(p.shape) or tuple(r['data'].shape) != tuple(p.shape):
                raise CheckpointError(f'[load_checkpoint] {path}: {r["name"]} has shape {tuple(r["shape"])}, model expects {tuple(p.shape)}')
            p.copy_(r['data'])
            if optimizer is not None:
                optimizer.set_momentum_buffer(r['name'], r['momentum_buffer'])
    return {k: v for k, v in ckpt.items() if k != 'params'}


# ============================== run bookkeeping ==============================

def content_hash(data: bytes) -> str:
    # same digest `git hash-object` prints
    h = hashlib.sha1()
    h.update(b'blob %d\0' % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path: str) -> str:
    with open(path, 'rb') as fp:
        return content_hash(fp.read())


def make_run_id(out_root: str, variant: str, num_stages: int, seed: int) -> Tuple[str, str]:
    """Returns (run_id, run_dir); a numeric suffix keeps run ids unique under out_root."""
    base = f'{variant}-{num_stages}stage-seed{seed}'
    run_id, k = base, 1
    while os.path.exists(os.path.join(out_root, run_id)):
        run_id = f'{base}-{k}'
        k += 1
    return run_id, os.path.join(out_root, run_id)
