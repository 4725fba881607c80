import os

import pytest

from gen_data import main_gen_data
from train import main_training
from utils import arg_util

TINY_DATA = ['--height', '48', '--width', '48', '--num-train', '4', '--num-val', '2', '--seed', '7']


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end runs that train for more than a few seconds')


@pytest.fixture(scope='session')
def tiny_data(tmp_path_factory) -> str:
    """48x48 dataset, 4 training and 2 validation scenes."""
    out = str(tmp_path_factory.mktemp('data') / 'tiny')
    assert arg_util.run_cli(main_gen_data, ['--out-dir', out] + TINY_DATA) == 0
    return out


def train_smoke_run(data: str, out: str, *extra: str) -> str:
    assert arg_util.run_cli(main_training, ['--experiment', 'smoke', '--data', data, '--out', out, *extra]) == 0
    runs = sorted(os.listdir(out))
    assert runs, f'no run written under {out}'
    return os.path.join(out, runs[-1])


@pytest.fixture(scope='session')
def tiny_run(tiny_data, tmp_path_factory) -> str:
    return train_smoke_run(tiny_data, str(tmp_path_factory.mktemp('runs')))


@pytest.fixture(scope='session')
def tiny_run_one_stage(tiny_data, tmp_path_factory) -> str:
    return train_smoke_run(tiny_data, str(tmp_path_factory.mktemp('runs1')), '--stages', '1', '--variant', 'baseline')
