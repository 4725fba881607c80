# Adpated from: https://github.com/FoundationVision/VAR/blob/main/utils/data_sampler.py

from typing import Tuple

import torch
from torch.utils.data.sampler import Sampler


class EpochShuffleSampler(Sampler):
    """One image per step; the order of epoch `ep` is a pure function of (seed, ep)."""
    def __init__(self, dataset_len: int, seed: int = 0, shuffle: bool = True, start_ep: int = 0):
        if dataset_len <= 0:
            raise ValueError(f'[EpochShuffleSampler] dataset must be non-empty, got {dataset_len=}')
        self.dataset_len = dataset_len
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = start_ep
        self.indices = self.gener_indices()

    def gener_indices(self) -> Tuple[int, ...]:
        if self.shuffle:
            g = torch.Generator()
            g.manual_seed(self.epoch + self.seed)
            indices = torch.randperm(self.dataset_len, generator=g)
        else:
            indices = torch.arange(self.dataset_len)
        # built-in tuple is faster than a tensor when iterated in python
        return tuple(indices.tolist())

    def set_epoch(self, epoch: int):
        self.epoch = epoch
        self.indices = self.gener_indices()

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return self.dataset_len
