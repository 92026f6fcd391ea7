import math
import numpy as np
from torch.utils.data import DataLoader, Sampler
from utils.errors import InputError, ParameterError
from ._container import collate_batch
from .augment import AugmentedView
from .image_dataset import ImageDataset
from typing import Iterator, List, Sequence, Tuple, Union


class EpochBatchSampler(Sampler):
    """
    Seeded permutation per (seed, stream, epoch), cut into consecutive batches; the
    final short batch is kept, so every index appears exactly once per epoch.
    """
    def __init__(self, num_samples: int, batch_size: int, seed: int, epoch: int, stream: int=0):
        if batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
        self.num_samples = num_samples
        self.batch_size  = batch_size
        self.seed        = seed
        self.epoch       = epoch
        self.stream      = stream

    def permutation(self) -> np.ndarray:
        return np.random.default_rng([self.seed, self.stream, self.epoch]).permutation(self.num_samples)

    def __iter__(self) -> Iterator[List[int]]:
        order = self.permutation()
        for start in range(0, self.num_samples, self.batch_size):
            yield order[start:start + self.batch_size].tolist()

    def __len__(self) -> int:
        return math.ceil(self.num_samples / self.batch_size)


def batch_iterator(
        dataset: ImageDataset,
        batch_size: int,
        seed: int,
        epoch: int,
        augment: bool=False,
        num_workers: int=0,
        stream: int=0
    ) -> DataLoader:
    """
    Returns an iterable of Batch. With num_workers > 0 batches are prefetched by
    worker processes; DataLoader yields them in sampler order regardless.
    """
    sampler = EpochBatchSampler(len(dataset), batch_size, seed, epoch, stream=stream)
    source  = AugmentedView(dataset, seed, epoch) if augment else dataset
    return DataLoader(
        source,
        batch_sampler=sampler,
        collate_fn=collate_batch,
        num_workers=num_workers,
        prefetch_factor=2 if num_workers else None,
    )


def split_dataset_half(dataset: ImageDataset, seed: Union[int, Sequence[int]]) -> Tuple[ImageDataset, ImageDataset]:
    """
    Random disjoint halves of sizes ceil(N/2) and floor(N/2) whose union is the dataset.
    """
    n = len(dataset)
    if n < 2:
        raise InputError(f"cannot split a dataset of {n} sample(s) in half")
    order = np.random.default_rng(seed).permutation(n)
    cut   = math.ceil(n / 2)
    return (
        dataset.subset(np.sort(order[:cut]), split=f"{dataset.split}/meta_train"),
        dataset.subset(np.sort(order[cut:]), split=f"{dataset.split}/meta_test"),
    )
