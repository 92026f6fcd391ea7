import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset
from constants import AUGMENT_PAD
from utils.errors import InputError
from typing import Tuple


def pad_reflect(image: torch.Tensor, pad: int=AUGMENT_PAD) -> torch.Tensor:
    """(C, H, W) -> (C, H + 2*pad, W + 2*pad)"""
    return F.pad(image[None], (pad, pad, pad, pad), mode="reflect")[0]


def crop(image: torch.Tensor, top: int, left: int, size: Tuple[int, int]) -> torch.Tensor:
    h, w = size
    return image[:, top:top + h, left:left + w]


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def augment(image: torch.Tensor, seed: int, epoch: int, index: int, pad: int=AUGMENT_PAD) -> torch.Tensor:
    """
    Reflect-pad, random crop back to the input size and horizontal flip with p=0.5.
    The draw depends only on (seed, epoch, index).
    """
    if pad >= min(image.shape[-2:]):
        raise InputError(f"reflect padding by {pad} needs images larger than {pad} px, got {tuple(image.shape[-2:])}")
    rng       = np.random.default_rng([seed, epoch, index])
    top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip      = bool(rng.random() < 0.5)
    out       = crop(pad_reflect(image, pad), top, left, tuple(image.shape[-2:]))
    return hflip(out) if flip else out


class AugmentedView(Dataset):
    def __init__(self, dataset: Dataset, seed: int, epoch: int, pad: int=AUGMENT_PAD):
        self.dataset = dataset
        self.seed    = seed
        self.epoch   = epoch
        self.pad     = pad

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, idx: int) -> Tuple[torch.Tensor, int, int]:
        image, label, source_idx = self.dataset[idx]
        return augment(image, self.seed, self.epoch, source_idx, self.pad), label, source_idx
