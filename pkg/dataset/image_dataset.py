import numpy as np
import torch
from torch.utils.data import Dataset
from utils.errors import InputError
from typing import Any, Dict, List, Optional, Sequence, Tuple


def channel_stats(images: np.ndarray) -> Tuple[List[float], List[float]]:
    """Per-channel mean and std of (N, C, H, W) images in [0, 1], computed in float64."""
    images = images.astype(np.float64, copy=False)
    mean   = images.mean(axis=(0, 2, 3))
    std    = images.std(axis=(0, 2, 3))
    std    = np.where(std > 0, std, 1.0)
    return mean.tolist(), std.tolist()


def standardize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std  = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (images.astype(np.float64, copy=False) - mean) / std


def destandardize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std  = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return images.astype(np.float64, copy=False) * std + mean


class ImageDataset(Dataset):
    """
    Immutable labelled image set.

    images are (N, C, H, W) float32, scaled to [0, 1] and (when metadata carries
    "mean"/"std") standardized per channel. source_indices map every sample back to
    its index in the dataset it was originally loaded as.
    """
    def __init__(
            self,
            images: torch.Tensor,
            labels: torch.Tensor,
            num_classes: int,
            split: str="train",
            metadata: Optional[Dict[str, Any]]=None,
            source_indices: Optional[torch.Tensor]=None,
            coarse_labels: Optional[torch.Tensor]=None
        ):
        if images.ndim != 4:
            raise InputError(f"images must be (N, C, H, W), got shape {tuple(images.shape)}")
        if labels.shape != (images.shape[0], ):
            raise InputError(f"expected {images.shape[0]} labels, got shape {tuple(labels.shape)}")
        if images.shape[0] == 0:
            raise InputError("dataset is empty")
        if int(labels.min()) < 0 or int(labels.max()) >= num_classes:
            raise InputError(f"labels must lie in [0, {num_classes})")

        self.images         = images
        self.labels         = labels.long()
        self.num_classes    = num_classes
        self.split          = split
        self.metadata       = dict(metadata or {})
        self.source_indices = (
            source_indices.long() if source_indices is not None else torch.arange(images.shape[0])
        )
        self.coarse_labels  = coarse_labels

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx: int) -> Tuple[torch.Tensor, int, int]:
        return self.images[idx], int(self.labels[idx]), int(self.source_indices[idx])

    def subset(self, indices: Sequence[int], split: Optional[str]=None) -> "ImageDataset":
        indices = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return ImageDataset(
            self.images[indices],
            self.labels[indices],
            self.num_classes,
            split=split or self.split,
            metadata=self.metadata,
            source_indices=self.source_indices[indices],
            coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices],
        )

    def class_counts(self) -> List[int]:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()
