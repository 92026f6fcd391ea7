import torch
from dataclasses import dataclass
from typing import List, Tuple


@dataclass
class Batch:
    """
    This class stores one mini-batch

    Attributes:
    -----------------------------------------
    images: (N, C, H, W) float tensor, standardized

    labels: (N, ) int64 class indexes

    indices: (N, ) int64 indexes of the samples in the root dataset the batch was drawn
        from (subsets keep the indexes of their parent), used to prove that batches of
        disjoint splits never overlap
    """
    images: torch.Tensor
    labels: torch.Tensor
    indices: torch.Tensor

    def __len__(self) -> int:
        return self.labels.shape[0]


def collate_batch(samples: List[Tuple[torch.Tensor, int, int]]) -> Batch:
    images, labels, indices = zip(*samples)
    return Batch(
        images=torch.stack(images, dim=0),
        labels=torch.tensor(labels, dtype=torch.int64),
        indices=torch.tensor(indices, dtype=torch.int64),
    )
