import numpy as np
import torch
from constants import SYNTH_PROTOTYPE_SEED, SYNTH_SHAPES
from utils.errors import InputError
from .image_dataset import ImageDataset, channel_stats, standardize
from typing import Dict, List, Optional, Sequence


def class_prototypes(num_classes: int) -> List[Dict[str, object]]:
    """
    Per-class drawing recipe, fixed by the class count only so that train and test
    sets drawn with different seeds share the same classes.
    """
    rng = np.random.default_rng([SYNTH_PROTOTYPE_SEED, num_classes])
    prototypes = []
    for c in range(num_classes):
        prototypes.append({
            "shape": SYNTH_SHAPES[c % len(SYNTH_SHAPES)],
            "color": rng.uniform(0.25, 1.0, size=3),
            "background": rng.uniform(0.0, 0.2, size=3),
        })
    return prototypes


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return (dy ** 2 + dx ** 2) <= radius ** 2
    if shape == "square":
        return (np.abs(dy) <= radius * 0.8) & (np.abs(dx) <= radius * 0.8)
    if shape == "ring":
        dist = np.sqrt(dy ** 2 + dx ** 2)
        return (dist <= radius) & (dist >= radius * 0.55)
    if shape == "cross":
        arm = radius * 0.3
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise InputError(f"unknown shape {shape!r}")


def synth_dataset(
        seed: int,
        n: int,
        num_classes: int,
        image_size: int=32,
        split: str="train",
        standardize_images: bool=True,
        stats: Optional[Dict[str, Sequence[float]]]=None
    ) -> ImageDataset:
    """
    Class-conditional colored blobs on a tinted background plus pixel noise.

    Labels are balanced (n // num_classes per class, the first n % num_classes
    classes get one more) and shuffled; everything is a function of the seed.
    """
    if n < num_classes:
        raise InputError(f"need at least one sample per class, got n={n} for {num_classes} classes")
    if num_classes < 1:
        raise InputError("num_classes must be >= 1")

    rng        = np.random.default_rng(seed)
    prototypes = class_prototypes(num_classes)
    labels     = rng.permutation(np.arange(n) % num_classes)
    yy, xx     = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images     = np.empty((n, 3, image_size, image_size), dtype=np.float64)

    for i, label in enumerate(labels):
        proto  = prototypes[label]
        radius = image_size * rng.uniform(0.2, 0.32)
        margin = radius * 0.8
        cy, cx = rng.uniform(margin, image_size - margin, size=2)
        color  = np.clip(proto["color"] + rng.normal(0.0, 0.06, size=3), 0.0, 1.0)
        mask   = _shape_mask(proto["shape"], yy, xx, cy, cx, radius)

        img    = np.broadcast_to(proto["background"][:, None, None], images.shape[1:]).copy()
        img[:, mask] = color[:, None]
        img   += rng.normal(0.0, 0.08, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    metadata = {"source": "synth", "seed": seed, "names": [f"{p['shape']}_{c}" for c, p in enumerate(prototypes)]}
    if standardize_images:
        if stats is None:
            mean, std = channel_stats(images)
        else:
            mean, std = list(stats["mean"]), list(stats["std"])
        images = standardize(images, mean, std)
        metadata.update(mean=mean, std=std)

    return ImageDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(labels.astype(np.int64)),
        num_classes,
        split=split,
        metadata=metadata,
    )
