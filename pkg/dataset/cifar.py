import os
import logging
import numpy as np
import torch
from constants import CIFAR10_CLASS_NAMES, CIFAR_NUM_PIXELS, CIFAR_SPLIT_FILES, CIFAR_VARIANTS
from utils.errors import FormatError, InputError
from utils.io_utils import save_json_file
from .image_dataset import ImageDataset, channel_stats, destandardize, standardize
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union


LOGGER = logging.getLogger(__name__)


def record_length(variant: str) -> int:
    if variant not in CIFAR_VARIANTS:
        raise InputError(f"variant must be one of {list(CIFAR_VARIANTS)}, got {variant!r}")
    label_bytes, _, _ = CIFAR_VARIANTS[variant]
    return label_bytes + CIFAR_NUM_PIXELS


def class_names(variant: str, num_classes: int) -> List[str]:
    if variant == "cifar10":
        return list(CIFAR10_CLASS_NAMES)
    return [f"class_{i}" for i in range(num_classes)]


def _read_records(path: str, variant: str) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    label_bytes, fine_offset, num_classes = CIFAR_VARIANTS[variant]
    rec_len = record_length(variant)
    raw     = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise FormatError(f"{path} is empty", offset=0)
    if raw.size % rec_len:
        complete = (raw.size // rec_len) * rec_len
        raise FormatError(
            f"{path} has {raw.size} bytes, not a multiple of the {rec_len}-byte {variant} record",
            offset=complete
        )
    records = raw.reshape(-1, rec_len)
    labels  = records[:, fine_offset].astype(np.int64)
    bad     = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise FormatError(
            f"{path} record {int(bad[0])} has label {int(labels[bad[0]])} >= {num_classes}",
            offset=int(bad[0]) * rec_len + fine_offset
        )
    coarse  = records[:, 0].astype(np.int64) if label_bytes == 2 else None
    # records store the R, G and B planes one after another, i.e. CHW order
    pixels  = records[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels, coarse


def load_cifar_binary(
        paths: Union[str, Sequence[str]],
        variant: str="cifar10",
        split: str="train",
        standardize_images: bool=True,
        stats: Optional[Dict[str, Sequence[float]]]=None
    ) -> ImageDataset:
    """
    Load one or more CIFAR binary files.

    Input
    --------------------------------
    :paths: file path or list of file paths of the same variant

    :variant: "cifar10" (1 label byte) or "cifar100" (coarse + fine label bytes, fine kept)

    :standardize_images: if True, images are standardized per channel

    :stats: {"mean": [...], "std": [...]} to standardize with (e.g. the training split's),
        computed from the loaded images if not given

    Returns
    --------------------------------
    :dataset: ImageDataset with (N, 3, 32, 32) images
    """
    record_length(variant)
    paths = [paths] if isinstance(paths, str) else list(paths)
    pixels, labels, coarse = [], [], []
    for path in paths:
        p, l, c = _read_records(path, variant)
        pixels.append(p)
        labels.append(l)
        if c is not None:
            coarse.append(c)

    _, _, num_classes = CIFAR_VARIANTS[variant]
    images   = np.concatenate(pixels, axis=0).astype(np.float64) / 255.0
    metadata = {
        "variant": variant,
        "names": class_names(variant, num_classes),
        "num_classes": num_classes,
        "files": [os.path.basename(p) for p in paths],
    }
    if standardize_images:
        if stats is None:
            mean, std = channel_stats(images)
        else:
            mean, std = list(stats["mean"]), list(stats["std"])
        images = standardize(images, mean, std)
        metadata.update(mean=mean, std=std)

    LOGGER.info(f"loaded {images.shape[0]} {variant} records from {len(paths)} file(s)")
    return ImageDataset(
        torch.from_numpy(images.astype(np.float32)),
        torch.from_numpy(np.concatenate(labels, axis=0)),
        num_classes,
        split=split,
        metadata=metadata,
        coarse_labels=torch.from_numpy(np.concatenate(coarse, axis=0)) if coarse else None,
    )


def load_cifar_split(
        root: str,
        variant: str,
        split: str,
        stats: Optional[Dict[str, Sequence[float]]]=None
    ) -> ImageDataset:
    files = [os.path.join(root, name) for name in CIFAR_SPLIT_FILES[variant][split]]
    missing = [f for f in files if not os.path.isfile(f)]
    if missing:
        raise InputError(f"missing {variant} files: {missing}")
    return load_cifar_binary(files, variant=variant, split=split, stats=stats)


def write_cifar_binary(dataset: ImageDataset, path: str, variant: str="cifar10"):
    """Inverse of load_cifar_binary: undoes standardization and quantizes pixels to bytes."""
    label_bytes, fine_offset, num_classes = CIFAR_VARIANTS[variant]
    if tuple(dataset.images.shape[1:]) != (3, 32, 32):
        raise InputError(f"CIFAR records hold 3x32x32 images, got {tuple(dataset.images.shape[1:])}")
    if dataset.num_classes > num_classes:
        raise InputError(f"{variant} holds at most {num_classes} classes, dataset has {dataset.num_classes}")

    images = dataset.images.double().numpy()
    if "mean" in dataset.metadata:
        images = destandardize(images, dataset.metadata["mean"], dataset.metadata["std"])
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)

    records = np.zeros((len(dataset), label_bytes + CIFAR_NUM_PIXELS), dtype=np.uint8)
    records[:, fine_offset] = dataset.labels.numpy().astype(np.uint8)
    if label_bytes == 2 and dataset.coarse_labels is not None:
        records[:, 0] = dataset.coarse_labels.numpy().astype(np.uint8)
    records[:, label_bytes:] = pixels.reshape(len(dataset), -1)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    records.tofile(path)


def dataset_metadata(dataset: ImageDataset) -> Dict[str, Any]:
    return {
        "split": dataset.split,
        "num_samples": len(dataset),
        "num_classes": dataset.num_classes,
        "names": dataset.metadata.get("names", [f"class_{i}" for i in range(dataset.num_classes)]),
        "mean": dataset.metadata.get("mean"),
        "std": dataset.metadata.get("std"),
        "class_counts": dataset.class_counts(),
    }


def save_dataset_metadata(dataset: ImageDataset, path: str):
    save_json_file(dataset_metadata(dataset), path, indent=2)
