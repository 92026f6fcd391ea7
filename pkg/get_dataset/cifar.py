import os
import sys
import logging
import tarfile
import argparse
from pathlib import Path
from tqdm import tqdm
sys.path.append(str(Path(__file__).resolve().parent.parent))
from constants import CIFAR_LOCAL_PATH, CIFAR_SPLIT_FILES, METADATA_FILENAME
from dataset.cifar import load_cifar_split, dataset_metadata
from utils.io_utils import save_json_file


LOGGER = logging.getLogger(__name__)


def unpack(archive: str, variant: str, output_dir: str) -> str:
    """
    Extracts the binary split files of an official CIFAR "binary version" tarball
    into output_dir (flattened) and returns output_dir.
    """
    wanted = {name for files in CIFAR_SPLIT_FILES[variant].values() for name in files}
    os.makedirs(output_dir, exist_ok=True)
    with tarfile.open(archive, "r:gz") as tar:
        members = [m for m in tar.getmembers() if m.isfile() and Path(m.name).name in wanted]
        for member in tqdm(members, desc=f"unpacking {variant}"):
            source = tar.extractfile(member)
            with open(os.path.join(output_dir, Path(member.name).name), "wb") as f:
                f.write(source.read())
    found   = {Path(m.name).name for m in members}
    missing = sorted(wanted - found)
    if missing:
        raise FileNotFoundError(f"{archive} lacks {variant} files {missing}")
    return output_dir


def write_metadata(root: str, variant: str):
    train_set = load_cifar_split(root, variant, "train")
    stats     = {"mean": train_set.metadata["mean"], "std": train_set.metadata["std"]}
    test_set  = load_cifar_split(root, variant, "test", stats=stats)
    metadata  = {
        "variant": variant,
        "train": dataset_metadata(train_set),
        "test": dataset_metadata(test_set),
    }
    save_json_file(metadata, os.path.join(root, METADATA_FILENAME), indent=2)
    LOGGER.info(f"{variant}: {len(train_set)} train / {len(test_set)} test samples, metadata written to {root}")


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(filename)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )

    parser = argparse.ArgumentParser(description="Unpack a CIFAR binary tarball and write its metadata sidecar")

    parser.add_argument(
        "--archive", type=str, required=True, metavar="", help="Path to cifar-10-binary.tar.gz or cifar-100-binary.tar.gz"
    )
    parser.add_argument(
        "--variant", type=str, default="cifar10", choices=list(CIFAR_SPLIT_FILES), help="CIFAR variant"
    )
    parser.add_argument(
        "--output_dir", type=str, default=None, metavar="", help="Destination (default: data/cifar/<variant>)"
    )

    args = parser.parse_args()
    root = unpack(args.archive, args.variant, args.output_dir or os.path.join(CIFAR_LOCAL_PATH, args.variant))
    write_metadata(root, args.variant)
