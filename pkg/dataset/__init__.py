from ._container import Batch, collate_batch
from .image_dataset import ImageDataset
from .cifar import load_cifar_binary, load_cifar_split, write_cifar_binary, save_dataset_metadata
from .synth import synth_dataset
from .augment import augment
from .sampling import EpochBatchSampler, batch_iterator, split_dataset_half
