import numpy as np
import pytest
import torch
from constants import BACKBONE_WIDTHS, CIFAR_NUM_PIXELS
from dataset import (
    EpochBatchSampler, ImageDataset, augment, batch_iterator, load_cifar_binary, split_dataset_half,
    synth_dataset, write_cifar_binary
)
from dataset.augment import crop, hflip, pad_reflect
from dataset.cifar import dataset_metadata, record_length, save_dataset_metadata
from modules import build_model_and_generator
from trainer.meta_trainer import MetaDistillTrainer, evaluate_model
from utils.config_utils import TrainConfig
from utils.errors import FormatError, InputError, ParameterError
from utils.io_utils import load_json_file


def _cifar10_records(labels, seed=0):
    rng = np.random.default_rng(seed)
    records = rng.integers(0, 256, size=(len(labels), 1 + CIFAR_NUM_PIXELS), dtype=np.uint8)
    records[:, 0] = labels
    return records


@pytest.fixture
def cifar10_file(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    records = _cifar10_records([3, 0, 9])
    path.write_bytes(records.tobytes())
    return str(path), records


class TestCifarLoader:
    def test_record_lengths(self):
        assert record_length("cifar10") == 3073
        assert record_length("cifar100") == 3074
        assert 10000 * record_length("cifar10") == 30_730_000

    def test_crafted_file(self, cifar10_file):
        path, records = cifar10_file
        dataset = load_cifar_binary(path, "cifar10", standardize_images=False)
        assert len(dataset) == 3
        assert dataset.labels.tolist() == [3, 0, 9]
        assert dataset.images.shape == (3, 3, 32, 32)
        assert dataset.images[0, 0, 0, 0].item() == pytest.approx(records[0, 1] / 255.0)
        # planes are stored R, G, B
        assert dataset.images[1, 2, 31, 31].item() == pytest.approx(records[1, -1] / 255.0)

    def test_trailing_byte(self, cifar10_file):
        path, records = cifar10_file
        with open(path, "ab") as f:
            f.write(b"\x00")
        with pytest.raises(FormatError) as e:
            load_cifar_binary(path, "cifar10")
        assert e.value.offset == 3 * 3073

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(_cifar10_records([1, 10]).tobytes())
        with pytest.raises(FormatError) as e:
            load_cifar_binary(str(path), "cifar10")
        assert e.value.offset == 3073

    def test_cifar100_keeps_fine_label(self, tmp_path):
        rng = np.random.default_rng(1)
        records = rng.integers(0, 256, size=(2, 2 + CIFAR_NUM_PIXELS), dtype=np.uint8)
        records[:, 0] = [4, 19]
        records[:, 1] = [57, 3]
        path = tmp_path / "train.bin"
        path.write_bytes(records.tobytes())
        dataset = load_cifar_binary(str(path), "cifar100")
        assert dataset.labels.tolist() == [57, 3]
        assert dataset.coarse_labels.tolist() == [4, 19]
        assert dataset.num_classes == 100

    def test_round_trip(self, cifar10_file, tmp_path):
        path, _ = cifar10_file
        dataset = load_cifar_binary(path, "cifar10")
        copy = str(tmp_path / "copy.bin")
        write_cifar_binary(dataset, copy, "cifar10")
        assert open(copy, "rb").read() == open(path, "rb").read()
        reloaded = load_cifar_binary(copy, "cifar10")
        assert torch.equal(reloaded.images, dataset.images)
        assert torch.equal(reloaded.labels, dataset.labels)

    def test_standardization_stats_recorded(self, cifar10_file, tmp_path):
        path, _ = cifar10_file
        dataset = load_cifar_binary(path, "cifar10")
        sidecar = str(tmp_path / "metadata.json")
        save_dataset_metadata(dataset, sidecar)
        meta = load_json_file(sidecar)
        assert len(meta["mean"]) == 3 and len(meta["std"]) == 3
        assert meta["num_classes"] == 10
        assert meta["names"][0] == "airplane"
        means = dataset.images.double().mean(dim=(0, 2, 3))
        assert torch.allclose(means, torch.zeros(3, dtype=torch.float64), atol=1e-5)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_dataset(3, 40, 4, image_size=16), synth_dataset(3, 40, 4, image_size=16)
        assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)

    def test_balanced(self):
        dataset = synth_dataset(0, 1000, 4, image_size=8)
        assert dataset.class_counts() == [250, 250, 250, 250]

    def test_too_few_samples(self):
        with pytest.raises(InputError):
            synth_dataset(0, 3, 4)

    def test_metadata(self):
        meta = dataset_metadata(synth_dataset(0, 12, 3, image_size=8))
        assert meta["num_samples"] == 12 and meta["num_classes"] == 3
        assert len(meta["names"]) == 3

    @pytest.mark.slow
    def test_learnable_by_baseline(self, tmp_path):
        train_set = synth_dataset(0, 2000, 4, image_size=32)
        config = TrainConfig(mode="baseline", epochs=20, milestones=[15], batch_size=128, seed=0)
        model, generator = build_model_and_generator(BACKBONE_WIDTHS["desk-cnn-4"], num_classes=4, seed=0)
        MetaDistillTrainer(model, generator, config, str(tmp_path / "learn")).train(train_set)
        assert evaluate_model(model, train_set, with_exits=False)["final"] > 0.9


class TestAugment:
    @pytest.fixture
    def image(self):
        return torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))

    def test_double_flip(self, image):
        assert torch.equal(hflip(hflip(image)), image)

    def test_centered_crop(self, image):
        assert torch.equal(crop(pad_reflect(image, 4), 4, 4, (8, 8)), image)

    def test_flip_preserves_histogram(self, image):
        assert torch.equal(hflip(image).flatten().sort().values, image.flatten().sort().values)

    def test_seeded_per_epoch_and_index(self, image):
        assert torch.equal(augment(image, 0, 1, 5), augment(image, 0, 1, 5))
        assert augment(image, 0, 1, 5).shape == image.shape
        draws = {augment(image, 0, epoch, 5).numpy().tobytes() for epoch in range(10)}
        assert len(draws) > 1


class TestBatching:
    @pytest.fixture
    def ten(self):
        return synth_dataset(0, 10, 2, image_size=4)

    def test_batch_sizes(self, ten):
        assert [len(b) for b in batch_iterator(ten, 4, seed=0, epoch=0)] == [4, 4, 2]

    def test_epoch_coverage(self, ten):
        indices = torch.cat([b.indices for b in batch_iterator(ten, 4, seed=0, epoch=3)])
        assert sorted(indices.tolist()) == list(range(10))

    def test_same_seed_same_order(self, ten):
        a = [b.indices.tolist() for b in batch_iterator(ten, 4, seed=1, epoch=2)]
        b = [b.indices.tolist() for b in batch_iterator(ten, 4, seed=1, epoch=2)]
        assert a == b

    def test_epochs_reshuffle(self):
        sampler = EpochBatchSampler(100, 100, seed=0, epoch=0)
        other   = EpochBatchSampler(100, 100, seed=0, epoch=1)
        assert list(sampler) != list(other)

    def test_batch_size_validation(self):
        with pytest.raises(ParameterError):
            EpochBatchSampler(10, 0, seed=0, epoch=0)

    def test_augmented_batches(self):
        dataset = synth_dataset(0, 10, 2, image_size=8)
        batches = list(batch_iterator(dataset, 5, seed=0, epoch=0, augment=True))
        assert all(b.images.shape[1:] == dataset.images.shape[1:] for b in batches)
        plain = torch.cat([b.images for b in batch_iterator(dataset, 5, seed=0, epoch=0)])
        assert not torch.equal(torch.cat([b.images for b in batches]), plain)

    def test_augment_rejects_images_smaller_than_pad(self, ten):
        with pytest.raises(InputError):
            augment(ten.images[0], seed=0, epoch=0, index=0)


class TestHalfSplit:
    @pytest.mark.parametrize("n, sizes", [(10, (5, 5)), (11, (6, 5))])
    def test_sizes_and_partition(self, n, sizes):
        dataset = synth_dataset(0, n, 2, image_size=4)
        d_train, d_test = split_dataset_half(dataset, seed=0)
        assert (len(d_train), len(d_test)) == sizes
        a, b = set(d_train.source_indices.tolist()), set(d_test.source_indices.tolist())
        assert not a & b
        assert a | b == set(range(n))

    def test_deterministic(self):
        dataset = synth_dataset(0, 20, 2, image_size=4)
        a, _ = split_dataset_half(dataset, seed=[0, 4])
        b, _ = split_dataset_half(dataset, seed=[0, 4])
        assert torch.equal(a.source_indices, b.source_indices)

    def test_too_small(self):
        dataset = synth_dataset(0, 1, 1, image_size=4)
        with pytest.raises(InputError):
            split_dataset_half(dataset, seed=0)

    def test_inner_batches_never_see_held_out_samples(self):
        dataset = synth_dataset(0, 30, 3, image_size=4)
        d_train, d_test = split_dataset_half(dataset, seed=[0, 0])
        train_seen = torch.cat([b.indices for b in batch_iterator(d_train, 4, seed=0, epoch=0, stream=1)])
        test_seen  = torch.cat([b.indices for b in batch_iterator(d_test, 4, seed=0, epoch=0, stream=2)])
        assert not set(train_seen.tolist()) & set(test_seen.tolist())
