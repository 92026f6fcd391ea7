import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import torch
from dataset import synth_dataset
from modules import build_model_and_generator
from trainer.meta_trainer import MetaDistillTrainer
from utils import tensor_core as tc
from utils.config_utils import TrainConfig
from utils.io_utils import save_yaml_file


@pytest.fixture
def f64():
    with tc.verification_mode():
        yield torch.float64


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def tiny_data():
    train_set = synth_dataset(0, 24, 3, image_size=8, split="train")
    stats     = {"mean": train_set.metadata["mean"], "std": train_set.metadata["std"]}
    val_set   = synth_dataset(1, 12, 3, image_size=8, split="test", stats=stats)
    return train_set, val_set


@pytest.fixture
def make_trainer(tmp_path):
    """Factory for trainers on the K=2, widths (2, 4), C=3 instance."""
    def factory(mode: str="metadistill", epochs: int=1, run_dir=None, **overrides) -> MetaDistillTrainer:
        settings = dict(mode=mode, epochs=epochs, generator_period=1, milestones=[1], batch_size=8, seed=0)
        settings.update(overrides)
        config = TrainConfig(**settings)
        config.validate()
        model, generator = build_model_and_generator((2, 4), num_classes=3, seed=config.seed)
        return MetaDistillTrainer(model, generator, config, str(run_dir or tmp_path / "run"))
    return factory


@pytest.fixture
def write_config(tmp_path):
    """Writes a run config YAML and returns its path."""
    def writer(data: dict, name: str="config.yaml") -> str:
        path = str(tmp_path / name)
        save_yaml_file(data, path, sort_keys=False)
        return path
    return writer


@pytest.fixture
def tiny_config_dict(tmp_path):
    return {
        "data": {"source": "synth", "num_classes": 3, "n_train": 24, "n_test": 12, "image_size": 8},
        "model": {"widths": [2, 4]},
        "train": {
            "mode": "metadistill", "generator_period": 1, "epochs": 2, "milestones": [1], "batch_size": 8, "seed": 0
        },
        "output_dir": str(tmp_path / "run"),
    }
