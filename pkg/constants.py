import os

BACKBONE_WIDTHS = {
    "desk-cnn-4": (16, 32, 64, 128),
    "desk-cnn-3": (32, 64, 128),
}

TRAIN_MODES = ("baseline", "dsn", "self_distill", "metadistill", "classic_kd")
META_ORDERS = ("second", "first")

CIFAR_NUM_PIXELS   = 3 * 32 * 32
CIFAR_VARIANTS     = {
    # variant: (label bytes, fine label offset, number of classes)
    "cifar10": (1, 0, 10),
    "cifar100": (2, 1, 100),
}
CIFAR_SPLIT_FILES  = {
    "cifar10": {
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
    },
    "cifar100": {
        "train": ["train.bin"],
        "test": ["test.bin"],
    },
}
CIFAR10_CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck"
)

SYNTH_PROTOTYPE_SEED = 20_200_823
SYNTH_SHAPES         = ("disk", "square", "ring", "cross")
AUGMENT_PAD          = 4

CHECKPOINT_MAGIC     = b"MDCK1"
PROB_EPS             = 1e-12
STOCHASTIC_ATOL      = 1e-6

DATA_PATH            = "data"
CIFAR_LOCAL_PATH     = os.path.join(DATA_PATH, "cifar")
METRICS_FILENAME     = "metrics.csv"
CONFIG_FILENAME      = "config.yaml"
METADATA_FILENAME    = "metadata.json"
