"""Named experiment configurations.

Each net preset fixes the published four-dataset geometry (4x4 kernels,
stride 2, padding 1, one linear head on the deepest code); the train
presets carry the matching optimizer recipes.  ``desk`` is the 10-class
recipe shrunk to a synthetic 5,000-image subset so the full pipeline runs
on a workstation in minutes.
"""

from __future__ import annotations

NET_PRESETS: dict[str, dict] = {
    "cifar10": {
        "channels": (16, 32, 64, 128),
        "in_channels": 3,
        "kernel": 4,
        "stride": 2,
        "padding": 1,
        "input_hw": (32, 32),
        "num_classes": 10,
    },
    "cifar100": {
        "channels": (16, 32, 64),
        "in_channels": 3,
        "kernel": 4,
        "stride": 2,
        "padding": 1,
        "input_hw": (32, 32),
        "num_classes": 100,
    },
    "covid19": {
        "channels": (32, 64, 128, 256),
        "in_channels": 3,
        "kernel": 4,
        "stride": 2,
        "padding": 1,
        "input_hw": (64, 64),
        "num_classes": 4,
    },
    "crack": {
        "channels": (8, 16, 32),
        "in_channels": 3,
        "kernel": 4,
        "stride": 2,
        "padding": 1,
        "input_hw": (64, 64),
        "num_classes": 2,
    },
}
NET_PRESETS["desk"] = dict(NET_PRESETS["cifar10"])

TRAIN_PRESETS: dict[str, dict] = {
    "cifar10": {
        "lr": 0.005,
        "momentum": 0.9,
        "batch_size": 128,
        "epochs": 200,
        "milestones": (100, 150),
        "lr_decay": 0.2,
    },
    "cifar100": {
        "lr": 0.005,
        "momentum": 0.9,
        "batch_size": 128,
        "epochs": 200,
        "milestones": (100, 150),
        "lr_decay": 0.5,
    },
    "covid19": {
        "lr": 0.1,
        "momentum": 0.9,
        "batch_size": 128,
        "epochs": 200,
        "milestones": (100, 150),
        "lr_decay": 0.1,
    },
    "crack": {
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 256,
        "epochs": 100,
        "milestones": (40, 70),
        "lr_decay": 0.5,
    },
}
TRAIN_PRESETS["desk"] = {
    **TRAIN_PRESETS["cifar10"],
    "epochs": 10,
}

# Published totals, in millions, the derived integer counts are audited against.
PUBLISHED_PARAM_COUNTS_M: dict[str, float] = {
    "cifar10": 0.178,
    "cifar100": 0.144,
    "covid19": 0.706,
    "crack": 0.014,
}

# Data source defaults: the 32x32 presets read real binary batches when a
# data_dir is supplied; desk (and the presets whose corpora have no public
# binary release) fall back to the deterministic synthetic corpus.
DATA_PRESETS: dict[str, dict] = {
    "cifar10": {"source": "cifar", "variant": "cifar10", "val_size": 5000},
    "cifar100": {"source": "cifar", "variant": "cifar100", "val_size": 5000},
    "covid19": {"source": "synthetic", "train_size": 4000, "val_size": 800, "test_size": 1200},
    "crack": {"source": "synthetic", "train_size": 4000, "val_size": 800, "test_size": 1200},
    "desk": {"source": "synthetic", "train_size": 5000, "val_size": 1000, "test_size": 2000},
}

CIFAR_FILES = {
    "cifar10": {
        "train": ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                  "data_batch_4.bin", "data_batch_5.bin"],
        "test": ["test_batch.bin"],
    },
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}


def preset_names() -> list[str]:
    return sorted(NET_PRESETS)
