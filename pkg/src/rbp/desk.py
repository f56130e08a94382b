"""Desk-scale experiment constructions shared by tests and scripts.

The planted-redundancy task builds a model where half of one layer's
filters are identically zero: with bias-free convs and ReLU, a zero filter
produces an exactly-zero channel, receives exactly-zero gradient, and so
carries no signal forever.  Ground truth for the pruner is therefore known
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, MNIST_MEAN, MNIST_STD, render_digits
from .model import Architecture, Conv2d, Flatten, Linear, MaxPool, Model, ReLU
from .optim import Adam
from .train import train_epochs


def digits_dataset(n: int, seed: int, split: str = "train") -> Dataset:
    """In-memory synthetic digit corpus (MNIST geometry and constants)."""
    images, labels = render_digits(n, seed if split == "train" else seed + 1)
    return Dataset("mnist", split, images, labels, 10, MNIST_MEAN, MNIST_STD)


def planted_arch(live: int = 4, dead: int = 4, conv2_channels: int = 16,
                 num_classes: int = 10) -> Architecture:
    channels = live + dead
    return Architecture("planted_cnn", (1, 28, 28), num_classes, (
        Conv2d("conv1", 1, channels, kernel=3, padding=1), ReLU("relu1"),
        MaxPool("pool1", kernel=2),
        Conv2d("conv2", channels, conv2_channels, kernel=3, padding=1),
        ReLU("relu2"), MaxPool("pool2", kernel=2),
        Flatten("flatten"), Linear("fc", conv2_channels * 7 * 7, num_classes)))


@dataclass
class PlantedTask:
    model: Model
    train: Dataset
    test: Dataset
    dead_channels: np.ndarray  # bool per conv1 output channel
    baseline_accuracy: float


def build_planted_task(live: int = 4, dead: int = 4, n_train: int = 4000,
                       n_test: int = 1000, seed: int = 0,
                       pretrain_epochs: int = 4, batch_size: int = 32,
                       pretrain_lr: float = 1e-3) -> PlantedTask:
    """Pretrained model whose last `dead` conv1 filters are exactly zero.

    Zero filters stay zero through pretraining: their channels are constant
    zero, ReLU passes no gradient at zero, and Adam leaves zero-gradient
    weights untouched.
    """
    from .train import evaluate_accuracy

    arch = planted_arch(live=live, dead=dead)
    model = Model.build(arch, seed=seed)
    dead_mask = np.zeros(live + dead, dtype=bool)
    dead_mask[live:] = True
    model.params.tensors["conv1.weight"][dead_mask] = 0.0

    train = digits_dataset(n_train, seed=seed + 100)
    test = digits_dataset(n_test, seed=seed + 200, split="test")
    train_epochs(model, train, epochs=pretrain_epochs, batch_size=batch_size,
                 optimizer=Adam(lr=pretrain_lr), seed=seed, phase="pretrain")
    assert np.all(model.params.tensors["conv1.weight"][dead_mask] == 0.0)
    return PlantedTask(model=model, train=train, test=test, dead_channels=dead_mask,
                       baseline_accuracy=evaluate_accuracy(model, test))
