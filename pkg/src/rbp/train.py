"""Plain supervised training and evaluation (pretraining and finetuning).

These loops minimize the mean cross-entropy with no gates involved; the
gated variational objective lives in `objective`.  All randomness comes
from counter-based streams keyed on (seed, epoch, batch), so runs are
bitwise reproducible.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import ops, rng
from .autodiff import NonFiniteError, Tensor
from .data import Batch, Dataset, augment_batch, batches, policy_for
from .model import Model


class TrainLog:
    """Appends (epoch, batch, layer, L_D, kl, acc) rows to a CSV file."""

    HEADER = ["epoch", "batch", "layer", "L_D", "kl", "acc"]

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.HEADER)

    def row(self, epoch: int, batch: int, layer: str, data_term: float, kl: float,
            acc: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([epoch, batch, layer, repr(float(data_term)),
                                    repr(float(kl)), repr(float(acc))])


def prepared_inputs(batch: Batch, dataset: Dataset, augmentation: str, train: bool,
                    seed: int) -> np.ndarray:
    policy = policy_for(dataset, augmentation, train)
    gen = rng.stream("augment", seed, batch.epoch, batch.index)
    return augment_batch(batch.images, policy, gen)


def finetune_lr_schedule(base_lr: float, epochs: int, decay: float,
                         decay_every: int) -> list[float]:
    """Learning rate per epoch (1-indexed): decayed after every `decay_every`."""
    return [base_lr * decay ** ((e - 1) // decay_every) for e in range(1, epochs + 1)]


def train_epochs(model: Model, dataset: Dataset, *, epochs: int, batch_size: int,
                 optimizer, seed: int, augmentation: str = "none",
                 phase: str = "train", log: TrainLog | None = None,
                 lr_schedule=None, grad_mask: dict[str, np.ndarray] | None = None,
                 epoch_offset: int = 0) -> None:
    """Minimize mean cross-entropy for `epochs` passes over the data.

    `lr_schedule` is an optional per-epoch learning-rate list; `grad_mask`
    multiplies named gradients before each update (used by the planted
    redundancy harness to keep designated filters dead while pretraining).
    """
    n = len(dataset)
    for e in range(epochs):
        epoch = epoch_offset + e
        if lr_schedule is not None:
            optimizer.lr = lr_schedule[e]
        for batch in batches(dataset, batch_size, epoch, seed):
            x = prepared_inputs(batch, dataset, augmentation, True, seed)
            params = model.param_tensors(requires_grad=True)
            logits = model.forward(Tensor(x), params=params)
            loss = ops.softmax_cross_entropy(logits, batch.labels)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"non-finite loss in {phase} at batch "
                                     f"{batch.index} of epoch {epoch}")
            loss.backward()
            grads = {name: t.grad for name, t in params.items() if t.grad is not None}
            if grad_mask:
                for name, mask in grad_mask.items():
                    if name in grads:
                        grads[name] = grads[name] * mask
            optimizer.step(model.params.tensors, grads)
            if log is not None:
                acc = float((logits.data.argmax(axis=1) == batch.labels).mean())
                log.row(epoch, batch.index, phase, -n * float(loss.data), 0.0, acc)


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 256,
                      augmentation: str = "none") -> float:
    """Deterministic top-1 accuracy on the dataset's natural order."""
    policy = policy_for(dataset, augmentation, train=False)
    gen = rng.stream("eval")  # eval policies draw nothing, stream is a formality
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        x = augment_batch(images, policy, gen)
        logits = model.logits(x)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(dataset)
