"""Per-batch training objective for the layer(s) currently being pruned.

The objective to maximize is L = L_D - KL, where
L_D = (|D|/|B|) * sum over the batch of log P(y|x) and KL is the divergence
of the active gate's rate distribution from the sparsity prior.  The
forward pass samples the gate once per batch from the counter-based noise
stream, so the whole evaluation is a pure function of
(model, gates, batch, noise key) and can be finite-difference checked with
common random numbers.

Gradients are reported in the ascent direction of L; a trainer descending
on -L must negate them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, rng
from .autodiff import NonFiniteError, Tensor
from .gate import ACTIVE, GateLifecycleError, GateState, expected_gate, kl_tensor, \
    sample_gate_tensor
from .model import Model


@dataclass
class BatchObjective:
    data_term: float  # L_D
    kl: float
    total: float  # L = data_term - kl, exactly as stored
    accuracy: float
    weight_grads: dict[str, np.ndarray]  # d L / d weight (ascent direction)
    rate_grads: dict[str, np.ndarray]  # d L / d rates per active gate


def evaluate_batch(model: Model, gates, batch, dataset_size: int, *,
                   noise_key: tuple, noise_samples: int = 1,
                   allow_multiple: bool = False,
                   frozen_gates=()) -> BatchObjective:
    """Evaluate L and its gradients on one mini-batch.

    `gates` is the active GateState (or a sequence of them when a grouped
    schedule permits several, in which case the divergence term is their
    sum).  `noise_key` is (seed, epoch, batch_index); `noise_samples` > 1
    averages the data term over several gate draws and exists for the
    gradient-check suite only.  `frozen_gates` are applied at their
    expected value with no gradient.
    """
    inputs, labels = batch
    if dataset_size <= 0:
        raise ValueError(f"dataset_size must be positive, got {dataset_size}")
    if len(labels) == 0:
        raise ValueError("empty batch")
    if isinstance(gates, GateState):
        gates = [gates]
    else:
        gates = list(gates)
    if not gates:
        raise ValueError("no active gate; the objective exists to train gate rates")
    if len(gates) > 1 and not allow_multiple:
        raise ValueError(f"{len(gates)} active gates, but only a grouped schedule may "
                         f"train more than one at a time")
    for g in gates:
        if g.status != ACTIVE:
            raise GateLifecycleError(f"gate {g.layer_id!r} is {g.status}, not active")
    seed, epoch, batch_index = noise_key

    params = model.param_tensors(requires_grad=True)
    rate_tensors = {g.layer_id: Tensor(g.rates.astype(model.dtype), requires_grad=True,
                                       name=f"rates:{g.layer_id}")
                    for g in gates}
    gate_ids = [g.layer_id for g in gates]

    constant_gates = {}
    for fg in frozen_gates:
        constant_gates[fg.layer_id] = Tensor(expected_gate(fg).astype(model.dtype))

    x = Tensor(np.asarray(inputs, dtype=model.dtype))
    labels = np.asarray(labels)

    nll_sum = None
    accuracy = 0.0
    for sample in range(noise_samples):
        gate_map = dict(constant_gates)
        for g in gates:
            z = rng.gate_noise(seed, g.layer_id, epoch, batch_index, g.channels,
                               sample=sample, dtype=model.dtype)
            gate_map[g.layer_id] = sample_gate_tensor(rate_tensors[g.layer_id], z)
        logits = model.forward(x, gates=gate_map, params=params)
        nll = ops.softmax_cross_entropy(logits, labels)
        nll_sum = nll if nll_sum is None else nll_sum + nll
        if sample == 0:
            accuracy = float((logits.data.argmax(axis=1) == labels).mean())
    mean_nll = nll_sum if noise_samples == 1 else nll_sum * (1.0 / noise_samples)

    kl_total = None
    for g in gates:
        term = kl_tensor(rate_tensors[g.layer_id], g.prior_variance)
        kl_total = term if kl_total is None else kl_total + term

    # minimize -L = |D| * mean_nll + KL; gradients are negated afterwards
    neg_total = mean_nll * float(dataset_size) + kl_total
    if not np.isfinite(neg_total.data):
        raise NonFiniteError(f"non-finite loss for gate(s) {gate_ids} at batch "
                             f"{batch_index} of epoch {epoch}")
    neg_total.backward()

    weight_grads = {name: -t.grad for name, t in params.items() if t.grad is not None}
    rate_grads = {lid: -np.asarray(t.grad, dtype=np.float64)
                  for lid, t in rate_tensors.items()}

    data_term = -float(dataset_size) * float(mean_nll.data)
    kl_val = float(kl_total.data)
    return BatchObjective(data_term=data_term, kl=kl_val, total=data_term - kl_val,
                          accuracy=accuracy, weight_grads=weight_grads,
                          rate_grads=rate_grads)
