"""Layer-by-layer pruning controller.

The pipeline walks an ordered schedule of gate stages.  Each stage attaches
fresh gates at init_rate, trains weights and rates jointly for a fixed
number of trigger epochs, then thresholds the rates and folds the surviving
expectations into the consuming weights, so later stages see earlier layers
only through those folded expectations.  After all stages the masked
channels are physically removed and the network is finetuned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .autodiff import ShapeError
from .data import Dataset, batches
from .gate import ACTIVE, FOLDED, GateLifecycleError, GateState, clamp_rates, new_gate
from .model import Architecture, Conv2d, GateSite, Linear, Model, ResidualBlock, \
    atomic_weighted_layers, gate_sites, site_for_consumer, trace_shapes, \
    validate_architecture
from .objective import evaluate_batch
from .optim import SGD, Adam
from .train import TrainLog, evaluate_accuracy, finetune_lr_schedule, prepared_inputs, \
    train_epochs


@dataclass
class PruneSchedule:
    """Which gates train when, and with what settings."""

    stages: list[list[str]]  # consumer layer ids per stage
    trigger_epochs: list[int]
    threshold: float = 0.5
    init_rate: float = 0.01
    prior_variance: float = 0.025
    lr: float = 1e-4
    batch_size: int = 64
    augmentation: str = "none"
    grouped: bool = False  # True only for block-parallel schedules
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    finetune_decay: float = 0.5
    finetune_decay_every: int = 3
    finetune_momentum: float = 0.9

    def validate(self, arch: Architecture) -> None:
        if not 0.1 <= self.threshold <= 0.9:
            raise ValueError(f"threshold must lie in [0.1, 0.9], got {self.threshold}")
        if not 0 < self.prior_variance < 0.25:
            raise ValueError(f"prior variance must lie in (0, 0.25), got "
                             f"{self.prior_variance}")
        if not 0 < self.init_rate < 1:
            raise ValueError(f"init rate must lie in (0, 1), got {self.init_rate}")
        if len(self.trigger_epochs) != len(self.stages):
            raise ValueError(f"{len(self.stages)} stages but "
                             f"{len(self.trigger_epochs)} trigger-epoch entries")
        for e in self.trigger_epochs:
            if e < 1:
                raise ValueError(f"trigger epochs must be >= 1, got {e}")
        seen: set[str] = set()
        legal = {s.consumer: s for s in gate_sites(arch)}
        for stage in self.stages:
            if len(stage) > 1 and not self.grouped:
                raise ValueError("multiple gates per stage require a grouped schedule")
            for consumer in stage:
                if consumer in seen:
                    raise ValueError(f"gate {consumer!r} appears in more than one stage")
                seen.add(consumer)
                if consumer not in legal:
                    raise ValueError(f"gate on {consumer!r} is not a legal attachment "
                                     f"point")


def layerwise_schedule(arch: Architecture, scope=None, *, trigger_epochs: int = 3,
                       **settings) -> PruneSchedule:
    """One gate per stage in topological order.

    `scope` limits coverage: None gates every legal site; an integer k
    keeps only sites whose producer is among the first k weighted layers
    (a prefix of the network); a list names consumer layers explicitly.
    """
    sites = gate_sites(arch)
    if isinstance(scope, int):
        prefix = {spec.name for spec in atomic_weighted_layers(arch)[:scope]}
        sites = [s for s in sites if s.producer in prefix]
    elif scope is not None:
        chosen = set(scope)
        unknown = chosen - {s.consumer for s in sites}
        if unknown:
            raise ValueError(f"no legal gate sites for consumers {sorted(unknown)}")
        sites = [s for s in sites if s.consumer in chosen]
    stages = [[s.consumer] for s in sites]
    return PruneSchedule(stages=stages, trigger_epochs=[trigger_epochs] * len(stages),
                         **settings)


@dataclass
class ChannelMask:
    """Outcome of thresholding one gate: which producer channels survive."""

    layer_id: str  # consumer whose input was gated
    producer: str
    keep: np.ndarray  # bool per channel
    fold_scales: np.ndarray  # (1 - r) per channel after thresholding; 0 where pruned
    rates_at_fold: np.ndarray  # rates before thresholding (histogram source)

    @property
    def remained(self) -> int:
        return int(self.keep.sum())

    @property
    def original(self) -> int:
        return int(self.keep.size)


def run_stage(model: Model, gates, dataset: Dataset, schedule: PruneSchedule, *,
              epochs: int, seed: int, log: TrainLog | None = None,
              frozen_gates=(), grad_masks: dict[str, np.ndarray] | None = None,
              epoch_offset: int = 0):
    """Train weights and the given active gates jointly for `epochs` epochs.

    `grad_masks` zeroes updates into weight slices already folded away by
    earlier stages, so pruned channels stay exactly dead until compaction.
    """
    if epochs < 1:
        raise ValueError(f"a stage needs at least one trigger epoch, got {epochs}")
    gates = [gates] if isinstance(gates, GateState) else list(gates)
    for g in gates:
        if g.status != ACTIVE:
            raise GateLifecycleError(f"gate {g.layer_id!r} is {g.status}, not active")
    optimizer = Adam(lr=schedule.lr)
    n = len(dataset)
    tag = "+".join(g.layer_id for g in gates)
    for e in range(epochs):
        epoch = epoch_offset + e
        for batch in batches(dataset, schedule.batch_size, epoch, seed):
            x = prepared_inputs(batch, dataset, schedule.augmentation, True, seed)
            obj = evaluate_batch(model, gates, (x, batch.labels), n,
                                 noise_key=(seed, epoch, batch.index),
                                 allow_multiple=schedule.grouped,
                                 frozen_gates=frozen_gates)
            # descend on -L
            grads = {name: -g for name, g in obj.weight_grads.items()}
            if grad_masks:
                for name, mask in grad_masks.items():
                    if name in grads:
                        grads[name] = grads[name] * mask
            params = dict(model.params.tensors)
            for g in gates:
                params[f"rates:{g.layer_id}"] = g.rates
                grads[f"rates:{g.layer_id}"] = -obj.rate_grads[g.layer_id]
            optimizer.step(params, grads)
            for g in gates:
                clamp_rates(g.rates)
            if log is not None:
                log.row(epoch, batch.index, tag, obj.data_term, obj.kl, obj.accuracy)
    return model, gates


def threshold_and_fold(gate: GateState, model: Model, threshold: float) -> ChannelMask:
    """Snap high rates to 1 and absorb gate expectations into consumer weights."""
    if gate.status != ACTIVE:
        raise GateLifecycleError(f"cannot fold a {gate.status} gate")
    site = site_for_consumer(model.arch, gate.layer_id)
    if gate.channels != site.channels:
        raise ShapeError(f"gate {gate.layer_id!r} has {gate.channels} rates but the "
                         f"site carries {site.channels} channels")
    rates_at_fold = gate.rates.copy()
    rates = gate.rates.copy()
    keep = rates <= threshold
    if not keep.any():
        lowest = int(rates.argmin())
        keep[lowest] = True
        warnings.warn(f"all {rates.size} channels of {site.producer!r} exceeded the "
                      f"threshold; keeping channel {lowest} to avoid disconnecting "
                      f"the network")
    rates[~keep] = 1.0
    scales = 1.0 - rates
    weight = model.params.tensors[gate.layer_id + ".weight"]
    if weight.ndim == 4:
        weight *= scales[None, :, None, None].astype(weight.dtype)
    else:
        out_f, in_f = weight.shape
        block = in_f // scales.size
        weight.reshape(out_f, scales.size, block)[...] *= \
            scales[None, :, None].astype(weight.dtype)
    gate.rates = rates
    gate.status = FOLDED
    return ChannelMask(layer_id=gate.layer_id, producer=site.producer, keep=keep,
                       fold_scales=scales, rates_at_fold=rates_at_fold)


def _slice_grad_mask(weight: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Multiplier that zeroes gradient flow into folded-away input slices."""
    mask = np.ones_like(weight)
    if weight.ndim == 4:
        mask[:, ~keep] = 0.0
    else:
        out_f, in_f = weight.shape
        block = in_f // keep.size
        mask.reshape(out_f, keep.size, block)[:, ~keep] = 0.0
    return mask


def apply_masks_to_arch(arch: Architecture, masks) -> Architecture:
    """Architecture with masked channels removed (specs only, no parameters)."""
    row_keep: dict[str, np.ndarray] = {}
    col_keep: dict[str, np.ndarray] = {}
    for m in masks:
        row_keep[m.producer] = m.keep
        col_keep[m.layer_id] = m.keep

    def shrink(spec):
        if isinstance(spec, Conv2d):
            out_c, in_c = spec.out_channels, spec.in_channels
            if spec.name in row_keep:
                out_c = int(row_keep[spec.name].sum())
            if spec.name in col_keep:
                in_c = int(col_keep[spec.name].sum())
            return replace(spec, out_channels=out_c, in_channels=in_c)
        if isinstance(spec, Linear):
            out_f, in_f = spec.out_features, spec.in_features
            if spec.name in row_keep:
                out_f = int(row_keep[spec.name].sum())
            if spec.name in col_keep:
                keep = col_keep[spec.name]
                in_f = int(keep.sum()) * (in_f // keep.size)
            return replace(spec, out_features=out_f, in_features=in_f)
        if isinstance(spec, ResidualBlock):
            return replace(spec, convs=tuple(shrink(c) for c in spec.convs),
                           downsample=shrink(spec.downsample) if spec.downsample else None)
        return spec

    return replace_layers(arch, [shrink(s) for s in arch.layers])


def replace_layers(arch: Architecture, layers) -> Architecture:
    return Architecture(arch.id, arch.input_shape, arch.num_classes, tuple(layers))


def compact(model: Model, masks) -> Model:
    """Physically delete masked channels; the network function is unchanged.

    For every mask, the producer loses output filters and the consumer
    loses the matching input slices.  Those slices are exactly zero after
    folding, so logits are preserved to rounding.
    """
    shapes = trace_shapes(model.arch)
    row_keep: dict[str, np.ndarray] = {}
    col_keep: dict[str, np.ndarray] = {}
    for m in masks:
        site = site_for_consumer(model.arch, m.layer_id)
        if site.producer != m.producer:
            raise ShapeError(f"mask for {m.layer_id!r} names producer {m.producer!r} "
                             f"but the graph says {site.producer!r}")
        if m.keep.size != site.channels:
            raise ShapeError(f"mask for {m.layer_id!r} covers {m.keep.size} channels, "
                             f"site carries {site.channels}")
        row_keep[m.producer] = m.keep
        col_keep[m.layer_id] = m.keep

    tensors = model.params.tensors
    for spec in atomic_weighted_layers(model.arch):
        name = spec.name
        w = tensors[name + ".weight"]
        if name in col_keep:
            keep = col_keep[name]
            if w.ndim == 4:
                w = w[:, keep]
            else:
                out_f, in_f = w.shape
                block = in_f // keep.size
                w = w.reshape(out_f, keep.size, block)[:, keep].reshape(out_f, -1)
        if name in row_keep:
            w = w[row_keep[name]]
            if name + ".bias" in tensors:
                tensors[name + ".bias"] = np.ascontiguousarray(
                    tensors[name + ".bias"][row_keep[name]])
        tensors[name + ".weight"] = np.ascontiguousarray(w)

    model.arch = apply_masks_to_arch(model.arch, masks)
    validate_architecture(model.arch)
    _ = shapes  # the pre-compaction trace already validated mask/graph agreement
    return model


@dataclass
class PipelineResult:
    model: Model
    report: "metrics.PruneReport"
    masks: list[ChannelMask] = field(default_factory=list)
    gates: list[GateState] = field(default_factory=list)
    stage_flops: list[int] = field(default_factory=list)
    stage_edge_mass: list[float] = field(default_factory=list)


def rbp_pipeline(model: Model, dataset: Dataset, schedule: PruneSchedule, *,
                 seed: int = 0, eval_dataset: Dataset | None = None,
                 log: TrainLog | None = None, convention: str = "flop",
                 stage_callback=None) -> PipelineResult:
    """Run the full recursive schedule on a pretrained model.

    Stages execute in order: attach fresh gates, train for the stage's
    trigger epochs, threshold-and-fold.  Afterwards masked channels are
    compacted away and the model is finetuned.  `stage_callback(k, model,
    gates, masks)` fires after each stage, e.g. to write checkpoints.
    """
    schedule.validate(model.arch)
    arch_before = model.arch
    flops_before = metrics.count_flops(arch_before, convention=convention)
    params_before = model.param_count()

    accuracy_before = (evaluate_accuracy(model, eval_dataset)
                       if eval_dataset is not None else None)

    masks: list[ChannelMask] = []
    all_gates: list[GateState] = []
    histograms: dict[str, list[int]] = {}
    stage_flops: list[int] = []
    stage_edge_mass: list[float] = []
    grad_masks: dict[str, np.ndarray] = {}
    epoch_offset = 0
    for k, stage in enumerate(schedule.stages):
        for g in all_gates:
            if g.status != FOLDED:
                raise GateLifecycleError(f"gate {g.layer_id!r} from an earlier stage is "
                                         f"{g.status}; stages must fold before advancing")
        sites = {s.consumer: s for s in gate_sites(model.arch)}
        gates = [new_gate(consumer, sites[consumer].channels,
                          init_rate=schedule.init_rate,
                          prior_variance=schedule.prior_variance)
                 for consumer in stage]
        epochs = schedule.trigger_epochs[k]
        run_stage(model, gates, dataset, schedule, epochs=epochs, seed=seed, log=log,
                  grad_masks=grad_masks, epoch_offset=epoch_offset)
        epoch_offset += epochs
        stage_rates = np.concatenate([g.rates for g in gates])
        stage_edge_mass.append(metrics.edge_mass(stage_rates))
        for g in gates:
            site = sites[g.layer_id]
            histograms[site.producer] = metrics.rate_histogram(g.rates).tolist()
            mask = threshold_and_fold(g, model, schedule.threshold)
            masks.append(mask)
            grad_masks[g.layer_id + ".weight"] = _slice_grad_mask(
                model.params.tensors[g.layer_id + ".weight"], mask.keep)
        all_gates.extend(gates)
        stage_flops.append(metrics.count_flops(
            apply_masks_to_arch(arch_before, masks), convention=convention))
        if stage_callback is not None:
            stage_callback(k, model, all_gates, masks)

    accuracy_after_prune = (evaluate_accuracy(model, eval_dataset)
                            if eval_dataset is not None else None)

    if masks:
        compact(model, masks)

    if schedule.finetune_epochs > 0 and masks:
        sgd = SGD(lr=schedule.finetune_lr, momentum=schedule.finetune_momentum)
        lrs = finetune_lr_schedule(schedule.finetune_lr, schedule.finetune_epochs,
                                   schedule.finetune_decay,
                                   schedule.finetune_decay_every)
        train_epochs(model, dataset, epochs=schedule.finetune_epochs,
                     batch_size=schedule.batch_size, optimizer=sgd, seed=seed,
                     augmentation=schedule.augmentation, phase="finetune", log=log,
                     lr_schedule=lrs, epoch_offset=epoch_offset)

    accuracy_after = (evaluate_accuracy(model, eval_dataset)
                      if eval_dataset is not None else None)

    report = metrics.build_report(
        arch_before=arch_before, arch_after=model.arch, masks=masks,
        rate_histograms=histograms, convention=convention,
        params_before=params_before, params_after=model.param_count(),
        accuracy_before=accuracy_before, accuracy_after_prune=accuracy_after_prune,
        accuracy_after=accuracy_after)
    return PipelineResult(model=model, report=report, masks=masks, gates=all_gates,
                          stage_flops=stage_flops, stage_edge_mass=stage_edge_mass)
