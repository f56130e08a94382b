"""Residual-network gating rules and the block-parallel two-stage schedule.

Inside a residual block only the inputs of the last one (basic block) or
two (bottleneck) convolutions are gated, so the block's output width always
matches its shortcut and the residual sum stays valid.  The block-parallel
variant trains all first-position gates of every non-downsampling block
simultaneously, then all second-position gates, skipping blocks whose
shortcut resamples or projects because those are the pruning-sensitive
ones.
"""

from __future__ import annotations

import warnings

from .model import Architecture, GateSite, ResidualBlock, gate_sites, trace_shapes
from .pruner import PruneSchedule


def residual_blocks(arch: Architecture) -> list[ResidualBlock]:
    return [spec for spec in arch.layers if isinstance(spec, ResidualBlock)]


def attach_residual_gates(arch: Architecture) -> list[GateSite]:
    """Gate sites inside residual blocks, per the block invariants.

    Basic blocks get one gate (input of the second conv); bottlenecks get
    two (inputs of the middle and last convs).  Raises if the architecture
    has no residual blocks or a block is malformed.
    """
    blocks = residual_blocks(arch)
    if not blocks:
        raise ValueError("architecture has no residual blocks; use the standard "
                         "layer-wise schedule instead")
    return [site for site in gate_sites(arch) if site.block is not None]


def rrbp_schedule(arch: Architecture, *, trigger_epochs: int = 7,
                  **settings) -> PruneSchedule:
    """Two grouped stages over all non-downsampling blocks.

    Stage 1 holds every block's first-position gate, stage 2 every
    second-position gate (bottlenecks only).  Empty stages are dropped; if
    every block downsamples the schedule is empty and a warning is issued.
    """
    sites = attach_residual_gates(arch)
    blocks = {b.name: b for b in residual_blocks(arch)}
    eligible = [s for s in sites if not blocks[s.block].has_downsample]
    if not eligible:
        warnings.warn("every residual block has a down-sampling shortcut; nothing "
                      "to prune under the block-parallel schedule")
    stage1 = [s.consumer for s in eligible if s.position == 1]
    stage2 = [s.consumer for s in eligible if s.position == 2]
    stages = [stage for stage in (stage1, stage2) if stage]
    return PruneSchedule(stages=stages, trigger_epochs=[trigger_epochs] * len(stages),
                         grouped=True, **settings)


def validate_residual_shapes(arch: Architecture) -> None:
    """Check every residual sum is shape-valid (raises ShapeError otherwise)."""
    trace_shapes(arch)
