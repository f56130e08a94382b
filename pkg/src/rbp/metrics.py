"""FLOPs accounting, compression rate, and the pruning report.

Conventions matter: a multiply-accumulate counts once under "mac" and twice
under "flop".  Published model totals mix the two, so every report records
which convention produced its numbers.  Convolutions contribute
Cin*Cout*kH*kW*Hout*Wout MACs, fully-connected layers in*out; pooling and
activations are excluded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Architecture, Conv2d, Linear, Model, atomic_weighted_layers, \
    trace_shapes

CONVENTIONS = ("mac", "flop")


def _as_arch(model_or_arch) -> Architecture:
    return model_or_arch.arch if isinstance(model_or_arch, Model) else model_or_arch


def count_macs(model_or_arch) -> int:
    arch = _as_arch(model_or_arch)
    shapes = trace_shapes(arch)
    total = 0
    for spec in atomic_weighted_layers(arch):
        if isinstance(spec, Conv2d):
            _, (out_c, oh, ow) = shapes[spec.name]
            total += spec.in_channels * out_c * spec.kernel * spec.kernel * oh * ow
        elif isinstance(spec, Linear):
            total += spec.in_features * spec.out_features
    return int(total)


def count_flops(model_or_arch, convention: str = "flop") -> int:
    """Total forward cost under the given counting convention."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    macs = count_macs(model_or_arch)
    return macs * 2 if convention == "flop" else macs


def arch_param_count(model_or_arch) -> int:
    if isinstance(model_or_arch, Model):
        return model_or_arch.param_count()
    total = 0
    for spec in atomic_weighted_layers(model_or_arch):
        if isinstance(spec, Conv2d):
            total += spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
            if spec.bias:
                total += spec.out_channels
        else:
            total += spec.out_features * spec.in_features
            if spec.bias:
                total += spec.out_features
    return total


def compression_rate(before, after) -> float:
    """Parameter count before / after."""
    return arch_param_count(before) / arch_param_count(after)


HISTOGRAM_BINS = 20


def rate_histogram(rates: np.ndarray) -> np.ndarray:
    """Counts over 20 uniform bins spanning [0, 1]; sums to len(rates)."""
    counts, _ = np.histogram(np.asarray(rates), bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return counts


def edge_mass(rates: np.ndarray, low: float = 0.1, high: float = 0.9) -> float:
    """Fraction of rates in [0, low] union [high, 1] (the bimodality measure)."""
    r = np.asarray(rates)
    return float(((r <= low) | (r >= high)).mean())


@dataclass
class LayerPruneRow:
    layer: str  # producer whose filters were pruned
    consumer: str
    remained: int
    original: int
    percent: float
    cumulative_flops_ratio: float


@dataclass
class PruneReport:
    convention: str
    flops_before: int
    flops_after: int
    flops_ratio: float
    params_before: int
    params_after: int
    compression: float
    accuracy_before: float | None
    accuracy_after_prune: float | None
    accuracy_after: float | None
    rows: list[LayerPruneRow] = field(default_factory=list)
    rate_histograms: dict[str, list[int]] = field(default_factory=dict)

    def validate(self) -> None:
        for row in self.rows:
            if row.remained > row.original:
                raise ValueError(f"{row.layer}: remained {row.remained} exceeds "
                                 f"original {row.original}")
        if self.flops_after > self.flops_before:
            raise ValueError("FLOPs grew during pruning")
        for layer, counts in self.rate_histograms.items():
            if len(counts) != HISTOGRAM_BINS:
                raise ValueError(f"{layer}: histogram has {len(counts)} bins")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PruneReport":
        raw = json.loads(text)
        rows = [LayerPruneRow(**r) for r in raw.pop("rows")]
        return cls(rows=rows, **raw)


def build_report(*, arch_before: Architecture, arch_after: Architecture, masks,
                 rate_histograms: dict[str, list[int]], convention: str,
                 params_before: int, params_after: int,
                 accuracy_before=None, accuracy_after_prune=None,
                 accuracy_after=None) -> PruneReport:
    """Aggregate pipeline artifacts into a deterministic report.

    `masks` arrive in fold order; each row's cumulative FLOPs ratio is the
    baseline cost over the cost with all masks up to and including that row
    applied.
    """
    flops_before = count_flops(arch_before, convention=convention)
    flops_after = count_flops(arch_after, convention=convention)
    rows = []
    from .pruner import apply_masks_to_arch  # local import: pruner imports metrics
    applied = []
    for m in masks:
        applied.append(m)
        flops_now = count_flops(apply_masks_to_arch(arch_before, applied),
                                convention=convention)
        rows.append(LayerPruneRow(
            layer=m.producer, consumer=m.layer_id, remained=m.remained,
            original=m.original, percent=100.0 * m.remained / m.original,
            cumulative_flops_ratio=flops_before / flops_now))
    report = PruneReport(
        convention=convention, flops_before=flops_before, flops_after=flops_after,
        flops_ratio=flops_before / flops_after, params_before=params_before,
        params_after=params_after, compression=params_before / params_after,
        accuracy_before=accuracy_before, accuracy_after_prune=accuracy_after_prune,
        accuracy_after=accuracy_after, rows=rows,
        rate_histograms={k: list(map(int, v)) for k, v in rate_histograms.items()})
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Report files.


def write_report_files(report: PruneReport, out_dir) -> list[str]:
    """Write report.json, channels.csv, and rates-<layer>.csv; returns names."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = ["report.json", "channels.csv"]
    (out / "report.json").write_text(report.to_json())
    lines = ["layer,remained,original,percent,cumulative_flops_ratio"]
    for row in report.rows:
        lines.append(f"{row.layer},{row.remained},{row.original},{row.percent!r},"
                     f"{row.cumulative_flops_ratio!r}")
    (out / "channels.csv").write_text("\n".join(lines) + "\n")
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    for layer, counts in report.rate_histograms.items():
        name = f"rates-{layer}.csv"
        rows = ["bin_low,bin_high,count"]
        for i, count in enumerate(counts):
            rows.append(f"{edges[i]!r},{edges[i + 1]!r},{count}")
        (out / name).write_text("\n".join(rows) + "\n")
        written.append(name)
    return written
