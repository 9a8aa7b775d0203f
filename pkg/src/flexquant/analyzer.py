"""Offline KL analysis of quantized weights and the switch plan it produces.

Each linear layer's weights and their quantize/dequantize round trip are
histogrammed over shared edges spanning the original weight range; the KL
divergence KL(original || quantized), in nats, ranks layers by how much
the target bit-width disturbs them. Layers with the smallest divergence
are stepped down first.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionError, FormatError, InputError
from .quantizer import ASYMMETRIC, dequantize, quantize

log = logging.getLogger(__name__)

FP_BITS = 16
HIST_SMOOTHING = 1e-10
DEFAULT_BINS = 2048
PLAN_HEADER = "flexquant-plan v1"


@dataclass(frozen=True)
class LayerKlReport:
    layer_id: str
    bits: int
    kl: float
    param_count: int


@dataclass(frozen=True)
class PlanEntry:
    layer_id: str
    from_bits: int
    to_bits: int
    kl: float


@dataclass
class SwitchPlan:
    """Ordered layer transitions; each transition block is sorted by KL."""

    entries: list[PlanEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __add__(self, other: "SwitchPlan") -> "SwitchPlan":
        return SwitchPlan(self.entries + other.entries)

    def layer_ids(self) -> set[str]:
        return {e.layer_id for e in self.entries}

    def for_start(self, start_bits: int) -> "SwitchPlan":
        """Entries reachable when every layer begins at ``start_bits``."""
        return SwitchPlan([e for e in self.entries if e.from_bits <= start_bits])

    def save(self, path) -> None:
        Path(path).write_text(dumps_plan(self))

    @classmethod
    def load(cls, path) -> "SwitchPlan":
        return loads_plan(Path(path).read_text())


def dumps_plan(plan: SwitchPlan) -> str:
    lines = [PLAN_HEADER]
    for e in plan.entries:
        lines.append(f"layer={e.layer_id} from={e.from_bits} to={e.to_bits} kl={e.kl!r}")
    return "\n".join(lines) + "\n"


def loads_plan(text: str) -> SwitchPlan:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0].strip() != PLAN_HEADER:
        raise FormatError(f"plan file must start with {PLAN_HEADER!r}")
    entries = []
    for ln in lines[1:]:
        try:
            fields = dict(tok.split("=", 1) for tok in ln.split())
            entries.append(
                PlanEntry(fields["layer"], int(fields["from"]), int(fields["to"]), float(fields["kl"]))
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad plan record {ln!r}") from exc
    return SwitchPlan(entries)


def histogram_edges(w, bins: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise InputError("cannot histogram an empty tensor")
    if bins < 1:
        raise InputError("need at least one bin")
    lo, hi = float(w.min()), float(w.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def weight_histogram(w, edges) -> np.ndarray:
    """Smoothed probability vector of ``w`` over ``edges``.

    Bins are half-open ``[e_i, e_{i+1})`` except the last, which is closed.
    Values outside the edges are clipped into the end bins.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    edges = np.asarray(edges, dtype=np.float64)
    if w.size == 0:
        raise InputError("cannot histogram an empty tensor")
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InputError("edges must be strictly increasing with at least two entries")
    counts, _ = np.histogram(np.clip(w, edges[0], edges[-1]), bins=edges)
    p = counts / w.size + HIST_SMOOTHING
    return p / p.sum()


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    if np.any(p <= 0) or np.any(q <= 0):
        raise InputError("KL inputs must be strictly positive (smooth them first)")
    return float(np.sum(p * np.log(p / q)))


def layer_kl(w, bits: int, bins: int = DEFAULT_BINS, mode: str = ASYMMETRIC) -> float:
    w = np.asarray(w, dtype=np.float64)
    edges = histogram_edges(w, bins)
    w_hat = dequantize(quantize(w, bits, mode))
    return kl_divergence(weight_histogram(w, edges), weight_histogram(w_hat, edges))


def analyze_model(
    weights: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    target_bits: int,
    bins: int = DEFAULT_BINS,
    mode: str = ASYMMETRIC,
) -> list[LayerKlReport]:
    """One :class:`LayerKlReport` per non-empty linear layer, in input order."""
    if bins < 2:
        raise InputError("bins must be >= 2")
    items = weights.items() if isinstance(weights, Mapping) else weights
    reports = []
    for layer_id, w in items:
        w = np.asarray(w)
        if w.size == 0:
            log.warning("skipping layer %s: no parameters", layer_id)
            continue
        reports.append(LayerKlReport(layer_id, target_bits, layer_kl(w, target_bits, bins, mode), int(w.size)))
    return reports


def build_switch_plan(reports: list[LayerKlReport], from_bits: int, to_bits: int) -> SwitchPlan:
    if not reports:
        raise InputError("no layer reports to plan from")
    seen = set()
    for r in reports:
        if r.layer_id in seen:
            raise InputError(f"duplicate layer id {r.layer_id}")
        seen.add(r.layer_id)
        if math.isnan(r.kl):
            raise InputError(f"layer {r.layer_id} has NaN KL")
    ordered = sorted(reports, key=lambda r: (r.kl, r.layer_id))
    return SwitchPlan([PlanEntry(r.layer_id, from_bits, to_bits, r.kl) for r in ordered])


def build_ladder_plan(
    weights: Mapping[str, np.ndarray],
    ladder: Iterable[int] = (FP_BITS, 8, 4),
    bins: int = DEFAULT_BINS,
    mode: str = ASYMMETRIC,
) -> SwitchPlan:
    """Concatenate one KL-sorted plan per consecutive rung pair of ``ladder``."""
    rungs = list(ladder)
    plan = SwitchPlan()
    for hi, lo in zip(rungs, rungs[1:]):
        plan = plan + build_switch_plan(analyze_model(weights, lo, bins, mode), hi, lo)
    return plan
