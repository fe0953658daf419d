"""Cutting a model into tier segments and running each segment on its own."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedsl import nn_core
from fedsl.errors import DimensionError, ValidationError
from fedsl.nn_core import LayerKind, ModelSpec, Params

TIER_NAMES = {0: ("server",), 1: ("device", "server"), 2: ("device", "edge", "cloud")}


@dataclass(frozen=True)
class SplitPlan:
    cuts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "cuts", tuple(int(c) for c in self.cuts))
        if len(self.cuts) > 2:
            raise ValidationError("at most two cuts are supported")
        if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValidationError(f"cuts must be strictly increasing, got {list(self.cuts)}")

    @property
    def tier_names(self) -> tuple[str, ...]:
        return TIER_NAMES[len(self.cuts)]

    def validate(self, spec: ModelSpec) -> None:
        n = len(spec.layers)
        for c in self.cuts:
            if not 0 < c < n:
                raise ValidationError(f"cut {c} outside (0, {n})")


@dataclass
class Segment:
    layers: tuple
    params: Params
    tier: str
    start: int = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def flops_fwd(self, batch: int) -> int:
        return batch * sum(l.flops_fwd for l in self.layers)

    def flops_bwd(self, batch: int) -> int:
        return batch * sum(l.flops_bwd for l in self.layers)

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)


@dataclass
class SegmentCache:
    start: int
    inputs: list = field(repr=False)


def partition(spec: ModelSpec, params: Params, plan: SplitPlan) -> list[Segment]:
    plan.validate(spec)
    nn_core.check_params(spec.layers, params)
    bounds = [0, *plan.cuts, len(spec.layers)]
    segments = []
    p = 0
    for tier, (lo, hi) in zip(plan.tier_names, zip(bounds, bounds[1:])):
        layers = spec.layers[lo:hi]
        n_dense = sum(l.kind is LayerKind.DENSE for l in layers)
        segments.append(Segment(layers, list(params[p : p + n_dense]), tier, lo))
        p += n_dense
    return segments


def reassemble(segments: list[Segment]) -> tuple[tuple, Params]:
    layers: tuple = ()
    params: Params = []
    for seg in segments:
        layers += tuple(seg.layers)
        params += list(seg.params)
    return layers, params


def segment_forward(seg: Segment, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != seg.in_dim:
        raise DimensionError(
            f"{seg.tier} segment expects width {seg.in_dim}, got shape {np.shape(x)}"
        )
    out, inputs = nn_core.forward_layers(seg.layers, seg.params, x, offset=seg.start)
    return out, SegmentCache(seg.start, inputs)


def segment_backward(seg: Segment, cache: SegmentCache, grad_out: np.ndarray):
    if cache.start != seg.start or len(cache.inputs) != len(seg.layers):
        raise RuntimeError(f"cache does not belong to the {seg.tier} segment")
    return nn_core.backward_layers(seg.layers, seg.params, cache.inputs, grad_out)


def cut_width(spec: ModelSpec, cut: int) -> int:
    if not 0 < cut < len(spec.layers):
        raise ValidationError(f"cut {cut} outside (0, {len(spec.layers)})")
    return spec.layers[cut - 1].out_dim


def smashed_payload_bits(plan: SplitPlan, spec: ModelSpec, batch: int, precision: int = 64) -> int:
    """Bits for one smashed batch (or its gradient) across the first cut."""
    if not plan.cuts:
        raise ValidationError("plan has no cut")
    if precision < 1 or batch < 1:
        raise ValidationError("batch and precision must be positive")
    return batch * cut_width(spec, plan.cuts[0]) * precision


@dataclass
class SmashedData:
    activation: np.ndarray
    producing_client: int
    round_tag: int

    def payload_bits(self, precision: int = 64) -> int:
        return self.activation.size * precision
