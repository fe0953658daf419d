"""Communication/computation tuning knobs: quantizer, split search, DVFS and bandwidth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedsl import netphys
from fedsl.errors import InfeasibleError, ValidationError
from fedsl.nn_core import ModelSpec
from fedsl.netphys import ChannelParams, DeviceProfile


@dataclass(frozen=True)
class QuantizerConfig:
    bits: int = 8
    # None means calibrate from the tensor being sent.
    clip: float | None = None
    percentile: float = 99.9

    def __post_init__(self):
        if int(self.bits) != self.bits or not 1 <= self.bits <= 16:
            raise ValidationError(f"quantizer bits must be an integer in [1, 16], got {self.bits}")
        if self.clip is not None and not self.clip > 0:
            raise ValidationError("clip range must be positive")


def calibrate_clip(t: np.ndarray, percentile: float = 99.9) -> float:
    r = float(np.percentile(np.abs(t), percentile)) if t.size else 0.0
    if r > 0:
        return r
    # All-zero (or near) batch: fall back to the largest magnitude, then 1.
    m = float(np.max(np.abs(t))) if t.size else 0.0
    return m if m > 0 else 1.0


def quantize_uniform(t: np.ndarray, q: QuantizerConfig):
    """Map ``t`` onto ``2**bits`` evenly spaced levels spanning [-R, R].

    Returns (codes, dequantized, payload_bits). Rounding is half-to-even.
    """
    t = np.asarray(t, dtype=np.float64)
    r = q.clip if q.clip is not None else calibrate_clip(t, q.percentile)
    steps = 2**q.bits - 1
    step = 2.0 * r / steps
    codes = np.rint((np.clip(t, -r, r) + r) / step)
    np.clip(codes, 0, steps, out=codes)
    deq = codes * step - r
    # Pin the grid endpoints exactly.
    deq[codes == steps] = r
    return codes.astype(np.int64), deq, int(t.size) * q.bits


# ---------------------------------------------------------------------------
# split layer search


@dataclass(frozen=True)
class CutCost:
    cut: int
    device_flops: float
    server_flops: float
    up_bits: float
    down_bits: float


def cost_profile(spec: ModelSpec, batch: int, precision: int = 64) -> list[CutCost]:
    """Per-cut workload for one training iteration of ``batch`` samples."""
    if len(spec.layers) < 2:
        raise ValidationError("need at least two layers to place a cut")
    per_layer = [batch * (l.flops_fwd + l.flops_bwd) for l in spec.layers]
    total = sum(per_layer)
    rows = []
    dev = 0
    for c in range(1, len(spec.layers)):
        dev += per_layer[c - 1]
        bits = batch * spec.layers[c - 1].out_dim * precision
        rows.append(CutCost(c, dev, total - dev, bits, bits))
    return rows


@dataclass(frozen=True)
class CostRow:
    cut: int
    device_s: float
    uplink_s: float
    downlink_s: float
    server_s: float
    total_s: float
    total_j: float

    def objective(self, objective: str, latency_weight: float = 0.5) -> float:
        if objective == "latency":
            return self.total_s
        if objective == "energy":
            return self.total_j
        if objective == "weighted":
            return latency_weight * self.total_s + (1.0 - latency_weight) * self.total_j
        raise ValidationError(f"unknown objective {objective!r}")


COST_COLUMNS = ("cut", "device_s", "uplink_s", "downlink_s", "server_s", "total_s", "total_j")


def evaluate_costs(
    profile: list[CutCost],
    dev: DeviceProfile,
    ch: ChannelParams,
    d: float,
    server: DeviceProfile | None = None,
) -> list[CostRow]:
    rows = []
    for c in profile:
        t_dev = netphys.compute_time(dev, c.device_flops)
        e_dev = netphys.compute_energy(dev, c.device_flops)
        t_up, e_up = netphys.tx_time_energy(ch, d, c.up_bits)
        t_down, _ = netphys.tx_time_energy(ch, d, c.down_bits)
        t_srv = netphys.compute_time(server, c.server_flops) if server is not None else 0.0
        rows.append(
            CostRow(c.cut, t_dev, t_up, t_down, t_srv, t_dev + t_up + t_down + t_srv, e_dev + e_up)
        )
    return rows


def select_split_layer(
    spec: ModelSpec,
    dev: DeviceProfile,
    ch: ChannelParams,
    d: float,
    batch: int,
    objective: str = "latency",
    server: DeviceProfile | None = None,
    precision: int = 64,
    latency_weight: float = 0.5,
) -> tuple[int, list[CostRow]]:
    """Exhaustive search over cut positions; ties go to the lower index."""
    table = evaluate_costs(cost_profile(spec, batch, precision), dev, ch, d, server)
    best = min(table, key=lambda row: (row.objective(objective, latency_weight), row.cut))
    return best.cut, table


def format_cost_table(table: list[CostRow]) -> str:
    lines = [",".join(COST_COLUMNS)]
    for row in table:
        lines.append(",".join(repr(getattr(row, col)) for col in COST_COLUMNS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# resource allocation


def allocate_frequency(cycles: float, deadline_s: float, dev: DeviceProfile) -> float:
    """Lowest-energy CPU frequency that still finishes ``cycles`` by the deadline."""
    if not cycles > 0 or not deadline_s > 0:
        raise ValidationError("cycles and deadline must be positive")
    if cycles / dev.f_max > deadline_s:
        raise InfeasibleError(
            f"{cycles:g} cycles need {cycles / dev.f_max:g} s at f_max, deadline is {deadline_s:g} s"
        )
    return min(max(cycles / deadline_s, dev.f_min), dev.f_max)


def allocate_bandwidth(clients, total_hz: float) -> list[float]:
    """Split ``total_hz`` so every (payload_bits, spectral_eff) client finishes together."""
    clients = list(clients)
    if not clients:
        raise ValidationError("no clients to allocate bandwidth to")
    if not total_hz > 0:
        raise ValidationError("total bandwidth must be positive")
    demand = []
    for bits, se in clients:
        if not bits > 0 or not se > 0:
            raise ValidationError("payloads and spectral efficiencies must be positive")
        demand.append(bits / se)
    norm = math.fsum(demand)
    shares = [total_hz * x / norm for x in demand]
    # The largest share absorbs the rounding remainder so the sum is exact
    # without costing a small share its relative precision.
    big = max(range(len(shares)), key=shares.__getitem__)
    others = [i for i in range(len(shares)) if i != big]

    def absorb():
        # One correctly rounded fsum keeps the error within half an ulp of B.
        shares[big] = math.fsum([total_hz] + [-shares[i] for i in others])

    absorb()
    # An exact half-ulp tie can still round away from B; nudging a smaller
    # share by one of its own ulps breaks the tie.
    for j in sorted(others, key=shares.__getitem__, reverse=True)[:4]:
        if math.fsum(shares) == total_hz:
            break
        shares[j] = math.nextafter(shares[j], math.inf if math.fsum(shares) < total_hz else 0.0)
        absorb()
    return shares
