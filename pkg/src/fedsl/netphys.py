"""Radio and compute cost models.

Path loss is log-distance, the link rate is Shannon capacity, and compute
energy follows the dynamic DVFS law ``kappa * cycles * f**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from fedsl.errors import InfeasibleError, ValidationError


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_hz: float = 1e7
    tx_power_dbm: float = 23.0
    noise_dbm: float = -85.0
    pl0_db: float = 40.0
    ref_dist_m: float = 1.0
    pl_exponent: float = 3.0
    packet_loss_rate: float = 0.0
    # "total": noise_dbm is in-band power; "psd": dBm/Hz, scaled by bandwidth.
    noise_mode: str = "total"

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValidationError("bandwidth must be positive")
        if not 0.0 <= self.packet_loss_rate <= 1.0:
            raise ValidationError("packet loss rate must be in [0, 1]")
        if self.noise_mode not in ("total", "psd"):
            raise ValidationError(f"unknown noise mode {self.noise_mode!r}")
        for name in ("tx_power_dbm", "noise_dbm", "pl0_db", "ref_dist_m", "pl_exponent"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.ref_dist_m <= 0:
            raise ValidationError("reference distance must be positive")

    @property
    def noise_power_dbm(self) -> float:
        if self.noise_mode == "psd":
            return self.noise_dbm + 10.0 * math.log10(self.bandwidth_hz)
        return self.noise_dbm


@dataclass(frozen=True)
class DeviceProfile:
    cpu_freq_hz: float = 1e9
    cycles_per_flop: float = 1.0
    kappa: float = 1e-28
    f_min: float = 1e8
    f_max: float = 2e9
    position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0 < self.f_min <= self.cpu_freq_hz <= self.f_max:
            raise ValidationError(
                f"need 0 < f_min <= f <= f_max, got {self.f_min}, {self.cpu_freq_hz}, {self.f_max}"
            )
        if self.kappa <= 0 or self.cycles_per_flop <= 0:
            raise ValidationError("kappa and cycles_per_flop must be positive")


@dataclass(frozen=True)
class Arena:
    width_m: float = 50.0
    height_m: float = 50.0
    server_position: tuple[float, float] = (25.0, 25.0)

    def __post_init__(self):
        if self.width_m <= 0 or self.height_m <= 0:
            raise ValidationError("arena dimensions must be positive")

    def contains(self, pos) -> bool:
        return 0 <= pos[0] <= self.width_m and 0 <= pos[1] <= self.height_m

    def distance(self, pos) -> float:
        return math.dist(pos, self.server_position)


def path_loss_db(ch: ChannelParams, d: float) -> float:
    if not d > 0:
        raise ValidationError(f"distance must be positive, got {d}")
    if d <= ch.ref_dist_m:
        return ch.pl0_db
    return ch.pl0_db + 10.0 * ch.pl_exponent * math.log10(d / ch.ref_dist_m)


def snr_db(ch: ChannelParams, d: float) -> float:
    return ch.tx_power_dbm - path_loss_db(ch, d) - ch.noise_power_dbm


def spectral_efficiency(ch: ChannelParams, d: float) -> float:
    return math.log2(1.0 + 10.0 ** (snr_db(ch, d) / 10.0))


def link_rate_bps(ch: ChannelParams, d: float) -> float:
    return ch.bandwidth_hz * spectral_efficiency(ch, d)


def tx_time_energy(ch: ChannelParams, d: float, bits: float) -> tuple[float, float]:
    """Airtime and transmitter energy for one attempt carrying ``bits``."""
    if bits < 0:
        raise ValidationError("bit count must be non-negative")
    if bits == 0:
        return 0.0, 0.0
    rate = link_rate_bps(ch, d)
    if not rate > 0:
        raise InfeasibleError(f"zero link rate at {d} m")
    t = bits / rate
    return t, dbm_to_watts(ch.tx_power_dbm) * t


def packet_delivered(rng, p: float) -> bool:
    """One Bernoulli trial; ``rng`` is anything with a ``random()`` method."""
    if p <= 0.0:
        return True
    if p >= 1.0:
        return False
    return rng.random() >= p


def compute_time(dev: DeviceProfile, flops: float) -> float:
    if flops < 0:
        raise ValidationError("flops must be non-negative")
    return flops * dev.cycles_per_flop / dev.cpu_freq_hz


def compute_energy(dev: DeviceProfile, flops: float) -> float:
    if flops < 0:
        raise ValidationError("flops must be non-negative")
    cycles = flops * dev.cycles_per_flop
    return dev.kappa * cycles * dev.cpu_freq_hz**2


@dataclass(frozen=True)
class WiredLink:
    """Lossless fixed-rate backhaul (edge to cloud)."""

    rate_bps: float = 1e9
    latency_s: float = 5e-3

    def transfer_time(self, bits: float) -> float:
        return self.latency_s + bits / self.rate_bps
