"""Core configuration objects shared by all simulator layers.

All quantities are kept in SI units internally: Watts, Hertz, seconds,
bits.  dBm conversion happens at the CLI boundary only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def dbm_to_watts(dbm: float) -> float:
    """Convert a dBm figure to Watts."""
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    """Convert Watts to dBm (watts must be > 0)."""
    if watts <= 0:
        raise ValueError("watts must be positive")
    return 10.0 * np.log10(watts) + 30.0


@dataclass(frozen=True)
class ClusterConfig:
    """Geometry and PHY-layer constants of one CoMP cluster.

    The cluster is symmetric: M remote radio heads, one served UE each.
    The antenna counts must satisfy M*Nr >= Nt > (M-1)*Nr so that
    transmit zero-forcing of private streams is possible while shared
    streams can still occupy the full receive space.
    """

    m: int = 3                      # RRH count == UE count
    nt: int = 5                     # transmit antennas per RRH
    nr: int = 2                     # receive antennas per UE
    bandwidth_hz: float = 20e6
    frame_duration_s: float = 0.01  # tau
    noise_power_w: float = dbm_to_watts(-15.0)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least two RRH/UE pairs")
        if self.nt < 1 or self.nr < 1:
            raise ValueError("antenna counts must be >= 1")
        if not (self.m * self.nr >= self.nt > (self.m - 1) * self.nr):
            raise ValueError(
                f"antenna regime violated: need M*Nr >= Nt > (M-1)*Nr, "
                f"got M={self.m}, Nt={self.nt}, Nr={self.nr}"
            )
        if self.bandwidth_hz <= 0 or self.frame_duration_s <= 0:
            raise ValueError("bandwidth and frame duration must be positive")
        if self.noise_power_w <= 0:
            raise ValueError("noise power must be positive")


@dataclass(frozen=True)
class TrafficConfig:
    """Bursty traffic model: Poisson packet arrivals, exponential sizes."""

    arrival_rate: float = 2.5        # packets/s per UE
    mean_packet_bits: float = 4e6
    buffer_bits: float = 32e6        # hard cap per queue
    delay_weight: float = 1.0        # beta, relative urgency of each UE

    def __post_init__(self):
        if self.arrival_rate < 0:
            raise ValueError("arrival rate must be >= 0")
        if self.mean_packet_bits <= 0 or self.buffer_bits <= 0:
            raise ValueError("packet size and buffer must be positive")
        if self.delay_weight <= 0:
            raise ValueError("delay weight must be positive")

    @property
    def load_bps(self) -> float:
        """Mean offered load in bits/s (packets/s times mean size)."""
        return self.arrival_rate * self.mean_packet_bits


@dataclass(frozen=True)
class ConstraintConfig:
    """Per-RRH long-run average resource budgets."""

    max_power_w: float = dbm_to_watts(10.0)   # average transmit power cap
    max_fronthaul_bps: float = 20e6           # average fronthaul rate cap

    def __post_init__(self):
        if self.max_power_w <= 0 or self.max_fronthaul_bps <= 0:
            raise ValueError("resource budgets must be positive")
