"""Per-UE traffic queues in bits: bursty arrivals, deliveries, overflow.

The queue update for one frame is

    post = max(q - delivered, 0)
    q'   = min(post + arrivals, buffer)

with the overflow (anything clipped by the buffer cap) tallied as
dropped.  Queue bookkeeping runs at whole-bit granularity: arrivals are
rounded and service is floored to integer bits, so every quantity is an
integer-valued float and arrived == delivered + dropped + backlog holds
exactly over any run.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import TrafficConfig


@dataclass(frozen=True)
class QueueState:
    """Backlogs in bits: ``q`` after arrivals, ``post`` after service only."""

    q: np.ndarray
    post: np.ndarray

    @staticmethod
    def empty(m: int) -> "QueueState":
        return QueueState(q=np.zeros(m), post=np.zeros(m))


def draw_arrivals(cfg: TrafficConfig, tau: float, m: int,
                  rng: np.random.Generator, frames: int | None = None) -> np.ndarray:
    """Total arriving bits per UE for one frame or a batch of frames.

    Packet counts are Poisson(rate * tau) and sizes exponential with the
    configured mean, independent across UEs and frames.  Sizes are
    rounded to whole bits (at megabit packet scales the distortion is
    negligible but it keeps the queue ledger exact).
    """
    if tau <= 0:
        raise ValueError("frame duration must be positive")
    bits, _, _ = draw_arrival_packets(cfg, tau, m, rng, frames)
    return bits


def draw_arrival_packets(cfg: TrafficConfig, tau: float, m: int,
                         rng: np.random.Generator, frames: int | None = None):
    """Like :func:`draw_arrivals` but also exposes packet boundaries.

    Returns (bits, counts, sizes): ``counts`` has the same shape as
    ``bits``; ``sizes`` is a flat array of per-packet bits ordered by
    frame then UE, so ``np.split(sizes, counts.ravel().cumsum()[:-1])``
    recovers the per-(frame, ue) packet lists.
    """
    if tau <= 0:
        raise ValueError("frame duration must be positive")
    shape = ((frames,) if frames is not None else ()) + (m,)
    counts = rng.poisson(cfg.arrival_rate * tau, size=shape)
    total = int(counts.sum())
    sizes = np.rint(rng.exponential(cfg.mean_packet_bits, size=total))
    sizes = np.maximum(sizes, 1.0)  # a packet carries at least one bit
    # sum packet sizes into their (frame, ue) slots
    owner = np.repeat(np.arange(counts.size), counts.ravel())
    flat = np.zeros(counts.size)
    np.add.at(flat, owner, sizes)
    bits = flat.reshape(shape)
    return bits, counts, sizes


def advance_queue(state: QueueState, delivered: np.ndarray, arrivals: np.ndarray,
                  buffer_bits: float):
    """One frame of queue dynamics.

    Returns (new_state, dropped) where ``dropped`` counts the bits lost
    to buffer overflow this frame.  ``delivered`` is floored to whole
    bits; arrivals are expected integer-valued already.
    """
    delivered = np.floor(np.asarray(delivered, dtype=float))
    arrivals = np.asarray(arrivals, dtype=float)
    if np.any(delivered < 0) or np.any(arrivals < 0):
        raise ValueError("delivered and arrival bits must be nonnegative")
    post = np.maximum(state.q - delivered, 0.0)
    offered = post + arrivals
    q_next = np.minimum(offered, float(buffer_bits))
    dropped = offered - q_next
    return QueueState(q=q_next, post=post), dropped


def delay_cost(state: QueueState, cfg: TrafficConfig, weights=None) -> float:
    """Weighted backlog-delay of the current queues, in seconds.

    Each UE contributes weight * q / load where load is the mean offered
    bit rate; the ratio is that UE's average waiting time by Little's
    law.
    """
    load = cfg.load_bps
    if load <= 0:
        raise ValueError("delay cost undefined for zero offered load")
    w = np.broadcast_to(
        cfg.delay_weight if weights is None else np.asarray(weights, dtype=float),
        state.q.shape,
    )
    return float(np.sum(w * state.q / load))


class PacketTagger:
    """FIFO packet mirror of one UE's queue, for sojourn-time statistics.

    The queue itself is plain bits; this tracker replays the same
    dynamics at packet granularity.  Service consumes from the head,
    overflow clips from the tail (newest arrivals).  Only packets
    delivered intact contribute a sojourn sample; anything truncated by
    overflow is counted as dropped.
    """

    def __init__(self):
        self._fifo = deque()   # [remaining_bits, arrival_frame, intact]
        self.arrival_frames = []
        self.depart_frames = []
        self.dropped_packets = 0

    def step(self, frame: int, served_bits: float, packet_sizes, dropped_bits: float):
        """Advance one frame: serve, admit new packets, clip overflow."""
        remaining = float(served_bits)
        while remaining > 0 and self._fifo:
            head = self._fifo[0]
            take = min(head[0], remaining)
            head[0] -= take
            remaining -= take
            if head[0] <= 0:
                self._fifo.popleft()
                if head[2]:
                    self.arrival_frames.append(head[1])
                    self.depart_frames.append(frame)
        for size in packet_sizes:
            self._fifo.append([float(size), frame, True])
        clip = float(dropped_bits)
        while clip > 0 and self._fifo:
            tail = self._fifo[-1]
            take = min(tail[0], clip)
            tail[0] -= take
            clip -= take
            if tail[2]:
                tail[2] = False
                self.dropped_packets += 1
            if tail[0] <= 0:
                self._fifo.pop()

    def mean_sojourn_frames(self, min_arrival_frame: int = 0) -> float:
        """Mean frames from arrival to full delivery, intact packets only."""
        arr = np.asarray(self.arrival_frames)
        dep = np.asarray(self.depart_frames)
        keep = arr >= min_arrival_frame
        if not np.any(keep):
            return float("nan")
        return float(np.mean(dep[keep] - arr[keep]))
