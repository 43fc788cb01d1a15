"""Closed-loop experiment harness.

One run wires the full pipeline frame by frame: draw fading and its BBU
estimate, build hybrid precoders from the estimate, pick powers and
rates (queue-aware controller or a throughput baseline), evaluate the
allocation against the true channel, advance the traffic queues, and
let the controller learn from what it observed.

Channel and arrival randomness are seeded per replication only, never
per scheme, so scheme comparisons ride on common random numbers.
Identical configs and seeds reproduce output files byte for byte.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .allocator import (
    Feedback,
    LearnerState,
    StepSchedule,
    allocate,
    learn_value,
    stage_costs,
    track_margin,
    update_multipliers,
)
from .channel import draw_channel
from .config import ClusterConfig, ConstraintConfig, TrafficConfig
from .hcomp import (
    AllocationAction,
    StreamSplit,
    build_precoders,
    link_gains,
    outcome_from_gains,
)
from .queueing import PacketTagger, QueueState, advance_queue, draw_arrival_packets

SCHEMES = ("QAH-CoMP", "CAH-CoMP", "JP-CoMP", "CB-CoMP")
SUMMARY_SCHEMA = 1

_CHANNEL_STREAM = 0
_TRAFFIC_STREAM = 1


def default_split(scheme: str, cluster: ClusterConfig) -> StreamSplit:
    """Operating split of each scheme: hybrid, all-shared or all-private."""
    if scheme in ("QAH-CoMP", "CAH-CoMP"):
        return StreamSplit.max_dof(cluster)
    if scheme == "JP-CoMP":
        return StreamSplit.all_shared(cluster)
    if scheme == "CB-CoMP":
        return StreamSplit.all_private(cluster)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one closed-loop run needs, plus sweep bookkeeping."""

    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    scheme: str = "QAH-CoMP"
    split: StreamSplit | None = None
    sigma: float = 0.05
    frames: int = 2000
    warmup: int | None = None       # default: first 20% of frames
    train_frames: int = 0           # controller warm-up shared by replications
    seed: int = 0
    replications: int = 20
    chunk: int = 2048
    snapshot_every: int = 100       # value-table snapshot cadence (QAH)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.warmup is not None and not (0 <= self.warmup < self.frames):
            raise ValueError("warmup must lie inside the run")
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError("sigma must lie in [0, 1]")
        if self.replications < 1 or self.chunk < 1 or self.snapshot_every < 1:
            raise ValueError("replications, chunk and snapshot cadence must be >= 1")
        if self.train_frames < 0:
            raise ValueError("training frames must be >= 0")

    @property
    def effective_warmup(self) -> int:
        return self.warmup if self.warmup is not None else self.frames // 5

    @property
    def effective_split(self) -> StreamSplit:
        return self.split if self.split is not None else default_split(self.scheme, self.cluster)


@dataclass
class MetricsRecord:
    """Aggregated outcome of one replication at one sweep point."""

    scheme: str
    arrival_rate: float
    max_power_w: float
    max_fronthaul_bps: float
    sigma: float
    frames: int
    warmup: int
    seed: int
    replication: int
    delay_tagged_s: float
    delay_little_s: float
    avg_power_w: float
    run_avg_power_max_w: float
    avg_fronthaul_bps: float
    run_avg_fronthaul_max_bps: float
    drop_rate: float
    arrived_bits: float
    delivered_bits: float
    dropped_bits: float
    backlog_bits: float
    multiplier_min: float
    value_snapshots: np.ndarray | None = None   # (K, N) for UE 0, QAH only
    snapshot_frames: np.ndarray | None = None
    power_trace: np.ndarray | None = None       # (frames, M) when traced
    fronthaul_trace: np.ndarray | None = None


CSV_COLUMNS = [
    "scheme", "arrival_rate", "max_power_w", "max_fronthaul_bps", "sigma",
    "frames", "warmup", "seed", "replication",
    "delay_tagged_s", "delay_little_s",
    "avg_power_w", "run_avg_power_max_w",
    "avg_fronthaul_bps", "run_avg_fronthaul_max_bps",
    "drop_rate", "arrived_bits", "delivered_bits", "dropped_bits", "backlog_bits",
    "multiplier_min",
]


# ---------------------------------------------------------------------------
# throughput-greedy baselines
# ---------------------------------------------------------------------------

class ThroughputPolicy:
    """Channel-aware allocation that ignores the queues entirely.

    Powers water-fill the design gains against the learned power prices;
    rates track the margin-adapted capacity estimate (the same quantile
    margin tracker the queue-aware controller uses); a fronthaul price
    above one gates a stream class off for the frame.  Long-run
    feasibility of both average budgets comes from the projected dual
    updates in :meth:`observe`.
    """

    def __init__(self, cluster: ClusterConfig, constraints: ConstraintConfig,
                 split: StreamSplit, dual_scale: float = 0.5, dual_exp: float = 0.6):
        split.validate(cluster)
        self.cluster = cluster
        self.constraints = constraints
        self.split = split
        self.dual_scale = dual_scale
        self.dual_exp = dual_exp
        m = cluster.m
        self.margin_s = np.full(m, 0.5)
        self.margin_p = np.full(m, 0.5)
        self.price_power = np.zeros(m)    # in units of the power budget
        self.price_rate = np.zeros(m)     # in units of the fronthaul budget
        self.last_cap_s = np.zeros(m)
        self.last_cap_p = np.zeros(m)
        self.t = 0

    def _waterfill(self, gains: np.ndarray, price_norm: np.ndarray) -> np.ndarray:
        """Per-stream power against a budget-normalized price, capped."""
        cap = 4.0 * self.constraints.max_power_w
        noise = self.cluster.noise_power_w
        price_w = price_norm / self.constraints.max_power_w
        level = 1.0 / (math.log(2.0) * np.maximum(price_w, 1e-300))
        return np.clip(level - noise / np.maximum(gains, 1e-300), 0.0, cap)

    def act(self, gain_shared, gain_private, rho, feedback: Feedback | None) -> AllocationAction:
        """Allocation for one frame from the design gains of that frame."""
        self.t += 1
        if feedback is not None and feedback.c_shared is not None:
            self.margin_s = track_margin(self.margin_s, feedback.c_shared, self.last_cap_s)
            self.margin_p = track_margin(self.margin_p, feedback.c_private, self.last_cap_p)

        m = self.cluster.m
        bw = self.cluster.bandwidth_hz
        noise = self.cluster.noise_power_w
        rate_cap = 4.0 * self.constraints.max_fronthaul_bps
        price_s_rate = float(np.sum(self.price_rate))

        act = AllocationAction.zeros(self.split)
        for i in range(m):
            ls = self.split.shared[i]
            lp = self.split.private[i]
            est_s = est_p = 0.0
            if lp:
                lam = np.full(lp, self.price_power[i])
                p = self._waterfill(gain_private[i], lam)
                act.p_private[i] = p
                est_p = bw * float(np.sum(np.log2(1.0 + gain_private[i] * p / noise)))
                if self.price_rate[i] < 1.0:
                    act.r_private[i] = min(self.margin_p[i] * est_p, rate_cap)
            if ls:
                lam = rho[i][:, :ls].T @ self.price_power
                p = self._waterfill(gain_shared[i], lam)
                act.p_shared[i] = p
                est_s = bw * float(np.sum(np.log2(1.0 + gain_shared[i] * p / noise)))
                if price_s_rate < 1.0:
                    act.r_shared[i] = min(self.margin_s[i] * est_s, rate_cap)
            self.last_cap_s[i] = est_s
            self.last_cap_p[i] = est_p
        return act

    def observe(self, rrh_power_w: np.ndarray, fronthaul_bps: np.ndarray) -> None:
        """Projected dual ascent on the normalized budget excesses."""
        zeta = self.dual_scale * float(self.t) ** (-self.dual_exp)
        self.price_power = np.maximum(
            self.price_power + zeta * (rrh_power_w / self.constraints.max_power_w - 1.0), 0.0)
        self.price_rate = np.maximum(
            self.price_rate + zeta * (fronthaul_bps / self.constraints.max_fronthaul_bps - 1.0), 0.0)

    def clone(self) -> "ThroughputPolicy":
        """Independent copy; the original keeps adapting unaffected."""
        dup = copy.copy(self)
        for name in ("margin_s", "margin_p", "price_power", "price_rate",
                     "last_cap_s", "last_cap_p"):
            setattr(dup, name, getattr(self, name).copy())
        return dup


def baseline_policy(scheme: str, cluster: ClusterConfig,
                    constraints: ConstraintConfig,
                    split: StreamSplit | None = None) -> ThroughputPolicy:
    """Construct the throughput-greedy controller for a baseline scheme."""
    if scheme == "QAH-CoMP":
        raise ValueError("QAH-CoMP is the learned controller, not a baseline")
    return ThroughputPolicy(cluster, constraints,
                            split or default_split(scheme, cluster))


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def _rng_for(seed: int, replication: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replication, stream))
    return np.random.default_rng(ss)


# replication slot reserved for the shared training phase
_TRAIN_REPLICATION = 10 ** 6


def build_controller(cfg: ExperimentConfig):
    """Fresh controller for the configured scheme.

    The queue-aware controller runs the smoothed capacity-margin
    gradient variant: pure ACK/NACK gradients deadlock above capacity
    (nothing pulls an overshooting rate back down once the fronthaul
    price decays).
    """
    split = cfg.effective_split
    if cfg.scheme == "QAH-CoMP":
        return LearnerState.create(cfg.cluster, cfg.traffic, cfg.constraints,
                                   split, gradient_mode="smoothed")
    return ThroughputPolicy(cfg.cluster, cfg.constraints, split)


def train_controller(cfg: ExperimentConfig):
    """Run the configured training phase and return the trained controller.

    Training consumes its own random streams (shared across schemes, so
    trained controllers stay comparable) and discards all metrics.
    """
    controller = build_controller(cfg)
    if cfg.train_frames > 0:
        tcfg = replace(cfg, frames=cfg.train_frames, warmup=0, train_frames=0)
        run_experiment(tcfg, replication=_TRAIN_REPLICATION, controller=controller)
    return controller


def run_experiment(cfg: ExperimentConfig, replication: int = 0,
                   trace: bool = False, controller=None) -> MetricsRecord:
    """Run one replication of one configuration.

    Returns the aggregated metrics; with ``trace=True`` the per-frame
    power and fronthaul series are attached for constraint audits.  A
    ``controller`` (for instance a trained one) is used and mutated in
    place when given; otherwise a fresh one is built, trained first if
    the config asks for that.  Failures inside the loop are re-raised
    with the frame index.
    """
    cluster, traffic, cons = cfg.cluster, cfg.traffic, cfg.constraints
    split = cfg.effective_split
    split.validate(cluster)
    m = cluster.m
    tau = cluster.frame_duration_s
    warmup = cfg.effective_warmup
    qah = cfg.scheme == "QAH-CoMP"

    ch_rng = _rng_for(cfg.seed, replication, _CHANNEL_STREAM)
    tr_rng = _rng_for(cfg.seed, replication, _TRAFFIC_STREAM)

    if controller is None:
        controller = train_controller(cfg)
    learner = controller if qah else None
    policy = None if qah else controller

    queues = QueueState.empty(m)
    post_prev = np.zeros(m)
    feedback: Feedback | None = None
    taggers = [PacketTagger() for _ in range(m)]

    ls, lp = split.shared[0], split.private[0]
    s_per = ls + lp
    noise = cluster.noise_power_w
    bw = cluster.bandwidth_hz

    power_trace = np.zeros((cfg.frames, m))
    fronthaul_trace = np.zeros((cfg.frames, m))
    q_trace_sum = np.zeros(m)
    post_frames = 0
    arrived_total = delivered_total = dropped_total = 0.0
    multiplier_min = math.inf
    snapshots = []
    snapshot_frames = []

    frame = 0
    for start in range(0, cfg.frames, cfg.chunk):
        n = min(cfg.chunk, cfg.frames - start)
        ch = draw_channel(cluster, cfg.sigma, ch_rng, frames=n)
        pre = build_precoders(ch, split)
        phi, gmat = link_gains(ch.h, pre)
        # stack the per-UE gain structures once per chunk: row blocks per
        # receiver, one column per active stream cluster-wide
        gm_all = np.concatenate(gmat, axis=1)          # (n, S_tot, S_tot)
        phi_all = np.concatenate(phi, axis=1)          # (n, S_tot)
        rho_all = np.stack(pre.rho, axis=1)            # (n, M ue, M rrh, S)
        gs_all = np.stack(pre.gain_shared, axis=1)     # (n, M, L_s)
        gp_all = np.stack(pre.gain_private, axis=1)    # (n, M, L_p)
        bits, counts, sizes = draw_arrival_packets(traffic, tau, m, tr_rng, frames=n)
        offsets = np.concatenate([[0], np.cumsum(counts.reshape(-1))])

        for f in range(n):
            frame += 1
            try:
                rho_f = rho_all[f]
                if qah:
                    learner.begin_frame()
                    action = allocate(queues.q, learner, rho_f, feedback,
                                      gain_shared=gs_all[f], gain_private=gp_all[f])
                else:
                    action = policy.act(gs_all[f], gp_all[f], rho_f, feedback)

                # link outcome against the true channel, from the stacked
                # gain tensors (same math as hcomp.outcome_from_gains)
                p_all = np.concatenate(
                    [np.asarray(action.p_shared), np.asarray(action.p_private)],
                    axis=1).ravel()
                signal = phi_all[f] * p_all
                interference = gm_all[f] @ p_all - signal
                se = np.log2(1.0 + signal / (noise + interference)).reshape(m, s_per)
                c_s = bw * se[:, :ls].sum(axis=1)
                c_p = bw * se[:, ls:].sum(axis=1)
                ok_s = (action.r_shared <= c_s).astype(float)
                ok_p = (action.r_private <= c_p).astype(float)
                delivered = (action.r_shared * ok_s + action.r_private * ok_p) * tau
                rrh_power = np.asarray(action.p_private).sum(axis=1)
                if ls:
                    rrh_power = rrh_power + np.einsum(
                        "jka,ja->k", rho_f[:, :, :ls], np.asarray(action.p_shared))
                fronthaul = action.r_private + float(np.sum(action.r_shared))

                if qah:
                    costs = stage_costs(learner, queues.q, action, rho_f)

                new_state, dropped = advance_queue(
                    queues, delivered, bits[f], traffic.buffer_bits)
                served = queues.q - new_state.post

                if qah:
                    for i in range(m):
                        learn_value(learner, i, float(post_prev[i]),
                                    float(new_state.post[i]), float(costs[i]))
                    update_multipliers(learner, rrh_power, fronthaul, cons)
                    multiplier_min = min(
                        multiplier_min,
                        float(learner.gamma_power.min()),
                        float(learner.gamma_rate.min()),
                    )
                    if frame % cfg.snapshot_every == 0:
                        snapshots.append(learner.values[0].copy())
                        snapshot_frames.append(frame)
                else:
                    policy.observe(rrh_power, fronthaul)

                for i in range(m):
                    slot = (f * m) + i
                    pkt = sizes[offsets[slot]:offsets[slot + 1]]
                    taggers[i].step(frame, float(served[i]), pkt, float(dropped[i]))

                power_trace[frame - 1] = rrh_power
                fronthaul_trace[frame - 1] = fronthaul
                if frame > warmup:
                    q_trace_sum += new_state.q
                    post_frames += 1
                arrived_total += float(bits[f].sum())
                delivered_total += float(served.sum())
                dropped_total += float(dropped.sum())

                post_prev = new_state.post
                queues = new_state
                feedback = Feedback(ok_shared=ok_s, ok_private=ok_p,
                                    c_shared=c_s, c_private=c_p)
            except Exception as exc:
                raise RuntimeError(f"frame {frame}: {exc}") from exc

    backlog = float(queues.q.sum())
    if arrived_total != delivered_total + dropped_total + backlog:
        raise RuntimeError(
            f"bit conservation violated: {arrived_total} arrived vs "
            f"{delivered_total} delivered + {dropped_total} dropped + {backlog} backlog")

    load = traffic.load_bps
    if post_frames and load > 0:
        delay_little = float(np.mean(q_trace_sum / post_frames / load))
    else:
        delay_little = 0.0
    sojourns = [t.mean_sojourn_frames(min_arrival_frame=warmup + 1) for t in taggers]
    finite = [s for s in sojourns if not math.isnan(s)]
    delay_tagged = float(np.mean(finite) * tau) if finite else 0.0

    tail = max(int(cfg.frames * 0.8), 1)
    running_power = np.cumsum(power_trace, axis=0) / np.arange(1, cfg.frames + 1)[:, None]
    running_fh = np.cumsum(fronthaul_trace, axis=0) / np.arange(1, cfg.frames + 1)[:, None]
    post_slice = slice(warmup, cfg.frames)

    record = MetricsRecord(
        scheme=cfg.scheme,
        arrival_rate=traffic.arrival_rate,
        max_power_w=cons.max_power_w,
        max_fronthaul_bps=cons.max_fronthaul_bps,
        sigma=cfg.sigma,
        frames=cfg.frames,
        warmup=warmup,
        seed=cfg.seed,
        replication=replication,
        delay_tagged_s=delay_tagged,
        delay_little_s=delay_little,
        avg_power_w=float(power_trace[post_slice].mean()),
        run_avg_power_max_w=float(running_power[tail - 1:].max()),
        avg_fronthaul_bps=float(fronthaul_trace[post_slice].mean()),
        run_avg_fronthaul_max_bps=float(running_fh[tail - 1:].max()),
        drop_rate=float(dropped_total / arrived_total) if arrived_total else 0.0,
        arrived_bits=arrived_total,
        delivered_bits=delivered_total,
        dropped_bits=dropped_total,
        backlog_bits=backlog,
        multiplier_min=0.0 if math.isinf(multiplier_min) else multiplier_min,
        value_snapshots=np.array(snapshots) if snapshots else None,
        snapshot_frames=np.array(snapshot_frames) if snapshot_frames else None,
        power_trace=power_trace if trace else None,
        fronthaul_trace=fronthaul_trace if trace else None,
    )
    return record


def run_replications(cfg: ExperimentConfig, trace: bool = False) -> list:
    """All replications of one configuration, sequentially and in order.

    With a training phase configured, the controller is trained once and
    every replication starts from its own copy of the trained state, so
    replications measure the stationary behavior independently.
    """
    base = train_controller(cfg)
    measure_cfg = replace(cfg, train_frames=0)
    records = []
    for r in range(cfg.replications):
        records.append(run_experiment(measure_cfg, replication=r, trace=trace,
                                      controller=base.clone()))
    return records


def apply_overrides(cfg: ExperimentConfig, **values) -> ExperimentConfig:
    """Return a config with sweep-parameter overrides applied."""
    traffic, cons = cfg.traffic, cfg.constraints
    updates = {}
    for key, val in values.items():
        if key == "arrival_rate":
            traffic = replace(traffic, arrival_rate=float(val))
        elif key == "max_power_w":
            cons = replace(cons, max_power_w=float(val))
        elif key == "max_fronthaul_bps":
            cons = replace(cons, max_fronthaul_bps=float(val))
        elif key == "sigma":
            updates["sigma"] = float(val)
        elif key == "scheme":
            updates["scheme"] = str(val)
            updates["split"] = None
        else:
            raise ValueError(f"unknown sweep parameter {key!r}")
    return replace(cfg, traffic=traffic, constraints=cons, **updates)


def run_sweep(cfg: ExperimentConfig, param: str, values, schemes=None,
              trace: bool = False) -> list:
    """Grid sweep over one parameter, optionally across several schemes.

    Replications share random streams across schemes and grid points
    (common random numbers), so comparisons are paired.
    """
    schemes = list(schemes) if schemes is not None else [cfg.scheme]
    records = []
    for value in values:
        for scheme in schemes:
            point = apply_overrides(cfg, **{param: value, "scheme": scheme})
            records.extend(run_replications(point, trace=trace))
    return records


# ---------------------------------------------------------------------------
# metrics export
# ---------------------------------------------------------------------------

def _point_key(r: MetricsRecord):
    return (r.scheme, r.arrival_rate, r.max_power_w, r.max_fronthaul_bps, r.sigma)


def summarize(records) -> dict:
    """Per-sweep-point means and normal-approximation 95% half-widths."""
    points = {}
    for r in records:
        points.setdefault(_point_key(r), []).append(r)
    out = []
    for key in sorted(points):
        group = points[key]
        scheme, rate, p_max, r_max, sigma = key
        entry = {
            "scheme": scheme,
            "arrival_rate": rate,
            "max_power_w": p_max,
            "max_fronthaul_bps": r_max,
            "sigma": sigma,
            "replications": len(group),
        }
        for name in ("delay_tagged_s", "delay_little_s", "avg_power_w",
                     "avg_fronthaul_bps", "drop_rate"):
            vals = np.array([getattr(g, name) for g in group])
            mean = float(vals.mean())
            if len(vals) > 1:
                hw = float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals)))
            else:
                hw = 0.0
            entry[f"{name}_mean"] = mean
            entry[f"{name}_hw"] = hw
        out.append(entry)
    return {"schema_version": SUMMARY_SCHEMA, "points": out}


def export_metrics(records, out_dir, basename: str = "metrics",
                   config: ExperimentConfig | None = None) -> dict:
    """Write one CSV row per record plus a JSON summary.

    Column order is fixed; rows keep the order the records were
    produced in, so equal seeds give byte-identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    json_path = os.path.join(out_dir, f"{basename}.json")

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float)
                             else getattr(r, c) for c in CSV_COLUMNS])

    doc = summarize(records)
    if config is not None:
        doc["config"] = {
            "cluster": {"m": config.cluster.m, "nt": config.cluster.nt,
                        "nr": config.cluster.nr,
                        "bandwidth_hz": config.cluster.bandwidth_hz,
                        "frame_duration_s": config.cluster.frame_duration_s,
                        "noise_power_w": config.cluster.noise_power_w},
            "traffic": {"arrival_rate": config.traffic.arrival_rate,
                        "mean_packet_bits": config.traffic.mean_packet_bits,
                        "buffer_bits": config.traffic.buffer_bits,
                        "delay_weight": config.traffic.delay_weight},
            "constraints": {"max_power_w": config.constraints.max_power_w,
                            "max_fronthaul_bps": config.constraints.max_fronthaul_bps},
            "scheme": config.scheme,
            "sigma": config.sigma,
            "frames": config.frames,
            "warmup": config.effective_warmup,
            "seed": config.seed,
            "replications": config.replications,
        }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return {"csv": csv_path, "json": json_path}
