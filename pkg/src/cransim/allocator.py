"""Queue-aware controller: per-stage stochastic gradients on powers and
rates, online learning of per-queue post-decision values, and projected
dual ascent on the average power / fronthaul prices.

The controller never sees arrival statistics or the channel error model.
Everything it learns comes from three observable streams: the queue
backlogs, decodability feedback (ACK/NACK per stream class), and the
realized resource usage.  Value tables live on a coarse region grid over
the backlog range; actions are warm-started per (UE, region) so a queue
jumping into a familiar region immediately replays what worked there.

Value updates and action updates run on the fast timescale, the
multiplier updates on the slow one; the step exponents keep the
slow/fast ratio vanishing, which is what makes the duals look static to
the inner learner.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ClusterConfig, ConstraintConfig, TrafficConfig
from .hcomp import AllocationAction, StreamSplit

CHECKPOINT_SCHEMA = 1

# action bounds, in units of the average budgets
ACTION_CAP_FACTOR = 4.0
INITIAL_PRICE = 0.01
# power price that makes the single-stream water-filling level equal the
# power budget: a sane warm start, the dual only has to trim around it
INITIAL_POWER_PRICE = 1.0 / math.log(2.0)
# largest move of one action entry per update, in units of its budget;
# keeps a transient price spike from wiping out a warm-started table
MAX_STEP_FRACTION = 0.5


@dataclass(frozen=True)
class StepSchedule:
    """Power-law step sizes for the three interleaved iterations.

    Convergence of the coupled updates needs: each exponent in (0.5, 1]
    (square-summable but not summable) and the dual exponent strictly
    larger than the value exponent so the multipliers move on the slower
    timescale.
    """

    value_exp: float = 0.6
    dual_exp: float = 0.9
    action_exp: float = 0.7
    value_scale: float = 1.0
    dual_scale_power: float = 1.0
    dual_scale_rate: float = 0.05
    action_scale: float = 0.7

    def validate(self) -> "StepSchedule":
        for name in ("value_exp", "dual_exp", "action_exp"):
            e = getattr(self, name)
            if not (0.5 < e <= 1.0):
                raise ValueError(f"{name}={e} outside (0.5, 1]: steps must be "
                                 "square-summable but not summable")
        if not self.dual_exp > self.value_exp:
            raise ValueError("dual steps must vanish relative to value steps")
        if min(self.value_scale, self.dual_scale_power,
               self.dual_scale_rate, self.action_scale) <= 0:
            raise ValueError("step scales must be positive")
        return self

    def value_step(self, k: int) -> float:
        return self.value_scale * float(k) ** (-self.value_exp)

    def dual_step_power(self, t: int) -> float:
        return self.dual_scale_power * float(t) ** (-self.dual_exp)

    def dual_step_rate(self, t: int) -> float:
        return self.dual_scale_rate * float(t) ** (-self.dual_exp)

    def action_step(self, k: int) -> float:
        return self.action_scale * float(k) ** (-self.action_exp)

    def action_step_vec(self, k: np.ndarray) -> np.ndarray:
        return self.action_scale * np.asarray(k, dtype=float) ** (-self.action_exp)


@dataclass(frozen=True)
class ValueGrid:
    """Uniform region partition of the backlog range [0, buffer]."""

    buffer_bits: float
    n_regions: int

    def __post_init__(self):
        if self.n_regions < 1 or self.buffer_bits <= 0:
            raise ValueError("need a positive buffer and at least one region")
        object.__setattr__(self, "width", self.buffer_bits / self.n_regions)
        object.__setattr__(
            self, "anchors", (np.arange(self.n_regions) + 0.5) * self.width)

    def region(self, q: float) -> int:
        if q < 0 or q > self.buffer_bits:
            raise ValueError(f"backlog {q} outside [0, {self.buffer_bits}]")
        return min(int(q // self.width), self.n_regions - 1)

    def interp(self, values, q: float) -> float:
        """Linear interpolation between anchors, flat beyond the ends."""
        x = q / self.width - 0.5
        if x <= 0.0:
            return float(values[0])
        last = self.n_regions - 1
        if x >= last:
            return float(values[last])
        k = int(x)
        f = x - k
        return float(values[k]) * (1.0 - f) + float(values[k + 1]) * f


def value_lookup(grid: ValueGrid, values: np.ndarray, q: float):
    """Interpolated value and its backward differential at backlog ``q``.

    Values are anchored at region midpoints and interpolated linearly,
    clamped flat beyond the outermost anchors.  The differential is the
    value drop over one region width, clamped at the lower boundary (so
    it is exactly zero at an empty queue).
    """
    if q < 0 or q > grid.buffer_bits:
        raise ValueError(f"backlog {q} outside [0, {grid.buffer_bits}]")
    val = grid.interp(values, q)
    prev = grid.interp(values, max(q - grid.width, 0.0))
    return val, val - prev


@dataclass
class Feedback:
    """Previous-frame decodability flags, one per UE and stream class.

    ``c_shared``/``c_private`` optionally carry the mutual information
    the UEs measured that frame; the smoothed gradient mode needs them,
    plain ACK/NACK operation does not.
    """

    ok_shared: np.ndarray
    ok_private: np.ndarray
    c_shared: np.ndarray | None = None
    c_private: np.ndarray | None = None


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-min(x, 60.0)))
    z = math.exp(max(x, -60.0))
    return z / (1.0 + z)


@dataclass
class ActionGradient:
    """Per-entry stochastic gradient, mirroring AllocationAction."""

    p_shared: list
    p_private: list
    r_shared: np.ndarray
    r_private: np.ndarray


@dataclass
class LearnerState:
    """Everything the queue-aware controller carries between frames."""

    cluster: ClusterConfig
    traffic: TrafficConfig
    constraints: ConstraintConfig
    split: StreamSplit
    grid: ValueGrid
    schedule: StepSchedule
    values: np.ndarray          # (M, N) region anchor values
    value_visits: np.ndarray    # (M, N) update counters
    theta: np.ndarray           # (M,) running average stage cost, diagnostic
    gamma_power: np.ndarray     # (M,) price per Watt of average power
    gamma_rate: np.ndarray      # (M,) price per bit/s of average fronthaul
    act_p_shared: np.ndarray    # (M, N, L_s) warm-started per-region actions
    act_p_private: np.ndarray   # (M, N, L_p)
    act_r_shared: np.ndarray    # (M, N)
    act_r_private: np.ndarray   # (M, N)
    action_visits: np.ndarray   # (M, N)
    t: int = 0
    gradient_mode: str = "feedback"
    # outer-loop link margins, conditioned on how many UEs were busy (the
    # residual interference each schedule level causes differs sharply),
    # plus the capacity estimates they calibrate on
    margin_shared: np.ndarray | None = None    # (M, M+1)
    margin_private: np.ndarray | None = None
    last_cap_shared: np.ndarray | None = None
    last_cap_private: np.ndarray | None = None
    last_r_shared: np.ndarray | None = None
    last_r_private: np.ndarray | None = None
    last_busy: int = 0
    # running averages of realized usage, for the complementary-slackness
    # leak on the prices
    avg_power: np.ndarray | None = None
    avg_fronthaul: np.ndarray | None = None

    @staticmethod
    def create(cluster: ClusterConfig, traffic: TrafficConfig,
               constraints: ConstraintConfig, split: StreamSplit,
               schedule: StepSchedule | None = None,
               n_regions: int | None = None,
               gradient_mode: str = "feedback") -> "LearnerState":
        if gradient_mode not in ("feedback", "smoothed"):
            raise ValueError("gradient_mode must be 'feedback' or 'smoothed'")
        split.validate(cluster)
        ls, lp = split.shared[0], split.private[0]
        if any(s != ls for s in split.shared) or any(p != lp for p in split.private):
            raise ValueError("learner requires a uniform stream split")
        if n_regions is None:
            n_regions = max(int(round(traffic.buffer_bits / traffic.mean_packet_bits)), 1)
        grid = ValueGrid(buffer_bits=traffic.buffer_bits, n_regions=n_regions)
        schedule = (schedule or StepSchedule()).validate()
        m, n = cluster.m, n_regions
        cap_r = ACTION_CAP_FACTOR * constraints.max_fronthaul_bps
        # seed each region with one frame of its own backlog-delay cost: a
        # lower bound on its relative value.  An all-zero table would make
        # the threshold policy serve nothing until values bootstrap, and
        # the resulting pile-up inflates the slow fronthaul duals for the
        # rest of the run.
        load = max(traffic.load_bps, 1.0)
        seed_values = traffic.delay_weight * grid.anchors / load
        return LearnerState(
            cluster=cluster, traffic=traffic, constraints=constraints,
            split=split, grid=grid, schedule=schedule,
            values=np.tile(seed_values, (m, 1)),
            value_visits=np.zeros((m, n), dtype=int),
            theta=np.zeros(m),
            gamma_power=np.full(m, INITIAL_POWER_PRICE / constraints.max_power_w),
            gamma_rate=np.full(m, INITIAL_PRICE / constraints.max_fronthaul_bps),
            act_p_shared=np.full((m, n, ls), constraints.max_power_w),
            act_p_private=np.full((m, n, lp), constraints.max_power_w),
            # start rates at the cap: prices and the capacity boundary only
            # ever need to pull down the regions where transmitting is a
            # waste, instead of slowly climbing everywhere it is not
            act_r_shared=np.full((m, n), cap_r if ls else 0.0),
            act_r_private=np.full((m, n), cap_r if lp else 0.0),
            action_visits=np.zeros((m, n), dtype=int),
            gradient_mode=gradient_mode,
            margin_shared=np.full((m, m + 1), 0.5),
            margin_private=np.full((m, m + 1), 0.5),
            last_cap_shared=np.zeros(m),
            last_cap_private=np.zeros(m),
            last_r_shared=np.zeros(m),
            last_r_private=np.zeros(m),
            avg_power=np.zeros(m),
            avg_fronthaul=np.zeros(m),
        )

    @property
    def power_cap(self) -> float:
        return ACTION_CAP_FACTOR * self.constraints.max_power_w

    @property
    def rate_cap(self) -> float:
        return ACTION_CAP_FACTOR * self.constraints.max_fronthaul_bps

    def begin_frame(self) -> int:
        self.t += 1
        return self.t

    def clone(self) -> "LearnerState":
        """Independent copy; the original keeps learning unaffected."""
        dup = copy.copy(self)
        for name in ("values", "value_visits", "theta", "gamma_power", "gamma_rate",
                     "act_p_shared", "act_p_private", "act_r_shared", "act_r_private",
                     "action_visits", "margin_shared", "margin_private",
                     "last_cap_shared", "last_cap_private",
                     "last_r_shared", "last_r_private",
                     "avg_power", "avg_fronthaul"):
            setattr(dup, name, getattr(self, name).copy())
        return dup


def _slope(grid: ValueGrid, values: np.ndarray, q: float) -> float:
    """Backward value differential per bit at clamped backlog q."""
    q = min(max(q, 0.0), grid.buffer_bits)
    diff = grid.interp(values, q) - grid.interp(values, max(q - grid.width, 0.0))
    return diff / grid.width


def _value_at(grid: ValueGrid, values: np.ndarray, q: float) -> float:
    return grid.interp(values, min(max(q, 0.0), grid.buffer_bits))


def per_stage_gradient(q_bits: np.ndarray, act: AllocationAction, feedback: Feedback,
                       learner: LearnerState, rho) -> ActionGradient:
    """Stochastic gradient of the per-stage objective at the current action.

    Power entries see only the resource prices: the decodability
    indicators are treated as observed constants, so the backlog term
    contributes nothing through them.  Rate entries combine the
    fronthaul prices (shared rates pay at every RRH) with the backlog
    relief a successful transmission earns, estimated from the value
    differentials at the post-service backlog.

    In ``smoothed`` mode the hard indicators are replaced by a sigmoid
    of the capacity margin reported in the feedback, which restores the
    missing boundary force: a rate sitting above the link's capacity is
    pushed back down instead of waiting on a price signal.  Plain
    ``feedback`` mode keeps the hard indicators.
    """
    m = learner.cluster.m
    tau = learner.cluster.frame_duration_s
    gp, gr = learner.gamma_power, learner.gamma_rate
    sum_gr = float(np.sum(gr))
    smoothed = learner.gradient_mode == "smoothed"
    if smoothed and (feedback.c_shared is None or feedback.c_private is None):
        raise ValueError("smoothed gradients need capacity feedback")

    ls_u, lp_u = learner.split.shared[0], learner.split.private[0]
    rho_arr = np.asarray(rho)
    # prices: private power is drawn at the serving RRH only, shared
    # power at every RRH in proportion to its precoder share
    g_pp_mat = np.broadcast_to(gp[:, None], (m, lp_u)).copy()
    if ls_u:
        g_ps_mat = np.einsum("ika,k->ia", rho_arr[:, :, :ls_u], gp)
    else:
        g_ps_mat = np.zeros((m, 0))
    g_ps, g_pp = list(g_ps_mat), list(g_pp_mat)
    g_rs = np.zeros(m)
    g_rp = np.zeros(m)
    for i in range(m):
        ls, lp = ls_u, lp_u
        q = float(q_bits[i])
        vals = learner.values[i]
        grid = learner.grid
        r_s = float(act.r_shared[i])
        r_p = float(act.r_private[i])
        a = tau * r_s
        b = tau * r_p

        if smoothed:
            kappa_s = 0.05 * max(r_s, 1.0)
            kappa_p = 0.05 * max(r_p, 1.0)
            ok_s = _sigmoid((float(feedback.c_shared[i]) - r_s) / kappa_s) if ls else 0.0
            ok_p = _sigmoid((float(feedback.c_private[i]) - r_p) / kappa_p) if lp else 0.0
        else:
            ok_s = float(feedback.ok_shared[i])
            ok_p = float(feedback.ok_private[i])
        both = ok_s * ok_p

        dh_rs = -tau * (
            ok_s * (1.0 - ok_p) * _slope(grid, vals, q - a)
            + both * _slope(grid, vals, q - a - b)
        )
        dh_rp = -tau * (
            ok_p * (1.0 - ok_s) * _slope(grid, vals, q - b)
            + both * _slope(grid, vals, q - a - b)
        )

        if smoothed:
            # derivative of the soft indicator itself: overshooting the
            # reported capacity turns queue relief into lost frames
            v0 = _value_at(grid, vals, q)
            va = _value_at(grid, vals, q - a)
            vb = _value_at(grid, vals, q - b)
            vab = _value_at(grid, vals, q - a - b)
            if ls:
                dh_rs += -(ok_s * (1.0 - ok_s) / kappa_s) * (
                    (va - v0) + ok_p * (vab - va - vb + v0))
            if lp:
                dh_rp += -(ok_p * (1.0 - ok_p) / kappa_p) * (
                    (vb - v0) + ok_s * (vab - va - vb + v0))

        g_rs[i] = sum_gr + dh_rs
        g_rp[i] = gr[i] + dh_rp
    return ActionGradient(p_shared=g_ps, p_private=g_pp, r_shared=g_rs, r_private=g_rp)


def gradient_step(act: AllocationAction, grad: ActionGradient, step: float,
                  power_step: float | None = None, rate_step: float | None = None,
                  power_cap: float = np.inf, rate_cap: float = np.inf) -> AllocationAction:
    """Projected descent: entry <- clip(entry - step * gradient, 0, cap)."""
    ps = step if power_step is None else power_step
    rs = step if rate_step is None else rate_step
    clip_p = lambda x, g: np.clip(x - ps * g, 0.0, power_cap)
    clip_r = lambda x, g: np.clip(x - rs * g, 0.0, rate_cap)
    return AllocationAction(
        p_shared=[clip_p(a, g) for a, g in zip(act.p_shared, grad.p_shared)],
        p_private=[clip_p(a, g) for a, g in zip(act.p_private, grad.p_private)],
        r_shared=clip_r(act.r_shared, grad.r_shared),
        r_private=clip_r(act.r_private, grad.r_private),
    )


# the link margin tracks this quantile of realized/estimated capacity,
# so the failure probability of a margin-scaled rate settles near it
MARGIN_QUANTILE = 0.10
MARGIN_STEP = 0.05
MARGIN_BOUNDS = (0.01, 1.5)


def track_margin(margin: np.ndarray, measured: np.ndarray,
                 estimated: np.ndarray) -> np.ndarray:
    """One Robbins-Monro step of the capacity-discount quantile tracker.

    ``measured`` is the mutual information the UEs reported for the
    previous frame, ``estimated`` the design-gain capacity it was
    predicted to have.  The margin drifts toward the MARGIN_QUANTILE
    quantile of the measured/estimated ratio; rates scaled by it then
    fail with roughly that probability.  Entries with no usable
    estimate are left alone.
    """
    usable = estimated > 0
    if usable.all():
        ratio = measured / estimated
        step = MARGIN_STEP * (MARGIN_QUANTILE - (ratio < margin))
        return np.clip(margin + step, *MARGIN_BOUNDS)
    ratio = np.where(usable, measured / np.maximum(estimated, 1e-300), 0.0)
    step = MARGIN_STEP * (MARGIN_QUANTILE - (ratio < margin))
    return np.clip(np.where(usable, margin + step, margin), *MARGIN_BOUNDS)


_LN2 = math.log(2.0)


def _waterfill(gains: np.ndarray, price_per_w: np.ndarray, noise: float,
               cap: float) -> np.ndarray:
    """Per-stream power maximizing priced spectral efficiency, capped.

    A vanishing price floors to a level far above any cap, so free power
    simply saturates there.
    """
    level = 1.0 / (_LN2 * np.maximum(price_per_w, 1e-300))
    return np.clip(level - noise / np.maximum(gains, 1e-300), 0.0, cap)


def serve_level(learner: LearnerState, values: np.ndarray, q: float,
                price_per_rate: float) -> float:
    """Backlog level worth serving down to at the given fronthaul price.

    Walks the value table downward from ``q`` one region width at a time
    and stops where the marginal backlog relief (frame duration times
    the local value slope per bit) no longer covers the price of a unit
    of rate.  This is the interior solution of the per-stage rate
    minimization for a piecewise-linear value table.
    """
    if price_per_rate <= 0.0:
        return 0.0   # a free constraint never justifies leaving backlog
    tau = learner.cluster.frame_duration_s
    grid = learner.grid
    level = min(max(q, 0.0), grid.buffer_bits)
    while level > 0.0:
        if tau * _slope(grid, values, level) < price_per_rate:
            break
        level = max(level - grid.width, 0.0)
    return level


def allocate(q_bits: np.ndarray, learner: LearnerState, rho,
             feedback: Feedback | None,
             gain_shared=None, gain_private=None) -> AllocationAction:
    """One frame of queue-aware power and rate allocation.

    With the frame's design gains supplied (closed-loop operation), the
    per-stage minimization is solved directly on the learned value
    tables:

    * powers water-fill the design gains against the dual power prices;
    * each queue is served down to the backlog level where the marginal
      value relief stops covering the fronthaul price, private class
      first (a private bit bills one link, a shared bit all of them, so
      the shared threshold prices in every RRH's multiplier);
    * emitted rates are capped by the margin-adapted capacity estimate
      (rates above it mostly buy failures; the margin is a quantile
      tracker of how much realized capacity undercuts the estimate,
      conditioned on how many UEs are transmitting) and by the drainable
      backlog q/tau (requesting more delivers nothing but still bills
      the fronthaul);
    * streams left without data are silenced: their power would be pure
      cost and pure residual interference to everyone else.

    Without gains, the warm-started per-region iterate is returned
    instead: one projected stochastic-gradient step per visit on powers
    and rates, which is the mode the gradient contract is tested in.
    Deterministic given identical state.
    """
    m = learner.cluster.m
    tau = learner.cluster.frame_duration_s
    noise = learner.cluster.noise_power_w
    bw = learner.cluster.bandwidth_hz
    grid = learner.grid
    ls, lp = learner.split.shared[0], learner.split.private[0]
    q_arr = np.asarray(q_bits, dtype=float)
    if np.any(q_arr < 0) or np.any(q_arr > grid.buffer_bits):
        raise ValueError("backlog outside the buffer range")
    if feedback is not None and feedback.c_shared is not None:
        # calibrate the margins of the interference state (busy count)
        # the report was measured under
        col = learner.last_busy
        learner.margin_shared[:, col] = track_margin(
            learner.margin_shared[:, col], feedback.c_shared, learner.last_cap_shared)
        learner.margin_private[:, col] = track_margin(
            learner.margin_private[:, col], feedback.c_private, learner.last_cap_private)
    busy = int(np.count_nonzero(q_arr))
    learner.last_busy = busy

    closed_loop = gain_shared is not None and gain_private is not None
    if not closed_loop:
        return _iterate_action(q_arr, learner, rho, feedback)

    margin_s = learner.margin_shared[:, busy]
    margin_p = learner.margin_private[:, busy]
    sum_gr = float(np.sum(learner.gamma_rate))

    cap_s = np.zeros(m)
    cap_p = np.zeros(m)
    est_s = np.zeros(m)
    est_p = np.zeros(m)
    p_p = np.zeros((m, lp))
    p_s = np.zeros((m, ls))
    if lp:
        gp_arr = np.asarray(gain_private)
        lam = np.broadcast_to(learner.gamma_power[:, None], (m, lp))
        p_p = _waterfill(gp_arr, lam, noise, learner.power_cap)
        est_p = bw * np.log2(1.0 + gp_arr * p_p / noise).sum(axis=1)
        cap_p = margin_p * est_p
    if ls:
        gs_arr = np.asarray(gain_shared)
        rho_arr = np.asarray(rho)
        lam = np.einsum("ika,k->ia", rho_arr[:, :, :ls], learner.gamma_power)
        p_s = _waterfill(gs_arr, lam, noise, learner.power_cap)
        est_s = bw * np.log2(1.0 + gs_arr * p_s / noise).sum(axis=1)
        cap_s = margin_s * est_s

    r_p = np.zeros(m)
    r_s = np.zeros(m)
    for i in range(m):
        q = float(q_arr[i])
        if q <= 0.0:
            continue
        vals = learner.values[i]
        if lp:
            level = serve_level(learner, vals, q, float(learner.gamma_rate[i]))
            r_p[i] = min((q - level) / tau, cap_p[i], learner.rate_cap)
        if ls:
            level = serve_level(learner, vals, q, sum_gr)
            want = max((q - level) / tau - r_p[i], 0.0)
            r_s[i] = min(want, cap_s[i], learner.rate_cap)

    # a stream carrying no data is pure cost and pure residual
    # interference to everyone else: silence it
    if lp:
        p_p = np.where((r_p > 0.0)[:, None], p_p, 0.0)
    if ls:
        p_s = np.where((r_s > 0.0)[:, None], p_s, 0.0)
    # margins may only calibrate on classes that actually probed the
    # channel: a silenced stream measures zero capacity by construction
    learner.last_cap_shared = np.where(r_s > 0.0, est_s, 0.0)
    learner.last_cap_private = np.where(r_p > 0.0, est_p, 0.0)
    learner.last_r_shared = r_s.copy()
    learner.last_r_private = r_p.copy()
    return AllocationAction(p_shared=p_s, p_private=p_p, r_shared=r_s, r_private=r_p)


def _iterate_action(q_arr: np.ndarray, learner: LearnerState, rho,
                    feedback: Feedback | None) -> AllocationAction:
    """Literal warm-started gradient iterate on the per-region tables."""
    m = learner.cluster.m
    tau = learner.cluster.frame_duration_s
    grid = learner.grid
    idx = np.arange(m)
    regions = np.minimum((q_arr // grid.width).astype(int), grid.n_regions - 1)
    p_s = learner.act_p_shared[idx, regions]     # (M, L_s), fancy-index copies
    p_p = learner.act_p_private[idx, regions]
    r_s = learner.act_r_shared[idx, regions]
    r_p = learner.act_r_private[idx, regions]
    act = AllocationAction(p_shared=p_s, p_private=p_p, r_shared=r_s, r_private=r_p)

    if feedback is not None:
        grad = per_stage_gradient(q_arr, act, feedback, learner, rho)
        p_ref = learner.constraints.max_power_w
        r_ref = learner.constraints.max_fronthaul_bps
        learner.action_visits[idx, regions] += 1
        # descent in budget-normalized coordinates: raw steps carry the
        # squared unit scale of each entry type
        gamma_e = learner.schedule.action_step_vec(learner.action_visits[idx, regions])
        p_step = (gamma_e * p_ref * p_ref)[:, None]
        r_step = gamma_e * r_ref * r_ref
        p_slew = MAX_STEP_FRACTION * p_ref
        r_slew = MAX_STEP_FRACTION * r_ref
        p_s = np.clip(p_s - np.clip(p_step * np.asarray(grad.p_shared), -p_slew, p_slew),
                      0.0, learner.power_cap)
        p_p = np.clip(p_p - np.clip(p_step * np.asarray(grad.p_private), -p_slew, p_slew),
                      0.0, learner.power_cap)
        r_s = np.clip(r_s - np.clip(r_step * grad.r_shared, -r_slew, r_slew),
                      0.0, learner.rate_cap)
        r_p = np.clip(r_p - np.clip(r_step * grad.r_private, -r_slew, r_slew),
                      0.0, learner.rate_cap)
        learner.act_p_shared[idx, regions] = p_s
        learner.act_p_private[idx, regions] = p_p
        learner.act_r_shared[idx, regions] = r_s
        learner.act_r_private[idx, regions] = r_p

    # emitted rates are still clamped to the drainable backlog: anything
    # above it bills the fronthaul without delivering a bit
    drain = q_arr / tau
    r_p = np.minimum(r_p, drain)
    r_s = np.minimum(r_s, np.maximum(drain - r_p, 0.0))
    learner.last_r_shared = r_s.copy()
    learner.last_r_private = r_p.copy()
    return AllocationAction(p_shared=p_s, p_private=p_p, r_shared=r_s, r_private=r_p)


def stage_costs(learner: LearnerState, q_bits: np.ndarray,
                act: AllocationAction, rho, weights=None) -> np.ndarray:
    """Realized per-queue Lagrangian stage costs, all UEs at once.

    Each queue's cost combines its backlog delay with its priced share
    of every RRH's power draw and of its serving RRH's fronthaul load;
    summed over UEs this reproduces the cluster-wide priced stage cost.
    """
    m = learner.cluster.m
    ls = learner.split.shared[0]
    load = learner.traffic.load_bps
    beta = (np.full(m, learner.traffic.delay_weight) if weights is None
            else np.asarray(weights, dtype=float))
    gp = learner.gamma_power
    cost = beta * np.asarray(q_bits, dtype=float) / load

    p_p_mat = np.asarray(act.p_private)
    cost += gp * (p_p_mat.sum(axis=1) - learner.constraints.max_power_w)
    if ls:
        rho_arr = np.asarray(rho)
        p_s_mat = np.asarray(act.p_shared)
        # priced shared-power shares contributed at every RRH k
        cost += np.einsum("ika,ia,k->i", rho_arr[:, :, :ls], p_s_mat, gp)
    fronthaul = act.r_private + float(np.sum(act.r_shared))
    cost += learner.gamma_rate * (fronthaul - learner.constraints.max_fronthaul_bps)
    return cost


def per_queue_stage_cost(learner: LearnerState, ue: int, q_bits: float,
                         act: AllocationAction, rho, weights=None) -> float:
    """One UE's realized stage cost (see :func:`stage_costs`)."""
    q = np.zeros(learner.cluster.m)
    q[ue] = q_bits
    return float(stage_costs(learner, q, act, rho, weights=weights)[ue])


def learn_value(learner: LearnerState, ue: int, q_post_prev: float,
                q_post_next: float, stage_cost: float) -> None:
    """Temporal-difference update of the visited region's anchor value.

    The target is the realized stage cost plus the value at the next
    post-service backlog, re-anchored at the empty-queue region so the
    table stays a relative value function.
    """
    r = learner.grid.region(q_post_prev)
    learner.value_visits[ue, r] += 1
    zeta = learner.schedule.value_step(int(learner.value_visits[ue, r]))
    next_val, _ = value_lookup(learner.grid, learner.values[ue], q_post_next)
    td = stage_cost + next_val - learner.values[ue, 0] - learner.values[ue, r]
    learner.values[ue, r] += zeta * td
    learner.theta[ue] += zeta * (stage_cost - learner.theta[ue])


# per-frame price decay applied while the long-run usage average is
# strictly feasible (complementary slackness: a slack constraint's price
# belongs at zero, but decaying dual steps alone unwind it very slowly)
PRICE_LEAK = 2e-3


def update_multipliers(learner: LearnerState, power_w: np.ndarray,
                       fronthaul_bps: np.ndarray, constraints: ConstraintConfig,
                       zeta: float | None = None) -> None:
    """Projected dual ascent on the average power and fronthaul prices.

    With ``zeta`` given, both prices use that literal raw step.
    Otherwise the schedule's slow step is applied per constraint,
    normalized by the squared budget so the ascent behaves identically
    in relative terms for Watts and bits/s; in this mode a price whose
    constraint is slack in the running average additionally leaks toward
    zero, so transient price spikes cannot linger after the load passes.
    """
    power_w = np.asarray(power_w, dtype=float)
    fronthaul_bps = np.asarray(fronthaul_bps, dtype=float)
    if zeta is not None:
        zp = zr = float(zeta)
        leak = False
    else:
        t = max(learner.t, 1)
        zp = learner.schedule.dual_step_power(t) / constraints.max_power_w ** 2
        zr = learner.schedule.dual_step_rate(t) / constraints.max_fronthaul_bps ** 2
        leak = True
    learner.gamma_power = np.maximum(
        learner.gamma_power + zp * (power_w - constraints.max_power_w), 0.0)
    learner.gamma_rate = np.maximum(
        learner.gamma_rate + zr * (fronthaul_bps - constraints.max_fronthaul_bps), 0.0)
    if leak:
        t = max(learner.t, 1)
        learner.avg_power += (power_w - learner.avg_power) / t
        learner.avg_fronthaul += (fronthaul_bps - learner.avg_fronthaul) / t
        learner.gamma_power = np.where(
            learner.avg_power < constraints.max_power_w,
            learner.gamma_power * (1.0 - PRICE_LEAK), learner.gamma_power)
        learner.gamma_rate = np.where(
            learner.avg_fronthaul < constraints.max_fronthaul_bps,
            learner.gamma_rate * (1.0 - PRICE_LEAK), learner.gamma_rate)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(learner: LearnerState, path) -> None:
    """Serialize value tables, prices and counters as flat JSON."""
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "frame": learner.t,
        "n_regions": learner.grid.n_regions,
        "buffer_bits": learner.grid.buffer_bits,
        "values": learner.values.tolist(),
        "theta": learner.theta.tolist(),
        "gamma_power": learner.gamma_power.tolist(),
        "gamma_rate": learner.gamma_rate.tolist(),
        "value_visits": learner.value_visits.tolist(),
        "action_visits": learner.action_visits.tolist(),
        "act_p_shared": learner.act_p_shared.tolist(),
        "act_p_private": learner.act_p_private.tolist(),
        "act_r_shared": learner.act_r_shared.tolist(),
        "act_r_private": learner.act_r_private.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def restore_checkpoint(learner: LearnerState, path) -> LearnerState:
    """Load a checkpoint saved by :func:`save_checkpoint` in place."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')}")
    if doc["n_regions"] != learner.grid.n_regions or doc["buffer_bits"] != learner.grid.buffer_bits:
        raise ValueError("checkpoint grid does not match the learner's grid")
    learner.t = int(doc["frame"])
    learner.values = np.asarray(doc["values"], dtype=float)
    learner.theta = np.asarray(doc["theta"], dtype=float)
    learner.gamma_power = np.asarray(doc["gamma_power"], dtype=float)
    learner.gamma_rate = np.asarray(doc["gamma_rate"], dtype=float)
    learner.value_visits = np.asarray(doc["value_visits"], dtype=int)
    learner.action_visits = np.asarray(doc["action_visits"], dtype=int)
    learner.act_p_shared = np.asarray(doc["act_p_shared"], dtype=float)
    learner.act_p_private = np.asarray(doc["act_p_private"], dtype=float)
    learner.act_r_shared = np.asarray(doc["act_r_shared"], dtype=float)
    learner.act_r_private = np.asarray(doc["act_r_private"], dtype=float)
    return learner
