"""Hybrid CoMP precoding: shared streams across all RRHs, private streams
from the serving RRH, both zero-forced from channel estimates.

Shared streams for UE i are beamformed over all M RRHs inside the
nullspace of every other UE's aggregate channel; private streams use the
serving RRH only, inside the nullspace of the cross links.  On top of the
classic ZF constraints, the shared beams are also steered orthogonal to
the receive directions of the UE's own private streams, which makes the
shared and private decorrelator outputs interference-free by
construction (not just approximately).

All builders accept an arbitrary number of leading batch axes on the
channel arrays; singular value decompositions are batched through numpy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelState
from .config import ClusterConfig

_NULLSPACE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------

def _canonical_columns(v: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real-positive.

    Removes the SVD phase ambiguity so precoders are reproducible across
    runs and platforms.  All-zero columns pass through unchanged.
    """
    mag = np.abs(v)
    idx = mag.argmax(axis=-2)
    pivot = np.take_along_axis(v, idx[..., None, :], axis=-2)
    amp = np.abs(pivot)
    phase = np.where(amp > 0, pivot / np.where(amp > 0, amp, 1.0), 1.0)
    return v * phase.conj()


def nullspace(a: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis of the right nullspace of ``a``, batched.

    Parameters
    ----------
    a : (..., k, n) array with k < n and full row rank.
    dim : expected nullspace dimension, must equal n - k.

    Returns (..., n, dim).  Raises if the rows are (numerically) rank
    deficient, since then the nullspace would be larger than ``dim`` and
    downstream stream counts would be wrong.
    """
    k, n = a.shape[-2], a.shape[-1]
    if dim != n - k:
        raise ValueError(f"expected nullspace dimension {n - k}, asked for {dim}")
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    if np.any(s[..., -1] <= _NULLSPACE_RTOL * s[..., 0]):
        raise np.linalg.LinAlgError("stacked channel is rank deficient")
    basis = np.swapaxes(vh[..., k:, :], -1, -2).conj()
    return _canonical_columns(basis)


def _svd_sorted(a: np.ndarray, ascending: bool = False):
    """Batched SVD with canonical column phases.

    Returns (u, s, v) with a = u @ diag(s) @ v^H and column phases fixed
    jointly on u and v.  ``ascending`` reverses the usual ordering.
    """
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    v = np.swapaxes(vh, -1, -2).conj()
    if ascending:
        u = u[..., ::-1]
        s = s[..., ::-1]
        v = v[..., ::-1]
    mag = np.abs(v)
    idx = mag.argmax(axis=-2)
    pivot = np.take_along_axis(v, idx[..., None, :], axis=-2)
    amp = np.abs(pivot)
    phase = np.where(amp > 0, pivot / np.where(amp > 0, amp, 1.0), 1.0)
    return u * phase.conj(), s, v * phase.conj()


def _aggregate(hh: np.ndarray, ue: int) -> np.ndarray:
    """Row block [H_ue,1 ... H_ue,M] of shape (..., Nr, M*Nt)."""
    block = np.swapaxes(hh[..., ue, :, :, :], -3, -2)
    return block.reshape(block.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# stream splitting
# ---------------------------------------------------------------------------

def private_stream_limit(config: ClusterConfig) -> int:
    """Largest private stream count a serving RRH can zero-force."""
    return config.nt - (config.m - 1) * config.nr


@dataclass(frozen=True)
class StreamSplit:
    """Per-UE shared/private stream counts.

    Feasibility: private counts cannot exceed the transmit ZF budget
    Nt - (M-1)*Nr, and shared + private cannot exceed the UE's receive
    antennas.
    """

    shared: tuple
    private: tuple

    def __post_init__(self):
        object.__setattr__(self, "shared", tuple(int(x) for x in self.shared))
        object.__setattr__(self, "private", tuple(int(x) for x in self.private))
        if len(self.shared) != len(self.private):
            raise ValueError("shared/private lists must have equal length")
        if any(x < 0 for x in self.shared + self.private):
            raise ValueError("stream counts must be nonnegative")

    def validate(self, config: ClusterConfig) -> "StreamSplit":
        if len(self.shared) != config.m:
            raise ValueError(f"split covers {len(self.shared)} UEs, cluster has {config.m}")
        limit = private_stream_limit(config)
        for i in range(config.m):
            if self.private[i] > limit:
                raise ValueError(
                    f"UE {i}: {self.private[i]} private streams exceed ZF budget {limit}"
                )
            if self.shared[i] + self.private[i] > config.nr:
                raise ValueError(
                    f"UE {i}: total streams exceed Nr={config.nr}"
                )
        return self

    def streams(self, ue: int) -> int:
        return self.shared[ue] + self.private[ue]

    @property
    def total(self) -> int:
        return sum(self.shared) + sum(self.private)

    # --- common patterns -------------------------------------------------

    @staticmethod
    def uniform(m: int, l_shared: int, l_private: int) -> "StreamSplit":
        return StreamSplit((l_shared,) * m, (l_private,) * m)

    @staticmethod
    def max_dof(config: ClusterConfig) -> "StreamSplit":
        """Every UE at full Nr streams with the fewest shared streams."""
        lp = private_stream_limit(config)
        return StreamSplit.uniform(config.m, config.nr - lp, lp)

    @staticmethod
    def all_shared(config: ClusterConfig) -> "StreamSplit":
        """Joint-processing operating point: payload shared everywhere."""
        return StreamSplit.uniform(config.m, config.nr, 0)

    @staticmethod
    def all_private(config: ClusterConfig) -> "StreamSplit":
        """Coordinated-beamforming operating point: no payload sharing."""
        return StreamSplit.uniform(config.m, 0, private_stream_limit(config))

    @staticmethod
    def cb_corner(config: ClusterConfig) -> "StreamSplit":
        """Lowest-cooperation corner of the hybrid DoF range.

        M-1 UEs carry the private maximum only; one UE is topped up to
        Nr streams.  The stream total is (M-1)*(Nt-(M-1)*Nr) + Nr, the
        degrees of freedom that pure coordinated beamforming reaches.
        """
        lp = private_stream_limit(config)
        shared = [0] * config.m
        private = [lp] * config.m
        shared[-1] = config.nr - lp
        return StreamSplit(tuple(shared), tuple(private))


def dof_table(config: ClusterConfig, split: StreamSplit) -> int:
    """Total interference-free stream count of a validated split."""
    split.validate(config)
    return split.total


# ---------------------------------------------------------------------------
# precoder construction
# ---------------------------------------------------------------------------

@dataclass
class PrecoderSet:
    """Precoders, decorrelators and bookkeeping for one frame (or batch).

    Per UE i (entries are lists indexed by UE):
      w_shared[i]  : (..., M*Nt, S_i) cluster-wide shared precoder,
                     active columns first L_s, zero-padded after
      w_private[i] : (..., Nt, S_i) serving-RRH precoder, active columns
                     last L_p
      u_shared[i], u_private[i] : (..., S_i, Nr) decorrelator rows,
                     zero-padded complementarily
      rho[i]       : (..., M, S_i) per-RRH share of each shared column's
                     unit power (rows over RRHs sum to 1 on active
                     shared columns)
      gain_shared[i], gain_private[i] : design-time effective channel
                     gains (squared singular values) of the active
                     streams, from the same estimates the beams use
    """

    split: StreamSplit
    config: ClusterConfig
    w_shared: list
    u_shared: list
    w_private: list
    u_private: list
    rho: list
    gain_shared: list
    gain_private: list

    def decorrelator(self, ue: int) -> np.ndarray:
        """Combined receive filter: shared rows plus private rows."""
        return self.u_shared[ue] + self.u_private[ue]

    def frame(self, idx) -> "PrecoderSet":
        """View of one frame out of a batched set."""
        take = lambda lst: [a[idx] for a in lst]
        return PrecoderSet(
            split=self.split, config=self.config,
            w_shared=take(self.w_shared), u_shared=take(self.u_shared),
            w_private=take(self.w_private), u_private=take(self.u_private),
            rho=take(self.rho),
            gain_shared=take(self.gain_shared), gain_private=take(self.gain_private),
        )


def build_private_precoder(hh: np.ndarray, split: StreamSplit, ue: int, config: ClusterConfig):
    """Serving-RRH precoder and decorrelator for one UE's private streams.

    ``hh`` is the channel estimate array, shape (..., M, M, Nr, Nt).
    Returns (w, u, gains): w is (..., Nt, S) with the last L_p columns
    active, u is (..., S, Nr), gains are the squared singular values of
    the selected directions.
    """
    m, nt, nr = config.m, config.nt, config.nr
    ls, lp = split.shared[ue], split.private[ue]
    s = ls + lp
    limit = private_stream_limit(config)
    if lp > limit:
        raise ValueError(f"{lp} private streams exceed ZF budget {limit}")

    batch = hh.shape[:-4]
    w = np.zeros(batch + (nt, s), dtype=complex)
    u_dec = np.zeros(batch + (s, nr), dtype=complex)
    gains = np.zeros(batch + (lp,))
    if lp == 0:
        return w, u_dec, gains

    cross = np.concatenate(
        [hh[..., j, ue, :, :] for j in range(m) if j != ue], axis=-2
    )
    basis = nullspace(cross, limit)                     # (..., Nt, limit)
    padded = np.zeros(batch + (nt, nr), dtype=complex)  # left-pad with zeros
    padded[..., :, nr - limit:] = basis

    equivalent = hh[..., ue, ue, :, :] @ padded         # (..., Nr, Nr)
    u, sv, v = _svd_sorted(equivalent, ascending=True)
    w[..., :, ls:] = padded @ v[..., :, nr - lp:]
    u_dec[..., ls:, :] = np.swapaxes(u[..., :, nr - lp:], -1, -2).conj()
    gains = sv[..., nr - lp:] ** 2
    return w, u_dec, gains


def build_shared_precoder(hh: np.ndarray, split: StreamSplit, ue: int,
                          config: ClusterConfig, private_rows: np.ndarray | None = None):
    """Cluster-wide precoder and decorrelator for one UE's shared streams.

    The beams live in the nullspace of every other UE's aggregate
    estimate, so they leak nowhere else.  When the UE also carries
    private streams, the shared beams are additionally forced out of the
    private decorrelator's receive directions (a deflation inside the
    nullspace); that keeps the two stream classes orthogonal at the
    receiver as well.

    Returns (w, u, gains) shaped like the private builder but with the
    first L_s columns/rows active and w over all M*Nt transmit antennas.
    """
    m, nt, nr = config.m, config.nt, config.nr
    ls, lp = split.shared[ue], split.private[ue]
    s = ls + lp
    k = m * nt - (m - 1) * nr

    batch = hh.shape[:-4]
    w = np.zeros(batch + (m * nt, s), dtype=complex)
    u_dec = np.zeros(batch + (s, nr), dtype=complex)
    gains = np.zeros(batch + (ls,))
    if ls == 0:
        return w, u_dec, gains

    others = np.concatenate(
        [_aggregate(hh, j) for j in range(m) if j != ue], axis=-2
    )
    basis = nullspace(others, k)                       # (..., M*Nt, k)
    own = _aggregate(hh, ue)                           # (..., Nr, M*Nt)
    equivalent = own @ basis                           # (..., Nr, k)

    free = k
    if lp > 0:
        if private_rows is None:
            _, u_p, _ = build_private_precoder(hh, split, ue, config)
            private_rows = u_p[..., ls:, :]
        # receive directions already claimed by the private streams
        blocked = private_rows @ equivalent            # (..., L_p, k)
        deflate = nullspace(blocked, k - lp)
        basis = basis @ deflate
        equivalent = equivalent @ deflate
        free = k - lp
    if free < ls:
        raise ValueError(f"nullspace dimension {free} cannot carry {ls} shared streams")

    u, sv, v = _svd_sorted(equivalent)
    w[..., :, :ls] = basis @ v[..., :, :ls]
    u_dec[..., :ls, :] = np.swapaxes(u[..., :, :ls], -1, -2).conj()
    gains = sv[..., :ls] ** 2
    return w, u_dec, gains


def build_precoders(channel: ChannelState, split: StreamSplit) -> PrecoderSet:
    """Build the full precoder/decorrelator set from the BBU's estimates."""
    config = channel.config
    split.validate(config)
    hh = channel.h_hat
    m, nt = config.m, config.nt

    w_s, u_s, w_p, u_p, rho, g_s, g_p = [], [], [], [], [], [], []
    for i in range(m):
        wp, up, gp = build_private_precoder(hh, split, i, config)
        ls = split.shared[i]
        ws, us, gs = build_shared_precoder(
            hh, split, i, config, private_rows=up[..., ls:, :]
        )
        blocks = ws.reshape(ws.shape[:-2] + (m, nt, ws.shape[-1]))
        rho_i = np.sum(np.abs(blocks) ** 2, axis=-2)   # (..., M, S_i)
        w_s.append(ws)
        u_s.append(us)
        w_p.append(wp)
        u_p.append(up)
        rho.append(rho_i)
        g_s.append(gs)
        g_p.append(gp)
    return PrecoderSet(
        split=split, config=config,
        w_shared=w_s, u_shared=u_s, w_private=w_p, u_private=u_p,
        rho=rho, gain_shared=g_s, gain_private=g_p,
    )


# ---------------------------------------------------------------------------
# residual diagnostics
# ---------------------------------------------------------------------------

def _rel(num: np.ndarray, denom: np.ndarray) -> float:
    d = float(np.max(denom)) if np.size(denom) else 0.0
    if d == 0.0:
        return 0.0
    return float(np.max(num / np.maximum(denom, np.finfo(float).tiny)))


def zero_forcing_residual(pre: PrecoderSet, hh: np.ndarray) -> float:
    """Worst leakage of any UE's beams into any other UE, scaled.

    Shared beams are checked against the victims' aggregate channels,
    private beams against the victims' cross links.  Zero when the
    channel array equals the estimates the beams were built from.
    """
    cfg = pre.config
    m = cfg.m
    worst = 0.0
    for i in range(m):
        ws = pre.w_shared[i]
        wp = pre.w_private[i]
        ws_norm = np.linalg.norm(ws, axis=(-2, -1))
        wp_norm = np.linalg.norm(wp, axis=(-2, -1))
        for j in range(m):
            if j == i:
                continue
            agg = _aggregate(hh, j)
            leak = np.linalg.norm(agg @ ws, axis=(-2, -1))
            scale = np.linalg.norm(agg, axis=(-2, -1)) * ws_norm
            worst = max(worst, _rel(leak, scale))
            cross = hh[..., j, i, :, :]
            leak_p = np.linalg.norm(cross @ wp, axis=(-2, -1))
            scale_p = np.linalg.norm(cross, axis=(-2, -1)) * wp_norm
            worst = max(worst, _rel(leak_p, scale_p))
    return worst


def cross_nulling_check(pre: PrecoderSet, hh: np.ndarray) -> float:
    """Largest residual between a UE's own shared and private streams.

    Measures the shared decorrelator against the private signal and the
    private decorrelator against the shared signal, both through the
    supplied channel array, scaled by the channel and precoder norms.
    Exactly zero when either stream class is absent.
    """
    cfg = pre.config
    worst = 0.0
    for i in range(cfg.m):
        own = hh[..., i, i, :, :]
        agg = _aggregate(hh, i)
        ws, wp = pre.w_shared[i], pre.w_private[i]
        us, up = pre.u_shared[i], pre.u_private[i]

        sig_p = own @ wp
        num1 = np.linalg.norm(us @ sig_p, axis=(-2, -1))
        den1 = np.linalg.norm(own, axis=(-2, -1)) * np.linalg.norm(wp, axis=(-2, -1))
        worst = max(worst, _rel(num1, den1))

        sig_s = agg @ ws
        num2 = np.linalg.norm(up @ sig_s, axis=(-2, -1))
        den2 = np.linalg.norm(agg, axis=(-2, -1)) * np.linalg.norm(ws, axis=(-2, -1))
        worst = max(worst, _rel(num2, den2))
    return worst


# ---------------------------------------------------------------------------
# link evaluation
# ---------------------------------------------------------------------------

@dataclass
class AllocationAction:
    """Per-frame transmit powers (per stream) and rates (per class)."""

    p_shared: list       # per UE, (L_s_i,) Watts
    p_private: list      # per UE, (L_p_i,) Watts
    r_shared: np.ndarray  # (M,) bits/s
    r_private: np.ndarray

    @staticmethod
    def zeros(split: StreamSplit) -> "AllocationAction":
        m = len(split.shared)
        return AllocationAction(
            p_shared=[np.zeros(split.shared[i]) for i in range(m)],
            p_private=[np.zeros(split.private[i]) for i in range(m)],
            r_shared=np.zeros(m),
            r_private=np.zeros(m),
        )

    def copy(self) -> "AllocationAction":
        return AllocationAction(
            p_shared=[p.copy() for p in self.p_shared],
            p_private=[p.copy() for p in self.p_private],
            r_shared=self.r_shared.copy(),
            r_private=self.r_private.copy(),
        )

    def validate(self, split: StreamSplit):
        for i in range(len(split.shared)):
            if len(self.p_shared[i]) != split.shared[i]:
                raise ValueError("shared power vector length mismatch")
            if len(self.p_private[i]) != split.private[i]:
                raise ValueError("private power vector length mismatch")
            if np.any(self.p_shared[i] < 0) or np.any(self.p_private[i] < 0):
                raise ValueError("powers must be nonnegative")
        if np.any(self.r_shared < 0) or np.any(self.r_private < 0):
            raise ValueError("rates must be nonnegative")


@dataclass
class LinkOutcome:
    """What one frame of transmission achieved, per UE / per RRH."""

    c_shared: np.ndarray       # (..., M) mutual information, bits/s
    c_private: np.ndarray
    ok_shared: np.ndarray      # (..., M) 1 iff allocated rate was decodable
    ok_private: np.ndarray
    delivered_bits: np.ndarray  # (..., M)
    rrh_power_w: np.ndarray     # (..., M)
    fronthaul_bps: np.ndarray   # (..., M)


def link_gains(true_h: np.ndarray, pre: PrecoderSet):
    """Effective power gains of every (receiver stream, transmit stream).

    Returns (phi, gmat): phi[i] is (..., S_i) with the design-direction
    gains through the supplied channel; gmat[i] is (..., S_i, total)
    with one column per active stream in the cluster (UE order, shared
    before private).  The diagonal alignment phi[i][a] ==
    gmat[i][..., a, offset_i + a] holds by construction.
    """
    cfg = pre.config
    m = cfg.m
    split = pre.split
    offsets = np.cumsum([0] + [split.streams(j) for j in range(m)])

    phi, gmat = [], []
    for i in range(m):
        dec = pre.decorrelator(i)          # (..., S_i, Nr)
        agg = _aggregate(true_h, i)
        cols = []
        for j in range(m):
            ls_j = split.shared[j]
            eff_s = dec @ agg @ pre.w_shared[j][..., :, :ls_j]
            eff_p = dec @ true_h[..., i, j, :, :] @ pre.w_private[j][..., :, ls_j:]
            cols.append(np.abs(eff_s) ** 2)
            cols.append(np.abs(eff_p) ** 2)
        g = np.concatenate(cols, axis=-1)  # (..., S_i, total)
        own = g[..., :, offsets[i]:offsets[i + 1]]
        phi.append(np.einsum("...aa->...a", own).copy())
        gmat.append(g)
    return phi, gmat


def outcome_from_gains(phi, gmat, act: AllocationAction, cfg: ClusterConfig,
                       split: StreamSplit, rho) -> LinkOutcome:
    """Assemble the frame outcome from precomputed gains.

    ``phi``/``gmat`` come from :func:`link_gains` (possibly sliced to a
    single frame), ``rho`` is the list of per-UE power share arrays.
    """
    m = cfg.m
    p_all = np.concatenate(
        [np.concatenate([act.p_shared[j], act.p_private[j]]) for j in range(m)]
    )

    batch = np.broadcast_shapes(*[g.shape[:-2] for g in gmat])
    c_s = np.zeros(batch + (m,))
    c_p = np.zeros(batch + (m,))
    power = np.zeros(batch + (m,))
    for i in range(m):
        ls = split.shared[i]
        own_p = np.concatenate([act.p_shared[i], act.p_private[i]])
        total = gmat[i] @ p_all                       # (..., S_i)
        signal = phi[i] * own_p
        interference = total - signal
        sinr = signal / (cfg.noise_power_w + interference)
        se = np.log2(1.0 + sinr)
        c_s[..., i] = cfg.bandwidth_hz * np.sum(se[..., :ls], axis=-1)
        c_p[..., i] = cfg.bandwidth_hz * np.sum(se[..., ls:], axis=-1)

    ok_s = (act.r_shared <= c_s).astype(float)
    ok_p = (act.r_private <= c_p).astype(float)
    delivered = (act.r_shared * ok_s + act.r_private * ok_p) * cfg.frame_duration_s

    for k in range(m):
        contrib = float(np.sum(act.p_private[k]))
        power[..., k] = contrib
        for j in range(m):
            ls_j = split.shared[j]
            if ls_j:
                power[..., k] = power[..., k] + rho[j][..., k, :ls_j] @ act.p_shared[j]
    fronthaul = act.r_private + np.sum(act.r_shared)
    fronthaul = np.broadcast_to(fronthaul, batch + (m,)).copy()

    return LinkOutcome(
        c_shared=c_s, c_private=c_p,
        ok_shared=ok_s, ok_private=ok_p,
        delivered_bits=delivered,
        rrh_power_w=power,
        fronthaul_bps=fronthaul,
    )


def evaluate_link(true_h: np.ndarray, pre: PrecoderSet, act: AllocationAction,
                  cfg: ClusterConfig) -> LinkOutcome:
    """Evaluate an allocation against the true channel.

    Interference is computed exactly from the true channel (simulator
    omniscience); the controller itself only ever sees the estimate and
    the decodability feedback in the returned outcome.
    """
    act.validate(pre.split)
    phi, gmat = link_gains(true_h, pre)
    return outcome_from_gains(phi, gmat, act, cfg, pre.split, pre.rho)


def effective_rank(true_h: np.ndarray, pre: PrecoderSet, rtol: float = 1e-9) -> int:
    """Total rank of the stacked per-UE effective channels."""
    cfg = pre.config
    total = 0
    for i in range(cfg.m):
        ls = pre.split.shared[i]
        dec = pre.decorrelator(i)
        agg = _aggregate(true_h, i)
        eff_s = dec @ agg @ pre.w_shared[i][..., :, :ls]
        eff_p = dec @ true_h[..., i, i, :, :] @ pre.w_private[i][..., :, ls:]
        eff = np.concatenate([eff_s, eff_p], axis=-1)
        if eff.shape[-1] == 0:
            continue
        sv = np.linalg.svd(eff, compute_uv=False)
        total += int(np.sum(sv > rtol * np.max(sv, initial=0.0)))
    return total
