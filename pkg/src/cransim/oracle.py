"""Exact average-cost solvers for desk-sized queue models.

These ground-truth solvers exist so the online learner can be checked
against something independent.  The model is a post-decision chain:
exogenous arrivals move a post-decision state to a pre-decision state,
the controller then picks an action that incurs a cost and moves the
system to the next post-decision state,

    U(s) + theta = sum_q Pr[q | s] * min_a ( c(q, a) + sum_s' Pr[s' | q, a] U(s') ).

Relative value iteration anchors the value at state 0 and stops when the
span seminorm of successive Bellman images contracts below tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MAX_SWEEPS = 10 ** 6


@dataclass(frozen=True)
class TinyMdp:
    """Explicit post-decision MDP on a small state grid.

    arrival : (S, S) row-stochastic, post-decision -> pre-decision.
    service : (A, S, S) row-stochastic, pre-decision -> next post-decision.
    cost    : (A, S) per-stage cost of action a in pre-decision state s.
    """

    arrival: np.ndarray
    service: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "arrival", np.asarray(self.arrival, dtype=float))
        object.__setattr__(self, "service", np.asarray(self.service, dtype=float))
        object.__setattr__(self, "cost", np.asarray(self.cost, dtype=float))
        s = self.arrival.shape[0]
        if self.arrival.shape != (s, s):
            raise ValueError("arrival kernel must be square")
        if self.service.ndim != 3 or self.service.shape[1:] != (s, s):
            raise ValueError("service kernel must be (A, S, S)")
        if self.cost.shape != (self.service.shape[0], s):
            raise ValueError("cost table must be (A, S)")
        for name, kernel in (("arrival", self.arrival), ("service", self.service)):
            rows = kernel.sum(axis=-1)
            if not np.allclose(rows, 1.0, atol=1e-12):
                raise ValueError(f"{name} kernel rows must sum to 1")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("costs must be finite")

    @property
    def n_states(self) -> int:
        return self.arrival.shape[0]

    @property
    def n_actions(self) -> int:
        return self.service.shape[0]

    def bellman_image(self, values: np.ndarray) -> np.ndarray:
        """One application of the min-cost Bellman operator."""
        q = self.cost + self.service @ values          # (A, S)
        return self.arrival @ q.min(axis=0)

    def greedy_policy(self, values: np.ndarray) -> np.ndarray:
        """Minimizing action at each pre-decision state."""
        q = self.cost + self.service @ values
        return q.argmin(axis=0)


def _span(x: np.ndarray) -> float:
    return float(x.max() - x.min())


def relative_value_iteration(mdp: TinyMdp, tol: float = 1e-9):
    """Solve the average-cost fixed point by anchored value iteration.

    Returns (theta, values) with values[0] == 0.  Requires a unichain
    model (every stationary policy eventually reaches the anchor
    region); raises RuntimeError with the final span if the sweep budget
    runs out.
    """
    u = np.zeros(mdp.n_states)
    for _ in range(_MAX_SWEEPS):
        image = mdp.bellman_image(u)
        diff = image - u
        if _span(diff) < tol:
            theta = 0.5 * float(diff.max() + diff.min())
            values = u - u[0]
            return theta, values
        u = image - image[0]
    raise RuntimeError(
        f"value iteration did not converge in {_MAX_SWEEPS} sweeps; "
        f"final span {_span(mdp.bellman_image(u) - u):.3e}"
    )


def solve_per_queue(mdp: TinyMdp, tol: float = 1e-9):
    """Ground truth for one queue's relative value function."""
    return relative_value_iteration(mdp, tol)


def solve_joint(mdp: TinyMdp, tol: float = 1e-9, max_states: int = 4096):
    """Ground truth on a joint (multi-queue) chain."""
    if mdp.n_states > max_states:
        raise ValueError(f"joint chain too large ({mdp.n_states} > {max_states} states)")
    return relative_value_iteration(mdp, tol)


def product_mdp(a: TinyMdp, b: TinyMdp) -> TinyMdp:
    """Independent two-queue composition.

    Arrivals and services act independently on each factor and the costs
    add, so the joint value function decomposes into the sum of the
    factors' value functions (up to the anchoring constant).
    """
    arrival = np.kron(a.arrival, b.arrival)
    service = np.stack([
        np.kron(a.service[i], b.service[j])
        for i in range(a.n_actions)
        for j in range(b.n_actions)
    ])
    cost = np.stack([
        (a.cost[i][:, None] + b.cost[j][None, :]).reshape(-1)
        for i in range(a.n_actions)
        for j in range(b.n_actions)
    ])
    return TinyMdp(arrival=arrival, service=service, cost=cost)


def queue_walk_mdp(n_states: int, arrival_probs, service_moves, cost_fn) -> TinyMdp:
    """Convenience builder for a saturating birth-death queue.

    arrival_probs : mapping/size-distribution over arrival jumps
        (index = jump size, value = probability), applied with
        saturation at the top state.
    service_moves : iterable of service jumps, one per action, applied
        with saturation at zero.
    cost_fn : (state_index, action_index) -> stage cost.
    """
    probs = np.asarray(arrival_probs, dtype=float)
    if probs.ndim != 1 or not np.isclose(probs.sum(), 1.0):
        raise ValueError("arrival_probs must be a probability vector")
    s = n_states
    arrival = np.zeros((s, s))
    for q in range(s):
        for jump, p in enumerate(probs):
            arrival[q, min(q + jump, s - 1)] += p
    moves = list(service_moves)
    service = np.zeros((len(moves), s, s))
    cost = np.zeros((len(moves), s))
    for a, move in enumerate(moves):
        for q in range(s):
            service[a, q, max(q - int(move), 0)] = 1.0
            cost[a, q] = cost_fn(q, a)
    return TinyMdp(arrival=arrival, service=service, cost=cost)
