"""Per-frame fading draws and the noisy channel estimate seen by the BBU pool.

True channels H_ji (UE j, RRH i) have i.i.d. unit-variance circularly
symmetric complex Gaussian entries, redrawn independently every frame.
The BBU-side estimate is

    H_hat_ji = sqrt(1 - sigma_ji) * H_ji + sqrt(sigma_ji) * E_ji,

with E_ji an independent CN(0, 1) matrix, so sigma = 0 reproduces the
true channel exactly and sigma = 1 yields an estimate uncorrelated with
it.  Both marginals stay unit-variance for every sigma.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ClusterConfig

# Matrices whose Gram determinant falls below this (relative) floor are
# treated as rank-deficient and redrawn.
_RANK_RTOL = 1e-24
_MAX_REDRAWS = 100


@dataclass(frozen=True)
class ChannelState:
    """One frame (or a batch of frames) of true CSI and BBU-side CSIT.

    Arrays are indexed [..., ue j, rrh i, rx antenna, tx antenna]; the
    leading dimensions, if any, enumerate frames.  Instances are treated
    as immutable after creation and can be shared freely across threads.
    """

    h: np.ndarray        # true channel, complex128
    h_hat: np.ndarray    # CSIT at the BBU pool, same shape
    sigma: np.ndarray    # (M, M) estimate quality, 0 = perfect
    config: ClusterConfig

    @property
    def n_frames(self):
        """Leading batch shape (empty tuple for a single frame)."""
        return self.h.shape[:-4]

    def aggregate(self, ue: int, csit: bool = False) -> np.ndarray:
        """Row-block channel [H_j1 ... H_jM] from all RRHs to one UE.

        Returns shape (..., Nr, M*Nt); columns are grouped by RRH.
        """
        src = self.h_hat if csit else self.h
        m, nt, nr = self.config.m, self.config.nt, self.config.nr
        block = np.swapaxes(src[..., ue, :, :, :], -3, -2)  # (..., Nr, M, Nt)
        return block.reshape(block.shape[:-2] + (m * nt,))


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """CN(0, 1) entries: real and imaginary parts N(0, 1/2)."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def _full_rank(mat: np.ndarray) -> np.ndarray:
    """Boolean mask of matrices with rank min(Nr, Nt), batched.

    Uses the Gram determinant of the smaller side; a generic Gaussian
    draw fails this only with negligible probability.
    """
    nr, nt = mat.shape[-2], mat.shape[-1]
    a = mat if nr <= nt else np.swapaxes(mat, -1, -2).conj()
    gram = a @ np.swapaxes(a, -1, -2).conj()
    det = np.abs(np.linalg.det(gram))
    k = min(nr, nt)
    tr = np.einsum("...ii->...", gram).real
    scale = np.maximum(tr / k, np.finfo(float).tiny) ** k
    return det > _RANK_RTOL * scale


def draw_channel(
    config: ClusterConfig,
    sigma,
    rng: np.random.Generator,
    frames: int | None = None,
) -> ChannelState:
    """Draw true channels and the matching CSIT for one frame or a batch.

    Parameters
    ----------
    config : ClusterConfig
    sigma : float or (M, M) array
        CSIT quality per (ue, rrh) pair, each entry in [0, 1].
    rng : np.random.Generator
        Consumed deterministically; equal seeds give bitwise-equal draws.
    frames : int, optional
        If given, arrays get a leading frame axis of this length.

    Raises
    ------
    ValueError on sigma outside [0, 1]; RuntimeError if a rank-deficient
    draw persists through the redraw budget.
    """
    m, nt, nr = config.m, config.nt, config.nr
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (m, m)).copy()
    if np.any(sig < 0.0) or np.any(sig > 1.0):
        raise ValueError("sigma entries must lie in [0, 1]")

    shape = ((frames,) if frames is not None else ()) + (m, m, nr, nt)
    h = _complex_normal(rng, shape)
    err = _complex_normal(rng, shape)

    root = np.sqrt(1.0 - sig)[..., None, None]
    root_e = np.sqrt(sig)[..., None, None]
    h_hat = root * h + root_e * err

    bad = ~(_full_rank(h) & _full_rank(h_hat))
    tries = 0
    while np.any(bad):
        tries += 1
        if tries > _MAX_REDRAWS:
            raise RuntimeError(
                f"rank-deficient channel persisted after {_MAX_REDRAWS} redraws"
            )
        n_bad = int(bad.sum())
        h_new = _complex_normal(rng, (n_bad, nr, nt))
        e_new = _complex_normal(rng, (n_bad, nr, nt))
        pair_sigma = np.broadcast_to(sig, bad.shape)[bad][:, None, None]
        h[bad] = h_new
        h_hat[bad] = np.sqrt(1.0 - pair_sigma) * h_new + np.sqrt(pair_sigma) * e_new
        bad_new = ~(_full_rank(h[bad]) & _full_rank(h_hat[bad]))
        mask = np.zeros_like(bad)
        idx = np.argwhere(bad)
        mask[tuple(idx[bad_new].T)] = True
        bad = mask

    # sigma = 0 pairs must reproduce H bit-exactly
    exact = sig == 0.0
    if np.any(exact):
        h_hat[..., exact, :, :] = h[..., exact, :, :]

    return ChannelState(h=h, h_hat=h_hat, sigma=sig, config=config)
