"""Spectral method-of-moments estimation of HMM parameters from a context
stream, post-processing to valid stochastic matrices, and the permutation
alignment that keeps hidden-state labels consistent across re-estimations.

Pipeline: ``accumulate_moments -> spectral_estimate -> postprocess -> align``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DiagonalizationFailed,
    NearSingularPivot,
    NonFinite,
    RankDeficient,
    ShapeMismatch,
    TooShort,
)

COND_LIMIT = 1e12
RANK_TOL = 1e-12
IMAG_TOL = 1e-6
RETRY_BUDGET = 10
MOMENT_ATOL = 1e-9


@dataclass(frozen=True)
class MomentSet:
    """Empirical co-occurrence tables over context triples ``(x_{s+1}, x_{s-1}, x_s)``.

    ``p31[i, j]`` is the empirical probability of ``x_{s+1} = i, x_{s-1} = j``,
    ``p32[i, k]`` of ``x_{s+1} = i, x_s = k``, and ``p312[i, j, k]`` the full
    triple table; each sums to 1 over the ``sample_count - 2`` triples.
    """

    p31: np.ndarray
    p32: np.ndarray
    p312: np.ndarray
    sample_count: int


class MomentAccumulator:
    """Streaming counts behind :class:`MomentSet`; O(1) work per new context."""

    def __init__(self, num_contexts: int):
        X = int(num_contexts)
        self.num_contexts = X
        self.counts31 = np.zeros((X, X), dtype=np.int64)
        self.counts32 = np.zeros((X, X), dtype=np.int64)
        self.counts312 = np.zeros((X, X, X), dtype=np.int64)
        self.length = 0
        self._prev1 = -1  # x_{n-1}
        self._prev2 = -1  # x_{n-2}

    def append(self, context: int) -> None:
        x = int(context)
        if not 0 <= x < self.num_contexts:
            raise ShapeMismatch(f"context {x} outside [0, {self.num_contexts})")
        self.length += 1
        if self.length >= 3:
            # new triple centered at s = n-1: (x_n, x_{n-2}, x_{n-1})
            self.counts31[x, self._prev2] += 1
            self.counts32[x, self._prev1] += 1
            self.counts312[x, self._prev2, self._prev1] += 1
        self._prev2 = self._prev1
        self._prev1 = x

    def extend(self, contexts) -> None:
        for x in contexts:
            self.append(x)

    def snapshot(self) -> MomentSet:
        if self.length < 3:
            raise TooShort("need at least 3 contexts to form a moment triple")
        n = float(self.length - 2)
        return MomentSet(
            p31=self.counts31 / n,
            p32=self.counts32 / n,
            p312=self.counts312 / n,
            sample_count=self.length,
        )


def accumulate_moments(contexts, num_contexts: int | None = None) -> MomentSet:
    """Batch moment computation (vectorized counterpart of the accumulator)."""
    x = np.asarray(contexts, dtype=np.int64)
    if x.size < 3:
        raise TooShort("need at least 3 contexts to form a moment triple")
    X = int(num_contexts) if num_contexts is not None else int(x.max()) + 1
    if x.min() < 0 or x.max() >= X:
        raise ShapeMismatch("context indices outside [0, X)")
    n = x.size - 2
    nxt, prv, cur = x[2:], x[:-2], x[1:-1]
    c31 = np.zeros((X, X), dtype=np.int64)
    c32 = np.zeros((X, X), dtype=np.int64)
    c312 = np.zeros((X, X, X), dtype=np.int64)
    np.add.at(c31, (nxt, prv), 1)
    np.add.at(c32, (nxt, cur), 1)
    np.add.at(c312, (nxt, prv, cur), 1)
    return MomentSet(
        p31=c31 / n, p32=c32 / n, p312=c312 / n, sample_count=int(x.size)
    )


@dataclass(frozen=True)
class SpectralWorkspace:
    """Intermediate factors of one spectral estimation (kept for diagnostics)."""

    u1: np.ndarray              # (X, H) right singular basis of p31
    u2: np.ndarray              # (X, H) right singular basis of p32
    u3: np.ndarray              # (X, H) left singular basis of p31
    gamma_rotation: np.ndarray  # (H, H) invertible contraction-direction matrix
    r_matrix: np.ndarray        # (H, H) shared eigenvector basis, unit-norm columns
    l_matrix: np.ndarray        # (H, H) eigenvalue table


@dataclass(frozen=True)
class EstimatedHmm:
    """Spectral estimate of ``(M, E)``.

    ``raw_*`` are the direct estimator outputs (possibly with small negative
    entries); ``*_hat`` are the post-processed stochastic matrices, ``None``
    until :func:`postprocess` runs.  ``label_permutation`` records the
    relabeling applied by :func:`align` relative to the previous estimate.
    """

    raw_transition: np.ndarray             # (H, H)
    raw_emission: np.ndarray               # (X, H)
    transition_hat: np.ndarray | None = None
    emission_hat: np.ndarray | None = None
    label_permutation: tuple[int, ...] = ()
    workspace: SpectralWorkspace | None = field(default=None, repr=False)

    @property
    def num_states(self) -> int:
        return self.raw_transition.shape[0]

    @property
    def num_contexts(self) -> int:
        return self.raw_emission.shape[0]

    def to_text(self) -> str:
        """Flat decimal block: M row-major, then E column-major, then perm."""
        if self.transition_hat is None or self.emission_hat is None:
            raise ValueError("serialize post-processed estimates only")
        H, X = self.num_states, self.num_contexts
        lines = [
            f"H {H} X {X}",
            "M " + " ".join(repr(float(v)) for v in self.transition_hat.ravel(order="C")),
            "E " + " ".join(repr(float(v)) for v in self.emission_hat.ravel(order="F")),
            "perm " + " ".join(str(i) for i in self.label_permutation),
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "EstimatedHmm":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        head = lines[0].split()
        H, X = int(head[1]), int(head[3])
        m = np.array([float(v) for v in lines[1].split()[1:]]).reshape(H, H)
        e = np.array([float(v) for v in lines[2].split()[1:]]).reshape(
            (X, H), order="F"
        )
        perm = tuple(int(v) for v in lines[3].split()[1:])
        return EstimatedHmm(
            raw_transition=m,
            raw_emission=e,
            transition_hat=m,
            emission_hat=e,
            label_permutation=perm,
        )


def _fix_svd_signs(basis: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry positive (cross-run stability)."""
    out = basis.copy()
    for j in range(out.shape[1]):
        k = int(np.argmax(np.abs(out[:, j])))
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def _contract(p312: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.einsum("ijk,k->ij", p312, z)


def spectral_estimate(moments: MomentSet, H: int, seed: int) -> EstimatedHmm:
    """Estimate raw ``(M, E)`` from moment tables (labels arbitrary, unaligned).

    SVDs of the pairwise tables give the subspace bases; the triple table is
    contracted along random directions drawn from ``seed`` and simultaneously
    diagonalized in the shared eigenbasis ``R``.  Singular values are taken in
    descending order with index tie-break.  If the eigensystem is complex or
    defective beyond tolerance, a fresh rotation is drawn (budget of
    ``RETRY_BUDGET``); then :class:`DiagonalizationFailed` is raised.

    Eigenvector sign ambiguity scales rows of the raw transition estimate by
    an arbitrary sign; rows are flipped to have nonnegative sums, since they
    estimate probability distributions.
    """
    X = moments.p31.shape[0]
    if H > X:
        raise ShapeMismatch(f"H = {H} must not exceed X = {X}")
    if moments.sample_count < 3:
        raise TooShort("moment set built from fewer than 3 contexts")
    u3_full, s31, v31t = np.linalg.svd(moments.p31)
    if s31[H - 1] < RANK_TOL:
        raise RankDeficient(
            f"{H}-th singular value of p31 is {s31[H - 1]:.3e} < {RANK_TOL}"
        )
    u3 = _fix_svd_signs(u3_full[:, :H])
    u1 = _fix_svd_signs(v31t[:H, :].T)
    _, _, v32t = np.linalg.svd(moments.p32)
    u2 = _fix_svd_signs(v32t[:H, :].T)

    pivot = u3.T @ moments.p31 @ u1
    if np.linalg.cond(pivot) > COND_LIMIT:
        raise NearSingularPivot("projected pairwise moment matrix is near singular")
    pivot_inv = np.linalg.inv(pivot)

    def contracted_b(z: np.ndarray) -> np.ndarray:
        return (u3.T @ _contract(moments.p312, z) @ u1) @ pivot_inv

    rng = np.random.default_rng(seed)
    r_mat = None
    gamma = None
    for _ in range(RETRY_BUDGET):
        q, _ = np.linalg.qr(rng.normal(size=(H, H)))
        b1 = contracted_b(u2 @ q[0])
        eigvals, eigvecs = np.linalg.eig(b1)
        radius = float(np.max(np.abs(eigvals))) if H > 0 else 0.0
        imag_limit = IMAG_TOL * max(radius, 1e-300)
        if float(np.max(np.abs(eigvals.imag))) > imag_limit:
            continue
        candidate = np.real(eigvecs)
        norms = np.linalg.norm(candidate, axis=0)
        if np.any(norms < 1e-12):
            continue
        candidate = candidate / norms
        if np.linalg.cond(candidate) > COND_LIMIT:
            continue
        r_mat, gamma = candidate, q
        break
    if r_mat is None or gamma is None:
        raise DiagonalizationFailed(
            f"no real well-conditioned eigensystem in {RETRY_BUDGET} rotations"
        )

    r_inv = np.linalg.inv(r_mat)
    l_mat = np.empty((H, H))
    for h in range(H):
        bh = contracted_b(u2 @ gamma[h])
        l_mat[h] = np.real(np.diag(r_inv @ bh @ r_mat))

    # Box C writes the emission output as the transpose of obs_factor; the
    # package-wide convention keeps emissions X x H (column h = nu_h).
    obs_factor = u2 @ np.linalg.solve(gamma, l_mat)
    proj = u3.T @ obs_factor
    if np.linalg.cond(proj) > COND_LIMIT:
        raise NearSingularPivot("projected observation factor is near singular")
    raw_m = np.linalg.solve(proj, r_mat).T
    row_signs = np.where(raw_m.sum(axis=1) < 0, -1.0, 1.0)
    raw_m = raw_m * row_signs[:, None]

    return EstimatedHmm(
        raw_transition=raw_m,
        raw_emission=obs_factor,
        label_permutation=tuple(range(H)),
        workspace=SpectralWorkspace(
            u1=u1, u2=u2, u3=u3, gamma_rotation=gamma, r_matrix=r_mat, l_matrix=l_mat
        ),
    )


def _clip_normalize(vectors: np.ndarray) -> np.ndarray:
    """Clip negatives and renormalize each row to a distribution (uniform if zero)."""
    clipped = np.clip(vectors, 0.0, None)
    sums = clipped.sum(axis=1)
    dim = vectors.shape[1]
    out = np.where(
        (sums > 0.0)[:, None],
        clipped / np.where(sums > 0.0, sums, 1.0)[:, None],
        np.full_like(clipped, 1.0 / dim),
    )
    return out


def postprocess(raw: EstimatedHmm) -> EstimatedHmm:
    """Clip small negative entries and renormalize to valid stochastic matrices.

    Rows of the transition and columns of the emission are projected by
    clipping to zero and dividing by the sum; an all-zero row or column falls
    back to the uniform distribution.  Idempotent on valid inputs.
    """
    m_src = raw.transition_hat if raw.transition_hat is not None else raw.raw_transition
    e_src = raw.emission_hat if raw.emission_hat is not None else raw.raw_emission
    if not (np.all(np.isfinite(m_src)) and np.all(np.isfinite(e_src))):
        raise NonFinite("raw estimates contain non-finite entries")
    m_hat = _clip_normalize(np.asarray(m_src, dtype=float))
    e_hat = _clip_normalize(np.asarray(e_src, dtype=float).T).T
    return replace(raw, transition_hat=m_hat, emission_hat=e_hat)


def _emission_columns(estimate: EstimatedHmm) -> np.ndarray:
    if estimate.emission_hat is not None:
        return estimate.emission_hat
    return estimate.raw_emission


def align(previous: EstimatedHmm | None, fresh: EstimatedHmm) -> EstimatedHmm:
    """Relabel ``fresh`` so its emission columns best match ``previous``.

    The permutation minimizes the worst-column Euclidean distance
    ``max_h || nu_prev_h - nu_fresh_perm(h) ||_2`` (ties: lexicographically
    smallest permutation); with no previous estimate the labels are kept.
    """
    H = fresh.num_states
    if previous is None:
        return replace(fresh, label_permutation=tuple(range(H)))
    if previous.num_states != H:
        raise ShapeMismatch("cannot align estimates with different H")
    prev_cols = _emission_columns(previous)
    fresh_cols = _emission_columns(fresh)
    best_perm = None
    best_cost = np.inf
    for perm in itertools.permutations(range(H)):
        cost = max(
            float(np.linalg.norm(prev_cols[:, h] - fresh_cols[:, perm[h]]))
            for h in range(H)
        )
        if cost < best_cost:
            best_cost, best_perm = cost, perm
    assert best_perm is not None
    idx = list(best_perm)
    return replace(
        fresh,
        raw_transition=fresh.raw_transition[np.ix_(idx, idx)],
        raw_emission=fresh.raw_emission[:, idx],
        transition_hat=(
            None
            if fresh.transition_hat is None
            else fresh.transition_hat[np.ix_(idx, idx)]
        ),
        emission_hat=(
            None if fresh.emission_hat is None else fresh.emission_hat[:, idx]
        ),
        label_permutation=best_perm,
    )
