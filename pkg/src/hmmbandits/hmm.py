"""Ground-truth HMM representation, sampling, exact belief filtering, and
forgetting-rate diagnostics.

The hidden chain lives on ``[H]`` (0-based indices ``0..H-1`` in code), the
finite context space on ``[X]``.  The transition matrix ``M`` is row-stochastic
(``M[h, h']`` is the probability of moving ``h -> h'``) and the emission matrix
``E`` is column-stochastic of shape ``(X, H)``: column ``h`` is the context
distribution under state ``h``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLikelihood, NotMixing, ShapeMismatch, TooLarge

PROB_ATOL = 1e-12
BELIEF_ATOL = 1e-10


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class HmmParams:
    """Ground-truth generator: initial distribution, transition, emissions."""

    num_states: int
    num_contexts: int
    initial_dist: np.ndarray  # (H,)
    transition: np.ndarray    # (H, H), row-stochastic
    emission: np.ndarray      # (X, H), column-stochastic

    def __post_init__(self):
        object.__setattr__(self, "initial_dist", _freeze(self.initial_dist))
        object.__setattr__(self, "transition", _freeze(self.transition))
        object.__setattr__(self, "emission", _freeze(self.emission))
        H, X = self.num_states, self.num_contexts
        if H < 1 or X < 1:
            raise ShapeMismatch("num_states and num_contexts must be positive")
        if self.initial_dist.shape != (H,):
            raise ShapeMismatch(f"pi must have length {H}")
        if self.transition.shape != (H, H):
            raise ShapeMismatch(f"M must be {H}x{H}")
        if self.emission.shape != (X, H):
            raise ShapeMismatch(f"E must be {X}x{H}")
        for name, arr, axis in (
            ("pi", self.initial_dist, None),
            ("M rows", self.transition, 1),
            ("E columns", self.emission, 0),
        ):
            if np.any(arr < 0):
                raise ShapeMismatch(f"{name} must be entrywise nonnegative")
            sums = arr.sum() if axis is None else arr.sum(axis=axis)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=PROB_ATOL):
                raise ShapeMismatch(f"{name} must sum to 1 within {PROB_ATOL}")


@dataclass(frozen=True)
class HmmDiagnostics:
    """Regularity quantities required by the spectral estimator."""

    eps_M: float
    sigma_min_E: float
    sigma_min_M: float
    e_nu_min: float
    is_stationary_init: bool
    regularity_ok: bool


@dataclass(frozen=True)
class Trajectory:
    """A sampled hidden path and its emitted contexts (0-based indices)."""

    hidden: np.ndarray
    contexts: np.ndarray
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", np.asarray(self.hidden, dtype=np.int64))
        object.__setattr__(self, "contexts", np.asarray(self.contexts, dtype=np.int64))
        if len(self.hidden) != self.horizon or len(self.contexts) != self.horizon:
            raise ShapeMismatch("hidden/context lengths must equal horizon")


@dataclass(frozen=True)
class Belief:
    """Posterior distribution over hidden states after ``round`` contexts."""

    probs: np.ndarray
    round: int

    def __post_init__(self):
        object.__setattr__(self, "probs", _freeze(self.probs))
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > BELIEF_ATOL:
            raise ShapeMismatch("belief must be a probability vector")


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (left eigenvector)."""
    vals, vecs = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def validate(params: HmmParams) -> HmmDiagnostics:
    """Compute regularity diagnostics for the spectral estimator.

    Shape inconsistencies raise :class:`ShapeMismatch` (already enforced at
    construction); regularity violations are only *reported*, because the
    exact filter and the simulator work without them.
    """
    M, E, pi = params.transition, params.emission, params.initial_dist
    eps_M = float(M.min())
    e_nu_min = float(E.min())
    sigma_min_E = float(np.linalg.svd(E, compute_uv=False)[-1])
    sigma_min_M = float(np.linalg.svd(M, compute_uv=False)[-1])
    is_stationary = bool(np.max(np.abs(pi @ M - pi)) < 1e-8)
    ok = (
        sigma_min_E > 1e-10
        and sigma_min_M > 1e-10
        and eps_M > 0.0
        and e_nu_min > 0.0
        and params.num_states <= params.num_contexts
    )
    return HmmDiagnostics(
        eps_M=eps_M,
        sigma_min_E=sigma_min_E,
        sigma_min_M=sigma_min_M,
        e_nu_min=e_nu_min,
        is_stationary_init=is_stationary,
        regularity_ok=ok,
    )


def sample_trajectory(params: HmmParams, horizon: int, seed: int) -> Trajectory:
    """Sample ``h_1 ~ pi``, ``x_t ~ nu_{h_t}``, ``h_{t+1} ~ M[h_t]``.

    Deterministic given ``(params, horizon, seed)``.
    """
    if horizon < 1:
        raise ShapeMismatch("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    cum_rows = np.cumsum(params.transition, axis=1)
    cum_cols = np.cumsum(params.emission, axis=0)
    cum_pi = np.cumsum(params.initial_dist)
    u_state = rng.random(horizon)
    u_ctx = rng.random(horizon)
    hidden = np.empty(horizon, dtype=np.int64)
    contexts = np.empty(horizon, dtype=np.int64)
    h = int(np.searchsorted(cum_pi, u_state[0], side="right"))
    h = min(h, params.num_states - 1)
    for t in range(horizon):
        hidden[t] = h
        x = int(np.searchsorted(cum_cols[:, h], u_ctx[t], side="right"))
        contexts[t] = min(x, params.num_contexts - 1)
        if t + 1 < horizon:
            h = int(np.searchsorted(cum_rows[h], u_state[t + 1], side="right"))
            h = min(h, params.num_states - 1)
    return Trajectory(hidden=hidden, contexts=contexts, horizon=horizon)


def forward_step(
    belief: np.ndarray | None,
    prior: np.ndarray,
    transition: np.ndarray,
    emission: np.ndarray,
    context: int,
    on_degenerate: str = "raise",
) -> tuple[np.ndarray, float]:
    """One Bayes forward update; returns the new belief and the normalizer.

    ``belief is None`` applies the initial update from ``prior``; otherwise the
    belief is propagated through ``transition`` and reweighted by the emission
    likelihood of ``context``.  A zero normalizer means the observation is
    impossible under every state: depending on ``on_degenerate`` this raises
    :class:`DegenerateLikelihood` or resets to the uniform distribution.
    """
    if belief is None:
        unnorm = emission[context, :] * prior
    else:
        unnorm = emission[context, :] * (transition.T @ belief)
    norm = float(unnorm.sum())
    if norm <= 0.0 or not np.isfinite(norm):
        if on_degenerate == "uniform":
            H = transition.shape[0]
            return np.full(H, 1.0 / H), 0.0
        raise DegenerateLikelihood(
            f"context {context} has zero likelihood under all states"
        )
    return unnorm / norm, norm


class ForwardFilter:
    """Incremental Bayes filter; renormalizes at every step.

    The per-step renormalization (divide by the running sum) keeps the
    recursion stable over horizons of ~1e6 rounds; the accumulated
    log-normalizer is retained as a diagnostic.
    """

    def __init__(
        self,
        transition: np.ndarray,
        emission: np.ndarray,
        prior: np.ndarray | None = None,
        on_degenerate: str = "raise",
    ):
        self.transition = np.asarray(transition, dtype=float)
        self.emission = np.asarray(emission, dtype=float)
        H = self.transition.shape[0]
        self.prior = (
            np.full(H, 1.0 / H) if prior is None else np.asarray(prior, dtype=float)
        )
        self.on_degenerate = on_degenerate
        self.belief: np.ndarray | None = None
        self.round = 0
        self.log_norm = 0.0

    def step(self, context: int) -> np.ndarray:
        self.belief, norm = forward_step(
            self.belief,
            self.prior,
            self.transition,
            self.emission,
            context,
            self.on_degenerate,
        )
        self.round += 1
        if norm > 0.0:
            self.log_norm += float(np.log(norm))
        return self.belief

    def run(self, contexts) -> np.ndarray:
        for x in contexts:
            self.step(int(x))
        assert self.belief is not None
        return self.belief


def true_belief_filter(params: HmmParams, contexts) -> Belief:
    """Exact posterior ``b_t(h) = P(h_t = h | x_{1:t})`` via the forward recursion."""
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.size == 0:
        raise ShapeMismatch("contexts must be non-empty")
    filt = ForwardFilter(
        params.transition, params.emission, prior=params.initial_dist
    )
    probs = filt.run(contexts)
    return Belief(probs=probs, round=int(contexts.size))


def forgetting_rate(params: HmmParams) -> float:
    """Forgetting rate ``gamma = 1 - min(M) / max(M)``.

    Instantiates the strong-mixing sandwich with kernel ``K(x, h') =
    nu_{h'}(x)`` and envelopes ``zeta- = min(M)``, ``zeta+ = max(M)``, which
    bracket ``P(h_2 = h', x_2 = x | h_1 = h) = M[h, h'] * nu_{h'}(x)``
    entrywise for a finite context space.
    """
    eps_M = float(params.transition.min())
    if eps_M <= 0.0:
        raise NotMixing("transition matrix has a zero entry")
    return 1.0 - eps_M / float(params.transition.max())


def _conditional_state_dists(
    params: HmmParams, context_seq: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Rows = P(h_t = . | h_s = i, x_{s+1:t} = context_seq).

    Returns the row matrix and a mask of start states from which the sequence
    has positive probability (rows outside the mask are unnormalized junk).
    """
    H = params.num_states
    W = np.eye(H)
    for x in context_seq:
        W = (W @ params.transition) * params.emission[x, :][None, :]
    norms = W.sum(axis=1)
    feasible = norms > 0.0
    safe = np.where(feasible, norms, 1.0)
    return W / safe[:, None], feasible


def check_forgetting(params: HmmParams, gamma: float, max_gap: int) -> bool:
    """Exhaustively verify the exponential-forgetting inequality.

    Enumerates every context sequence of length ``1..max_gap`` and every
    ordered pair of start states, and checks that the conditional laws of the
    terminal state differ by at most ``2 * gamma**gap`` in l1 norm (sequences
    that are impossible from every start state are skipped).
    """
    if params.num_states > 4 or params.num_contexts > 4 or max_gap > 8:
        raise TooLarge("enumeration bounds are H <= 4, X <= 4, max_gap <= 8")
    tol = 1e-9
    for gap in range(1, max_gap + 1):
        bound = 2.0 * gamma**gap + tol
        for seq in itertools.product(range(params.num_contexts), repeat=gap):
            W, feasible = _conditional_state_dists(params, seq)
            if not feasible.any():
                continue
            rows = W[feasible]
            diffs = np.abs(rows[:, None, :] - rows[None, :, :]).sum(axis=2)
            if float(diffs.max()) > bound:
                return False
    return True
