"""Decision strategies: staged LinUCB on estimated beliefs, its per-round
(non-staged) variant, the oracle benchmark policy, and a uniform-random
baseline; plus the shared online ridge estimator and both confidence-bonus
formulas.

All policies act on the observation ``(t, x_t, belief)`` only: contexts and
beliefs derived from them, plus the policy's own action/reward history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .beliefs import BeliefErrorBudget, u_belief
from .errors import FeatureTooLarge, ShapeMismatch, StageNotFrozen
from .hmm import Belief
from .environment import TransferFunction


@dataclass(frozen=True)
class RidgeState:
    """Regularized least-squares state for the stacked parameter vector.

    ``gram = lam * I + sum of feature outer products``; ``theta_hat`` solves
    ``gram @ theta = moment`` once at least one round is absorbed, and equals
    ``(1/lam) * ones`` at initialization (the optimistic warm start).
    """

    gram: np.ndarray
    moment: np.ndarray
    theta_hat: np.ndarray
    lam: float
    rounds_absorbed: int

    @staticmethod
    def initialize(dim: int, lam: float) -> "RidgeState":
        if lam <= 0:
            raise ShapeMismatch("ridge parameter must be positive")
        return RidgeState(
            gram=lam * np.eye(dim),
            moment=np.zeros(dim),
            theta_hat=np.full(dim, 1.0 / lam),
            lam=float(lam),
            rounds_absorbed=0,
        )


def ridge_update(state: RidgeState, feature: np.ndarray, reward: float) -> RidgeState:
    """Absorb one ``(feature, reward)`` pair and re-solve the linear system."""
    feature = np.asarray(feature, dtype=float)
    if np.linalg.norm(feature) > 1.0 + 1e-9:
        raise FeatureTooLarge("ridge features must have Euclidean norm <= 1")
    gram = state.gram + np.outer(feature, feature)
    moment = state.moment + feature * float(reward)
    theta = np.linalg.solve(gram, moment)
    return RidgeState(
        gram=gram,
        moment=moment,
        theta_hat=theta,
        lam=state.lam,
        rounds_absorbed=state.rounds_absorbed + 1,
    )


def tensor_feature(belief, phi_vec: np.ndarray) -> np.ndarray:
    """``b (x) phi``: block ``h`` of the output is ``b(h) * phi``."""
    probs = belief.probs if isinstance(belief, Belief) else np.asarray(belief, dtype=float)
    return (probs[:, None] * np.asarray(phi_vec, dtype=float)[None, :]).ravel()


@dataclass(frozen=True)
class StagePlan:
    """Block structure of the staged strategy: round ``t`` is in stage
    ``ceil(t / stage_length)``."""

    stage_length: int
    horizon: int

    def __post_init__(self):
        if self.stage_length < 1 or self.horizon < 1:
            raise ShapeMismatch("stage_length and horizon must be >= 1")

    @property
    def num_stages(self) -> int:
        return -(-self.horizon // self.stage_length)

    def stage_of(self, t: int) -> int:
        if not 1 <= t <= self.horizon:
            raise ShapeMismatch(f"round {t} outside [1, {self.horizon}]")
        return -(-t // self.stage_length)


@dataclass(frozen=True)
class BonusConfig:
    """Inputs of the confidence bonuses.

    ``gamma``, ``c_theta``, ``c_eta``, ``v_eta`` are treated as available to
    the learner.  ``known_beliefs=True`` zeroes every belief-error term (the
    oracle-belief ablation).  ``bonus_scope`` selects whether the Gram-norm
    factor multiplies the full five-term parenthesis of the staged bonus
    (``"full"``, default) or only its first three terms (``"partial"``).
    """

    delta: float
    gamma: float
    c_theta: float
    c_eta: float
    v_eta: float
    H: int
    X: int
    d: int
    variant: str = "boxA"
    bonus_scope: str = "full"
    known_beliefs: bool = False

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ShapeMismatch("delta must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ShapeMismatch("gamma must lie in [0, 1)")
        if self.bonus_scope not in ("full", "partial"):
            raise ShapeMismatch("bonus_scope must be 'full' or 'partial'")

    def belief_budget(self) -> BeliefErrorBudget | None:
        if self.known_beliefs:
            return None
        return BeliefErrorBudget(H=self.H, X=self.X, delta=self.delta / 2.0)

    def u(self, t: int) -> float:
        budget = self.belief_budget()
        return 0.0 if budget is None else u_belief(budget, t)


def _u_prefix(cfg: BonusConfig, upto: int) -> float:
    return float(sum(cfg.u(tau) for tau in range(1, upto + 1)))


def bonus_boxA(
    cfg: BonusConfig,
    plan: StagePlan,
    ridge: RidgeState,
    belief,
    phi_vec: np.ndarray,
    t: int,
    u_prefix_sum: float | None = None,
) -> float:
    """Staged confidence bonus.

    Constant ``1 + sqrt(d)/lam`` during the first stage.  Later the bonus is
    the current belief budget plus ``||G^{-1} (b (x) phi)||_2`` (Gram frozen
    at the last stage boundary) times the sum of: the regularization bias
    ``lam sqrt(H) C_theta``, the two Markov-inequality deviation terms, the
    belief drift ``2 (s_t - 1) gamma / (1 - gamma)``, and the accumulated
    belief budget up to the boundary.  ``bonus_scope="partial"`` leaves the
    last two terms outside the norm factor.
    """
    lam = ridge.lam
    if t <= plan.stage_length:
        return 1.0 + math.sqrt(cfg.d) / lam
    ell = plan.stage_length
    s_t = plan.stage_of(t)
    s_T = plan.num_stages
    frozen = (s_t - 1) * ell
    if ridge.rounds_absorbed != frozen:
        raise StageNotFrozen(
            f"ridge absorbed {ridge.rounds_absorbed} rounds, stage start is {frozen}"
        )
    v = tensor_feature(belief, phi_vec)
    norm = float(np.linalg.norm(np.linalg.solve(ridge.gram, v)))
    if u_prefix_sum is None:
        u_prefix_sum = _u_prefix(cfg, frozen)
    gam, delta = cfg.gamma, cfg.delta
    t1 = lam * math.sqrt(cfg.H) * cfg.c_theta
    t2 = 4.0 * math.sqrt(s_T * (s_t - 1) * (1.0 + s_t * gam) * ell / (delta * (1.0 - gam)))
    t3 = math.sqrt(4.0 * s_T / delta * cfg.c_eta * (s_t - 1) * ell)
    t4 = 2.0 * (s_t - 1) * gam / (1.0 - gam)
    t5 = float(u_prefix_sum)
    if cfg.bonus_scope == "full":
        return cfg.u(t) + norm * (t1 + t2 + t3 + t4 + t5)
    return cfg.u(t) + norm * (t1 + t2 + t3) + t4 + t5


def bonus_boxB(
    cfg: BonusConfig,
    ridge: RidgeState,
    belief,
    phi_vec: np.ndarray,
    t: int,
    u_prefix_sum: float | None = None,
    gram_inv: np.ndarray | None = None,
) -> float:
    """Per-round confidence bonus.

    ``1 + sqrt(d)/lam`` at ``t = 1``; afterwards the belief budget plus the
    Mahalanobis norm ``||b (x) phi||_{G_{t-1}^{-1}}`` times the accumulated
    belief budget over ``sqrt(lam)``, the regularization bias, and the
    self-normalized deviation width.
    """
    lam = ridge.lam
    if t == 1:
        return 1.0 + math.sqrt(cfg.d) / lam
    v = tensor_feature(belief, phi_vec)
    if gram_inv is not None:
        quad = float(v @ gram_inv @ v)
    else:
        quad = float(v @ np.linalg.solve(ridge.gram, v))
    mahal = math.sqrt(max(quad, 0.0))
    if u_prefix_sum is None:
        u_prefix_sum = _u_prefix(cfg, t - 1)
    dH = cfg.d * cfg.H
    width = (
        u_prefix_sum / math.sqrt(lam)
        + math.sqrt(lam * cfg.H) * cfg.c_theta
        + cfg.v_eta * math.sqrt(2.0 * math.log(2.0 / cfg.delta) + dH * math.log(1.0 + t / (lam * dH)))
    )
    return cfg.u(t) + mahal * width


class _FeatureTable:
    """Per-context feature matrices ``(A, H*d)`` for a fixed belief."""

    def __init__(self, phi: TransferFunction, num_states: int):
        self.phi = phi
        self.H = num_states
        self.A = phi.num_actions
        self.d = phi.dim

    def all_actions(self, context: int, belief: np.ndarray) -> np.ndarray:
        block = belief[None, :, None] * self.phi.table[:, context][:, None, :]
        return block.reshape(self.A, self.H * self.d)


class BoxAPolicy:
    """Staged LinUCB on estimated beliefs.

    The scoring estimate and the Gram matrix are frozen at the last stage
    boundary; every round's feature still enters the accumulating ridge so
    the boundary refresh sees the whole prefix.  ``bonus_override(t, a)``
    replaces the bonus formula (plumbing tests).
    """

    name = "boxA"

    def __init__(
        self,
        phi: TransferFunction,
        plan: StagePlan,
        cfg: BonusConfig,
        lam: float,
        bonus_override=None,
    ):
        self.phi = phi
        self.plan = plan
        self.cfg = cfg
        self.lam = float(lam)
        self.bonus_override = bonus_override
        self._features = _FeatureTable(phi, cfg.H)
        dH = cfg.H * phi.dim
        self._dH = dH
        self._gram = self.lam * np.eye(dH)
        self._moment = np.zeros(dH)
        self._rounds = 0
        self._u_running = 0.0
        # frozen snapshot used for scoring and bonuses
        self._theta_frozen = np.full(dH, 1.0 / self.lam)
        self._gram_frozen = self._gram.copy()
        self._gram_frozen_inv = np.eye(dH) / self.lam
        self._frozen_rounds = 0
        self._u_prefix_frozen = 0.0
        self.theta_version = 0
        self._stage_factor_cache: tuple[int, float, float] | None = None

    @property
    def ridge(self) -> RidgeState:
        """Stage-frozen ridge snapshot (what the bonuses are allowed to see)."""
        return RidgeState(
            gram=self._gram_frozen,
            moment=self._moment.copy() if self._frozen_rounds else np.zeros(self._dH),
            theta_hat=self._theta_frozen,
            lam=self.lam,
            rounds_absorbed=self._frozen_rounds,
        )

    def _stage_terms(self, s_t: int) -> tuple[float, float]:
        """(norm-multiplied factor, additive tail) for the current stage."""
        if self._stage_factor_cache and self._stage_factor_cache[0] == s_t:
            return self._stage_factor_cache[1], self._stage_factor_cache[2]
        cfg, plan = self.cfg, self.plan
        ell = plan.stage_length
        s_T = plan.num_stages
        gam, delta = cfg.gamma, cfg.delta
        t1 = self.lam * math.sqrt(cfg.H) * cfg.c_theta
        t2 = 4.0 * math.sqrt(
            s_T * (s_t - 1) * (1.0 + s_t * gam) * ell / (delta * (1.0 - gam))
        )
        t3 = math.sqrt(4.0 * s_T / delta * cfg.c_eta * (s_t - 1) * ell)
        t4 = 2.0 * (s_t - 1) * gam / (1.0 - gam)
        t5 = self._u_prefix_frozen
        if cfg.bonus_scope == "full":
            factor, tail = t1 + t2 + t3 + t4 + t5, 0.0
        else:
            factor, tail = t1 + t2 + t3, t4 + t5
        self._stage_factor_cache = (s_t, factor, tail)
        return factor, tail

    def act(self, t: int, context: int, belief: np.ndarray) -> int:
        feats = self._features.all_actions(context, np.asarray(belief, dtype=float))
        scores = feats @ self._theta_frozen
        if self.bonus_override is not None:
            bonuses = np.array([self.bonus_override(t, a) for a in range(len(scores))])
        elif t <= self.plan.stage_length:
            bonuses = np.full(len(scores), 1.0 + math.sqrt(self.cfg.d) / self.lam)
        else:
            s_t = self.plan.stage_of(t)
            if self._frozen_rounds != (s_t - 1) * self.plan.stage_length:
                raise StageNotFrozen("frozen ridge is out of step with the stage plan")
            factor, tail = self._stage_terms(s_t)
            w = feats @ self._gram_frozen_inv
            norms = np.sqrt(np.einsum("ij,ij->i", w, w))
            bonuses = self.cfg.u(t) + norms * factor + tail
        return int(np.argmax(scores + bonuses))

    def update(self, t: int, context: int, belief: np.ndarray, action: int, reward: float) -> None:
        v = tensor_feature(np.asarray(belief, dtype=float), self.phi.phi(action, context))
        self._gram += np.outer(v, v)
        self._moment += v * float(reward)
        self._rounds += 1
        self._u_running += self.cfg.u(t)
        if self._rounds % self.plan.stage_length == 0:
            self._theta_frozen = np.linalg.solve(self._gram, self._moment)
            self._gram_frozen = self._gram.copy()
            self._gram_frozen_inv = np.linalg.inv(self._gram)
            self._frozen_rounds = self._rounds
            self._u_prefix_frozen = self._u_running
            self.theta_version += 1
            self._stage_factor_cache = None

    def set_gamma(self, gamma: float) -> None:
        """Swap the forgetting rate fed to the bonus (plugin-gamma mode)."""
        self.cfg = replace(self.cfg, gamma=float(gamma))
        self._stage_factor_cache = None


class BoxBPolicy:
    """LinUCB on estimated beliefs with per-round updates (no stages).

    The Gram inverse is maintained by rank-one (Sherman-Morrison) updates
    with a direct re-solve every ``resolve_every`` rounds to cap drift; the
    largest observed gap between maintained and direct inverse is kept as a
    diagnostic.
    """

    name = "boxB"

    def __init__(
        self,
        phi: TransferFunction,
        cfg: BonusConfig,
        lam: float,
        resolve_every: int = 1000,
        bonus_override=None,
    ):
        self.phi = phi
        self.cfg = cfg
        self.lam = float(lam)
        self.resolve_every = int(resolve_every)
        self.bonus_override = bonus_override
        self._features = _FeatureTable(phi, cfg.H)
        dH = cfg.H * phi.dim
        self._dH = dH
        self._gram = self.lam * np.eye(dH)
        self._moment = np.zeros(dH)
        self._gram_inv = np.eye(dH) / self.lam
        self._theta = np.full(dH, 1.0 / self.lam)
        self._rounds = 0
        self._u_prefix = 0.0
        self.max_inverse_drift = 0.0
        self._log2_delta = 2.0 * math.log(2.0 / cfg.delta)

    @property
    def ridge(self) -> RidgeState:
        return RidgeState(
            gram=self._gram,
            moment=self._moment,
            theta_hat=self._theta,
            lam=self.lam,
            rounds_absorbed=self._rounds,
        )

    def act(self, t: int, context: int, belief: np.ndarray) -> int:
        feats = self._features.all_actions(context, np.asarray(belief, dtype=float))
        scores = feats @ self._theta
        if self.bonus_override is not None:
            bonuses = np.array([self.bonus_override(t, a) for a in range(len(scores))])
        elif t == 1:
            bonuses = np.full(len(scores), 1.0 + math.sqrt(self.cfg.d) / self.lam)
        else:
            w = feats @ self._gram_inv
            mahal = np.sqrt(np.maximum(np.einsum("ij,ij->i", w, feats), 0.0))
            dH = self._dH
            width = (
                self._u_prefix / math.sqrt(self.lam)
                + math.sqrt(self.lam * self.cfg.H) * self.cfg.c_theta
                + self.cfg.v_eta
                * math.sqrt(self._log2_delta + dH * math.log(1.0 + t / (self.lam * dH)))
            )
            bonuses = self.cfg.u(t) + mahal * width
        return int(np.argmax(scores + bonuses))

    def update(self, t: int, context: int, belief: np.ndarray, action: int, reward: float) -> None:
        v = tensor_feature(np.asarray(belief, dtype=float), self.phi.phi(action, context))
        self._gram += np.outer(v, v)
        self._moment += v * float(reward)
        w = self._gram_inv @ v
        self._gram_inv -= np.outer(w, w) / (1.0 + float(v @ w))
        self._rounds += 1
        self._u_prefix += self.cfg.u(t)
        if self._rounds % self.resolve_every == 0:
            direct = np.linalg.inv(self._gram)
            drift = float(np.max(np.abs(direct - self._gram_inv)))
            self.max_inverse_drift = max(self.max_inverse_drift, drift)
            self._gram_inv = direct
            self._theta = np.linalg.solve(self._gram, self._moment)
        else:
            self._theta = self._gram_inv @ self._moment

    def set_gamma(self, gamma: float) -> None:
        """Kept for interface parity; the per-round bonus does not use gamma."""
        self.cfg = replace(self.cfg, gamma=float(gamma))


class OraclePolicy:
    """Benchmark policy: argmax of the true belief-weighted mean reward."""

    name = "oracle"

    def __init__(self, phi: TransferFunction, theta_star: np.ndarray):
        self.phi = phi
        self.theta_star = np.asarray(theta_star, dtype=float)

    def act(self, t: int, context: int, belief: np.ndarray) -> int:
        scores = self.phi.table[:, context] @ (self.theta_star.T @ np.asarray(belief))
        return int(np.argmax(scores))

    def update(self, t: int, context: int, belief: np.ndarray, action: int, reward: float) -> None:
        pass


class RandomPolicy:
    """Uniform-random baseline."""

    name = "random"

    def __init__(self, num_actions: int, rng: np.random.Generator):
        self.num_actions = int(num_actions)
        self.rng = rng

    def act(self, t: int, context: int, belief: np.ndarray) -> int:
        return int(self.rng.integers(self.num_actions))

    def update(self, t: int, context: int, belief: np.ndarray, action: int, reward: float) -> None:
        pass


def oracle_act(phi: TransferFunction, theta_star: np.ndarray, context: int, true_belief: np.ndarray) -> int:
    """Functional form of the oracle decision rule (smallest-index tie-break)."""
    scores = phi.table[:, context] @ (np.asarray(theta_star).T @ np.asarray(true_belief))
    return int(np.argmax(scores))
