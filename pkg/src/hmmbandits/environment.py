"""The bandit environment wrapping the HMM: transfer-function tables, both
reward models (state-dependent and belief-dependent means), noise generation,
and the per-round interaction protocol.

Protocol order at round ``t``: observe context -> act -> observe reward ->
latent transition.  Hidden states never cross the policy boundary; full
per-round reward vectors are generated internally (for counterfactual
diagnostics) but only the chosen entry is revealed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import HorizonExceeded, ModelMismatch, ShapeMismatch
from .hmm import ForwardFilter, HmmParams

STATE_DEPENDENT = "state_dependent"
BELIEF_DEPENDENT = "belief_dependent"


@dataclass(frozen=True)
class TransferFunction:
    """Known feature map ``phi(a, x)`` stored as an ``(A, X, d)`` table.

    Construction enforces ``||phi(a, x)||_2 <= 1`` for every pair, either by
    rejection or by joint rescaling.
    """

    kind: str
    table: np.ndarray  # (A, X, d)

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        table.flags.writeable = False
        object.__setattr__(self, "table", table)
        if table.ndim != 3:
            raise ShapeMismatch("transfer table must have shape (A, X, d)")
        norms = np.linalg.norm(table, axis=2)
        if norms.max() > 1.0 + 1e-9:
            raise ShapeMismatch("transfer function exceeds unit norm; rescale first")

    @property
    def num_actions(self) -> int:
        return self.table.shape[0]

    @property
    def num_contexts(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def phi(self, action: int, context: int) -> np.ndarray:
        return self.table[action, context]

    @staticmethod
    def one_hot_action(num_actions: int, num_contexts: int) -> "TransferFunction":
        """``phi(a, x) = e_a`` in ``R^A`` (context enters only through beliefs)."""
        table = np.zeros((num_actions, num_contexts, num_actions))
        for a in range(num_actions):
            table[a, :, a] = 1.0
        return TransferFunction(kind="one_hot_action", table=table)

    @staticmethod
    def action_context_outer(num_actions: int, num_contexts: int) -> "TransferFunction":
        """``phi(a, x) = e_a (x) e_x`` in ``R^{A*X}`` (unit norm by construction)."""
        d = num_actions * num_contexts
        table = np.zeros((num_actions, num_contexts, d))
        for a in range(num_actions):
            for x in range(num_contexts):
                table[a, x, a * num_contexts + x] = 1.0
        return TransferFunction(kind="action_context_outer", table=table)

    @staticmethod
    def from_table(table: np.ndarray, rescale: bool = True) -> "TransferFunction":
        table = np.asarray(table, dtype=float)
        max_norm = float(np.linalg.norm(table, axis=2).max())
        if max_norm > 1.0 and rescale:
            table = table / max_norm
        return TransferFunction(kind="table", table=table)


@dataclass(frozen=True)
class NoiseModel:
    """Reward noise law; ``v_eta`` is the sub-Gaussian proxy and ``c_eta`` the
    second-moment bound (gaussian: ``c_eta = v_eta**2``; bounded uniform on
    ``[-sqrt(3 c_eta), sqrt(3 c_eta)]``: ``v_eta = sqrt(3 c_eta)``)."""

    kind: str
    v_eta: float
    c_eta: float

    @staticmethod
    def gaussian(v_eta: float) -> "NoiseModel":
        if v_eta < 0:
            raise ShapeMismatch("v_eta must be nonnegative")
        return NoiseModel(kind="gaussian", v_eta=float(v_eta), c_eta=float(v_eta) ** 2)

    @staticmethod
    def bounded_uniform(c_eta: float) -> "NoiseModel":
        if c_eta < 0:
            raise ShapeMismatch("c_eta must be nonnegative")
        return NoiseModel(
            kind="bounded_uniform", v_eta=math.sqrt(3.0 * c_eta), c_eta=float(c_eta)
        )

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(0.0, self.v_eta, size=size) if self.v_eta > 0 else np.zeros(size)
        if self.kind == "bounded_uniform":
            half = math.sqrt(3.0 * self.c_eta)
            return rng.uniform(-half, half, size=size) if half > 0 else np.zeros(size)
        raise ShapeMismatch(f"unknown noise kind {self.kind!r}")


@dataclass(frozen=True)
class RewardSpec:
    """Per-state reward parameters, their bound, the noise law, and the model kind."""

    theta_star: np.ndarray  # (H, d)
    c_theta: float
    noise: NoiseModel
    model: str = STATE_DEPENDENT

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=float)
        theta.flags.writeable = False
        object.__setattr__(self, "theta_star", theta)
        if self.model not in (STATE_DEPENDENT, BELIEF_DEPENDENT):
            raise ShapeMismatch(f"unknown reward model {self.model!r}")
        if np.linalg.norm(theta, axis=1).max() > self.c_theta + 1e-9:
            raise ShapeMismatch("some ||theta_h|| exceeds c_theta")

    @property
    def num_states(self) -> int:
        return self.theta_star.shape[0]

    @property
    def dim(self) -> int:
        return self.theta_star.shape[1]


def check_reward_bounds(spec: RewardSpec, phi: TransferFunction) -> float:
    """Exhaustively verify ``|phi(a, x)^T theta_h| <= 1``; returns the max."""
    vals = np.einsum("axd,hd->axh", phi.table, spec.theta_star)
    worst = float(np.abs(vals).max())
    if worst > 1.0 + 1e-9:
        raise ShapeMismatch(f"reward mean bound violated: max |phi.theta| = {worst}")
    return worst


def sample_theta(
    phi: TransferFunction, num_states: int, rng: np.random.Generator,
    target: float = 0.9,
) -> tuple[np.ndarray, float]:
    """Draw Gaussian state parameters, jointly rescaled so the largest mean
    reward magnitude over the ``(a, x, h)`` grid equals ``target`` (strictly
    inside the unit bound); returns the parameters and the realized norm bound.
    """
    theta = rng.normal(size=(num_states, phi.dim))
    vals = np.einsum("axd,hd->axh", phi.table, theta)
    worst = float(np.abs(vals).max())
    if worst <= 0:
        raise ShapeMismatch("degenerate transfer/theta draw")
    theta = theta * (target / worst)
    c_theta = float(np.linalg.norm(theta, axis=1).max())
    return theta, c_theta


def mean_reward(
    spec: RewardSpec, phi: TransferFunction, action: int, context: int, h_or_belief
) -> float:
    """Mean reward of the configured model.

    ``state_dependent`` expects a state index and returns
    ``phi(a, x)^T theta_h``; ``belief_dependent`` expects a belief vector and
    returns ``phi(a, x)^T sum_h b(h) theta_h``.
    """
    vec = phi.phi(action, context)
    if spec.model == STATE_DEPENDENT:
        if not np.isscalar(h_or_belief) and not isinstance(h_or_belief, (int, np.integer)):
            raise ModelMismatch("state_dependent model expects a state index")
        return float(vec @ spec.theta_star[int(h_or_belief)])
    belief = np.asarray(h_or_belief, dtype=float)
    if belief.ndim != 1 or belief.shape[0] != spec.num_states:
        raise ModelMismatch("belief_dependent model expects a length-H belief vector")
    return float(vec @ (spec.theta_star.T @ belief))


def draw_reward(
    spec: RewardSpec,
    phi: TransferFunction,
    action: int,
    context: int,
    hidden: int,
    belief: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Mean reward of the configured model plus one independent noise draw."""
    target = hidden if spec.model == STATE_DEPENDENT else belief
    eta = float(spec.noise.draw(rng, 1)[0])
    return mean_reward(spec, phi, action, context, target) + eta


@dataclass(frozen=True)
class RoundRecord:
    """One protocol round; ``hidden`` is environment-private (diagnostics only)."""

    round: int
    context: int
    hidden: int
    action: int
    reward: float
    true_belief: np.ndarray
    estimated_belief: np.ndarray | None = None


class BanditEnvironment:
    """Sequential environment: context reveal, action, reward, latent step.

    Independent RNG streams for the latent chain, the emissions, and the
    reward noise are derived from ``seed``, so policy-side randomness can
    never perturb the environment path and different policies see identical
    paths under the same seed (paired comparisons).
    """

    def __init__(
        self,
        params: HmmParams,
        spec: RewardSpec,
        phi: TransferFunction,
        horizon: int,
        seed,
    ):
        if spec.num_states != params.num_states:
            raise ShapeMismatch("theta_star rows must match num_states")
        if phi.num_contexts != params.num_contexts:
            raise ShapeMismatch("transfer table contexts must match num_contexts")
        check_reward_bounds(spec, phi)
        self.params = params
        self.spec = spec
        self.phi = phi
        self.horizon = int(horizon)
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        streams = root.spawn(3)
        self._rng_latent = np.random.default_rng(streams[0])
        self._rng_emission = np.random.default_rng(streams[1])
        self._rng_noise = np.random.default_rng(streams[2])
        self._filter = ForwardFilter(
            params.transition, params.emission, prior=params.initial_dist
        )
        self._cum_rows = np.cumsum(params.transition, axis=1)
        self._cum_cols = np.cumsum(params.emission, axis=0)
        self._cum_pi = np.cumsum(params.initial_dist)
        self.t = 0
        self._hidden = -1
        self._context = -1
        self._belief: np.ndarray | None = None
        self._awaiting_action = False

    def _draw_index(self, cum: np.ndarray, rng: np.random.Generator) -> int:
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        return min(idx, cum.shape[0] - 1)

    def observe(self) -> tuple[int, int]:
        """Advance to the next round and reveal ``(t, x_t)``."""
        if self.t >= self.horizon:
            raise HorizonExceeded(f"horizon {self.horizon} already reached")
        if self._awaiting_action:
            raise ShapeMismatch("act on the current context before observing again")
        self.t += 1
        if self.t == 1:
            self._hidden = self._draw_index(self._cum_pi, self._rng_latent)
        self._context = self._draw_index(
            self._cum_cols[:, self._hidden], self._rng_emission
        )
        self._belief = self._filter.step(self._context)
        self._awaiting_action = True
        return self.t, self._context

    def step(self, action: int, estimated_belief: np.ndarray | None = None) -> RoundRecord:
        """Resolve the pending round with ``action``; latent state advances after."""
        if not self._awaiting_action:
            raise ShapeMismatch("observe a context before acting")
        a = int(action)
        if not 0 <= a < self.phi.num_actions:
            raise ShapeMismatch(f"action {a} outside the action set")
        rewards = self.reward_vector()
        record = RoundRecord(
            round=self.t,
            context=self._context,
            hidden=self._hidden,
            action=a,
            reward=float(rewards[a]),
            true_belief=self._belief.copy(),
            estimated_belief=None if estimated_belief is None else np.array(estimated_belief),
        )
        self._hidden = self._draw_index(self._cum_rows[self._hidden], self._rng_latent)
        self._awaiting_action = False
        return record

    def reward_vector(self) -> np.ndarray:
        """Full per-round reward vector (internal; only the chosen entry is revealed)."""
        A = self.phi.num_actions
        if self.spec.model == STATE_DEPENDENT:
            means = self.phi.table[:, self._context] @ self.spec.theta_star[self._hidden]
        else:
            means = self.phi.table[:, self._context] @ (
                self.spec.theta_star.T @ self._belief
            )
        return means + self.spec.noise.draw(self._rng_noise, A)

    @property
    def true_belief(self) -> np.ndarray:
        """Oracle-side belief of the pending round (never shown to policies)."""
        if self._belief is None:
            raise ShapeMismatch("no round observed yet")
        return self._belief
