"""Experiment configuration: INI sections with flat, documented keys.

Key names are the contract; the syntax is plain ``configparser`` INI.  Arrays
are whitespace-separated decimals: ``M`` row-major, ``E`` column-major
(column ``h`` is the context distribution of state ``h``), ``theta`` row per
state.  ``auto`` values resolve per policy and horizon at run time.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .environment import (
    BELIEF_DEPENDENT,
    STATE_DEPENDENT,
    NoiseModel,
    RewardSpec,
    TransferFunction,
    check_reward_bounds,
    sample_theta,
)
from .errors import ConfigError, ShapeMismatch
from .hmm import HmmParams, forgetting_rate, validate

KNOWN_POLICIES = ("boxA", "boxB", "oracle", "random")

CONFIG_SCHEMA = """\
[hmm]
H = <int>                 number of hidden states
X = <int>                 number of contexts
pi = <H decimals>         initial distribution
M = <H*H decimals>        transition matrix, row-major (M[h][h'] = P(h -> h'))
E = <X*H decimals>        emission matrix, column-major (column h = nu_h)

[reward]
model = state_dependent | belief_dependent
transfer = one_hot_action | action_context_outer | table
num_actions = <int>
d = <int>                 table transfer only
phi = <A*X*d decimals>    table transfer only (action-major, then context)
theta = <H*d decimals>    optional; row per state
theta_seed = <int>        generation recipe when theta absent
theta_target = <decimal>  max |phi . theta| after joint rescale (default 0.9)
noise = gaussian | bounded_uniform
v_eta = <decimal>         gaussian std (c_eta = v_eta^2)
c_eta = <decimal>         bounded_uniform second moment (v_eta = sqrt(3 c_eta))

[policy]
policy = <names>          one or more of: boxA boxB oracle random
delta = <decimal in (0,1)>
lambda = auto | <decimal> auto: T^(3/4) for boxA, T^(1/2) for boxB
ell = auto | <int>        auto: ceil(T^(3/4))
gamma = auto | <decimal>  auto: forgetting rate of the true transition matrix
c_theta = auto | <decimal>
c_eta = auto | <decimal>
v_eta = auto | <decimal>
bonus_scope = full | partial
beliefs = spectral | oracle
refit_every = auto | <int>  auto: ell for boxA, ceil(sqrt(T)) for boxB

[run]
horizons = <ints>
seeds = <int count, or explicit list of ints>
master_seed = <int>       overridden by LBL_SEED env var, then --seed
out = <directory>
emit_oracle_columns = true | false
exact_refilter = true | false
plugin_gamma = true | false
workers = <int>
"""


@dataclass(frozen=True)
class PolicySettings:
    policies: tuple
    delta: float = 0.1
    lam: str | float = "auto"
    ell: str | int = "auto"
    gamma: str | float = "auto"
    c_theta: str | float = "auto"
    c_eta: str | float = "auto"
    v_eta: str | float = "auto"
    bonus_scope: str = "full"
    beliefs: str = "spectral"
    refit_every: str | int = "auto"


@dataclass(frozen=True)
class RunSettings:
    horizons: tuple
    seeds: tuple
    master_seed: int = 0
    out: str = "results"
    emit_oracle_columns: bool = False
    exact_refilter: bool = False
    plugin_gamma: bool = False
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    params: HmmParams
    reward: RewardSpec
    phi: TransferFunction
    policy: PolicySettings
    run: RunSettings
    raw_text: str = ""

    def resolve_lambda(self, policy: str, horizon: int) -> float:
        if self.policy.lam != "auto":
            return float(self.policy.lam)
        if policy == "boxA":
            return float(horizon) ** 0.75
        return math.sqrt(float(horizon))

    def resolve_ell(self, horizon: int) -> int:
        if self.policy.ell != "auto":
            return int(self.policy.ell)
        return math.ceil(float(horizon) ** 0.75)

    def resolve_refit_every(self, policy: str, horizon: int) -> int:
        if self.policy.refit_every != "auto":
            return int(self.policy.refit_every)
        if policy == "boxA":
            return self.resolve_ell(horizon)
        return max(3, math.ceil(math.sqrt(float(horizon))))

    def resolve_gamma(self) -> float:
        if self.policy.gamma != "auto":
            return float(self.policy.gamma)
        return forgetting_rate(self.params)

    def resolve_c_theta(self) -> float:
        if self.policy.c_theta != "auto":
            return float(self.policy.c_theta)
        return self.reward.c_theta

    def resolve_c_eta(self) -> float:
        if self.policy.c_eta != "auto":
            return float(self.policy.c_eta)
        return self.reward.noise.c_eta

    def resolve_v_eta(self) -> float:
        if self.policy.v_eta != "auto":
            return float(self.policy.v_eta)
        return self.reward.noise.v_eta


def _floats(raw: str) -> np.ndarray:
    return np.array([float(v) for v in raw.replace(",", " ").split()])


def _ints(raw: str) -> list:
    return [int(v) for v in raw.replace(",", " ").split()]


def _auto_or_float(raw: str):
    raw = raw.strip()
    return "auto" if raw == "auto" else float(raw)


def _auto_or_int(raw: str):
    raw = raw.strip()
    return "auto" if raw == "auto" else int(raw)


def _require(section, key: str, section_name: str) -> str:
    if key not in section:
        raise ConfigError(f"missing required key '{key}' in [{section_name}]")
    return section[key]


def _parse_hmm(section) -> HmmParams:
    H = int(_require(section, "H", "hmm"))
    X = int(_require(section, "X", "hmm"))
    pi = _floats(_require(section, "pi", "hmm"))
    m_flat = _floats(_require(section, "M", "hmm"))
    e_flat = _floats(_require(section, "E", "hmm"))
    if m_flat.size != H * H:
        raise ConfigError(f"M must have {H * H} entries, got {m_flat.size}")
    if e_flat.size != X * H:
        raise ConfigError(f"E must have {X * H} entries, got {e_flat.size}")
    try:
        return HmmParams(
            num_states=H,
            num_contexts=X,
            initial_dist=pi,
            transition=m_flat.reshape(H, H),
            emission=e_flat.reshape((X, H), order="F"),
        )
    except ShapeMismatch as exc:
        raise ConfigError(str(exc)) from exc


def _parse_reward(section, params: HmmParams) -> tuple[RewardSpec, TransferFunction]:
    model = section.get("model", STATE_DEPENDENT).strip()
    if model not in (STATE_DEPENDENT, BELIEF_DEPENDENT):
        raise ConfigError(f"unknown reward model '{model}'")
    transfer = section.get("transfer", "one_hot_action").strip()
    A = int(section.get("num_actions", "2"))
    if transfer == "one_hot_action":
        phi = TransferFunction.one_hot_action(A, params.num_contexts)
    elif transfer == "action_context_outer":
        phi = TransferFunction.action_context_outer(A, params.num_contexts)
    elif transfer == "table":
        d = int(_require(section, "d", "reward"))
        flat = _floats(_require(section, "phi", "reward"))
        if flat.size != A * params.num_contexts * d:
            raise ConfigError("phi table has the wrong number of entries")
        phi = TransferFunction.from_table(
            flat.reshape(A, params.num_contexts, d), rescale=True
        )
    else:
        raise ConfigError(f"unknown transfer kind '{transfer}'")

    noise_kind = section.get("noise", "gaussian").strip()
    if noise_kind == "gaussian":
        noise = NoiseModel.gaussian(float(section.get("v_eta", "0.1")))
    elif noise_kind == "bounded_uniform":
        noise = NoiseModel.bounded_uniform(float(section.get("c_eta", "0.01")))
    else:
        raise ConfigError(f"unknown noise kind '{noise_kind}'")

    if "theta" in section:
        theta = _floats(section["theta"])
        if theta.size != params.num_states * phi.dim:
            raise ConfigError("theta must have H*d entries")
        theta = theta.reshape(params.num_states, phi.dim)
        c_theta = float(np.linalg.norm(theta, axis=1).max())
    else:
        rng = np.random.default_rng(int(section.get("theta_seed", "0")))
        theta, c_theta = sample_theta(
            phi, params.num_states, rng, target=float(section.get("theta_target", "0.9"))
        )
    spec = RewardSpec(theta_star=theta, c_theta=c_theta, noise=noise, model=model)
    try:
        check_reward_bounds(spec, phi)
    except ShapeMismatch as exc:
        raise ConfigError(str(exc)) from exc
    return spec, phi


def _parse_policy(section) -> PolicySettings:
    names = tuple(section.get("policy", "boxA").split())
    for name in names:
        if name not in KNOWN_POLICIES:
            raise ConfigError(
                f"unknown policy '{name}'; expected one of {KNOWN_POLICIES}"
            )
    scope = section.get("bonus_scope", "full").strip()
    if scope not in ("full", "partial"):
        raise ConfigError("bonus_scope must be 'full' or 'partial'")
    beliefs = section.get("beliefs", "spectral").strip()
    if beliefs not in ("spectral", "oracle"):
        raise ConfigError("beliefs must be 'spectral' or 'oracle'")
    delta = float(section.get("delta", "0.1"))
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    return PolicySettings(
        policies=names,
        delta=delta,
        lam=_auto_or_float(section.get("lambda", "auto")),
        ell=_auto_or_int(section.get("ell", "auto")),
        gamma=_auto_or_float(section.get("gamma", "auto")),
        c_theta=_auto_or_float(section.get("c_theta", "auto")),
        c_eta=_auto_or_float(section.get("c_eta", "auto")),
        v_eta=_auto_or_float(section.get("v_eta", "auto")),
        bonus_scope=scope,
        beliefs=beliefs,
        refit_every=_auto_or_int(section.get("refit_every", "auto")),
    )


def _parse_run(section) -> RunSettings:
    horizons = tuple(_ints(_require(section, "horizons", "run")))
    if not horizons or any(T < 1 for T in horizons):
        raise ConfigError("horizons must be positive integers")
    seeds_raw = _ints(section.get("seeds", "1"))
    seeds = tuple(range(seeds_raw[0])) if len(seeds_raw) == 1 else tuple(seeds_raw)
    return RunSettings(
        horizons=horizons,
        seeds=seeds,
        master_seed=int(section.get("master_seed", "0")),
        out=section.get("out", "results"),
        emit_oracle_columns=section.getboolean("emit_oracle_columns", fallback=False),
        exact_refilter=section.getboolean("exact_refilter", fallback=False),
        plugin_gamma=section.getboolean("plugin_gamma", fallback=False),
        workers=int(section.get("workers", "1")),
    )


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    for name in ("hmm", "reward", "run"):
        if name not in parser:
            raise ConfigError(f"missing required section [{name}]")
    params = _parse_hmm(parser["hmm"])
    reward, phi = _parse_reward(parser["reward"], params)
    policy = _parse_policy(parser["policy"] if "policy" in parser else {})
    run = _parse_run(parser["run"])
    validate(params)  # shape-level sanity; regularity is reported downstream
    return ExperimentConfig(
        params=params, reward=reward, phi=phi, policy=policy, run=run, raw_text=text
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)


def apply_overrides(
    config: ExperimentConfig,
    out: str | None = None,
    workers: int | None = None,
    master_seed: int | None = None,
    emit_oracle_columns: bool | None = None,
    exact_refilter: bool | None = None,
    plugin_gamma: bool | None = None,
    bonus_scope: str | None = None,
) -> ExperimentConfig:
    run = config.run
    policy = config.policy
    if out is not None:
        run = replace(run, out=out)
    if workers is not None:
        run = replace(run, workers=workers)
    if master_seed is not None:
        run = replace(run, master_seed=master_seed)
    if emit_oracle_columns:
        run = replace(run, emit_oracle_columns=True)
    if exact_refilter:
        run = replace(run, exact_refilter=True)
    if plugin_gamma:
        run = replace(run, plugin_gamma=True)
    if bonus_scope is not None:
        if bonus_scope not in ("full", "partial"):
            raise ConfigError("bonus_scope must be 'full' or 'partial'")
        policy = replace(policy, bonus_scope=bonus_scope)
    return replace(config, run=run, policy=policy)


def config_snapshot(config: ExperimentConfig) -> str:
    """Canonical INI snapshot of the fully resolved configuration."""
    parser = configparser.ConfigParser()
    p = config.params
    parser["hmm"] = {
        "H": str(p.num_states),
        "X": str(p.num_contexts),
        "pi": " ".join(repr(float(v)) for v in p.initial_dist),
        "M": " ".join(repr(float(v)) for v in p.transition.ravel(order="C")),
        "E": " ".join(repr(float(v)) for v in p.emission.ravel(order="F")),
    }
    parser["reward"] = {
        "model": config.reward.model,
        "transfer": config.phi.kind,
        "num_actions": str(config.phi.num_actions),
        "d": str(config.phi.dim),
        "phi": " ".join(repr(float(v)) for v in config.phi.table.ravel(order="C")),
        "theta": " ".join(repr(float(v)) for v in config.reward.theta_star.ravel(order="C")),
        "noise": config.reward.noise.kind,
        "v_eta": repr(config.reward.noise.v_eta),
        "c_eta": repr(config.reward.noise.c_eta),
    }
    parser["policy"] = {
        "policy": " ".join(config.policy.policies),
        "delta": repr(config.policy.delta),
        "lambda": str(config.policy.lam),
        "ell": str(config.policy.ell),
        "gamma": str(config.policy.gamma),
        "c_theta": str(config.policy.c_theta),
        "c_eta": str(config.policy.c_eta),
        "v_eta": str(config.policy.v_eta),
        "bonus_scope": config.policy.bonus_scope,
        "beliefs": config.policy.beliefs,
        "refit_every": str(config.policy.refit_every),
    }
    parser["run"] = {
        "horizons": " ".join(str(T) for T in config.run.horizons),
        "seeds": " ".join(str(s) for s in config.run.seeds),
        "master_seed": str(config.run.master_seed),
        "out": config.run.out,
        "emit_oracle_columns": str(config.run.emit_oracle_columns).lower(),
        "exact_refilter": str(config.run.exact_refilter).lower(),
        "plugin_gamma": str(config.run.plugin_gamma).lower(),
        "workers": str(config.run.workers),
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
