"""Experiment orchestration: one simulation cell per (policy, horizon, seed),
deterministic seed derivation, atomic artifact writing, and the estimation
error-curve diagnostic behind the ``estimate`` subcommand.
"""

from __future__ import annotations

import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .beliefs import OnlineBeliefEstimator, belief_error_trace
from .config import ExperimentConfig, config_snapshot
from .environment import BanditEnvironment
from .errors import ConfigError, HmmBanditsError, ShapeMismatch
from .evaluation import RegretLedger, record_round
from .policies import (
    BonusConfig,
    BoxAPolicy,
    BoxBPolicy,
    OraclePolicy,
    RandomPolicy,
    StagePlan,
)
from .spectral import accumulate_moments, postprocess, spectral_estimate, align

GAMMA_CAP = 1.0 - 1e-6


def environment_seed_sequence(
    master_seed: int, horizon: int, seed_index: int
) -> np.random.SeedSequence:
    """Environment stream: policy-independent so different policies face the
    identical latent/context/noise path (paired comparisons)."""
    return np.random.SeedSequence(
        entropy=[int(master_seed), int(horizon), int(seed_index), 0]
    )


def learner_seed_sequence(
    master_seed: int, policy: str, horizon: int, seed_index: int
) -> np.random.SeedSequence:
    """Learner-side stream (policy randomness, estimator rotations); stable
    under added seeds or cells."""
    policy_id = sum((i + 1) * ord(c) for i, c in enumerate(policy))
    return np.random.SeedSequence(
        entropy=[int(master_seed), policy_id, int(horizon), int(seed_index), 1]
    )


@dataclass
class CellResult:
    policy: str
    horizon: int
    seed_index: int
    regret_total: float
    rows: list
    lam: float
    ell: int
    refit_failures: int
    duration: float
    estimate_text: str | None = None


def _plugin_gamma(transition_hat: np.ndarray) -> float:
    eps, mx = float(transition_hat.min()), float(transition_hat.max())
    if mx <= 0.0:
        return GAMMA_CAP
    return float(np.clip(1.0 - eps / mx, 0.0, GAMMA_CAP))


def _build_policy(config: ExperimentConfig, name: str, horizon: int, policy_rng):
    phi = config.phi
    ps = config.policy
    lam = config.resolve_lambda(name, horizon)
    ell = config.resolve_ell(horizon)
    if name == "oracle":
        return OraclePolicy(phi, config.reward.theta_star), lam, ell
    if name == "random":
        return RandomPolicy(phi.num_actions, policy_rng), lam, ell
    cfg = BonusConfig(
        delta=ps.delta,
        gamma=config.resolve_gamma(),
        c_theta=config.resolve_c_theta(),
        c_eta=config.resolve_c_eta(),
        v_eta=config.resolve_v_eta(),
        H=config.params.num_states,
        X=config.params.num_contexts,
        d=phi.dim,
        variant=name,
        bonus_scope=ps.bonus_scope,
        known_beliefs=(ps.beliefs == "oracle"),
    )
    if name == "boxA":
        return BoxAPolicy(phi, StagePlan(ell, horizon), cfg, lam), lam, ell
    if name == "boxB":
        return BoxBPolicy(phi, cfg, lam), lam, ell
    raise ConfigError(f"unknown policy '{name}'")


def simulate_cell(
    config: ExperimentConfig, policy_name: str, horizon: int, seed_index: int
) -> CellResult:
    """Run one (policy, horizon, seed) cell and collect its round transcript."""
    start = time.perf_counter()
    env_ss = environment_seed_sequence(config.run.master_seed, horizon, seed_index)
    policy_ss, estimator_ss = learner_seed_sequence(
        config.run.master_seed, policy_name, horizon, seed_index
    ).spawn(2)
    env = BanditEnvironment(
        config.params, config.reward, config.phi, horizon, seed=env_ss
    )
    policy_rng = np.random.default_rng(policy_ss)
    policy, lam, ell = _build_policy(config, policy_name, horizon, policy_rng)

    is_learner = policy_name in ("boxA", "boxB")
    use_spectral = is_learner and config.policy.beliefs == "spectral"
    estimator = None
    if use_spectral:
        estimator = OnlineBeliefEstimator(
            num_states=config.params.num_states,
            num_contexts=config.params.num_contexts,
            refit_every=config.resolve_refit_every(policy_name, horizon),
            seed=int(estimator_ss.generate_state(1)[0]),
            exact_refilter=config.run.exact_refilter,
        )
    last_version = 0
    uniform = np.full(config.params.num_states, 1.0 / config.params.num_states)

    ledger = RegretLedger(horizon=horizon)
    rows = []
    emit_oracle = config.run.emit_oracle_columns
    for _ in range(horizon):
        t, x = env.observe()
        b_true = env.true_belief
        if estimator is not None:
            b_hat = estimator.observe(x)
            if config.run.plugin_gamma and estimator.params_version != last_version:
                last_version = estimator.params_version
                policy.set_gamma(_plugin_gamma(estimator.estimate.transition_hat))
        elif is_learner:
            b_hat = b_true
        else:
            b_hat = None
        if policy_name == "oracle":
            policy_belief = b_true
        elif is_learner:
            policy_belief = b_hat
        else:
            policy_belief = uniform
        a = policy.act(t, x, policy_belief)
        rec = env.step(a, estimated_belief=b_hat)
        policy.update(t, x, policy_belief, a, rec.reward)
        record_round(ledger, b_true, x, a, config.reward, config.phi)
        inc = ledger.per_round_benchmark[-1] - ledger.per_round_value[-1]
        if emit_oracle:
            rows.append(
                (t, x, a, rec.reward, inc, rec.hidden, b_true.copy(),
                 None if b_hat is None else np.array(b_hat))
            )
        else:
            rows.append((t, x, a, rec.reward, inc))
    final_estimate = None
    if estimator is not None and estimator.estimate is not None:
        final_estimate = estimator.estimate.to_text()
    return CellResult(
        policy=policy_name,
        horizon=horizon,
        seed_index=seed_index,
        regret_total=ledger.total,
        rows=rows,
        lam=lam,
        ell=ell,
        refit_failures=estimator.refit_failures if estimator is not None else 0,
        duration=time.perf_counter() - start,
        estimate_text=final_estimate,
    )


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _round_csv_text(result: CellResult, emit_oracle: bool, num_states: int) -> str:
    lines = []
    if emit_oracle:
        bcols = [f"b{h + 1}" for h in range(num_states)]
        bhat = [f"b{h + 1}_hat" for h in range(num_states)]
        lines.append(",".join(["t", "x", "a", "r", "regret_inc", "h"] + bcols + bhat))
        for t, x, a, r, inc, h, b_true, b_hat in result.rows:
            parts = [str(t), str(x), str(a), repr(r), repr(inc), str(h)]
            parts += [repr(float(v)) for v in b_true]
            parts += ["" for _ in range(num_states)] if b_hat is None else [
                repr(float(v)) for v in b_hat
            ]
            lines.append(",".join(parts))
    else:
        lines.append("t,x,a,r,regret_inc")
        for t, x, a, r, inc in result.rows:
            lines.append(f"{t},{x},{a},{r!r},{inc!r}")
    return "\n".join(lines) + "\n"


def _cell_filename(result: CellResult) -> str:
    return f"{result.policy}_T{result.horizon}_s{result.seed_index}.csv"


def _run_cell_star(args) -> CellResult:
    return simulate_cell(*args)


def run_experiment(config: ExperimentConfig, echo=print) -> int:
    """Execute the (policy x horizon x seed) grid and write artifacts.

    Artifacts are written atomically (temp file + rename); a crash leaves a
    ``FAILED`` marker next to whatever was completed.  Returns the process
    exit code: 0 on success, 3 on numerical failure.
    """
    out_dir = config.run.out
    os.makedirs(out_dir, exist_ok=True)
    from .hmm import validate

    uses_spectral = config.policy.beliefs == "spectral" and any(
        name in ("boxA", "boxB") for name in config.policy.policies
    )
    if uses_spectral and not validate(config.params).is_stationary_init:
        # the spectral moment equations assume a stationary start; estimates
        # on a non-stationary prefix are biased early, so flag it (no error)
        echo("warning: initial distribution is not stationary for M; "
             "spectral estimates assume a stationary context stream")
    cells = [
        (config, policy, horizon, seed_index)
        for policy, horizon, seed_index in itertools.product(
            config.policy.policies, config.run.horizons, range(len(config.run.seeds))
        )
    ]
    _atomic_write(os.path.join(out_dir, "config_snapshot.ini"), config_snapshot(config))

    num_states = config.params.num_states
    summary_lines = ["policy,T,seed,R_T,lambda,ell,beliefs"]
    results: list[CellResult] = []

    def write_cell(result: CellResult) -> None:
        # single-writer funnel: completed cells land on disk immediately, so
        # an interrupted grid preserves them next to the FAILED marker
        csv_text = _round_csv_text(result, config.run.emit_oracle_columns, num_states)
        final_cum = sum(row[4] for row in result.rows)
        if abs(final_cum - result.regret_total) > 1e-6:
            raise ShapeMismatch("summary regret does not match per-round CSV")
        _atomic_write(os.path.join(out_dir, _cell_filename(result)), csv_text)
        if result.estimate_text is not None:
            _atomic_write(
                os.path.join(out_dir, _cell_filename(result)[:-4] + ".estimate.txt"),
                result.estimate_text,
            )
        summary_lines.append(
            f"{result.policy},{result.horizon},{result.seed_index},"
            f"{result.regret_total!r},{result.lam!r},{result.ell},"
            f"{config.policy.beliefs}"
        )
        results.append(result)
        echo(
            f"{result.policy} T={result.horizon} seed={result.seed_index} "
            f"R_T={result.regret_total:.4f} ({result.duration:.2f}s)"
        )

    try:
        if config.run.workers > 1:
            with ProcessPoolExecutor(max_workers=config.run.workers) as pool:
                for result in pool.map(_run_cell_star, cells):
                    write_cell(result)
        else:
            for cell in cells:
                write_cell(_run_cell_star(cell))
    except HmmBanditsError as exc:
        _atomic_write(
            os.path.join(out_dir, "FAILED"),
            f"{type(exc).__name__}: {exc}\n",
        )
        echo(f"FAILED: {type(exc).__name__}: {exc}")
        return 3

    _atomic_write(os.path.join(out_dir, "summary.csv"), "\n".join(summary_lines) + "\n")
    manifest = {
        "version": __version__,
        "cells": len(results),
        "durations": {
            _cell_filename(r): round(r.duration, 6) for r in results
        },
        "refit_failures": {
            _cell_filename(r): r.refit_failures for r in results if r.refit_failures
        },
    }
    _atomic_write(
        os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2) + "\n"
    )
    return 0


def _orient_to_truth(estimate, transition: np.ndarray, emission: np.ndarray):
    """Relabel the estimate by the permutation identifying the true states
    (minimizing total Frobenius error); returns (estimate, M_err, E_err).

    Estimated labels are arbitrary, so all truth-facing diagnostics are
    reported under the identifying permutation."""
    from dataclasses import replace as dc_replace

    H = transition.shape[0]
    best = None
    for perm in itertools.permutations(range(H)):
        idx = list(perm)
        m_err = float(
            np.linalg.norm(estimate.transition_hat[np.ix_(idx, idx)] - transition)
        )
        e_err = float(np.linalg.norm(estimate.emission_hat[:, idx] - emission))
        if best is None or m_err + e_err < best[1] + best[2]:
            best = (idx, m_err, e_err)
    idx, m_err, e_err = best
    oriented = dc_replace(
        estimate,
        raw_transition=estimate.raw_transition[np.ix_(idx, idx)],
        raw_emission=estimate.raw_emission[:, idx],
        transition_hat=estimate.transition_hat[np.ix_(idx, idx)],
        emission_hat=estimate.emission_hat[:, idx],
    )
    return oriented, m_err, e_err


def estimation_curves(config: ExperimentConfig, echo=print) -> list:
    """Spectral estimation error curves: mean over seeds, per horizon checkpoint.

    Returns rows ``(t, frobenius_M_err, frobenius_E_err, median_l1_belief_gap)``
    where the belief gap is the median over the second half of the prefix.
    """
    from .hmm import sample_trajectory

    from .errors import DiagonalizationFailed, NearSingularPivot, RankDeficient
    from .spectral import EstimatedHmm

    params = config.params
    H, X = params.num_states, params.num_contexts
    uniform_estimate = EstimatedHmm(
        raw_transition=np.full((H, H), 1.0 / H),
        raw_emission=np.full((X, H), 1.0 / X),
        transition_hat=np.full((H, H), 1.0 / H),
        emission_hat=np.full((X, H), 1.0 / X),
    )
    checkpoints = sorted(config.run.horizons)
    longest = checkpoints[-1]
    sums = np.zeros((len(checkpoints), 3))
    for seed_index in range(len(config.run.seeds)):
        ss = learner_seed_sequence(
            config.run.master_seed, "estimate", longest, seed_index
        )
        traj_seed = int(ss.generate_state(1)[0])
        trajectory = sample_trajectory(params, longest, seed=traj_seed)
        previous = None
        for k, t in enumerate(checkpoints):
            prefix = trajectory.contexts[:t]
            moments = accumulate_moments(prefix, params.num_contexts)
            try:
                fresh = postprocess(
                    spectral_estimate(moments, params.num_states, seed=traj_seed + k)
                )
            except (RankDeficient, NearSingularPivot, DiagonalizationFailed):
                # small-sample pathology: score the checkpoint as the
                # no-information estimate and keep the curve well-defined
                fresh = uniform_estimate
            estimate = align(previous, fresh)
            previous = estimate
            oriented, m_err, e_err = _orient_to_truth(
                estimate, params.transition, params.emission
            )
            gaps = belief_error_trace(params, oriented, prefix)
            gap = float(np.median(gaps[t // 2 :]))
            sums[k] += (m_err, e_err, gap)
    n = len(config.run.seeds)
    rows = [
        (t, sums[k, 0] / n, sums[k, 1] / n, sums[k, 2] / n)
        for k, t in enumerate(checkpoints)
    ]
    for t, m_err, e_err, gap in rows:
        echo(f"t={t} M_err={m_err:.5f} E_err={e_err:.5f} belief_gap={gap:.5f}")
    return rows


def write_estimation_csv(rows: list, path: str) -> None:
    lines = ["t,frobenius_M_err,frobenius_E_err,median_l1_belief_gap"]
    for t, m_err, e_err, gap in rows:
        lines.append(f"{t},{m_err!r},{e_err!r},{gap!r}")
    _atomic_write(path, "\n".join(lines) + "\n")
