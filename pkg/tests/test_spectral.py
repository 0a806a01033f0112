import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmmbandits import (
    EstimatedHmm,
    MomentAccumulator,
    MomentSet,
    accumulate_moments,
    align,
    postprocess,
    sample_trajectory,
    spectral_estimate,
)
from hmmbandits.errors import NonFinite, RankDeficient, ShapeMismatch, TooShort

from conftest import random_hmm
from oracles import best_permutation_distance, count_moments, population_moments


def population_moment_set(params) -> MomentSet:
    p31, p32, p312 = population_moments(params)
    # sample_count is only a validity gate here; population tables are exact
    return MomentSet(p31=p31, p32=p32, p312=p312, sample_count=10**9)


class TestMoments:
    def test_constant_stream_concentrates(self):
        ms = accumulate_moments([0] * 10, num_contexts=2)
        assert ms.p31[0, 0] == pytest.approx(1.0)
        assert ms.p31.sum() == pytest.approx(1.0)

    def test_two_triple_stream_counts(self):
        # stream (1,2,1,2) in 1-based context labels; triples are
        # (x3,x1,x2)=(1,1,2) and (x4,x2,x3)=(2,2,1), recomputed by the
        # counting oracle below
        stream = [0, 1, 0, 1]
        ms = accumulate_moments(stream, num_contexts=2)
        p31, p32, p312 = count_moments(stream, 2)
        assert np.allclose(ms.p31, p31)
        assert np.allclose(ms.p32, p32)
        assert np.allclose(ms.p312, p312)
        assert ms.p31 == pytest.approx(np.diag([0.5, 0.5]))

    def test_tables_are_distributions(self):
        rng = np.random.default_rng(0)
        stream = rng.integers(0, 3, size=200)
        ms = accumulate_moments(stream, num_contexts=3)
        for table in (ms.p31, ms.p32, ms.p312):
            assert table.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(table >= 0)

    def test_incremental_matches_batch(self):
        rng = np.random.default_rng(1)
        stream = rng.integers(0, 4, size=157)
        acc = MomentAccumulator(4)
        acc.extend(stream)
        batch = accumulate_moments(stream, num_contexts=4)
        inc = acc.snapshot()
        assert np.array_equal(inc.p31, batch.p31)
        assert np.array_equal(inc.p32, batch.p32)
        assert np.array_equal(inc.p312, batch.p312)
        assert inc.sample_count == batch.sample_count == 157

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(2)
        stream = rng.integers(0, 3, size=61)
        ms = accumulate_moments(stream, num_contexts=3)
        p31, p32, p312 = count_moments(stream, 3)
        assert np.allclose(ms.p31, p31)
        assert np.allclose(ms.p32, p32)
        assert np.allclose(ms.p312, p312)

    def test_too_short(self):
        with pytest.raises(TooShort):
            accumulate_moments([0, 1], num_contexts=2)
        acc = MomentAccumulator(2)
        acc.extend([0, 1])
        with pytest.raises(TooShort):
            acc.snapshot()


class TestSpectralEstimate:
    def test_constant_stream_rank_deficient(self):
        ms = accumulate_moments([0] * 50, num_contexts=2)
        with pytest.raises(RankDeficient):
            spectral_estimate(ms, H=2, seed=0)

    def test_h_larger_than_x_rejected(self):
        ms = accumulate_moments([0, 1, 0, 1, 1, 0], num_contexts=2)
        with pytest.raises(ShapeMismatch):
            spectral_estimate(ms, H=3, seed=0)

    def test_population_recovery_two_states(self, reference_params):
        ms = population_moment_set(reference_params)
        est = postprocess(spectral_estimate(ms, H=2, seed=0))
        m_err = best_permutation_distance(
            est.transition_hat, reference_params.transition, axis="both"
        )
        e_err = best_permutation_distance(
            est.emission_hat, reference_params.emission, axis="columns"
        )
        assert m_err < 1e-6
        assert e_err < 1e-6

    def test_population_recovery_three_states(self):
        rng = np.random.default_rng(5)
        params = random_hmm(rng, 3, 5, min_entry=0.15, stationary=True)
        est = postprocess(spectral_estimate(population_moment_set(params), H=3, seed=1))
        assert best_permutation_distance(est.transition_hat, params.transition, "both") < 1e-6
        assert best_permutation_distance(est.emission_hat, params.emission, "columns") < 1e-6

    def test_determinism(self, reference_params):
        traj = sample_trajectory(reference_params, 3000, seed=0)
        ms = accumulate_moments(traj.contexts, num_contexts=4)
        a = spectral_estimate(ms, H=2, seed=3)
        b = spectral_estimate(ms, H=2, seed=3)
        assert np.array_equal(a.raw_transition, b.raw_transition)
        assert np.array_equal(a.raw_emission, b.raw_emission)

    def test_workspace_invariants(self, reference_params):
        est = spectral_estimate(population_moment_set(reference_params), H=2, seed=0)
        ws = est.workspace
        for basis in (ws.u1, ws.u2, ws.u3):
            assert np.allclose(basis.T @ basis, np.eye(2), atol=1e-8)
        assert np.allclose(np.linalg.norm(ws.r_matrix, axis=0), 1.0, atol=1e-8)

    def test_sampled_consistency_direction(self, reference_params):
        errors = {}
        for t in (1000, 100_000):
            errs = []
            for seed in range(3):
                traj = sample_trajectory(reference_params, t, seed=seed)
                ms = accumulate_moments(traj.contexts, num_contexts=4)
                est = postprocess(spectral_estimate(ms, H=2, seed=seed))
                errs.append(best_permutation_distance(
                    est.transition_hat, reference_params.transition, "both"
                ))
            errors[t] = float(np.median(errs))
        assert errors[100_000] < errors[1000]


class TestPostprocess:
    def test_clip_then_renormalize_column(self):
        raw = EstimatedHmm(
            raw_transition=np.array([[1.0]]),
            raw_emission=np.array([[-0.05], [0.55], [0.5]]),
        )
        est = postprocess(raw)
        assert est.emission_hat[:, 0] == pytest.approx([0.0, 11 / 21, 10 / 21])

    def test_stochastic_input_unchanged(self, reference_params):
        raw = EstimatedHmm(
            raw_transition=reference_params.transition.copy(),
            raw_emission=reference_params.emission.copy(),
        )
        est = postprocess(raw)
        assert np.allclose(est.transition_hat, reference_params.transition)
        assert np.allclose(est.emission_hat, reference_params.emission)

    def test_zero_column_becomes_uniform(self):
        raw = EstimatedHmm(
            raw_transition=np.array([[0.0]]),
            raw_emission=np.array([[0.0], [0.0], [0.0]]),
        )
        est = postprocess(raw)
        assert est.emission_hat[:, 0] == pytest.approx([1 / 3, 1 / 3, 1 / 3])
        assert est.transition_hat[0, 0] == pytest.approx(1.0)

    def test_nonfinite_rejected(self):
        raw = EstimatedHmm(
            raw_transition=np.array([[np.nan]]),
            raw_emission=np.array([[1.0]]),
        )
        with pytest.raises(NonFinite):
            postprocess(raw)


@settings(deadline=None, max_examples=40)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_postprocess_idempotent(seed):
    rng = np.random.default_rng(seed)
    H = int(rng.integers(1, 4))
    X = int(rng.integers(H, 5))
    raw = EstimatedHmm(
        raw_transition=rng.normal(size=(H, H)),
        raw_emission=rng.normal(size=(X, H)),
    )
    once = postprocess(raw)
    twice = postprocess(once)
    assert np.allclose(once.transition_hat, twice.transition_hat, atol=1e-15)
    assert np.allclose(once.emission_hat, twice.emission_hat, atol=1e-15)
    assert np.all(once.transition_hat >= 0)
    assert np.allclose(once.transition_hat.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(once.emission_hat.sum(axis=0), 1.0, atol=1e-12)


def _estimate_from(transition, emission) -> EstimatedHmm:
    return EstimatedHmm(
        raw_transition=np.asarray(transition, dtype=float),
        raw_emission=np.asarray(emission, dtype=float),
        transition_hat=np.asarray(transition, dtype=float),
        emission_hat=np.asarray(emission, dtype=float),
    )


class TestAlign:
    def test_no_previous_keeps_labels(self):
        fresh = _estimate_from([[0.7, 0.3], [0.4, 0.6]], [[0.9, 0.2], [0.1, 0.8]])
        aligned = align(None, fresh)
        assert aligned.label_permutation == (0, 1)
        assert np.array_equal(aligned.emission_hat, fresh.emission_hat)

    def test_exact_swap_recovered(self):
        prev = _estimate_from([[0.7, 0.3], [0.4, 0.6]], [[0.9, 0.2], [0.1, 0.8]])
        swapped = _estimate_from(
            [[0.6, 0.4], [0.3, 0.7]], [[0.2, 0.9], [0.8, 0.1]]
        )
        aligned = align(prev, swapped)
        assert aligned.label_permutation == (1, 0)
        assert np.allclose(aligned.emission_hat, prev.emission_hat)
        assert np.allclose(aligned.transition_hat, prev.transition_hat)

    def test_identity_when_fresh_equals_previous(self):
        prev = _estimate_from([[0.7, 0.3], [0.4, 0.6]], [[0.9, 0.2], [0.1, 0.8]])
        aligned = align(prev, prev)
        assert aligned.label_permutation == (0, 1)

    def test_worked_two_state_example(self):
        prev = _estimate_from(np.eye(2), [[0.9, 0.2], [0.1, 0.8]])
        fresh = _estimate_from(np.eye(2), [[0.25, 0.85], [0.75, 0.15]])
        aligned = align(prev, fresh)
        assert aligned.label_permutation == (1, 0)
        worst = max(
            np.linalg.norm(prev.emission_hat[:, h] - aligned.emission_hat[:, h])
            for h in range(2)
        )
        assert worst == pytest.approx(np.sqrt(2 * 0.05**2), abs=1e-12)

    def test_column_multiset_preserved(self):
        rng = np.random.default_rng(8)
        prev = _estimate_from(*_random_stochastic(rng, 3, 4))
        fresh_m, fresh_e = _random_stochastic(rng, 3, 4)
        fresh = _estimate_from(fresh_m, fresh_e)
        aligned = align(prev, fresh)
        original = sorted(tuple(fresh.emission_hat[:, h]) for h in range(3))
        moved = sorted(tuple(aligned.emission_hat[:, h]) for h in range(3))
        assert original == moved

    def test_tie_breaks_lexicographically(self):
        # both states have identical emission columns: every permutation ties
        prev = _estimate_from([[0.5, 0.5], [0.5, 0.5]], [[0.6, 0.6], [0.4, 0.4]])
        fresh = _estimate_from([[0.3, 0.7], [0.2, 0.8]], [[0.6, 0.6], [0.4, 0.4]])
        aligned = align(prev, fresh)
        assert aligned.label_permutation == (0, 1)

    def test_label_pinning_across_rotation_seeds(self, reference_params):
        # The first estimate pins the labels: later estimates agree after
        # alignment no matter which internal ordering the rotation produced.
        traj = sample_trajectory(reference_params, 60_000, seed=4)
        ms_early = accumulate_moments(traj.contexts[:20_000], num_contexts=4)
        first = align(None, postprocess(spectral_estimate(ms_early, 2, seed=0)))
        ms_late = accumulate_moments(traj.contexts, num_contexts=4)
        later = [
            align(first, postprocess(spectral_estimate(ms_late, 2, seed=s)))
            for s in (1, 2, 3)
        ]
        # different rotations perturb values at the sampling-noise level but
        # must land on the same labeling
        for est in later[1:]:
            assert np.allclose(est.emission_hat, later[0].emission_hat, atol=1e-2)
            assert np.allclose(est.transition_hat, later[0].transition_hat, atol=1e-2)
            identity_gap = np.linalg.norm(est.emission_hat - later[0].emission_hat)
            swapped_gap = np.linalg.norm(
                est.emission_hat[:, ::-1] - later[0].emission_hat
            )
            assert identity_gap < swapped_gap


def _random_stochastic(rng, H, X):
    m = rng.uniform(0.1, 1.0, size=(H, H))
    m /= m.sum(axis=1, keepdims=True)
    e = rng.uniform(0.1, 1.0, size=(X, H))
    e /= e.sum(axis=0, keepdims=True)
    return m, e


class TestSerialization:
    def test_round_trip(self, reference_params):
        est = postprocess(
            spectral_estimate(population_moment_set(reference_params), 2, seed=0)
        )
        text = est.to_text()
        back = EstimatedHmm.from_text(text)
        assert np.array_equal(back.transition_hat, est.transition_hat)
        assert np.array_equal(back.emission_hat, est.emission_hat)
        assert back.label_permutation == est.label_permutation
