import numpy as np
import pytest

from hmmbandits import HmmParams


@pytest.fixture
def two_state_params() -> HmmParams:
    """Small instance used in filter worked examples."""
    return HmmParams(
        num_states=2,
        num_contexts=2,
        initial_dist=np.array([0.5, 0.5]),
        transition=np.array([[0.9, 0.1], [0.2, 0.8]]),
        emission=np.array([[0.8, 0.3], [0.2, 0.7]]),
    )


@pytest.fixture
def reference_params() -> HmmParams:
    """Well-conditioned H=2, X=4 instance satisfying the spectral regularity
    conditions (all matrix entries positive, stationary start)."""
    return HmmParams(
        num_states=2,
        num_contexts=4,
        initial_dist=np.array([0.5, 0.5]),
        transition=np.array([[0.7, 0.3], [0.3, 0.7]]),
        emission=np.array([[0.4, 0.1], [0.3, 0.2], [0.2, 0.3], [0.1, 0.4]]),
    )


def random_hmm(rng: np.random.Generator, H: int, X: int, min_entry: float = 0.0,
               stationary: bool = False) -> HmmParams:
    """Random instance; positive ``min_entry`` keeps it mixing."""
    M = rng.uniform(min_entry, 1.0, size=(H, H)) + min_entry
    M /= M.sum(axis=1, keepdims=True)
    E = rng.uniform(min_entry, 1.0, size=(X, H)) + min_entry
    E /= E.sum(axis=0, keepdims=True)
    if stationary:
        vals, vecs = np.linalg.eig(M.T)
        pi = np.abs(np.real(vecs[:, np.argmin(np.abs(vals - 1.0))]))
        pi /= pi.sum()
    else:
        pi = rng.uniform(0.05, 1.0, size=H)
        pi /= pi.sum()
    return HmmParams(num_states=H, num_contexts=X, initial_dist=pi,
                     transition=M, emission=E)
