import numpy as np
import pytest

from twinzone.channel import SynthConfig, synth_scene


@pytest.fixture(scope="session")
def small_scene():
    cfg = SynthConfig(user_count=300, n_h=8, n_v=4)
    return synth_scene(cfg, np.random.default_rng(11), seed=11)


def random_orthonormal(rng, n, k, complex_=True):
    A = rng.standard_normal((n, k)) + (1j * rng.standard_normal((n, k)) if complex_ else 0)
    Q, _ = np.linalg.qr(A)
    return Q


def random_hermitian(rng, n):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (A + A.conj().T)
