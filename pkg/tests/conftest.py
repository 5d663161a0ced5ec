import dataclasses

import numpy as np
import pytest

from isaclab.scene import Scene, SystemConfig, interference_eigvals, make_scene, sample_rng
from isaclab.solvers import max_comm_rate, waterfill_ms

DESK = dict(n_tx=4, n_rx=4, n_cu=2, wave_len=6)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def manual_scene(H, p, sigma_t, P_s, noise=1.0, L=1, U=None):
    """Scene from explicit quantities, normalisers computed the usual way."""
    H = np.atleast_2d(np.asarray(H, dtype=complex))
    sigma_t = np.asarray(sigma_t, dtype=float)
    U = np.eye(len(sigma_t), dtype=complex) if U is None else U
    sh = interference_eigvals(H, p, noise)
    _, M_s = waterfill_ms(sigma_t, P_s, noise, H.shape[0], L)
    sc = Scene(H, H.copy(), np.asarray(p, dtype=float), sigma_t, U, float(P_s), sh,
               M_s, 1.0, noise, L)
    return dataclasses.replace(sc, norm_comm=max_comm_rate(sc))


def random_scene(seed, index=0, **kw):
    cfg = SystemConfig(**{**DESK, "seed": seed, **kw})
    return make_scene(cfg, sample_rng(seed, index))


def random_spectrum(rng, scene, fill=None):
    fill = rng.uniform(0.05, 1.0) if fill is None else fill
    x = rng.dirichlet(np.ones(scene.n_tx)) * fill * scene.sense_power
    return np.sort(x)[::-1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_scene():
    return random_scene(7)
