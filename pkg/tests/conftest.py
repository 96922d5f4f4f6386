import numpy as np
import pytest

from gslang.scene import Camera, Scene


def random_scene(rng, n, d=3, *, spread=1.0, scale=(0.03, 0.25), opacity=(0.05, 1.0)):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(*scale, (n, 3)),
        q,
        rng.uniform(0, 1, (n, 3)),
        rng.uniform(*opacity, n),
        rng.normal(size=(n, d)),
    )


def random_camera(rng, width=48, height=40, distance=4.0):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return Camera.look_at(distance * direction, [0, 0, 0], fov_deg=rng.uniform(40, 70), width=width, height=height)


def axis_camera(width=32, height=32, f=40.0):
    """Identity pose: camera at the origin looking down +z."""
    return Camera(f, f, width / 2, height / 2, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oracle_dictionary():
    from gslang.synth import gen_dictionary

    return gen_dictionary(1000, 512, 12, 0.05, seed=0)


@pytest.fixture(scope="session")
def oracle_corpus(oracle_dictionary):
    from gslang.synth import gen_corpus

    return gen_corpus(oracle_dictionary, 20, 0.25, seed=1)


@pytest.fixture(scope="session")
def ae16(oracle_corpus):
    """The generalized k=16 autoencoder, trained once per session."""
    from gslang.codec import TrainConfig, train_autoencoder

    return train_autoencoder(oracle_corpus, 16, TrainConfig(epochs=10, seed=0)).ae
