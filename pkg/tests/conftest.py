import numpy as np
import pytest

from drrgen.geometry import Ray
from drrgen.phantoms import RandomPhantom


@pytest.fixture(scope="session")
def random_volume_64():
    return RandomPhantom(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0),
                         corner=(0.0, 0.0, 0.0), seed=1234).volume


@pytest.fixture(scope="session")
def random_volume_small():
    return RandomPhantom(dims=(16, 20, 12), spacing=(0.7, 1.1, 1.9),
                         corner=(-5.0, 2.0, -11.0), seed=7).volume


def hitting_rays(volume, n, seed, radius=None):
    """Seeded rays that pass through (or near) the volume's center region."""
    rng = np.random.default_rng(seed)
    center = volume.world_center()
    lo, hi = volume.world_bounds()
    if radius is None:
        radius = 2.0 * float(np.max(hi - lo))
    rays = []
    for _ in range(n):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        jitter = rng.normal(scale=0.15 * float(np.max(hi - lo)), size=3)
        rays.append(Ray(s=center + radius * u, p=center - radius * u + jitter))
    return rays
