import numpy as np
import pytest

from synergy3d.morphable import N_EXPR, N_SHAPE, FaceBasis
from synergy3d.synergy import NetConfig

# narrow network for fast training tests
TINY = NetConfig(encoder_hidden=(32,), n_cells=2, latent_dim=16, low_level_channels=(8,), global_point_hidden=(),
                 global_point_channels=16, mafa_decoder_hidden=(16,), l2m_channels=(8, 16))


def random_basis(rng, n_vertices=50, n_landmarks=68, orthonormal=False, n_tri=20):
    n3 = 3 * n_vertices
    mean = rng.normal(0, 10, n3)
    if orthonormal:
        q, _ = np.linalg.qr(rng.standard_normal((n3, N_SHAPE + N_EXPR)))
        u_s, u_e = q[:, :N_SHAPE], q[:, N_SHAPE:]
    else:
        u_s, u_e = rng.standard_normal((n3, N_SHAPE)), rng.standard_normal((n3, N_EXPR))
    lmk = rng.integers(0, n_vertices, n_landmarks)
    tri = rng.integers(0, n_vertices, (n_tri, 3))
    return FaceBasis(mean, u_s, u_e, lmk, tri)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
