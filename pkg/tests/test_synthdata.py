import numpy as np
import pytest

from synergy3d.morphable import N_LANDMARKS, ParamVector, full_forward
from synergy3d.synthdata import (
    SynthConfig,
    SynthDataset,
    bbox_size,
    draw_prior,
    landmark_visibility,
    load_dataset,
    load_synth_config,
    make_observation,
    make_synthetic_basis,
    sample_dataset,
    sample_one,
    save_dataset,
)


@pytest.fixture(scope="module")
def basis():
    return make_synthetic_basis(3, 400)


@pytest.fixture(scope="module")
def dataset(basis):
    return sample_dataset(basis, SynthConfig(seed=5, n_samples=40))


def visibility_loop(vertices, triangles, indices, tol=1e-6):
    out = []
    for li in indices:
        q = vertices[:, li]
        hidden = False
        for tri in triangles:
            if li in tri:
                continue
            a, b, c = (vertices[:, k] for k in tri)
            m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
            det = np.linalg.det(m)
            if abs(det) <= 1e-12:
                continue
            w1, w2 = np.linalg.solve(m, q[:2] - a[:2])
            w0 = 1 - w1 - w2
            if min(w0, w1, w2) < 0:
                continue
            if w0 * a[2] + w1 * b[2] + w2 * c[2] > q[2] + tol:
                hidden = True
                break
        out.append(not hidden)
    return np.array(out)


def test_basis_properties(basis):
    for u in (basis.shape_basis, basis.expr_basis):
        np.testing.assert_allclose(u.T @ u, np.eye(u.shape[1]), atol=1e-9)
    idx = basis.landmark_indices
    assert len(idx) == N_LANDMARKS == len(set(idx.tolist()))
    assert idx.min() >= 0 and idx.max() < basis.n_vertices
    assert len(basis.triangles) > 0


def test_basis_is_deterministic(basis):
    again = make_synthetic_basis(3, 400)
    for name in ("mean", "shape_basis", "expr_basis", "landmark_indices", "triangles"):
        np.testing.assert_array_equal(getattr(again, name), getattr(basis, name))
    other = make_synthetic_basis(4, 400)
    assert not np.array_equal(other.shape_basis, basis.shape_basis)


def test_basis_rejects_too_few_vertices():
    with pytest.raises(ValueError):
        make_synthetic_basis(0, 67)


def test_zero_noise_observation_is_projection(basis):
    s = sample_one(basis, SynthConfig(seed=2, noise_frac=0.0), 0)
    obs = s.observation.reshape(-1, 3)
    vis = obs[:, 2] > 0
    assert vis.any()
    np.testing.assert_array_equal(obs[vis, :2], s.landmarks[:2, vis].T)
    np.testing.assert_array_equal(obs[~vis], 0.0)


def test_regeneration_is_bit_exact(basis, dataset):
    again = sample_dataset(basis, SynthConfig(seed=5, n_samples=40))
    for name in ("observations", "params", "landmarks", "bbox", "euler"):
        np.testing.assert_array_equal(getattr(again, name), getattr(dataset, name))
    # per-sample streams: a sample does not depend on how many came before it
    np.testing.assert_array_equal(sample_one(basis, SynthConfig(seed=5), 17).observation.astype(np.float32),
                                  dataset.observations[17])


def test_stored_landmarks_match_stored_params(basis, dataset):
    for s in dataset:
        _, lmk = full_forward(basis, ParamVector.from_vector(s.params))
        np.testing.assert_array_equal(lmk.astype(np.float32), s.landmarks.astype(np.float32))
        assert s.bbox > 0


def test_bbox_size():
    assert bbox_size(np.array([[0.0, 4.0, 2.0], [0.0, 9.0, 1.0]])) == 6.0


def test_yaw_histogram_covers_bins(basis):
    cfg = SynthConfig(seed=11)
    yaws = np.abs([draw_prior(cfg, i, basis.n_vertices)[3][0] for i in range(10_000)])
    frac = [np.mean(yaws <= 30), np.mean((yaws > 30) & (yaws <= 60)), np.mean(yaws > 60)]
    assert min(frac) >= 0.10
    for i in range(3):
        assert abs(abs(sample_one(basis, cfg, i).euler[0]) - yaws[i]) < 1e-3


def test_large_yaw_hides_landmarks(dataset):
    yaw = np.abs(dataset.euler[:, 0])
    hidden = (~dataset.visible).mean(axis=1)
    assert hidden[yaw > 60].mean() > hidden[yaw < 30].mean()


def test_visibility_matches_loop_oracle(basis):
    cfg = SynthConfig(seed=9)
    for i in range(6):
        s = sample_one(basis, cfg, i)
        mesh, _ = full_forward(basis, ParamVector.from_vector(s.params))
        fast = landmark_visibility(mesh, basis.triangles, basis.landmark_indices)
        np.testing.assert_array_equal(fast, visibility_loop(mesh, basis.triangles, basis.landmark_indices))


def test_visibility_occluder():
    # a triangle in front of point 3 hides it; point 4 sits beside the triangle
    v = np.array([[-1.0, 1.0, 0.0, 0.0, 5.0], [-1.0, -1.0, 1.0, 0.0, 5.0], [1.0, 1.0, 1.0, 0.0, 0.0]])
    vis = landmark_visibility(v, np.array([[0, 1, 2]]), [3, 4, 0])
    np.testing.assert_array_equal(vis, [False, True, True])


def test_make_observation_layout():
    lmk = np.arange(12.0).reshape(3, 4)
    obs = make_observation(lmk, np.array([True, False, True, True])).reshape(4, 3)
    np.testing.assert_array_equal(obs[0], [0.0, 4.0, 1.0])
    np.testing.assert_array_equal(obs[1], 0.0)


def test_dataset_file_round_trip(tmp_path, dataset):
    path = tmp_path / "d.bin"
    save_dataset(dataset, path)
    assert path.read_bytes()[:8] == b"SYNDATA1"
    back = load_dataset(path)
    for name in ("observations", "params", "landmarks", "bbox", "euler"):
        np.testing.assert_array_equal(getattr(back, name), getattr(dataset, name))
    assert back.config == dataset.config
    import json

    manifest = json.loads(path.with_suffix(".json").read_text())
    assert manifest["counts"] == {"total": 40, "train": 36, "val": 4}
    assert manifest["seed"] == 5
    save_dataset(back, tmp_path / "e.bin")
    assert (tmp_path / "e.bin").read_bytes() == path.read_bytes()


def test_dataset_file_errors(tmp_path, dataset):
    path = tmp_path / "d.bin"
    path.write_bytes(b"XXXXXXXX")
    with pytest.raises(ValueError, match="magic"):
        load_dataset(path)
    save_dataset(dataset, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_dataset(path)


def test_split_fraction(dataset):
    train, val = dataset.split()
    assert (len(train), len(val)) == (36, 4)
    np.testing.assert_array_equal(val.params, dataset.params[36:])
    assert isinstance(train, SynthDataset)


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(train_fraction=1.0)
    with pytest.raises(ValueError):
        SynthConfig(noise_frac=float("nan"))
    (tmp_path / "s.cfg").write_text("version = 1\nseed = 4\nn_samples = 12\nyaw_range = -30.0, 30.0\n")
    cfg = load_synth_config(tmp_path / "s.cfg")
    assert (cfg.seed, cfg.n_samples, cfg.yaw_range) == (4, 12, (-30.0, 30.0))
