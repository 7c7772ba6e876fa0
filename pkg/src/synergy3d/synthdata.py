"""Synthetic face bases and (observation, groundtruth) datasets.

The observation stands in for an image: the 2D projections of the groundtruth
landmarks with Gaussian noise, where self-occluded landmarks are zeroed and
flagged. Each landmark contributes ``(x, y, visible)`` to a flat vector.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import textconfig
from .morphable import (
    N_EXPR,
    N_LANDMARKS,
    N_PARAMS,
    N_SHAPE,
    FaceBasis,
    ParamVector,
    PoseTransform,
    compose_euler,
    compose_pose_params,
    decompose_pose,
    full_forward,
    rotation_to_euler,
)

DATA_MAGIC = b"SYNDATA1"

# (u, v) positions of the 68-point layout on the unit frontal square; u across the face, v up.
def _landmark_layout() -> np.ndarray:
    pts = []
    t = np.linspace(0, np.pi, 17)
    pts += list(zip(-0.85 * np.cos(t), -0.05 - 0.75 * np.sin(t)))  # jaw 0-16
    brow_u = np.linspace(-0.62, -0.14, 5)
    brow_v = 0.42 + 0.06 * np.sin(np.linspace(0, np.pi, 5))
    pts += list(zip(brow_u, brow_v))  # right brow 17-21
    pts += list(zip(-brow_u[::-1], brow_v[::-1]))  # left brow 22-26
    pts += [(0.0, v) for v in (0.28, 0.18, 0.08, -0.02)]  # bridge 27-30, 30 = tip
    pts += [(-0.15, -0.12), (-0.08, -0.15), (0.0, -0.17), (0.08, -0.15), (0.15, -0.12)]  # nostrils 31-35

    def eye(cu):
        a = np.deg2rad([180, 120, 60, 0, -60, -120])
        return list(zip(cu + 0.13 * np.cos(a), 0.25 + 0.05 * np.sin(a)))

    pts += eye(-0.35)  # 36 outer corner ... 39 inner corner
    pts += eye(0.35)  # 42 inner corner ... 45 outer corner
    a = np.deg2rad(np.linspace(180, -150, 12))
    pts += list(zip(0.28 * np.cos(a), -0.42 + 0.1 * np.sin(a)))  # outer lip 48-59
    a = np.deg2rad([180, 135, 90, 45, 0, -45, -90, -135])
    pts += list(zip(0.18 * np.cos(a), -0.42 + 0.04 * np.sin(a)))  # inner lip 60-67
    return np.array(pts)


LANDMARK_UV = _landmark_layout()

AZIMUTH_MAX = np.deg2rad(90.0)
ELEVATION_MAX = np.deg2rad(80.0)
HALF_AXES = (75.0, 100.0, 70.0)  # mm: half width, half height, depth


def _grid(n_vertices):
    cols = int(np.ceil(np.sqrt(n_vertices)))
    full_rows, rem = divmod(n_vertices, cols)
    rows = full_rows + (rem > 0)
    u = np.linspace(-1.0, 1.0, cols)
    v = np.linspace(-1.0, 1.0, rows)
    uv = [(uu, vv) for vv in v[:full_rows] for uu in u]
    uv += [(u[c], v[-1]) for c in range(rem)]
    uv = np.array(uv)
    tris = []
    ncols = [cols] * full_rows + ([rem] if rem else [])
    starts = np.concatenate([[0], np.cumsum(ncols)])
    for r in range(rows - 1):
        for c in range(min(ncols[r], ncols[r + 1]) - 1):
            v00, v01 = starts[r] + c, starts[r] + c + 1
            v10, v11 = starts[r + 1] + c, starts[r + 1] + c + 1
            tris.append((v00, v01, v11))
            tris.append((v00, v11, v10))
    return uv, np.array(tris, dtype=np.int64).reshape(-1, 3)


def _surface(uv):
    """Half-ellipsoid facing +z with a nose ridge."""
    th = uv[:, 0] * AZIMUTH_MAX
    ph = uv[:, 1] * ELEVATION_MAX
    a, b, c = HALF_AXES
    x = a * np.sin(th) * np.cos(ph)
    y = b * np.sin(ph)
    z = c * np.cos(th) * np.cos(ph)
    z = z + 22.0 * np.exp(-0.5 * ((uv[:, 0] / 0.09) ** 2 + ((uv[:, 1] - 0.1) / 0.17) ** 2))
    return np.stack([x, y, z])


def _smooth_fields(rng, uv, n, max_freq, window=None):
    """``n`` random low-frequency 3D displacement fields over the grid, flattened."""
    fu = np.arange(max_freq + 1)
    modes = np.array([(i, j) for i in fu for j in fu])
    weights = 1.0 / (1.0 + modes.sum(axis=1)) ** 1.5
    phase_u = np.cos(np.pi * np.outer(uv[:, 0] + 1, modes[:, 0]) / 2)
    phase_v = np.cos(np.pi * np.outer(uv[:, 1] + 1, modes[:, 1]) / 2)
    features = phase_u * phase_v  # n_v x n_modes
    cols = []
    for _ in range(n):
        coef = rng.standard_normal((len(modes), 3)) * weights[:, None]
        disp = features @ coef  # n_v x 3
        if window is not None:
            disp = disp * window[:, None]
        cols.append(disp.reshape(-1))
    return np.stack(cols, axis=1)


def make_synthetic_basis(seed: int, n_vertices: int = 2000) -> FaceBasis:
    """Deterministic stand-in basis: orthonormal smooth fields over a face-like grid."""
    if n_vertices < N_LANDMARKS:
        raise ValueError(f"need at least {N_LANDMARKS} vertices, got {n_vertices}")
    rng = np.random.default_rng(seed)
    uv, tris = _grid(n_vertices)
    mean = _surface(uv).T.reshape(-1)

    # greedy nearest free vertex per landmark, in layout order
    free = np.ones(len(uv), dtype=bool)
    lmk = []
    for p in LANDMARK_UV:
        d = np.sum((uv - p) ** 2, axis=1)
        d[~free] = np.inf
        k = int(np.argmin(d))
        free[k] = False
        lmk.append(k)

    def window(cu, cv, su, sv):
        return np.exp(-0.5 * (((uv[:, 0] - cu) / su) ** 2 + ((uv[:, 1] - cv) / sv) ** 2))

    expr_window = window(0, -0.42, 0.35, 0.2) + window(-0.35, 0.3, 0.25, 0.2) + window(0.35, 0.3, 0.25, 0.2)
    shape_raw = _smooth_fields(rng, uv, N_SHAPE, 4)
    expr_raw = _smooth_fields(rng, uv, N_EXPR, 6, window=expr_window)
    q, r = np.linalg.qr(np.hstack([shape_raw, expr_raw]))
    q = q * np.sign(np.diag(r))  # fix column signs so the result is unique
    return FaceBasis(mean, q[:, :N_SHAPE], q[:, N_SHAPE:], np.array(lmk), tris)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_samples: int = 1000
    shape_rms_mm: float = 6.0
    expr_rms_mm: float = 3.0
    prior_decay: float = 0.5
    shape_std: tuple = ()
    expr_std: tuple = ()
    yaw_range: tuple = (-90.0, 90.0)
    pitch_range: tuple = (-45.0, 45.0)
    roll_range: tuple = (-45.0, 45.0)
    scale_range: tuple = (0.5, 0.7)
    tx_range: tuple = (55.0, 65.0)
    ty_range: tuple = (55.0, 65.0)
    tz_range: tuple = (0.0, 0.0)
    noise_frac: float = 0.01
    train_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        nums = [self.shape_rms_mm, self.expr_rms_mm, self.prior_decay, self.noise_frac]
        nums += [x for f in ("shape_std", "expr_std", "yaw_range", "pitch_range", "roll_range",
                             "scale_range", "tx_range", "ty_range", "tz_range") for x in getattr(self, f)]
        if not np.all(np.isfinite(nums)):
            raise ValueError("priors must be finite")
        if self.noise_frac < 0:
            raise ValueError("noise_frac must be non-negative")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if self.shape_std and len(self.shape_std) != N_SHAPE:
            raise ValueError(f"shape_std needs {N_SHAPE} entries")
        if self.expr_std and len(self.expr_std) != N_EXPR:
            raise ValueError(f"expr_std needs {N_EXPR} entries")

    def coefficient_std(self, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-column prior std; orthonormal columns spread over 3*N_v coordinates."""
        spread = np.sqrt(3 * n_vertices)
        s = np.array(self.shape_std) if self.shape_std else \
            self.shape_rms_mm * spread * np.arange(1, N_SHAPE + 1) ** -self.prior_decay
        e = np.array(self.expr_std) if self.expr_std else \
            self.expr_rms_mm * spread * np.arange(1, N_EXPR + 1) ** -self.prior_decay
        return s.astype(np.float64), e.astype(np.float64)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class SynthSample:
    observation: np.ndarray  # 3*N_l, per landmark (x, y, visible)
    params: np.ndarray  # 62
    landmarks: np.ndarray  # 3 x N_l
    bbox: float
    euler: np.ndarray  # yaw, pitch, roll in degrees


def bbox_size(points_2d: np.ndarray) -> float:
    """Square root of the tight axis-aligned box area; ``points_2d`` is 2 x N."""
    ext = points_2d.max(axis=1) - points_2d.min(axis=1)
    return float(np.sqrt(ext[0] * ext[1]))


def landmark_visibility(vertices: np.ndarray, triangles: np.ndarray, indices, tol: float = 1e-6) -> np.ndarray:
    """Depth test of each landmark vertex against every triangle drawn over it.

    The camera looks down -z, so larger z is closer. A landmark is hidden when a
    triangle not incident to it covers its image position at a larger depth.
    """
    idx = np.asarray(indices)
    p = vertices[:, idx]  # 3 x L
    a, b, c = (vertices[:, triangles[:, k]] for k in range(3))  # 3 x T each
    lo = np.minimum(np.minimum(a[:2], b[:2]), c[:2])
    hi = np.maximum(np.maximum(a[:2], b[:2]), c[:2])
    top = np.maximum(np.maximum(a[2], b[2]), c[2])
    px, py, pz = (p[k][:, None] for k in range(3))
    cand = (lo[0] <= px) & (px <= hi[0]) & (lo[1] <= py) & (py <= hi[1]) & (top > pz + tol)
    for k in range(3):
        cand &= triangles[:, k][None, :] != idx[:, None]
    li, ti = np.nonzero(cand)
    visible = np.ones(len(idx), dtype=bool)
    if li.size == 0:
        return visible
    ta, tb, tc = a[:, ti], b[:, ti], c[:, ti]
    qx, qy, qz = p[0, li], p[1, li], p[2, li]
    v0x, v0y = tb[0] - ta[0], tb[1] - ta[1]
    v1x, v1y = tc[0] - ta[0], tc[1] - ta[1]
    v2x, v2y = qx - ta[0], qy - ta[1]
    den = v0x * v1y - v1x * v0y
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    w1 = (v2x * v1y - v1x * v2y) / den
    w2 = (v0x * v2y - v2x * v0y) / den
    w0 = 1.0 - w1 - w2
    inside = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    depth = w0 * ta[2] + w1 * tb[2] + w2 * tc[2]
    visible[np.unique(li[inside & (depth > qz + tol)])] = False
    return visible


def make_observation(landmarks: np.ndarray, visible: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """Flat (x, y, visible) triples; hidden landmarks contribute zeros."""
    xy = landmarks[:2].T.copy()
    if noise is not None:
        xy = xy + noise
    obs = np.concatenate([xy, np.ones((xy.shape[0], 1))], axis=1)
    obs[~visible] = 0.0
    return obs.reshape(-1)


def draw_prior(config: SynthConfig, index: int, n_vertices: int):
    """Sample ``index``'s coefficients and pose; returns (rng, shape, expr, (yaw, pitch, roll), scale, t)."""
    rng = np.random.default_rng([config.seed, index])
    s_std, e_std = config.coefficient_std(n_vertices)
    shape = rng.standard_normal(N_SHAPE) * s_std
    expr = rng.standard_normal(N_EXPR) * e_std
    angles = tuple(rng.uniform(*r) for r in (config.yaw_range, config.pitch_range, config.roll_range))
    scale = rng.uniform(*config.scale_range)
    t = np.array([rng.uniform(*config.tx_range), rng.uniform(*config.ty_range), rng.uniform(*config.tz_range)])
    return rng, shape, expr, angles, scale, t


def sample_one(basis: FaceBasis, config: SynthConfig, index: int) -> SynthSample:
    rng, shape, expr, angles, scale, t = draw_prior(config, index, basis.n_vertices)
    pose = PoseTransform(scale, compose_euler(*angles), t)
    vec = np.concatenate([compose_pose_params(pose), shape, expr])
    # stored at f32, so derive every groundtruth quantity from the rounded vector
    vec = vec.astype(np.float32).astype(np.float64)
    params = ParamVector.from_vector(vec)
    mesh, lmk = full_forward(basis, params)
    lmk = lmk.astype(np.float32).astype(np.float64)
    visible = landmark_visibility(mesh, basis.triangles, basis.landmark_indices)
    bb = bbox_size(lmk[:2])
    sigma = config.noise_frac * bb
    noise = rng.standard_normal((basis.n_landmarks, 2)) * sigma if sigma > 0 else None
    obs = make_observation(lmk, visible, noise)
    euler = np.array(rotation_to_euler(decompose_pose(params.pose).rotation))
    return SynthSample(obs, vec, lmk, bb, euler)


class SynthDataset:
    """Column-stacked samples; arrays are float32 as stored on disk."""

    def __init__(self, observations, params, landmarks, bbox, euler, config: dict | None = None):
        self.observations = np.asarray(observations, dtype=np.float32)
        self.params = np.asarray(params, dtype=np.float32)
        self.landmarks = np.asarray(landmarks, dtype=np.float32)  # S x 3 x N_l
        self.bbox = np.asarray(bbox, dtype=np.float32)
        self.euler = np.asarray(euler, dtype=np.float32)
        self.config = dict(config or {})

    def __len__(self):
        return len(self.params)

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[2]

    @property
    def visible(self) -> np.ndarray:
        return self.observations.reshape(len(self), -1, 3)[:, :, 2] > 0.5

    def subset(self, idx) -> "SynthDataset":
        return SynthDataset(self.observations[idx], self.params[idx], self.landmarks[idx],
                            self.bbox[idx], self.euler[idx], self.config)

    def split(self) -> tuple["SynthDataset", "SynthDataset"]:
        frac = float(self.config.get("train_fraction", 0.9))
        n_train = int(round(frac * len(self)))
        n_train = min(max(n_train, 1), len(self) - 1)
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))

    def sample(self, i: int) -> SynthSample:
        return SynthSample(self.observations[i].astype(np.float64), self.params[i].astype(np.float64),
                           self.landmarks[i].astype(np.float64), float(self.bbox[i]),
                           self.euler[i].astype(np.float64))

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples, config: dict | None = None) -> "SynthDataset":
        samples = list(samples)
        return cls(
            np.stack([s.observation for s in samples]), np.stack([s.params for s in samples]),
            np.stack([s.landmarks for s in samples]), np.array([s.bbox for s in samples]),
            np.stack([s.euler for s in samples]), config,
        )


def sample_dataset(basis: FaceBasis, config: SynthConfig) -> SynthDataset:
    samples = [sample_one(basis, config, i) for i in range(config.n_samples)]
    return SynthDataset.from_samples(samples, config.to_dict())


def save_dataset(ds: SynthDataset, path) -> None:
    """Binary samples plus a JSON manifest next to them (``.json`` suffix)."""
    header = json.dumps(ds.config, sort_keys=True).encode("utf-8")
    n, n_l = len(ds), ds.n_landmarks
    rec = np.concatenate([
        ds.observations, ds.params, ds.landmarks.transpose(0, 2, 1).reshape(n, -1),
        ds.bbox[:, None], ds.euler,
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<3I", n, n_l, rec.shape[1]))
        f.write(rec.tobytes())
    n_train = len(ds.split()[0]) if n > 1 else n
    manifest = {
        "file": Path(path).name,
        "format": "SYNDATA1",
        "counts": {"total": n, "train": n_train, "val": n - n_train},
        "n_landmarks": n_l,
        "seed": ds.config.get("seed"),
        "priors": {k: v for k, v in ds.config.items() if k not in ("seed", "n_samples")},
        "record_layout": [
            ["observation", 3 * n_l], ["params", N_PARAMS], ["landmarks_xyz", 3 * n_l],
            ["bbox", 1], ["euler_ypr", 3],
        ],
    }
    Path(path).with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SynthDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", buf, 8)
        config = json.loads(buf[12:12 + hlen].decode("utf-8"))
        off = 12 + hlen
        n, n_l, width = struct.unpack_from("<3I", buf, off)
        off += 12
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed dataset header") from exc
    if width != 6 * n_l + N_PARAMS + 4:
        raise ValueError(f"{path}: record width {width} inconsistent with {n_l} landmarks")
    if len(buf) - off != 4 * n * width:
        raise ValueError(f"{path}: expected {n} records, file size disagrees")
    rec = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n, width).astype(np.float32)
    o = 3 * n_l
    obs, params = rec[:, :o], rec[:, o:o + N_PARAMS]
    lmk = rec[:, o + N_PARAMS:2 * o + N_PARAMS].reshape(n, n_l, 3).transpose(0, 2, 1)
    bbox, euler = rec[:, 2 * o + N_PARAMS], rec[:, 2 * o + N_PARAMS + 1:]
    return SynthDataset(obs, params, lmk, bbox, euler, config)


def load_synth_config(path) -> SynthConfig:
    return textconfig.load(SynthConfig, path)
