"""3D morphable model core: basis storage, reconstruction, pose and landmarks.

Vertex data use a 3 x N layout, one column per vertex. The flat mean and the
basis columns interleave coordinates per vertex (x0, y0, z0, x1, ...), so the
vector-to-matrix step is a column-major reshape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_SHAPE = 40
N_EXPR = 10
N_POSE = 12
N_PARAMS = N_POSE + N_SHAPE + N_EXPR
N_LANDMARKS = 68

BASIS_MAGIC = b"SYN3DMM1"

# 0-based indices into the 68-point layout
OUTER_EYE_CORNERS = (36, 45)
NOSE_TIP = 30

ROT_TOL = 1e-9


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FaceBasis:
    mean: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    landmark_indices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64).reshape(-1)
        if mean.size % 3:
            raise ValueError(f"mean length {mean.size} is not a multiple of 3")
        n3 = mean.size
        u_s = np.asarray(self.shape_basis, dtype=np.float64)
        u_e = np.asarray(self.expr_basis, dtype=np.float64)
        if u_s.shape != (n3, N_SHAPE):
            raise ValueError(f"shape_basis must be {(n3, N_SHAPE)}, got {u_s.shape}")
        if u_e.shape != (n3, N_EXPR):
            raise ValueError(f"expr_basis must be {(n3, N_EXPR)}, got {u_e.shape}")
        lmk = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n_v = n3 // 3
        if lmk.size and (lmk.min() < 0 or lmk.max() >= n_v):
            raise ValueError("landmark index out of range")
        if tri.size and (tri.min() < 0 or tri.max() >= n_v):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "shape_basis", u_s)
        object.__setattr__(self, "expr_basis", u_e)
        object.__setattr__(self, "landmark_indices", lmk)
        object.__setattr__(self, "triangles", tri)
        # one contiguous [U_s | U_e] so reconstruction is a single gemv
        object.__setattr__(self, "_joint", np.ascontiguousarray(np.hstack([u_s, u_e])))

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.size

    def landmark_rows(self) -> np.ndarray:
        """Rows of the flat vectors that belong to landmark vertices, in landmark order."""
        idx = self.landmark_indices
        return np.stack([3 * idx, 3 * idx + 1, 3 * idx + 2], axis=1).reshape(-1)

    def landmark_subset(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean rows, joint basis rows) restricted to landmark vertices."""
        rows = self.landmark_rows()
        return self.mean[rows], self._joint[rows]

    def with_landmarks(self, indices) -> "FaceBasis":
        return FaceBasis(self.mean, self.shape_basis, self.expr_basis, indices, self.triangles)


@dataclass(frozen=True)
class PoseTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not is_rotation(rot, ROT_TOL):
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """The 3x4 block [scale * R | t]."""
        return np.hstack([self.scale * self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class ParamVector:
    """62 morphable-model parameters: pose (12), shape (40), expression (10)."""

    pose: np.ndarray
    shape: np.ndarray
    expr: np.ndarray

    BLOCKS = {"p": slice(0, N_POSE), "s": slice(N_POSE, N_POSE + N_SHAPE), "e": slice(N_POSE + N_SHAPE, N_PARAMS)}

    def __post_init__(self):
        for name, n in (("pose", N_POSE), ("shape", N_SHAPE), ("expr", N_EXPR)):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size != n:
                raise ValueError(f"{name} block needs {n} values, got {arr.size}")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_vector(cls, vec) -> "ParamVector":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != N_PARAMS:
            raise ValueError(f"parameter vector needs {N_PARAMS} values, got {vec.size}")
        b = cls.BLOCKS
        return cls(vec[b["p"]], vec[b["s"]], vec[b["e"]])

    @classmethod
    def neutral(cls, pose: PoseTransform | None = None) -> "ParamVector":
        pose = pose or PoseTransform.identity()
        return cls(compose_pose_params(pose), np.zeros(N_SHAPE), np.zeros(N_EXPR))

    def block(self, m: str) -> np.ndarray:
        return {"p": self.pose, "s": self.shape, "e": self.expr}[m]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose, self.shape, self.expr])


def is_rotation(r: np.ndarray, tol: float = 1e-6) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


def reconstruct_frontal(basis: FaceBasis, shape, expr) -> np.ndarray:
    """Mean plus shape and expression deformation, as a 3 x N_v vertex matrix."""
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    expr = np.asarray(expr, dtype=np.float64).reshape(-1)
    if shape.size != N_SHAPE or expr.size != N_EXPR:
        raise ValueError(
            f"expected {N_SHAPE} shape and {N_EXPR} expression coefficients, "
            f"got {shape.size} and {expr.size}"
        )
    flat = basis.mean + basis._joint @ np.concatenate([shape, expr])
    return flat.reshape(3, -1, order="F")


def apply_pose(vertices: np.ndarray, pose: PoseTransform) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[0] != 3:
        raise ValueError(f"vertices must be 3 x N, got {vertices.shape}")
    return (pose.scale * pose.rotation) @ vertices + pose.translation[:, None]


def compose_pose_params(pose: PoseTransform) -> np.ndarray:
    return pose.matrix().reshape(-1)


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation to ``m`` in Frobenius norm (polar factor with det fix)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def decompose_pose(pose_params) -> PoseTransform:
    p = np.asarray(pose_params, dtype=np.float64).reshape(-1)
    if p.size != N_POSE:
        raise ValueError(f"pose block needs {N_POSE} values, got {p.size}")
    if not np.all(np.isfinite(p)):
        raise DegeneratePoseError("pose block contains non-finite values")
    block = p.reshape(3, 4)
    sr, t = block[:, :3], block[:, 3]
    scale = float(np.linalg.norm(sr, axis=1).mean())
    if scale < 1e-12:
        raise DegeneratePoseError("pose block has near-zero norm")
    if np.linalg.det(sr) <= 0:
        raise DegeneratePoseError("pose block has non-positive determinant")
    return PoseTransform(scale, project_to_so3(sr / scale), t.copy())


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def compose_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Ry(yaw) Rx(pitch) Rz(roll), angles in degrees."""
    y, p, r = np.deg2rad([yaw, pitch, roll])
    return _ry(y) @ _rx(p) @ _rz(r)


def rotation_to_euler(r: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`compose_euler`; returns (yaw, pitch, roll) in degrees.

    At gimbal lock roll is pinned to zero and yaw carries the residual turn.
    """
    r = np.asarray(r, dtype=np.float64)
    if not is_rotation(r, 1e-6):
        raise ValueError("input is not a rotation matrix")
    sp = float(np.clip(-r[1, 2], -1.0, 1.0))
    pitch = np.arcsin(sp)
    if abs(abs(np.rad2deg(pitch)) - 90.0) <= 1e-9 or np.hypot(r[1, 0], r[1, 1]) < 1e-12:
        pitch = np.copysign(np.pi / 2, sp)
        roll = 0.0
        yaw = np.arctan2(-r[2, 0], r[0, 0])
    else:
        yaw = np.arctan2(r[0, 2], r[2, 2])
        roll = np.arctan2(r[1, 0], r[1, 1])
    return float(np.rad2deg(yaw)), float(np.rad2deg(pitch)), float(np.rad2deg(roll))


def extract_landmarks(vertices: np.ndarray, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n_v = vertices.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n_v):
        raise IndexError(f"landmark index out of range for {n_v} vertices")
    return vertices[:, idx]


def full_forward(basis: FaceBasis, params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    """Aligned mesh vertices and their landmark gather for one parameter vector."""
    frontal = reconstruct_frontal(basis, params.shape, params.expr)
    aligned = apply_pose(frontal, decompose_pose(params.pose))
    return aligned, extract_landmarks(aligned, basis.landmark_indices)


def forward_landmarks(basis: FaceBasis, params: ParamVector) -> np.ndarray:
    """Same landmarks as :func:`full_forward` without building the dense mesh."""
    mean_l, joint_l = basis.landmark_subset()
    frontal = (mean_l + joint_l @ np.concatenate([params.shape, params.expr])).reshape(3, -1, order="F")
    return apply_pose(frontal, decompose_pose(params.pose))


# --- file formats -----------------------------------------------------------


def save_basis(basis: FaceBasis, path) -> None:
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<4I", basis.n_vertices, N_SHAPE, N_EXPR, basis.n_landmarks))
        f.write(basis.mean.astype("<f8").tobytes())
        # column-major: column after column
        f.write(basis.shape_basis.T.astype("<f8").tobytes())
        f.write(basis.expr_basis.T.astype("<f8").tobytes())
        f.write(basis.landmark_indices.astype("<u4").tobytes())
        f.write(struct.pack("<I", len(basis.triangles)))
        f.write(basis.triangles.astype("<u4").tobytes())


def load_basis(path, landmark_indices=None) -> FaceBasis:
    """Read a basis file; ``landmark_indices`` overrides the stored landmark list."""
    data = Path(path).read_bytes()
    if data[:8] != BASIS_MAGIC:
        raise ValueError(f"{path}: not a basis file (bad magic)")
    try:
        n_v, n_s, n_e, n_l = struct.unpack_from("<4I", data, 8)
        if (n_s, n_e) != (N_SHAPE, N_EXPR):
            raise ValueError(f"{path}: expected {N_SHAPE}/{N_EXPR} basis columns, got {n_s}/{n_e}")
        off = 24
        n3 = 3 * n_v

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr

        mean = take("<f8", n3).astype(np.float64)
        u_s = take("<f8", n3 * n_s).reshape(n_s, n3).T
        u_e = take("<f8", n3 * n_e).reshape(n_e, n3).T
        lmk = take("<u4", n_l).astype(np.int64)
        (n_tri,) = struct.unpack_from("<I", data, off)
        off += 4
        tri = take("<u4", 3 * n_tri).astype(np.int64).reshape(-1, 3)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated basis file") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    if landmark_indices is not None:
        lmk = landmark_indices
    return FaceBasis(mean, u_s, u_e, lmk, tri)


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    """Write ``v``/``f`` lines; 17 significant digits keep doubles exact."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(vertices, dtype=np.float64).T]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).T.reshape(3, -1), np.array(faces, dtype=np.int64).reshape(-1, 3)
