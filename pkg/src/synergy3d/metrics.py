"""Evaluation protocols: landmark NME, Euler MAE, ICP and dense modeling errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .morphable import OUTER_EYE_CORNERS, PoseTransform, project_to_so3

YAW_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))
BIN_NAMES = ("0-30", "30-60", "60-90")
YAW_EXCLUSION_DEG = 99.0
FLORENCE_CROP = 95.0


# --- alignment ----------------------------------------------------------------


def nme(pred, gt, bbox_size, dims=2):
    """Mean landmark distance over the first ``dims`` coordinates, divided by ``bbox_size``.

    ``pred`` and ``gt`` are 3 x N landmark matrices.
    """
    if not bbox_size > 0:
        raise ValueError(f"bbox_size must be positive, got {bbox_size}")
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark shapes differ: {pred.shape} vs {gt.shape}")
    d = np.sqrt(((pred[:dims] - gt[:dims]) ** 2).sum(axis=0))
    return float(d.mean() / bbox_size)


def batch_nme(pred, gt, bbox, dims=2):
    """Per-sample NME for S x 3 x N stacks."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    if np.any(bbox <= 0):
        raise ValueError("bbox sizes must be positive")
    d = np.sqrt(((pred[:, :dims] - gt[:, :dims]) ** 2).sum(axis=1))
    return d.mean(axis=1) / bbox


def yaw_bin(yaw_deg: float) -> int:
    """Bin index of |yaw|; anything beyond 90 degrees falls in the last bin."""
    a = abs(float(yaw_deg))
    if a <= 30.0:
        return 0
    if a <= 60.0:
        return 1
    return 2


@dataclass
class AlignmentResult:
    per_sample: np.ndarray
    bins: np.ndarray
    per_bin: dict
    counts: dict
    overall_pooled: float
    overall_binmean: float
    bin_balanced: bool = False

    @property
    def overall(self) -> float:
        return self.overall_binmean if self.bin_balanced else self.overall_pooled


def binned_nme(results, yaw_gt, bin_balanced=False) -> AlignmentResult:
    """Group per-sample NME by yaw bin; empty bins report ``None``."""
    results = np.asarray(results, dtype=np.float64).reshape(-1)
    yaw_gt = np.asarray(yaw_gt, dtype=np.float64).reshape(-1)
    if results.shape != yaw_gt.shape:
        raise ValueError("one yaw per result is required")
    if np.any(results < 0):
        raise ValueError("NME values must be non-negative")
    bins = np.array([yaw_bin(y) for y in yaw_gt], dtype=np.int64)
    per_bin, counts, means = {}, {}, []
    for k, name in enumerate(BIN_NAMES):
        sel = results[bins == k]
        counts[name] = int(sel.size)
        per_bin[name] = float(sel.mean()) if sel.size else None
        if sel.size:
            means.append(per_bin[name])
    pooled = float(results.mean()) if results.size else float("nan")
    binmean = float(np.mean(means)) if means else float("nan")
    return AlignmentResult(results, bins, per_bin, counts, pooled, binmean, bin_balanced)


# --- orientation -----------------------------------------------------------------


def angle_diff(a, b):
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    return np.minimum(d, 360.0 - d)


@dataclass
class OrientationResult:
    yaw: float
    pitch: float
    roll: float
    n_used: int
    n_excluded: int

    @property
    def mean(self) -> float:
        return float(np.mean([self.yaw, self.pitch, self.roll]))


def euler_mae(pred, gt) -> OrientationResult:
    """Per-angle MAE in degrees over samples whose groundtruth |yaw| is at most 99."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError("prediction and groundtruth counts differ")
    keep = np.abs(gt[:, 0]) <= YAW_EXCLUSION_DEG
    n_ex = int((~keep).sum())
    if not keep.any():
        nan = float("nan")
        return OrientationResult(nan, nan, nan, 0, n_ex)
    err = angle_diff(pred[keep], gt[keep]).mean(axis=0)
    return OrientationResult(float(err[0]), float(err[1]), float(err[2]), int(keep.sum()), n_ex)


# --- rigid registration -------------------------------------------------------------


def _as_points(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("point sets must be 2-D")
    # accept 3 x N as well as N x 3
    if x.shape[0] == 3 and x.shape[1] != 3:
        x = x.T
    return x


def _check_rank(pts, what):
    if len(pts) < 3:
        raise ValueError(f"{what}: need at least 3 points")
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError(f"{what}: points are collinear or coincident")


def procrustes(src, dst):
    """Rotation and translation minimizing sum |R src_i + t - dst_i|^2 (N x 3 inputs)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


@dataclass
class IcpResult:
    pose: PoseTransform
    residual: float
    trace: list = field(default_factory=list)
    iterations: int = 0

    def __iter__(self):
        return iter((self.pose, self.residual))


def icp_rigid(src, dst, max_iter=100, tol=1e-10, init=None) -> IcpResult:
    """Rigid ICP with exact nearest neighbours and closed-form Procrustes updates.

    ``init`` is an optional (R, t) start; by default the centroids are aligned.
    The residual is the RMS nearest-neighbour distance; ``trace`` holds it after
    each update, starting with the initial alignment.
    """
    src, dst = _as_points(src), _as_points(dst)
    _check_rank(src, "source")
    _check_rank(dst, "destination")
    tree = cKDTree(dst)
    if init is None:
        r, t = np.eye(3), dst.mean(axis=0) - src.mean(axis=0)
    else:
        r, t = np.asarray(init[0], dtype=np.float64), np.asarray(init[1], dtype=np.float64)
    moved = src @ r.T + t
    dist, idx = tree.query(moved)
    residual = float(np.sqrt(np.mean(dist ** 2)))
    trace = [residual]
    it = 0
    for it in range(1, max_iter + 1):
        r_new, t_new = procrustes(src, dst[idx])
        moved = src @ r_new.T + t_new
        dist, idx_new = tree.query(moved)
        res_new = float(np.sqrt(np.mean(dist ** 2)))
        if res_new > residual:
            # the exact update cannot increase the matched error; keep the better state
            break
        r, t, idx = r_new, t_new, idx_new
        change = residual - res_new
        residual = res_new
        trace.append(residual)
        if change < tol:
            break
    r = project_to_so3(r)
    return IcpResult(PoseTransform(1.0, r, t), residual, trace, it)


# --- dense modeling -----------------------------------------------------------------


def _apply(pose, pts):
    return pts @ (pose.scale * pose.rotation).T + pose.translation


def modeling_error_p1(pred_mesh, gt_mesh, interocular=None, landmark_indices=None, icp=True):
    """ICP-register ``pred`` onto ``gt``, then mean vertex distance / interocular distance.

    Meshes are 3 x N with shared topology. ``interocular`` defaults to the
    distance between the groundtruth outer eye corners (needs ``landmark_indices``).
    """
    pred, gt = _as_points(pred_mesh), _as_points(gt_mesh)
    if pred.shape != gt.shape:
        raise ValueError("meshes must share topology")
    if interocular is None:
        if landmark_indices is None:
            raise ValueError("either interocular or landmark_indices is required")
        a, b = (landmark_indices[i] for i in OUTER_EYE_CORNERS)
        interocular = float(np.linalg.norm(gt[a] - gt[b]))
    if not interocular > 0:
        raise ValueError("interocular distance must be positive")
    if icp:
        # correspondence-based start, then nearest-neighbour refinement
        init = procrustes(pred, gt)
        pose = icp_rigid(pred, gt, init=init).pose
        pred = _apply(pose, pred)
    return float(np.linalg.norm(pred - gt, axis=1).mean() / interocular)


def modeling_error_p2(pred_mesh, gt_mesh, bbox_size):
    """Mean vertex distance / bbox size, no registration (pose errors count)."""
    if not bbox_size > 0:
        raise ValueError("bbox_size must be positive")
    pred, gt = _as_points(pred_mesh), _as_points(gt_mesh)
    if pred.shape != gt.shape:
        raise ValueError("meshes must share topology")
    return float(np.linalg.norm(pred - gt, axis=1).mean() / bbox_size)


def vertex_normals(verts, tris):
    """Area-weighted vertex normals (N x 3 input)."""
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    fn = np.cross(b - a, c - a)  # length = twice the area
    vn = np.zeros_like(verts)
    for k in range(3):
        np.add.at(vn, tris[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)


def point_triangle_distance(p, a, b, c):
    """Squared distance from points ``p`` (M x 3) to triangles (M x 3 each), vectorized.

    Follows the region tests of Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        closest[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return ((p - closest) ** 2).sum(axis=1)


def nearest_triangles(points, verts, tris, chunk=256, rel_tie=1e-10):
    """Index of the closest triangle for each point (exhaustive; ties go to the lowest index)."""
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    n_t = len(tris)
    out = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        m = len(p)
        d2 = point_triangle_distance(
            np.repeat(p, n_t, axis=0), np.tile(a, (m, 1)), np.tile(b, (m, 1)), np.tile(c, (m, 1))
        ).reshape(m, n_t)
        best = d2.min(axis=1, keepdims=True)
        near = d2 <= best + rel_tie * np.maximum(best, 1e-300) + 1e-300
        out[start:start + m] = np.argmax(near, axis=1)
    return out


def point_to_plane_distances(points, verts, tris):
    """Signed distance of each point to the plane of its nearest triangle.

    The plane normal is the face normal, oriented to agree with the summed
    area-weighted normals of the triangle's vertices.
    """
    points = _as_points(points)
    verts = _as_points(verts)
    tris = np.asarray(tris, dtype=np.int64)
    k = nearest_triangles(points, verts, tris)
    t = tris[k]
    a, b, c = verts[t[:, 0]], verts[t[:, 1]], verts[t[:, 2]]
    fn = np.cross(b - a, c - a)
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    vn = vertex_normals(verts, tris)
    orient = (vn[t[:, 0]] + vn[t[:, 1]] + vn[t[:, 2]])
    sign = np.where(np.einsum("ij,ij->i", fn, orient) < 0, -1.0, 1.0)
    return sign * np.einsum("ij,ij->i", fn, points - a)


def crop_mesh(verts, tris, center, radius):
    """Keep vertices within ``radius`` of ``center`` and the triangles fully inside."""
    keep = np.linalg.norm(verts - center, axis=1) <= radius
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    inside = keep[tris].all(axis=1)
    return verts[keep], remap[tris[inside]]


def florence_rmse(pred_mesh, gt_mesh, triangles, nose_tip_index, radius=FLORENCE_CROP, icp=True):
    """Point-to-plane RMSE after cropping both meshes around their nose tips."""
    pred, gt = _as_points(pred_mesh), _as_points(gt_mesh)
    tris = np.asarray(triangles, dtype=np.int64)
    p_crop, _ = crop_mesh(pred, tris, pred[nose_tip_index], radius)
    g_crop, g_tris = crop_mesh(gt, tris, gt[nose_tip_index], radius)
    if len(p_crop) == 0 or len(g_tris) == 0:
        raise ValueError("crop around the nose tip is empty")
    if icp:
        pose = icp_rigid(p_crop, g_crop).pose
        p_crop = _apply(pose, p_crop)
    d = point_to_plane_distances(p_crop, g_crop, g_tris)
    return float(np.sqrt(np.mean(d ** 2)))


# --- reports --------------------------------------------------------------------


def alignment_report(result: AlignmentResult, config_echo=None, n_excluded=0) -> dict:
    return {
        "protocol": "align",
        "per_bin": result.per_bin,
        "bin_counts": result.counts,
        "overall": result.overall,
        "overall_pooled": result.overall_pooled,
        "overall_binmean": result.overall_binmean,
        "n_samples": int(result.per_sample.size),
        "n_excluded": n_excluded,
        "config_echo": config_echo or {},
    }


def orientation_report(result: OrientationResult, config_echo=None) -> dict:
    return {
        "protocol": "orient",
        "per_bin": {},
        "per_angle": {"yaw": result.yaw, "pitch": result.pitch, "roll": result.roll},
        "overall": result.mean,
        "n_samples": result.n_used + result.n_excluded,
        "n_excluded": result.n_excluded,
        "config_echo": config_echo or {},
    }


def modeling_report(protocol, errors, yaw_gt=None, config_echo=None) -> dict:
    errors = np.asarray(errors, dtype=np.float64)
    per_bin = {}
    if yaw_gt is not None:
        per_bin = binned_nme(errors, yaw_gt).per_bin
    return {
        "protocol": protocol,
        "per_bin": per_bin,
        "overall": float(errors.mean()) if errors.size else float("nan"),
        "n_samples": int(errors.size),
        "n_excluded": 0,
        "config_echo": config_echo or {},
    }
