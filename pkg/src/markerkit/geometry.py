"""Projective geometry: homographies, patch rectification, PnP, pose metrics.

All point arrays are (n, 2) or (n, 3) float64, image convention (x right,
y down). Homographies are 3x3 with the bottom-right entry normalized to 1
whenever it is nonzero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation


class GeometryError(ValueError):
    """Degenerate configuration or diverged estimation."""


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray  # 3x3 float64
    residual: float | None = None  # RMS reprojection residual of the fit

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError("homography matrix must be 3x3")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ph = np.hstack([pts, np.ones((pts.shape[0], 1))]) @ self.matrix.T
        w = ph[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise GeometryError("point mapped to infinity")
        out = ph[:, :2] / w[:, None]
        return out if np.asarray(points).ndim > 1 else out[0]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """Returns self ∘ other (apply `other` first)."""
        return Homography(self.matrix @ other.matrix)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))


@dataclass(frozen=True, eq=False)
class RoiTemplate:
    """Target points in the unit patch frame that the ROI is warped onto."""

    points: np.ndarray  # (n, 2) in [0, 1]^2
    inset: float = 0.15

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @staticmethod
    def square(inset: float = 0.15) -> "RoiTemplate":
        a = inset
        if not 0.0 < a < 0.5:
            raise GeometryError("square template inset must be in (0, 0.5)")
        return RoiTemplate(np.array([[a, a], [1 - a, a], [1 - a, 1 - a], [a, 1 - a]]), a)

    @staticmethod
    def for_roi_points(roi_unit: np.ndarray, inset: float = 0.15) -> "RoiTemplate":
        """Normalize arbitrary ROI points into the inset square of the patch.

        The bounding square of the points maps onto [inset, 1-inset]^2; a
        quad-border ROI therefore lands exactly on the canonical square.
        """
        pts = np.asarray(roi_unit, dtype=np.float64)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1]))
        if span <= 0:
            raise GeometryError("roi points are coincident")
        center = (lo + hi) / 2.0
        scaled = (pts - center) / span * (1.0 - 2.0 * inset) + 0.5
        return RoiTemplate(scaled, inset)

    def scaled(self, out_size: int) -> np.ndarray:
        return self.points * float(out_size)


@dataclass(frozen=True, eq=False)
class Pose6DoF:
    rotation: np.ndarray  # 3x3 orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if abs(np.linalg.det(r) - 1.0) > 1e-6 or np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise GeometryError("rotation must be orthonormal with det +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def quaternion(self) -> np.ndarray:
        """(x, y, z, w), scalar-last, w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return q if q[3] >= 0 else -q

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose6DoF":
        rt = self.rotation.T
        return Pose6DoF(rt, -rt @ self.translation)

    def compose(self, other: "Pose6DoF") -> "Pose6DoF":
        """Returns self ∘ other (apply `other` first)."""
        return Pose6DoF(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    distortion: tuple[float, ...] = ()  # radial k1, k2, k3

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels -> undistorted normalized image coordinates."""
        p = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        xn = np.stack([(p[:, 0] - self.cx) / self.fx, (p[:, 1] - self.cy) / self.fy], axis=1)
        if any(self.distortion):
            xn = self._undistort_normalized(xn)
        return xn

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Camera-frame 3D points -> pixels (applies distortion if present)."""
        pts = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        if np.any(pts[:, 2] <= 0):
            raise GeometryError("point behind camera")
        xn = pts[:, :2] / pts[:, 2:3]
        xn = self._distort_normalized(xn)
        return np.stack([xn[:, 0] * self.fx + self.cx, xn[:, 1] * self.fy + self.cy], axis=1)

    def _distort_normalized(self, xn: np.ndarray) -> np.ndarray:
        if not any(self.distortion):
            return xn
        k = list(self.distortion) + [0.0] * (3 - len(self.distortion))
        r2 = np.sum(xn**2, axis=1, keepdims=True)
        factor = 1.0 + k[0] * r2 + k[1] * r2**2 + k[2] * r2**3
        return xn * factor

    def _undistort_normalized(self, xd: np.ndarray) -> np.ndarray:
        xn = xd.copy()
        for _ in range(20):
            xn = xd - (self._distort_normalized(xn) - xn)
        return xn

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "distortion": list(self.distortion),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            tuple(float(v) for v in d.get("distortion", ())),
        )


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def save_intrinsics(intrinsics: CameraIntrinsics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(intrinsics.to_dict(), indent=1))


# -- homography estimation ---------------------------------------------------


def estimate_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares DLT with Hartley normalization; residual attached."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError("src/dst must be matching (n, 2) arrays")
    n = src.shape[0]
    if n < 4:
        raise GeometryError("at least 4 correspondences required")
    if n == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise GeometryError("3 of 4 defining points are collinear")

    ts, src_n = _normalize_points(src)
    td, dst_n = _normalize_points(dst)
    a = np.zeros((2 * n, 9))
    x, y = src_n[:, 0], src_n[:, 1]
    u, v = dst_n[:, 0], dst_n[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, s, vt = np.linalg.svd(a)
    if s[-2] < 1e-10 * max(s[0], 1.0):
        raise GeometryError("degenerate point configuration (rank deficient)")
    h = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(td) @ h @ ts
    hom = Homography(matrix)
    residual = float(np.sqrt(np.mean(np.sum((hom.apply(src) - dst) ** 2, axis=1))))
    return Homography(matrix, residual)


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.sqrt(np.sum((pts - centroid) ** 2, axis=1)).mean()
    if d < 1e-12:
        raise GeometryError("coincident points")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return t, (pts - centroid) * s


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    n = pts.shape[0]
    scale = max(float(np.ptp(pts)), 1.0)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                area = abs(np.cross(pts[j] - pts[i], pts[k] - pts[i]))
                if area < tol * scale * scale:
                    return True
    return False


def rectify_patch(
    image: np.ndarray,
    roi_points: np.ndarray,
    template: RoiTemplate,
    out_size: int,
) -> tuple[np.ndarray, Homography]:
    """Warp the ROI onto the template; returns (patch, image->patch homography)."""
    roi_points = np.asarray(roi_points, dtype=np.float64)
    if roi_points.shape[0] == 4 and not is_convex_quad(roi_points):
        raise GeometryError("roi quad is self-intersecting or degenerate")
    hom = estimate_homography(roi_points, template.scaled(out_size))
    patch = cv2.warpPerspective(image, hom.matrix, (out_size, out_size), flags=cv2.INTER_LINEAR)
    return patch, hom


def is_convex_quad(quad: np.ndarray) -> bool:
    quad = np.asarray(quad, dtype=np.float64)
    cross = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        cross.append(np.cross(a, b))
    cross = np.asarray(cross)
    return bool(np.all(cross > 0) or np.all(cross < 0))


# -- PnP ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: Pose6DoF
    reprojection_rms: float


def solve_pnp(
    model_points: np.ndarray,
    image_points: np.ndarray,
    intrinsics: CameraIntrinsics,
) -> PnPResult:
    """Pose from 2D-3D correspondences, specialised for planar targets.

    Seeds from a homography decomposition on the model plane, refines with
    Levenberg-Marquardt, and also refines the mirrored-normal branch to guard
    against the planar two-fold ambiguity; the lower-residual pose wins.
    """
    model = np.asarray(model_points, dtype=np.float64)
    pixels = np.asarray(image_points, dtype=np.float64)
    if model.ndim != 2 or model.shape[1] != 3 or pixels.shape != (model.shape[0], 2):
        raise GeometryError("need (n, 3) model points and matching (n, 2) image points")
    if model.shape[0] < 4:
        raise GeometryError("at least 4 correspondences required")

    centroid = model.mean(axis=0)
    centered = model - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[1] < 1e-9 * max(svals[0], 1.0):
        raise GeometryError("model points are collinear")
    planar = svals[2] < 1e-7 * svals[0]
    xn = intrinsics.normalize(pixels)

    if planar:
        basis = vt[:2].T  # orthonormal in-plane axes
        normal = np.cross(basis[:, 0], basis[:, 1])
        plane_uv = centered @ basis
        seed = _pose_from_plane_homography(plane_uv, xn)
        m = np.column_stack([basis, normal])  # plane coords -> model coords
        seeds = []
        for r_p, t_p in seed:
            r_full = r_p @ m.T
            t_full = t_p - r_full @ centroid
            seeds.append((r_full, t_full))
    else:
        seeds = [_pose_from_dlt(model, xn)]

    best: tuple[Pose6DoF, float] | None = None
    for r0, t0 in seeds:
        refined = _refine_pose(model, xn, r0, t0)
        if refined is None:
            continue
        pose, rms_n = refined
        if best is None or rms_n < best[1]:
            best = (pose, rms_n)
    if best is None:
        raise GeometryError("PnP refinement diverged")
    pose, _ = best
    reproj = intrinsics.project(pose.apply(model))
    rms = float(np.sqrt(np.mean(np.sum((reproj - pixels) ** 2, axis=1))))
    return PnPResult(pose, rms)


def _pose_from_plane_homography(plane_uv: np.ndarray, xn: np.ndarray):
    hom = estimate_homography(plane_uv, xn)
    h = hom.matrix
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    r = _orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    # mirrored-normal branch: reflect the plane normal across the view ray
    v = t / max(np.linalg.norm(t), 1e-12)
    n = r[:, 2]
    n2 = 2.0 * float(n @ v) * v - n
    axis = np.cross(n, n2)
    sin_a = np.linalg.norm(axis)
    if sin_a > 1e-9:
        angle = np.arctan2(sin_a, float(n @ n2))
        r_align = Rotation.from_rotvec(axis / sin_a * angle).as_matrix()
        return [(r, t), (_orthonormalize(r_align @ r), t.copy())]
    return [(r, t)]


def _pose_from_dlt(model: np.ndarray, xn: np.ndarray):
    n = model.shape[0]
    if n < 6:
        raise GeometryError("non-planar PnP needs at least 6 points")
    a = np.zeros((2 * n, 12))
    xh = np.hstack([model, np.ones((n, 1))])
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, 0:1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -xn[:, 1:2] * xh
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    scale = np.cbrt(np.linalg.det(p[:, :3]))
    p = p / scale
    r = _orthonormalize(p[:, :3])
    return r, p[:, 3]


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, 2] = -u[:, 2]
        r = u @ vt
    return r


def _refine_pose(model, xn, r0, t0):
    x0 = np.concatenate([Rotation.from_matrix(r0).as_rotvec(), t0])

    def residuals(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        cam = model @ r.T + x[3:]
        z = np.where(np.abs(cam[:, 2]) < 1e-12, 1e-12, cam[:, 2])
        proj = cam[:, :2] / z[:, None]
        return (proj - xn).ravel()

    try:
        sol = least_squares(residuals, x0, method="lm", max_nfev=200)
    except Exception:
        return None
    if not np.all(np.isfinite(sol.x)):
        return None
    r = Rotation.from_rotvec(sol.x[:3]).as_matrix()
    pose = Pose6DoF(r, sol.x[3:])
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    return pose, rms


# -- pose statistics ----------------------------------------------------------


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    rel = np.asarray(r_a) @ np.asarray(r_b).T
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def mean_pose(poses: list[Pose6DoF]) -> Pose6DoF:
    if not poses:
        raise GeometryError("cannot average an empty pose sequence")
    t = np.mean([p.translation for p in poses], axis=0)
    r = Rotation.from_matrix([p.rotation for p in poses]).mean().as_matrix()
    return Pose6DoF(r, t)


@dataclass(frozen=True, eq=False)
class PoseMetrics:
    position_error: float  # mm (marker-size units if unscaled)
    rotation_error: float  # degrees
    position_jitter: float  # pooled per-axis std, mm
    rotation_jitter: float  # RMS geodesic angle to mean, degrees


def position_jitter(poses: list[Pose6DoF]) -> float:
    t = np.asarray([p.translation for p in poses])
    cov_trace = float(np.sum(np.var(t, axis=0)))
    return float(np.sqrt(cov_trace / 3.0))


def rotation_jitter_deg(poses: list[Pose6DoF]) -> float:
    mean_r = mean_pose(poses).rotation
    angles = [rotation_angle_deg(p.rotation, mean_r) for p in poses]
    return float(np.sqrt(np.mean(np.square(angles))))


def pose_metrics(
    sequence_a: list[Pose6DoF],
    sequence_b: list[Pose6DoF],
    gt_offset: Pose6DoF,
) -> PoseMetrics:
    """Error of the mean relative pose vs. the ground-truth offset, plus jitter.

    The relative pose is the motion of the marker body expressed in the camera
    frame: R_rel = R_b R_a^T, t_rel = t_b - R_rel t_a.
    """
    ma, mb = mean_pose(sequence_a), mean_pose(sequence_b)
    r_rel = mb.rotation @ ma.rotation.T
    t_rel = mb.translation - r_rel @ ma.translation
    pos_err = float(np.linalg.norm(t_rel - gt_offset.translation))
    rot_err = rotation_angle_deg(r_rel, gt_offset.rotation)
    pos_jit = 0.5 * (position_jitter(sequence_a) + position_jitter(sequence_b))
    rot_jit = 0.5 * (rotation_jitter_deg(sequence_a) + rotation_jitter_deg(sequence_b))
    return PoseMetrics(pos_err, rot_err, pos_jit, rot_jit)


# -- convex polygon overlap ---------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def convex_polygon_intersection(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of one convex polygon by another."""
    clip = _ccw(np.asarray(clip, dtype=np.float64))
    output = list(_ccw(np.asarray(subject, dtype=np.float64)))
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_in = np.cross(edge, prev - a) >= 0
        for cur in input_pts:
            cur_in = np.cross(edge, cur - a) >= 0
            if cur_in != prev_in:
                denom = np.cross(edge, cur - prev)
                if abs(denom) > 1e-15:
                    t = np.cross(edge, a - prev) / denom
                    output.append(prev + t * (cur - prev))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.asarray(output).reshape(-1, 2)


def quad_iou(quad_a: np.ndarray, quad_b: np.ndarray) -> float:
    """Intersection over union of two convex quads (exact clipping)."""
    inter_poly = convex_polygon_intersection(quad_a, quad_b)
    inter = polygon_area(inter_poly) if inter_poly.shape[0] >= 3 else 0.0
    union = polygon_area(quad_a) + polygon_area(quad_b) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def _ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly if signed >= 0 else poly[::-1]
