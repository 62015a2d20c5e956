"""On-the-fly synthesis of annotated training scenes and stage-2 patches.

Markers are rendered, degraded (print/lighting/motion artifacts), and pasted
onto backgrounds at sampled camera-relative poses, so every annotation is
derived analytically from the placement homography: boxes, the 5 ordered ROI
points (center + corners), corner directions, keypoints with pattern classes,
a 1/8-resolution segmentation mask, and the exact planted 6-DoF pose.

Everything is reproducible: a sample is a pure function of (seed, config,
background source, family set).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .family import MarkerFamily
from .geometry import (
    CameraIntrinsics,
    Homography,
    Pose6DoF,
    RoiTemplate,
    convex_polygon_intersection,
    estimate_homography,
    polygon_area,
)


class SynthError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class MarkerAugmentConfig:
    """Print/lighting/motion degradations applied to the marker bitmap."""

    grayscale_dark: tuple[float, float] = (0.0, 70.0)
    grayscale_bright: tuple[float, float] = (180.0, 255.0)
    spotlight_count: tuple[int, int] = (0, 2)
    spotlight_radius: tuple[float, float] = (0.2, 0.6)  # fraction of bitmap side
    spotlight_gain: tuple[float, float] = (-0.25, 0.4)
    gaussian_blur_sigma: tuple[float, float] = (0.0, 1.5)
    gaussian_noise_std: tuple[float, float] = (0.0, 8.0)
    motion_blur_kernel: tuple[int, int] = (1, 5)


@dataclass
class ImageAugmentConfig:
    """Capture-process degradations applied to the composed scene."""

    gaussian_blur_sigma: tuple[float, float] = (0.0, 1.0)
    motion_blur_kernel: tuple[int, int] = (1, 5)
    white_balance_r: tuple[float, float] = (0.9, 1.1)
    white_balance_g: tuple[float, float] = (0.95, 1.05)
    white_balance_b: tuple[float, float] = (0.9, 1.1)
    gaussian_noise_std: tuple[float, float] = (0.0, 6.0)
    barrel_coefficient: tuple[float, float] = (0.0, 0.0)


@dataclass
class AugmentationConfig:
    marker: MarkerAugmentConfig = field(default_factory=MarkerAugmentConfig)
    image: ImageAugmentConfig = field(default_factory=ImageAugmentConfig)

    def validate(self) -> None:
        for dc in (self.marker, self.image):
            for name, rng in vars(dc).items():
                lo, hi = rng
                if lo > hi:
                    raise SynthError(f"range {name} is not ordered: {rng}")


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (256, 256)  # (h, w)
    marker_count: tuple[int, int] = (1, 3)
    marker_px: tuple[float, float] = (72.0, 168.0)  # projected side of the code area
    tilt_deg: tuple[float, float] = (0.0, 30.0)
    focal_factor: float = 1.1  # focal length = factor * max(image side)
    marker_size_mm: float = 60.0
    border_margin_px: float = 4.0
    color: bool = True
    placement_retries: int = 50
    render_px: int = 192


@dataclass
class SynthConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)


# -- ground truth containers -----------------------------------------------------


@dataclass
class MarkerGroundTruth:
    family: str
    marker_id: int
    homography: Homography  # unit layout frame -> image px (pre-distortion)
    pose: Pose6DoF  # marker frame (mm, z=0 plane) -> camera
    outer_quad: np.ndarray  # (4, 2) full printed extent, px
    roi_points: np.ndarray  # (1 + n_roi, 2): center first, then roi points
    keypoints: np.ndarray  # (n_layout, 2) px
    keypoint_classes: np.ndarray  # (n_layout,) pattern class ids
    view_angle_deg: float
    distance_mm: float


@dataclass
class AnnotationSet:
    boxes: list[tuple[float, float, float, float, int]]  # cx, cy, w, h, class
    roi_points: list[np.ndarray]  # per box: (1 + n_roi, 2)
    corners: list[tuple[np.ndarray, np.ndarray, int]]  # position, unit dir, owner
    keypoints: list[list[tuple[np.ndarray, int]]]  # per marker: (pos, class)
    mask: np.ndarray  # (h/8, w/8) float in {0, 1}
    markers: list[MarkerGroundTruth] = field(default_factory=list)
    barrel: tuple[float, float, float, float] | None = None  # k, cx, cy, r_norm


@dataclass
class TrainingSample:
    image: np.ndarray
    annotations: AnnotationSet
    seed: int
    intrinsics: CameraIntrinsics | None = None


@dataclass
class Stage2Sample:
    patch: np.ndarray  # (s, s) or (s, s, 3)
    keypoints: np.ndarray  # (n, 2) patch px
    keypoint_classes: np.ndarray  # (n,)
    template_points: np.ndarray  # (n_roi, 2) patch px, ordered
    mask: np.ndarray  # (s/8, s/8)
    homography: Homography  # image -> patch
    marker_index: int


# -- backgrounds -----------------------------------------------------------------


class ProceduralBackgrounds:
    """Deterministic synthetic backgrounds: gradients, shapes, text."""

    def get(self, rng: np.random.Generator, size: tuple[int, int], color: bool) -> np.ndarray:
        h, w = size
        base = np.zeros((h, w, 3), np.float64)
        # smooth two-corner gradient
        c0 = rng.uniform(40, 220, 3)
        c1 = rng.uniform(40, 220, 3)
        ax = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(ax) * xx / w + np.sin(ax) * yy / h)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        base += c0 + ramp[..., None] * (c1 - c0)
        img = base.astype(np.uint8).copy()
        for _ in range(int(rng.integers(4, 14))):
            kind = int(rng.integers(0, 4))
            col = tuple(int(v) for v in rng.uniform(0, 255, 3))
            if kind == 0:
                p0 = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
                p1 = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
                cv2.rectangle(img, p0, p1, col, -1 if rng.random() < 0.6 else 2)
            elif kind == 1:
                c = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
                cv2.circle(img, c, int(rng.uniform(4, 0.25 * min(h, w))), col,
                           -1 if rng.random() < 0.6 else 2)
            elif kind == 2:
                p0 = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
                p1 = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
                cv2.line(img, p0, p1, col, int(rng.integers(1, 4)))
            else:
                text = "".join(chr(int(c)) for c in rng.integers(65, 90, 6))
                org = (int(rng.uniform(0, w)), int(rng.uniform(12, h)))
                cv2.putText(img, text, org, cv2.FONT_HERSHEY_SIMPLEX,
                            float(rng.uniform(0.4, 1.2)), col, 1, cv2.LINE_8)
        if not color:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
        return img


class DirectoryBackgrounds:
    """Backgrounds drawn from a directory of image files (sorted order)."""

    def __init__(self, directory: str | Path):
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        self.paths = sorted(
            p for p in Path(directory).iterdir() if p.suffix.lower() in exts
        )
        if not self.paths:
            raise SynthError(f"no background images under {directory}")

    def get(self, rng: np.random.Generator, size: tuple[int, int], color: bool) -> np.ndarray:
        path = self.paths[int(rng.integers(0, len(self.paths)))]
        flag = cv2.IMREAD_COLOR if color else cv2.IMREAD_GRAYSCALE
        img = cv2.imread(str(path), flag)
        if img is None:
            raise SynthError(f"cannot read background {path}")
        h, w = size
        ih, iw = img.shape[:2]
        scale = max(h / ih, w / iw)
        img = cv2.resize(img, (max(w, int(round(iw * scale))), max(h, int(round(ih * scale)))))
        y0 = int(rng.integers(0, img.shape[0] - h + 1))
        x0 = int(rng.integers(0, img.shape[1] - w + 1))
        return img[y0 : y0 + h, x0 : x0 + w].copy()


# -- degradations ----------------------------------------------------------------


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _odd_kernel(rng, lo_hi) -> int:
    lo, hi = int(lo_hi[0]), int(lo_hi[1])
    k = lo if lo == hi else int(rng.integers(lo, hi + 1))
    return k if k % 2 == 1 else k + 1


def motion_blur_kernel(k: int, angle_rad: float) -> np.ndarray:
    """Normalized line kernel of length k at the given direction."""
    kernel = np.zeros((k, k), np.float64)
    c = (k - 1) / 2.0
    dx, dy = np.cos(angle_rad), np.sin(angle_rad)
    for t in np.linspace(-c, c, 4 * k + 1):
        x = int(round(c + t * dx))
        y = int(round(c + t * dy))
        kernel[y, x] = 1.0
    return kernel / kernel.sum()


def apply_motion_blur(image: np.ndarray, k: int, angle_rad: float) -> np.ndarray:
    if k < 3:
        return image
    kernel = motion_blur_kernel(k, angle_rad)
    return cv2.filter2D(image, -1, kernel, borderType=cv2.BORDER_REPLICATE)


def apply_gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    ksize = 2 * int(np.ceil(3.0 * sigma)) + 1
    return cv2.GaussianBlur(image, (ksize, ksize), sigma)


def apply_gaussian_noise(image: np.ndarray, rng: np.random.Generator, std: float) -> np.ndarray:
    if std <= 0:
        return image
    noise = rng.normal(0.0, std, image.shape)
    return np.clip(image.astype(np.float64) + noise, 0, 255).astype(np.uint8)


def degrade_marker(bitmap: np.ndarray, rng: np.random.Generator,
                   cfg: MarkerAugmentConfig) -> np.ndarray:
    """Fixed order: grayscale remap, spotlight, blur, noise, motion blur."""
    img = bitmap.astype(np.float64)

    dark = _uniform(rng, cfg.grayscale_dark)
    bright = _uniform(rng, cfg.grayscale_bright)
    if dark != 0.0 or bright != 255.0:
        img = dark + (bright - dark) * (img / 255.0)

    n_spots = int(rng.integers(cfg.spotlight_count[0], cfg.spotlight_count[1] + 1))
    h, w = img.shape[:2]
    for _ in range(n_spots):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        radius = _uniform(rng, cfg.spotlight_radius) * max(h, w)
        gain = _uniform(rng, cfg.spotlight_gain)
        yy, xx = np.mgrid[0:h, 0:w]
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        spot = gain * 255.0 * np.exp(-d2 / (2.0 * radius**2))
        img = img + (spot[..., None] if img.ndim == 3 else spot)

    img = np.clip(img, 0, 255).astype(np.uint8)
    img = apply_gaussian_blur(img, _uniform(rng, cfg.gaussian_blur_sigma))
    img = apply_gaussian_noise(img, rng, _uniform(rng, cfg.gaussian_noise_std))
    k = _odd_kernel(rng, cfg.motion_blur_kernel)
    img = apply_motion_blur(img, k, rng.uniform(0, np.pi) if k >= 3 else 0.0)
    return img


def barrel_forward(points: np.ndarray, k: float, center: tuple[float, float],
                   r_norm: float) -> np.ndarray:
    """Map undistorted points to their position in the barrel-distorted image.

    The image remap samples the source at radius r_src = r_dst (1 + k r_dst^2)
    (radii normalized by r_norm); this inverts that relation per point with
    Newton iterations, exact to ~1e-12.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k == 0.0:
        return pts.copy()
    d = pts - np.asarray(center)
    r_src = np.linalg.norm(d, axis=1) / r_norm
    r = r_src.copy()
    for _ in range(25):
        f = r * (1.0 + k * r**2) - r_src
        fp = 1.0 + 3.0 * k * r**2
        r = r - f / fp
    scale = np.where(r_src > 1e-12, r / np.where(r_src > 1e-12, r_src, 1.0), 1.0)
    return np.asarray(center) + d * scale[:, None]


def apply_barrel(image: np.ndarray, k: float) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Barrel-distort the image; returns (image, (k, cx, cy, r_norm))."""
    h, w = image.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    r_norm = np.hypot(cx, cy)
    params = (k, cx, cy, r_norm)
    if k == 0.0:
        return image, params
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(xx - cx, yy - cy) / r_norm
    factor = 1.0 + k * r**2
    map_x = (cx + (xx - cx) * factor).astype(np.float32)
    map_y = (cy + (yy - cy) * factor).astype(np.float32)
    out = cv2.remap(image, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return out, params


def degrade_image(image: np.ndarray, rng: np.random.Generator,
                  cfg: ImageAugmentConfig) -> tuple[np.ndarray, tuple | None]:
    """Fixed order: blur, motion blur, white balance, noise, barrel.

    Returns the degraded image and the barrel parameters (None if identity)
    so callers can remap annotation geometry exactly.
    """
    img = apply_gaussian_blur(image, _uniform(rng, cfg.gaussian_blur_sigma))
    k = _odd_kernel(rng, cfg.motion_blur_kernel)
    img = apply_motion_blur(img, k, rng.uniform(0, np.pi) if k >= 3 else 0.0)

    gains = (
        _uniform(rng, cfg.white_balance_b),
        _uniform(rng, cfg.white_balance_g),
        _uniform(rng, cfg.white_balance_r),
    )
    if img.ndim == 3 and gains != (1.0, 1.0, 1.0):
        img = np.clip(img.astype(np.float64) * np.asarray(gains), 0, 255).astype(np.uint8)
    elif img.ndim == 2 and gains != (1.0, 1.0, 1.0):
        img = np.clip(img.astype(np.float64) * float(np.mean(gains)), 0, 255).astype(np.uint8)

    img = apply_gaussian_noise(img, rng, _uniform(rng, cfg.gaussian_noise_std))

    k_barrel = _uniform(rng, cfg.barrel_coefficient)
    img, barrel = apply_barrel(img, k_barrel)
    return img, (barrel if k_barrel != 0.0 else None)


# -- scene synthesis ---------------------------------------------------------------


class SceneSynthesizer:
    """Generates fully annotated scenes for the given families."""

    def __init__(
        self,
        families: dict[str, MarkerFamily],
        config: SynthConfig | None = None,
        backgrounds=None,
    ):
        if not families:
            raise SynthError("at least one marker family required")
        self.families = dict(families)
        self.family_names = sorted(self.families)
        self.config = config or SynthConfig()
        self.config.augment.validate()
        self.backgrounds = backgrounds or ProceduralBackgrounds()
        sc = self.config.scene
        h, w = sc.image_size
        f = sc.focal_factor * max(h, w)
        self.intrinsics = CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0)

    def sample(self, seed: int) -> TrainingSample:
        rng = np.random.default_rng(np.random.SeedSequence([0x5CEE, int(seed)]))
        sc = self.config.scene
        h, w = sc.image_size
        image = self.backgrounds.get(rng, (h, w), sc.color)
        if sc.color and image.ndim == 2:
            image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)

        n_markers = int(rng.integers(sc.marker_count[0], sc.marker_count[1] + 1))
        markers: list[MarkerGroundTruth] = []
        quads: list[np.ndarray] = []
        for _ in range(n_markers):
            placed = self._place_marker(rng, image, quads)
            if placed is not None:
                markers.append(placed)
                quads.append(placed.outer_quad)

        image, barrel = degrade_image(image, rng, self.config.augment.image)
        if barrel is not None:
            markers = [self._distort_marker_gt(m, barrel) for m in markers]

        ann = self._annotations(markers, (h, w), barrel)
        return TrainingSample(image=image, annotations=ann, seed=int(seed),
                              intrinsics=self.intrinsics)

    # -- internals --------------------------------------------------------

    def sample_placement_pose(self, rng: np.random.Generator, family: MarkerFamily):
        """One candidate camera-relative pose; returns (H_unit->px, pose, quad)."""
        sc = self.config.scene
        h, w = sc.image_size
        k = self.intrinsics
        tilt = np.radians(_uniform(rng, sc.tilt_deg))
        azimuth = rng.uniform(0, 2 * np.pi)
        roll = rng.uniform(0, 2 * np.pi)
        rot = _rotvec_matrix(np.array([np.cos(azimuth), np.sin(azimuth), 0.0]) * tilt) @ \
            _rotvec_matrix(np.array([0.0, 0.0, roll]))
        # side_px is the projected code-area side; clamp so the full printed
        # extent (border included) can fit inside the frame
        fam_lo, fam_hi = family.unit_extent()
        extent = fam_hi - fam_lo
        fit_max = (min(h, w) - 2.0 * sc.border_margin_px - 2.0) / (1.1 * extent)
        lo_px = min(sc.marker_px[0], fit_max)
        side_px = rng.uniform(lo_px, max(min(sc.marker_px[1], fit_max), lo_px))
        depth = k.fx * sc.marker_size_mm / side_px
        margin = sc.border_margin_px + 0.5 * side_px * extent
        u = rng.uniform(margin, w - margin)
        v = rng.uniform(margin, h - margin)
        t = depth * np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        pose = Pose6DoF(rot, t)
        hom = self._unit_homography(family, pose)
        quad = hom.apply(family.outer_quad_unit())
        return hom, pose, quad, tilt

    def _unit_homography(self, family: MarkerFamily, pose: Pose6DoF) -> Homography:
        s = self.config.scene.marker_size_mm
        r, t = pose.rotation, pose.translation
        # unit layout (u, v) -> marker frame ((u-0.5)s, (v-0.5)s, 0) -> pixels
        plane = np.column_stack([r[:, 0] * s, r[:, 1] * s, t - 0.5 * s * (r[:, 0] + r[:, 1])])
        return Homography(self.intrinsics.matrix @ plane)

    def _place_marker(self, rng, image, quads) -> MarkerGroundTruth | None:
        sc = self.config.scene
        h, w = image.shape[:2]
        name = self.family_names[int(rng.integers(0, len(self.family_names)))]
        family = self.families[name]
        marker_id = int(rng.integers(0, len(family.library)))
        bitmap = family.render(marker_id, sc.render_px)
        bitmap = degrade_marker(bitmap, rng, self.config.augment.marker)

        for _ in range(sc.placement_retries):
            hom, pose, quad, tilt = self.sample_placement_pose(rng, family)
            if not _inside_frame(quad, (h, w), sc.border_margin_px):
                continue
            if any(_quads_overlap(quad, q) for q in quads):
                continue
            self._paste(image, bitmap, family, hom)
            lo, _ = family.unit_extent()
            return MarkerGroundTruth(
                family=name,
                marker_id=marker_id,
                homography=hom,
                pose=pose,
                outer_quad=quad,
                roi_points=np.vstack([hom.apply(np.array([[0.5, 0.5]])),
                                      hom.apply(family.roi_points_unit())]),
                keypoints=hom.apply(family.layout.positions),
                keypoint_classes=np.asarray(
                    [c.class_id for c in family.position_classes(marker_id)], dtype=np.int64
                ),
                view_angle_deg=float(np.degrees(tilt)),
                distance_mm=float(pose.translation[2]),
            )
        return None

    def _paste(self, image, bitmap, family: MarkerFamily, hom: Homography) -> None:
        h, w = image.shape[:2]
        lo, hi = family.unit_extent()
        size = bitmap.shape[0]
        # bitmap px -> unit coords -> image px
        scale = (hi - lo) / size
        a = np.array([[scale, 0, lo + scale * 0.5], [0, scale, lo + scale * 0.5], [0, 0, 1.0]])
        m = hom.matrix @ a
        if image.ndim == 3 and bitmap.ndim == 2:
            bitmap = cv2.cvtColor(bitmap, cv2.COLOR_GRAY2BGR)
        warped = cv2.warpPerspective(bitmap, m, (w, h), flags=cv2.INTER_LINEAR)
        alpha = cv2.warpPerspective(np.full(bitmap.shape[:2], 255, np.uint8), m, (w, h),
                                    flags=cv2.INTER_LINEAR)
        mask = alpha.astype(np.float64) / 255.0
        if image.ndim == 3:
            mask = mask[..., None]
        blended = image.astype(np.float64) * (1 - mask) + warped.astype(np.float64) * mask
        image[:] = np.clip(blended, 0, 255).astype(np.uint8)

    def _distort_marker_gt(self, m: MarkerGroundTruth, barrel) -> MarkerGroundTruth:
        k, cx, cy, rn = barrel
        warp = lambda pts: barrel_forward(pts, k, (cx, cy), rn)
        return MarkerGroundTruth(
            family=m.family,
            marker_id=m.marker_id,
            homography=m.homography,
            pose=m.pose,
            outer_quad=warp(m.outer_quad),
            roi_points=warp(m.roi_points),
            keypoints=warp(m.keypoints),
            keypoint_classes=m.keypoint_classes,
            view_angle_deg=m.view_angle_deg,
            distance_mm=m.distance_mm,
        )

    def _annotations(self, markers, size_hw, barrel) -> AnnotationSet:
        boxes = []
        roi_points = []
        corners = []
        keypoints = []
        for idx, m in enumerate(markers):
            quad = m.outer_quad
            x0, y0 = quad.min(axis=0)
            x1, y1 = quad.max(axis=0)
            boxes.append(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0,
                          1 + self.family_names.index(m.family)))
            roi_points.append(m.roi_points)
            center = m.roi_points[0]
            for p in m.roi_points[1:]:
                d = center - p
                n = np.linalg.norm(d)
                corners.append((p.copy(), d / n if n > 0 else np.array([1.0, 0.0]), idx))
            keypoints.append(
                [(m.keypoints[i].copy(), int(m.keypoint_classes[i]))
                 for i in range(m.keypoints.shape[0])]
            )
        mask = rasterize_mask([m.outer_quad for m in markers], size_hw, cell=8)
        return AnnotationSet(boxes, roi_points, corners, keypoints, mask, list(markers), barrel)


def rasterize_mask(quads: list[np.ndarray], size_hw: tuple[int, int], cell: int = 8) -> np.ndarray:
    """Marker-vs-background mask at 1/cell resolution; a cell is foreground
    when at least half of it is covered."""
    h, w = size_hw
    full = np.zeros((h, w), np.uint8)
    for quad in quads:
        cv2.fillPoly(full, [np.round(quad).astype(np.int32)], 1)
    gh, gw = h // cell, w // cell
    coverage = full[: gh * cell, : gw * cell].reshape(gh, cell, gw, cell).mean(axis=(1, 3))
    return (coverage >= 0.5).astype(np.float64)


def project_marker_keypoints(m: MarkerGroundTruth, family: MarkerFamily,
                             barrel=None) -> np.ndarray:
    """Re-derive keypoints from the placement homography (plus barrel map)."""
    pts = m.homography.apply(family.layout.positions)
    if barrel is not None:
        k, cx, cy, rn = barrel
        pts = barrel_forward(pts, k, (cx, cy), rn)
    return pts


def make_stage2_sample(
    sample: TrainingSample,
    marker_index: int,
    rng: np.random.Generator,
    families: dict[str, MarkerFamily],
    patch_size: int = 256,
    a_range: tuple[float, float] = (0.05, 0.25),
) -> Stage2Sample:
    """Warp one marker's ROI onto a random quadrangle patch with ground truth.

    The ROI maps to ((a1,a2),(1-a3,a4),(1-a5,1-a6),(a7,1-a8)) * patch_size with
    each a_i drawn uniformly from `a_range`; keypoints and the template are
    pushed through the same warp. Non-quad ROIs (e.g. ellipse vertices) are
    normalized into the unit square first and pushed through the same random
    quadrangle, which reduces to the direct corner mapping for quad ROIs.
    """
    markers = sample.annotations.markers
    if marker_index < 0 or marker_index >= len(markers):
        raise SynthError(f"marker index {marker_index} out of range")
    m = markers[marker_index]
    family = families[m.family]
    a = rng.uniform(a_range[0], a_range[1], size=8)
    quadrangle = np.array(
        [[a[0], a[1]], [1 - a[2], a[3]], [1 - a[4], 1 - a[5]], [a[6], 1 - a[7]]]
    )
    unit_square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    roi_in_square = RoiTemplate.for_roi_points(family.roi_points_unit(), inset=0.0).points
    squeeze = estimate_homography(unit_square, quadrangle)
    target = squeeze.apply(roi_in_square) * patch_size
    hom = estimate_homography(m.roi_points[1:], target)
    patch = cv2.warpPerspective(sample.image, hom.matrix, (patch_size, patch_size))

    kp_list, cls_list, quads = [], [], []
    for other in markers:
        pts = hom.apply(other.keypoints)
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < patch_size) & \
                 (pts[:, 1] >= 0) & (pts[:, 1] < patch_size)
        kp_list.append(pts[inside])
        cls_list.append(other.keypoint_classes[inside])
        quads.append(hom.apply(other.outer_quad))
    keypoints = np.vstack(kp_list) if kp_list else np.zeros((0, 2))
    classes = np.concatenate(cls_list) if cls_list else np.zeros(0, np.int64)
    mask = rasterize_mask(quads, (patch_size, patch_size), cell=8)
    template = hom.apply(m.roi_points[1:])
    return Stage2Sample(patch, keypoints, classes, template, mask, hom, marker_index)


# -- corpus export -----------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask).ravel().astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return {
        "shape": list(mask.shape),
        "first": int(flat[0]) if flat.size else 0,
        "lengths": lengths.astype(int).tolist(),
    }


def rle_decode(data: dict) -> np.ndarray:
    values = []
    v = data["first"]
    for run in data["lengths"]:
        values.append(np.full(run, v, np.uint8))
        v = 1 - v
    flat = np.concatenate(values) if values else np.zeros(0, np.uint8)
    return flat.reshape(data["shape"]).astype(np.float64)


def sample_to_record(sample: TrainingSample) -> dict:
    ann = sample.annotations
    return {
        "seed": sample.seed,
        "boxes": [list(map(float, b[:4])) + [int(b[4])] for b in ann.boxes],
        "roi_points": [np.asarray(r).tolist() for r in ann.roi_points],
        "corners": [
            {"position": p.tolist(), "direction": v.tolist(), "owner": int(o)}
            for p, v, o in ann.corners
        ],
        "keypoints": [
            [{"position": p.tolist(), "class": int(c)} for p, c in kps]
            for kps in ann.keypoints
        ],
        "mask_rle": rle_encode(ann.mask),
        "barrel": list(ann.barrel) if ann.barrel else None,
        "markers": [
            {
                "family": m.family,
                "id": m.marker_id,
                "homography": m.homography.matrix.tolist(),
                "rotation": m.pose.rotation.tolist(),
                "translation": m.pose.translation.tolist(),
                "outer_quad": m.outer_quad.tolist(),
                "roi_points": m.roi_points.tolist(),
                "view_angle_deg": m.view_angle_deg,
                "distance_mm": m.distance_mm,
            }
            for m in ann.markers
        ],
    }


def export_corpus(samples, out_dir: str | Path) -> list[Path]:
    """Write PNG images plus one annotation JSON per image; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, sample in enumerate(samples):
        stem = f"img_{i:05d}"
        img_path = out_dir / f"{stem}.png"
        ok, buf = cv2.imencode(".png", sample.image)
        if not ok:
            raise SynthError("png encoding failed")
        img_path.write_bytes(buf.tobytes())
        record = sample_to_record(sample)
        record["image"] = img_path.name
        (out_dir / f"{stem}.json").write_text(json.dumps(record, sort_keys=True))
        written.append(img_path)
    return written


# -- small helpers -----------------------------------------------------------------


def _rotvec_matrix(rotvec: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(rotvec))
    if theta < 1e-12:
        return np.eye(3)
    k = rotvec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def _inside_frame(quad: np.ndarray, size_hw: tuple[int, int], margin: float) -> bool:
    h, w = size_hw
    return bool(
        np.all(quad[:, 0] >= margin)
        and np.all(quad[:, 0] <= w - 1 - margin)
        and np.all(quad[:, 1] >= margin)
        and np.all(quad[:, 1] <= h - 1 - margin)
    )


def _quads_overlap(a: np.ndarray, b: np.ndarray, pad: float = 2.0) -> bool:
    inter = convex_polygon_intersection(_expand(a, pad), _expand(b, pad))
    return inter.shape[0] >= 3 and polygon_area(inter) > 0.0


def _expand(quad: np.ndarray, pad: float) -> np.ndarray:
    center = quad.mean(axis=0)
    d = quad - center
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    return quad + d / np.where(norms > 1e-9, norms, 1.0) * pad
