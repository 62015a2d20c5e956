"""Stage-1/Stage-2 networks, anchor generation, and target coders.

The coders are pure numpy and exactly invert each other:

* box offsets     : ((cx-cx_d)/w_d, (cy-cy_d)/h_d, log(w/w_d), log(h/h_d))
* roi points      : ((px-cx)/w - 0.5, (py-cy)/h - 0.5) relative to a box
* grid points     : p - p_default
* unit directions : ((vx+1)/2, (vy+1)/2, 1-(vx+1)/2, 1-(vy+1)/2), decoded by
                    averaging the two redundant estimates and renormalizing

Both networks share a depthwise-separable backbone that emits stride-8
features, a 2-channel segmentation mask concatenated back into the feature
map, and per-head predictors. All confidence outputs are raw logits; the
direction head is squashed to [0, 1]; offsets are linear.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ArchError(ValueError):
    """Model/contract mismatch (input shape, manifest, checkpoint)."""


# -- coders (numpy, float64) --------------------------------------------------


def encode_box(box: np.ndarray, default: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    d = np.asarray(default, dtype=np.float64)
    if np.any(box[..., 2:] <= 0) or np.any(d[..., 2:] <= 0):
        raise ValueError("box sizes must be positive")
    return np.stack(
        [
            (box[..., 0] - d[..., 0]) / d[..., 2],
            (box[..., 1] - d[..., 1]) / d[..., 3],
            np.log(box[..., 2] / d[..., 2]),
            np.log(box[..., 3] / d[..., 3]),
        ],
        axis=-1,
    )


def decode_box(offsets: np.ndarray, default: np.ndarray) -> np.ndarray:
    t = np.asarray(offsets, dtype=np.float64)
    d = np.asarray(default, dtype=np.float64)
    return np.stack(
        [
            t[..., 0] * d[..., 2] + d[..., 0],
            t[..., 1] * d[..., 3] + d[..., 1],
            np.exp(t[..., 2]) * d[..., 2],
            np.exp(t[..., 3]) * d[..., 3],
        ],
        axis=-1,
    )


def encode_roi_points(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    if np.any(box[..., 2:] <= 0):
        raise ValueError("box sizes must be positive")
    return np.stack(
        [
            (p[..., 0] - box[..., None, 0]) / box[..., None, 2] - 0.5,
            (p[..., 1] - box[..., None, 1]) / box[..., None, 3] - 0.5,
        ],
        axis=-1,
    )


def decode_roi_points(offsets: np.ndarray, box: np.ndarray) -> np.ndarray:
    t = np.asarray(offsets, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    return np.stack(
        [
            (t[..., 0] + 0.5) * box[..., None, 2] + box[..., None, 0],
            (t[..., 1] + 0.5) * box[..., None, 3] + box[..., None, 1],
        ],
        axis=-1,
    )


def encode_point(point: np.ndarray, default: np.ndarray) -> np.ndarray:
    return np.asarray(point, dtype=np.float64) - np.asarray(default, dtype=np.float64)


def decode_point(offset: np.ndarray, default: np.ndarray) -> np.ndarray:
    return np.asarray(offset, dtype=np.float64) + np.asarray(default, dtype=np.float64)


def encode_direction(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("directions must be unit-norm")
    a = (v[..., 0] + 1.0) / 2.0
    b = (v[..., 1] + 1.0) / 2.0
    return np.stack([a, b, 1.0 - a, 1.0 - b], axis=-1)


def decode_direction(vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average the two redundant estimates, renormalize; returns (v, valid)."""
    t = np.asarray(vt, dtype=np.float64)
    v1 = np.stack([2.0 * t[..., 0] - 1.0, 2.0 * t[..., 1] - 1.0], axis=-1)
    v2 = np.stack([1.0 - 2.0 * t[..., 2], 1.0 - 2.0 * t[..., 3]], axis=-1)
    v = (v1 + v2) / 2.0
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    valid = norm[..., 0] > 1e-9
    v = np.where(valid[..., None], v / np.where(norm > 1e-9, norm, 1.0), 0.0)
    return v, valid


# -- anchors -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoxAnchors:
    """Multi-scale square default boxes covering the frame, scale-major order."""

    strides: tuple[int, ...]
    sizes: tuple[tuple[float, ...], ...]  # anchor sides (px) per stride

    def per_cell(self, scale: int) -> int:
        return len(self.sizes[scale])

    def grid_shape(self, input_hw: tuple[int, int], scale: int) -> tuple[int, int]:
        s = self.strides[scale]
        return input_hw[0] // s, input_hw[1] // s

    def generate(self, input_hw: tuple[int, int]) -> np.ndarray:
        """All default boxes, (A, 4) cx cy w h, matching the head layout."""
        out = []
        for si, stride in enumerate(self.strides):
            gh, gw = self.grid_shape(input_hw, si)
            ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
            cx = (xs + 0.5) * stride
            cy = (ys + 0.5) * stride
            cells = np.stack([cx.ravel(), cy.ravel()], axis=1)
            per = np.empty((gh * gw, len(self.sizes[si]), 4))
            per[:, :, 0] = cells[:, None, 0]
            per[:, :, 1] = cells[:, None, 1]
            per[:, :, 2] = np.asarray(self.sizes[si])[None, :]
            per[:, :, 3] = np.asarray(self.sizes[si])[None, :]
            out.append(per.reshape(-1, 4))
        return np.concatenate(out, axis=0)


def grid_anchor_points(input_hw: tuple[int, int], stride: int = 8) -> np.ndarray:
    """Default points of the one-scale grid predictor, (h/s * w/s, 2) px."""
    gh, gw = input_hw[0] // stride, input_hw[1] // stride
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1)


def template_anchor_points(patch_size: int) -> np.ndarray:
    """2x2 default points for the template predictor, row-major."""
    q = patch_size / 4.0
    return np.array([[q, q], [3 * q, q], [q, 3 * q], [3 * q, 3 * q]])


# -- architecture config -------------------------------------------------------


@dataclass
class ArchConfig:
    stage: int
    width_mult: float = 1.0
    num_box_classes: int = 2  # background + families (stage 1)
    num_keypoint_classes: int = 3  # background + pattern classes (stage 2)
    num_roi_points: int = 4  # family ROI points, excluding the center point
    box_strides: tuple[int, ...] = (8, 16, 32)
    anchor_sizes: tuple[tuple[float, ...], ...] = ((24.0, 40.0), (56.0, 88.0), (128.0, 192.0))
    residual_blocks: int = 1
    mask_layers: int = 2
    base_channels: tuple[int, int, int, int] = (16, 32, 48, 64)

    def channels(self) -> tuple[int, ...]:
        return tuple(max(8, int(round(c * self.width_mult))) for c in self.base_channels)

    def box_anchors(self) -> BoxAnchors:
        return BoxAnchors(tuple(self.box_strides), tuple(tuple(s) for s in self.anchor_sizes))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        d["box_strides"] = tuple(d["box_strides"])
        d["anchor_sizes"] = tuple(tuple(s) for s in d["anchor_sizes"])
        d["base_channels"] = tuple(d["base_channels"])
        return ArchConfig(**d)


# -- output contracts ----------------------------------------------------------


@dataclass
class Stage1Outputs:
    box_confidences: list[torch.Tensor]  # per scale [B, H, W, A, C]
    box_localizations: list[torch.Tensor]  # per scale [B, H, W, A, 4]
    roi_point_offsets: list[torch.Tensor]  # per scale [B, H, W, A, 1+n_roi, 2]
    corner_confidences: torch.Tensor  # [B, H/8, W/8, 2]
    corner_offsets: torch.Tensor  # [B, H/8, W/8, 2]
    corner_directions: torch.Tensor  # [B, H/8, W/8, 4] in [0, 1]
    mask: torch.Tensor  # [B, H/8, W/8, 2]

    def flat_box_confidences(self) -> torch.Tensor:
        return torch.cat([t.flatten(1, 3) for t in self.box_confidences], dim=1)

    def flat_box_localizations(self) -> torch.Tensor:
        return torch.cat([t.flatten(1, 3) for t in self.box_localizations], dim=1)

    def flat_roi_point_offsets(self) -> torch.Tensor:
        return torch.cat([t.flatten(1, 3) for t in self.roi_point_offsets], dim=1)


@dataclass
class Stage2Outputs:
    keypoint_confidences: torch.Tensor  # [B, H/8, W/8, K+1]
    keypoint_offsets: torch.Tensor  # [B, H/8, W/8, 2]
    template_confidences: torch.Tensor  # [B, 4, 2]
    template_point_offsets: torch.Tensor  # [B, 4, n_roi, 2]
    mask: torch.Tensor  # [B, H/8, W/8, 2]


# -- network blocks -----------------------------------------------------------


class DepthwiseSeparable(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False)
        self.bn1 = nn.BatchNorm2d(cin)
        self.pw = nn.Conv2d(cin, cout, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.act(self.bn1(self.dw(x)))
        return self.act(self.bn2(self.pw(x)))


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(DepthwiseSeparable(ch, ch), DepthwiseSeparable(ch, ch))

    def forward(self, x):
        return x + self.body(x)  # EW Add


class Backbone(nn.Module):
    """Depthwise-separable encoder to stride 8 plus residual block(s)."""

    def __init__(self, cfg: ArchConfig, in_ch: int = 3):
        super().__init__()
        c0, c1, c2, c3 = cfg.channels()
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, c0, 3, 2, 1, bias=False), nn.BatchNorm2d(c0), nn.ReLU(inplace=True)
        )
        self.body = nn.Sequential(
            DepthwiseSeparable(c0, c1, stride=2),
            DepthwiseSeparable(c1, c2),
            DepthwiseSeparable(c2, c3, stride=2),
            DepthwiseSeparable(c3, c3),
        )
        self.res = nn.Sequential(*[ResidualBlock(c3) for _ in range(cfg.residual_blocks)])
        self.out_channels = c3

    def forward(self, x):
        return self.res(self.body(self.stem(x)))


class MaskHead(nn.Module):
    def __init__(self, cin: int, layers: int):
        super().__init__()
        mods = []
        ch = cin
        for i in range(layers - 1):
            mods += [nn.Conv2d(ch, max(8, cin // 2), 3, 1, 1), nn.ReLU(inplace=True)]
            ch = max(8, cin // 2)
        mods.append(nn.Conv2d(ch, 2, 3, 1, 1))
        self.body = nn.Sequential(*mods)

    def forward(self, x):
        return self.body(x)


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ArchError("expected a [B, C, H, W] tensor")
    if x.shape[2] % 8 != 0 or x.shape[3] % 8 != 0:
        raise ArchError(f"input size {tuple(x.shape[2:])} not divisible by 8")


class Stage1Net(nn.Module):
    """ROI detector: multi-scale box/roi-point head + one-scale corner head."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        if cfg.stage != 1:
            raise ArchError("Stage1Net requires an arch config with stage=1")
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        c = self.backbone.out_channels
        self.mask_head = MaskHead(c, cfg.mask_layers)
        cx1 = c + 2  # X1 = concat(X0, mask)
        self.anchors = cfg.box_anchors()
        self.n_pts = 1 + cfg.num_roi_points
        self.box_out = cfg.num_box_classes + 4 + self.n_pts * 2
        self.scale_necks = nn.ModuleList()
        self.box_heads = nn.ModuleList()
        ch = cx1
        for si, stride in enumerate(cfg.box_strides):
            if si == 0:
                self.scale_necks.append(nn.Identity())
            else:
                self.scale_necks.append(DepthwiseSeparable(ch, ch, stride=2))
            a = self.anchors.per_cell(si)
            self.box_heads.append(nn.Conv2d(ch, a * self.box_out, 3, 1, 1))
        self.corner_head = nn.Sequential(
            DepthwiseSeparable(cx1, cx1), nn.Conv2d(cx1, 2 + 2 + 4, 3, 1, 1)
        )

    def forward(self, x: torch.Tensor) -> Stage1Outputs:
        _check_input(x)
        x0 = self.backbone(x)
        mask = self.mask_head(x0)
        x1 = torch.cat([x0, mask], dim=1)
        confs, locs, rois = [], [], []
        feat = x1
        for si in range(len(self.cfg.box_strides)):
            feat = self.scale_necks[si](feat)
            raw = self.box_heads[si](feat)
            b, _, gh, gw = raw.shape
            a = self.anchors.per_cell(si)
            raw = raw.permute(0, 2, 3, 1).reshape(b, gh, gw, a, self.box_out)
            c = self.cfg.num_box_classes
            confs.append(raw[..., :c])
            locs.append(raw[..., c : c + 4])
            rois.append(raw[..., c + 4 :].reshape(b, gh, gw, a, self.n_pts, 2))
        corner_raw = self.corner_head(x1).permute(0, 2, 3, 1)
        return Stage1Outputs(
            box_confidences=confs,
            box_localizations=locs,
            roi_point_offsets=rois,
            corner_confidences=corner_raw[..., :2],
            corner_offsets=corner_raw[..., 2:4],
            corner_directions=torch.sigmoid(corner_raw[..., 4:8]),
            mask=mask.permute(0, 2, 3, 1),
        )


class Stage2Net(nn.Module):
    """Keypoint/symbol regressor plus one-scale 2x2-anchor template head."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        if cfg.stage != 2:
            raise ArchError("Stage2Net requires an arch config with stage=2")
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        c = self.backbone.out_channels
        self.mask_head = MaskHead(c, cfg.mask_layers)
        cx1 = c + 2
        self.kp_out = cfg.num_keypoint_classes + 2
        self.kp_head = nn.Sequential(
            DepthwiseSeparable(cx1, cx1), nn.Conv2d(cx1, self.kp_out, 3, 1, 1)
        )
        self.t_out = 2 + cfg.num_roi_points * 2
        self.template_neck = nn.Sequential(
            DepthwiseSeparable(cx1, cx1, stride=2),
            DepthwiseSeparable(cx1, cx1, stride=2),
            nn.AdaptiveAvgPool2d((2, 2)),  # 2x2 template anchors at any input size
        )
        self.template_head = nn.Conv2d(cx1, self.t_out, 1)

    def forward(self, x: torch.Tensor) -> Stage2Outputs:
        _check_input(x)
        if x.shape[2] != x.shape[3]:
            raise ArchError("stage-2 patches must be square")
        if x.shape[2] < 64:
            raise ArchError("stage-2 patch side must be at least 64")
        x0 = self.backbone(x)
        mask = self.mask_head(x0)
        x1 = torch.cat([x0, mask], dim=1)
        kp_raw = self.kp_head(x1).permute(0, 2, 3, 1)
        k = self.cfg.num_keypoint_classes
        t_feat = self.template_neck(x1)
        t_raw = self.template_head(t_feat)
        b = t_raw.shape[0]
        t_raw = t_raw.permute(0, 2, 3, 1).reshape(b, 4, self.t_out)
        return Stage2Outputs(
            keypoint_confidences=kp_raw[..., :k],
            keypoint_offsets=kp_raw[..., k : k + 2],
            template_confidences=t_raw[..., :2],
            template_point_offsets=t_raw[..., 2:].reshape(b, 4, self.cfg.num_roi_points, 2),
            mask=mask.permute(0, 2, 3, 1),
        )


def build_stage1(cfg: ArchConfig) -> Stage1Net:
    return Stage1Net(cfg)


def build_stage2(cfg: ArchConfig) -> Stage2Net:
    return Stage2Net(cfg)


def build_model(cfg: ArchConfig) -> nn.Module:
    return build_stage1(cfg) if cfg.stage == 1 else build_stage2(cfg)


# -- checkpoint IO -------------------------------------------------------------

_MANIFEST = "arch.json"
_WEIGHTS = "weights.npz"


def save_checkpoint(directory: str | Path, model: nn.Module, extra: dict | None = None) -> None:
    """Write a manifest (full arch config) plus weights as a sorted npz."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"arch": model.cfg.to_dict(), "extra": extra or {}}
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    state = model.state_dict()
    arrays = {k: state[k].detach().cpu().numpy() for k in sorted(state.keys())}
    np.savez(directory / _WEIGHTS, **arrays)


def load_checkpoint(directory: str | Path) -> tuple[nn.Module, dict]:
    directory = Path(directory)
    manifest_path = directory / _MANIFEST
    weights_path = directory / _WEIGHTS
    if not manifest_path.exists() or not weights_path.exists():
        raise ArchError(f"checkpoint directory {directory} is missing manifest or weights")
    manifest = json.loads(manifest_path.read_text())
    cfg = ArchConfig.from_dict(manifest["arch"])
    model = build_model(cfg)
    with np.load(weights_path) as data:
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files}
    missing = set(model.state_dict().keys()) ^ set(state.keys())
    if missing:
        raise ArchError(f"checkpoint does not match the manifest architecture: {sorted(missing)[:4]}")
    model.load_state_dict(state)
    model.eval()
    return model, manifest.get("extra", {})
