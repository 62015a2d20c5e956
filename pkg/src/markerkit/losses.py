"""Anchor matching and training losses for both stages.

conf_loss is the softmax loss over positives (matched class) and negatives
(background), info_loss the smooth-L1 over positives only. Per-head losses
are (conf + info) / N with N the matched count, and each head's loss is 0
when it has no matches. Mask loss is an unnormalized squared L2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as tfunc

from . import nets
from .nets import ArchConfig, Stage1Outputs, Stage2Outputs


@dataclass
class MatchAssignment:
    """Anchor-to-ground-truth assignment for one head on one image."""

    gt_index: np.ndarray  # (A,) int, -1 for unmatched
    gt_class: np.ndarray  # (A,) int, 0 (background) for unmatched

    @property
    def pos(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def neg(self) -> np.ndarray:
        return self.gt_index < 0

    @property
    def n_matched(self) -> int:
        return int(np.count_nonzero(self.pos))


def boxes_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of axis-aligned (cx, cy, w, h) boxes; (n, m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1) - np.maximum(ax0[:, None], bx0), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1) - np.maximum(ay0[:, None], by0), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / union, 0.0)


def match_boxes(
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    anchors: np.ndarray,
    iou_threshold: float = 0.5,
) -> MatchAssignment:
    """Best-IoU plus threshold matching; every ground truth with any overlap
    keeps at least its best anchor."""
    n_anchors = anchors.shape[0]
    gt_index = np.full(n_anchors, -1, dtype=np.int64)
    gt_class = np.zeros(n_anchors, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return MatchAssignment(gt_index, gt_class)
    iou = boxes_iou(anchors, gt_boxes)  # (A, G)
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n_anchors), best_gt]
    take = best_iou >= iou_threshold
    gt_index[take] = best_gt[take]
    # force the best anchor for each ground truth
    for g in range(gt_boxes.shape[0]):
        if np.max(iou[:, g]) <= 0:
            continue
        a = int(np.argmax(iou[:, g]))
        gt_index[a] = g
    pos = gt_index >= 0
    gt_class[pos] = np.asarray(gt_classes, dtype=np.int64)[gt_index[pos]]
    return MatchAssignment(gt_index, gt_class)


def match_points(
    gt_points: np.ndarray,
    anchor_points: np.ndarray,
    radius: float,
    gt_classes: np.ndarray | None = None,
) -> MatchAssignment:
    """Grid-point matching: anchors within `radius` of a point go to the
    nearest point; the nearest anchor of each point is always matched."""
    anchor_points = np.asarray(anchor_points, dtype=np.float64)
    n_anchors = anchor_points.shape[0]
    gt_index = np.full(n_anchors, -1, dtype=np.int64)
    gt_class = np.zeros(n_anchors, dtype=np.int64)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if gt_points.shape[0] == 0:
        return MatchAssignment(gt_index, gt_class)
    d = np.linalg.norm(anchor_points[:, None, :] - gt_points[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    nearest_d = d[np.arange(n_anchors), nearest]
    take = nearest_d <= radius
    gt_index[take] = nearest[take]
    for g in range(gt_points.shape[0]):
        gt_index[int(np.argmin(d[:, g]))] = g
    pos = gt_index >= 0
    if gt_classes is None:
        gt_class[pos] = 1
    else:
        gt_class[pos] = np.asarray(gt_classes, dtype=np.int64)[gt_index[pos]]
    return MatchAssignment(gt_index, gt_class)


def mine_negatives(
    assignment: MatchAssignment, scores: torch.Tensor, neg_pos_ratio: float = 3.0
) -> np.ndarray:
    """Keep the hardest negatives, capped at ratio * positives.

    Returns a boolean mask over anchors selecting the retained negatives.
    Falls back to all negatives when there are no positives.
    """
    neg = assignment.neg
    n_pos = assignment.n_matched
    if n_pos == 0:
        return neg.copy()
    keep = int(round(neg_pos_ratio * n_pos))
    neg_idx = np.flatnonzero(neg)
    if neg_idx.size <= keep:
        return neg.copy()
    with torch.no_grad():
        bg_loss = -torch.log_softmax(scores, dim=-1)[:, 0]
        losses = bg_loss.detach().cpu().numpy()[neg_idx]
    order = np.lexsort((neg_idx, -losses))  # hardest first, stable on ties
    selected = neg_idx[order[:keep]]
    out = np.zeros_like(neg)
    out[selected] = True
    return out


def conf_loss(
    scores: torch.Tensor, assignment: MatchAssignment, neg_mask: np.ndarray | None = None
) -> torch.Tensor:
    """Softmax loss: matched class on positives, background on negatives."""
    log_probs = torch.log_softmax(scores, dim=-1)
    pos = np.flatnonzero(assignment.pos)
    neg = np.flatnonzero(assignment.neg if neg_mask is None else neg_mask)
    total = scores.new_zeros(())
    if pos.size:
        classes = torch.as_tensor(assignment.gt_class[pos], device=scores.device)
        total = total - log_probs[pos].gather(1, classes[:, None]).sum()
    if neg.size:
        total = total - log_probs[neg, 0].sum()
    return total


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    ax = torch.abs(x)
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def info_loss(
    pred: torch.Tensor, target: torch.Tensor, assignment: MatchAssignment
) -> torch.Tensor:
    """Smooth-L1 between predictions and targets, summed over positives."""
    pos = np.flatnonzero(assignment.pos)
    if pos.size == 0:
        return pred.new_zeros(())
    diff = pred[pos].reshape(pos.size, -1) - target[pos].reshape(pos.size, -1)
    return smooth_l1(diff).sum()


def mask_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unnormalized squared L2 between predicted and ground-truth masks."""
    return ((pred - target) ** 2).sum()


@dataclass
class LossConfig:
    iou_threshold: float = 0.5
    point_radius_cells: float = 1.0
    neg_pos_ratio: float | None = 3.0  # None disables hard-negative mining
    mask_mean_reduce: bool = False
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # box/kp, corner/template, mask


@dataclass
class Stage1Targets:
    """Per-image targets, aligned with the flattened stage-1 outputs."""

    box_assignment: MatchAssignment
    box_regression: torch.Tensor  # (A, 4 + (1+n_roi)*2)
    corner_assignment: MatchAssignment
    corner_regression: torch.Tensor  # (G, 2 + 4)
    mask: torch.Tensor  # (h/8, w/8, 2)


@dataclass
class Stage2Targets:
    keypoint_assignment: MatchAssignment
    keypoint_regression: torch.Tensor  # (G, 2)
    template_assignment: MatchAssignment
    template_regression: torch.Tensor  # (4, n_roi*2)
    mask: torch.Tensor


def _head_loss(conf: torch.Tensor, reg_pred, reg_target, assignment, cfg: LossConfig):
    n = assignment.n_matched
    if n == 0:
        return conf.new_zeros(())
    neg_mask = None
    if cfg.neg_pos_ratio is not None:
        neg_mask = mine_negatives(assignment, conf, cfg.neg_pos_ratio)
    loss = conf_loss(conf, assignment, neg_mask) + info_loss(reg_pred, reg_target, assignment)
    return loss / n


def stage1_loss(
    outputs: Stage1Outputs, targets: Stage1Targets, cfg: LossConfig | None = None
) -> dict[str, torch.Tensor]:
    """Per-image stage-1 losses: box, corner, mask, and their sum."""
    cfg = cfg or LossConfig()
    conf = outputs.flat_box_confidences()[0]
    loc = outputs.flat_box_localizations()[0]
    roi = outputs.flat_roi_point_offsets()[0]
    reg_pred = torch.cat([loc, roi.reshape(roi.shape[0], -1)], dim=1)
    l_box = _head_loss(conf, reg_pred, targets.box_regression, targets.box_assignment, cfg)

    c_conf = outputs.corner_confidences[0].reshape(-1, 2)
    c_pred = torch.cat(
        [
            outputs.corner_offsets[0].reshape(-1, 2),
            outputs.corner_directions[0].reshape(-1, 4),
        ],
        dim=1,
    )
    l_corner = _head_loss(c_conf, c_pred, targets.corner_regression, targets.corner_assignment, cfg)

    l_mask = mask_loss(outputs.mask[0], targets.mask)
    if cfg.mask_mean_reduce:
        l_mask = l_mask / targets.mask.numel()
    w = cfg.weights
    total = w[0] * l_box + w[1] * l_corner + w[2] * l_mask
    return {"box": l_box, "corner": l_corner, "mask": l_mask, "total": total}


def stage2_loss(
    outputs: Stage2Outputs, targets: Stage2Targets, cfg: LossConfig | None = None
) -> dict[str, torch.Tensor]:
    """Per-image stage-2 losses: keypoint, template, mask, and their sum."""
    cfg = cfg or LossConfig()
    k_conf = outputs.keypoint_confidences[0].reshape(-1, outputs.keypoint_confidences.shape[-1])
    k_pred = outputs.keypoint_offsets[0].reshape(-1, 2)
    l_kp = _head_loss(k_conf, k_pred, targets.keypoint_regression, targets.keypoint_assignment, cfg)

    t_conf = outputs.template_confidences[0]
    t_pred = outputs.template_point_offsets[0].reshape(4, -1)
    l_t = _head_loss(t_conf, t_pred, targets.template_regression, targets.template_assignment, cfg)

    l_mask = mask_loss(outputs.mask[0], targets.mask)
    if cfg.mask_mean_reduce:
        l_mask = l_mask / targets.mask.numel()
    w = cfg.weights
    total = w[0] * l_kp + w[1] * l_t + w[2] * l_mask
    return {"keypoint": l_kp, "template": l_t, "mask": l_mask, "total": total}


# -- target building -----------------------------------------------------------


def build_stage1_targets(annotations, arch: ArchConfig, input_hw: tuple[int, int],
                         cfg: LossConfig | None = None) -> Stage1Targets:
    """Encode one synthesized scene's annotations against the anchor sets."""
    cfg = cfg or LossConfig()
    anchors = arch.box_anchors().generate(input_hw)
    n_pts = 1 + arch.num_roi_points
    boxes = np.asarray([b[:4] for b in annotations.boxes], dtype=np.float64).reshape(-1, 4)
    classes = np.asarray([b[4] for b in annotations.boxes], dtype=np.int64)
    assign = match_boxes(boxes, classes, anchors, cfg.iou_threshold)
    reg = np.zeros((anchors.shape[0], 4 + n_pts * 2), dtype=np.float64)
    pos = np.flatnonzero(assign.pos)
    if pos.size:
        g = assign.gt_index[pos]
        reg[pos, :4] = nets.encode_box(boxes[g], anchors[pos])
        roi_pts = np.asarray(annotations.roi_points, dtype=np.float64)[g]  # (p, n_pts, 2)
        reg[pos, 4:] = nets.encode_roi_points(roi_pts, boxes[g]).reshape(pos.size, -1)

    stride = 8
    grid = nets.grid_anchor_points(input_hw, stride)
    corner_pos = np.asarray([c[0] for c in annotations.corners], dtype=np.float64).reshape(-1, 2)
    corner_dir = np.asarray([c[1] for c in annotations.corners], dtype=np.float64).reshape(-1, 2)
    c_assign = match_points(corner_pos, grid, cfg.point_radius_cells * stride)
    c_reg = np.zeros((grid.shape[0], 6), dtype=np.float64)
    cpos = np.flatnonzero(c_assign.pos)
    if cpos.size:
        g = c_assign.gt_index[cpos]
        # offsets in stride units keep regression targets O(1)
        c_reg[cpos, :2] = nets.encode_point(corner_pos[g] / stride, grid[cpos] / stride)
        c_reg[cpos, 2:] = nets.encode_direction(corner_dir[g])

    mask = np.stack([1.0 - annotations.mask, annotations.mask], axis=-1)
    return Stage1Targets(
        box_assignment=assign,
        box_regression=torch.as_tensor(reg, dtype=torch.float32),
        corner_assignment=c_assign,
        corner_regression=torch.as_tensor(c_reg, dtype=torch.float32),
        mask=torch.as_tensor(mask, dtype=torch.float32),
    )


def build_stage2_targets(patch_sample, arch: ArchConfig, patch_size: int,
                         cfg: LossConfig | None = None) -> Stage2Targets:
    """Encode one rectified patch's ground truth for stage-2 training."""
    cfg = cfg or LossConfig()
    stride = 8
    grid = nets.grid_anchor_points((patch_size, patch_size), stride)
    kp = np.asarray(patch_sample.keypoints, dtype=np.float64).reshape(-1, 2)
    kp_cls = np.asarray(patch_sample.keypoint_classes, dtype=np.int64)
    assign = match_points(kp, grid, cfg.point_radius_cells * stride, gt_classes=kp_cls + 1)
    reg = np.zeros((grid.shape[0], 2), dtype=np.float64)
    pos = np.flatnonzero(assign.pos)
    if pos.size:
        g = assign.gt_index[pos]
        reg[pos] = nets.encode_point(kp[g] / stride, grid[pos] / stride)

    t_anchors = nets.template_anchor_points(patch_size)
    t_unit = patch_size / 2.0
    template = np.asarray(patch_sample.template_points, dtype=np.float64)
    centroid = template.mean(axis=0, keepdims=True)
    t_assign = match_points(centroid, t_anchors, radius=0.0)
    t_reg = np.zeros((4, arch.num_roi_points * 2), dtype=np.float64)
    tpos = np.flatnonzero(t_assign.pos)
    for a in tpos:
        t_reg[a] = nets.encode_point(template / t_unit, t_anchors[a][None, :] / t_unit).ravel()
    mask = np.stack([1.0 - patch_sample.mask, patch_sample.mask], axis=-1)
    return Stage2Targets(
        keypoint_assignment=assign,
        keypoint_regression=torch.as_tensor(reg, dtype=torch.float32),
        template_assignment=t_assign,
        template_regression=torch.as_tensor(t_reg, dtype=torch.float32),
        mask=torch.as_tensor(mask, dtype=torch.float32),
    )
