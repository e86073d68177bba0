"""Motion supervision: per-token motion scores pooled from binary masks and
the flow-discrepancy pipeline that extracts motion masks from predicted and
camera-induced (ego) optical flow.

Region statistics use the population standard deviation (divide by n) so
that small region counts stay deterministic; the choice is recorded in the
CLI report. Statistics are computed per frame pair by default; a pooled
per-sequence mode is available for whole-clip thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose


@dataclass(frozen=True)
class MotionScores:
    values: np.ndarray           # one dynamicness/staticness value per patch token
    polarity: str                # "dynamic_high" or "static_high"


@dataclass(frozen=True)
class FlowField:
    flow: np.ndarray             # (H, W, 2) pixel displacements (du, dv)
    valid: np.ndarray            # (H, W) bool

    def __post_init__(self):
        if self.flow.shape[:2] != self.valid.shape or self.flow.shape[2] != 2:
            raise ValueError("flow must be (H, W, 2) with a matching valid mask")


def motion_score(mask: np.ndarray, patch_size: int, polarity: str = "dynamic_high") -> MotionScores:
    """Per-patch mean of a binary motion mask, flattened in row-major patch order.

    dynamic_high returns the moving-pixel fraction; static_high returns its
    complement (the literal pooled-mask formula). The two polarities sum to
    one per token.
    """
    if polarity not in ("dynamic_high", "static_high"):
        raise ValueError(f"unknown polarity {polarity!r}")
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise ValueError("mask dimensions must be divisible by the patch size")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("motion mask must be binary")
    s = patch_size
    pooled = mask.astype(np.float64).reshape(h // s, s, w // s, s).mean(axis=(1, 3)).reshape(-1)
    values = pooled if polarity == "dynamic_high" else 1.0 - pooled
    return MotionScores(values, polarity)


def ego_flow(depth: np.ndarray, pose_i: CameraPose, pose_j: CameraPose,
             intrinsics: np.ndarray) -> FlowField:
    """Flow induced purely by camera motion over rigid geometry.

    Unprojects every pixel of frame i with its depth, moves it into frame
    j's camera, and reprojects. Pixels with nonpositive depth or landing
    behind camera j are marked invalid rather than raising.
    """
    depth = np.asarray(depth, dtype=np.float64)
    k = np.asarray(intrinsics, dtype=np.float64)
    h, w = depth.shape
    fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    valid = depth > 0
    z = np.where(valid, depth, 1.0)
    x_cam = np.stack([(u - cx) / fx * z, (v - cy) / fy * z, z], axis=-1)

    rel = np.linalg.inv(pose_j.matrix()) @ pose_i.matrix()
    x_j = x_cam @ rel[:3, :3].T + rel[:3, 3]
    in_front = x_j[..., 2] > 0
    valid = valid & in_front
    zj = np.where(in_front, x_j[..., 2], 1.0)
    u_j = fx * x_j[..., 0] / zj + cx
    v_j = fy * x_j[..., 1] / zj + cy
    flow = np.stack([u_j - u, v_j - v], axis=-1)
    flow = np.where(valid[..., None], flow, 0.0)
    return FlowField(flow, valid)


def region_discrepancy(flow_pred: FlowField, flow_ego: FlowField,
                       regions: np.ndarray) -> dict[int, float]:
    """Mean L2 flow difference per segmentation region over jointly valid pixels.

    Regions with no valid pixel are left out of the result entirely.
    """
    regions = np.asarray(regions)
    if regions.shape != flow_pred.valid.shape:
        raise ValueError("segmentation does not match the flow resolution")
    valid = flow_pred.valid & flow_ego.valid
    dist = np.linalg.norm(flow_pred.flow - flow_ego.flow, axis=-1)
    out: dict[int, float] = {}
    for rid in np.unique(regions):
        sel = (regions == rid) & valid
        if sel.any():
            out[int(rid)] = float(dist[sel].mean())
    return out


def threshold_regions(discrepancies: dict[int, float]) -> set[int]:
    """Region ids whose discrepancy strictly exceeds mean + 2 population stddev."""
    if not discrepancies:
        return set()
    vals = np.array(list(discrepancies.values()), dtype=np.float64)
    thresh = vals.mean() + 2.0 * vals.std()
    return {rid for rid, d in discrepancies.items() if d > thresh}


def build_motion_mask(regions: np.ndarray, moving_ids: set[int]) -> np.ndarray:
    """Union of the flagged regions' pixels as a 0/1 mask."""
    regions = np.asarray(regions)
    mask = np.zeros(regions.shape, dtype=np.int64)
    for rid in moving_ids:
        mask[regions == rid] = 1
    return mask


def extract_motion_mask(flow_pred: FlowField, flow_ego: FlowField, regions: np.ndarray):
    """Full per-pair pipeline; returns (mask, discrepancies, moving ids)."""
    d = region_discrepancy(flow_pred, flow_ego, regions)
    moving = threshold_regions(d)
    return build_motion_mask(regions, moving), d, moving


def extract_motion_masks_sequence(pairs, stats: str = "per_pair"):
    """Run the pipeline over (flow_pred, flow_ego, regions) triples.

    ``per_pair`` thresholds each pair on its own statistics; ``per_sequence``
    pools every region discrepancy across the clip into one threshold.
    """
    if stats not in ("per_pair", "per_sequence"):
        raise ValueError(f"unknown stats mode {stats!r}")
    per_pair = [(region_discrepancy(fp, fe, reg), reg) for fp, fe, reg in pairs]
    if stats == "per_pair":
        return [build_motion_mask(reg, threshold_regions(d)) for d, reg in per_pair]
    pooled = np.array([v for d, _ in per_pair for v in d.values()])
    if pooled.size == 0:
        return [np.zeros(np.asarray(reg).shape, dtype=np.int64) for _, reg in per_pair]
    thresh = pooled.mean() + 2.0 * pooled.std()
    return [build_motion_mask(reg, {rid for rid, v in d.items() if v > thresh})
            for d, reg in per_pair]
