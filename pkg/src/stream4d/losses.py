"""Training objectives: confidence-weighted regression, motion BCE,
attention forcing (plus the KL ablation variant), and the pairwise relative
camera loss with its asymmetric gradient-detach policy.

All losses are built from taped ops, so analytic gradients come from the
tape and are checked against finite differences in the test suite. The
attention-forcing loss consumes a dynamicness score per token (high means
moving); see ``motion.motion_score`` for the polarity switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ta
from .geometry import CameraPose
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_conf: float = 0.2     # log-confidence discount inside the regression loss
    penalty_c: float = 0.5       # attention penalty threshold
    w_conf: float = 1.0
    w_motion: float = 1.0
    w_attn: float = 1.0
    w_cam: float = 1.0

    def __post_init__(self):
        for name in ("lambda_conf", "w_conf", "w_motion", "w_attn", "w_cam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.penalty_c <= 1.0:
            raise ValueError("penalty_c must lie in [0, 1]")


def conf_regression_loss(pred, target, conf, lam: float, vector_axis: int | None = None) -> Tensor:
    """Sum of conf * squared residual - lam * log(conf) over elements.

    ``vector_axis`` selects the axis whose entries form one residual vector
    (e.g. 0 for (3, H, W) point maps); None treats every element as its own
    scalar residual. Confidence must be >= 1 everywhere.
    """
    pred, target, conf = ta.asconst(pred), ta.asconst(target), ta.asconst(conf)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    if conf.data.min() < 1.0 - 1e-12:
        raise ValueError("confidence values must be >= 1")
    r = ta.sub(pred, target)
    sq = ta.mul(r, r)
    if vector_axis is not None:
        sq = ta.tsum(sq, axis=vector_axis)
    if conf.shape != sq.shape:
        raise ValueError(f"confidence shape {conf.shape} does not match residuals {sq.shape}")
    return ta.sub(ta.tsum(ta.mul(conf, sq)), lam * ta.tsum(ta.tlog(conf)))


def motion_bce_loss(pred, target, from_logits: bool = True) -> Tensor:
    """Mean binary cross-entropy against a 0/1 motion mask.

    With ``from_logits`` the loss is evaluated in log-space
    (softplus(z) - target * z), which is the numerically stable route.
    """
    pred, target = ta.asconst(pred), ta.asconst(target)
    tv = target.data
    if not np.isin(tv, (0.0, 1.0)).all():
        raise ValueError("target mask must be binary")
    n = float(tv.size)
    if from_logits:
        per = ta.sub(ta.softplus(pred), ta.mul(target, pred))
        return ta.mul(ta.tsum(per), 1.0 / n)
    p = ta.clamp(pred, 1e-12, 1.0 - 1e-12)
    per = ta.add(ta.mul(target, ta.tlog(p)),
                 ta.mul(ta.sub(1.0, target), ta.tlog(ta.sub(1.0, p))))
    return ta.mul(ta.tsum(per), -1.0 / n)


def attention_forcing_loss(alpha, scores, c: float) -> Tensor:
    """Mean of max(0, score - c) * alpha over tokens.

    ``alpha`` is the camera token's attention distribution over image tokens
    (must sum to 1 within 1e-6); ``scores`` are per-token dynamicness values
    in [0, 1]. Tokens at or below the threshold c contribute no gradient.
    """
    alpha, scores = ta.asconst(alpha), ta.asconst(scores)
    if alpha.shape != scores.shape or alpha.data.ndim != 1:
        raise ValueError("alpha and scores must be equal-length vectors")
    if abs(float(alpha.data.sum()) - 1.0) > 1e-6:
        raise ValueError("alpha is not normalized")
    if scores.data.min() < 0.0 or scores.data.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    m = alpha.data.size
    hinge = ta.relu(ta.sub(scores, c))
    return ta.mul(ta.tsum(ta.mul(hinge, alpha)), 1.0 / m)


def kl_alignment_loss(alpha, scores) -> Tensor:
    """KL(normalize(1 - scores) || alpha): the divergence-based ablation variant.

    Aligns attention to the staticness distribution; kept only as the
    inferior baseline for comparison against the hinge formulation.
    """
    alpha, scores = ta.asconst(alpha), ta.asconst(scores)
    if alpha.shape != scores.shape or alpha.data.ndim != 1:
        raise ValueError("alpha and scores must be equal-length vectors")
    staticness = ta.sub(1.0, scores)
    z = float(staticness.data.sum())
    if z <= 0.0:
        raise ValueError("all tokens fully dynamic; staticness target undefined")
    p = ta.div(staticness, ta.tsum(staticness))
    # the 1e-300 offset only rescues exact zeros (0 * log 0 -> 0)
    return ta.tsum(ta.mul(p, ta.sub(ta.tlog(ta.add(p, 1e-300)), ta.tlog(alpha))))


def _check_rotation_value(r: np.ndarray) -> None:
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
        raise ValueError("matrix is not a proper rotation")


def rotation_geodesic_angle(r_pred, r_gt) -> Tensor:
    """arccos of (trace(r_pred^T r_gt) - 1) / 2, clamped into [-1, 1]."""
    r_pred, r_gt = ta.asconst(r_pred), ta.asconst(r_gt)
    _check_rotation_value(r_pred.data)
    _check_rotation_value(r_gt.data)
    # trace(A^T B) is the elementwise product sum
    tr = ta.tsum(ta.mul(r_pred, r_gt))
    return ta.arccos(ta.clamp(ta.mul(ta.sub(tr, 1.0), 0.5), -1.0, 1.0))


def quat_to_rot_tensor(q: Tensor) -> Tensor:
    """Differentiable unit-quaternion (w, x, y, z) to rotation matrix."""
    w = ta.take(q, [0])
    x = ta.take(q, [1])
    y = ta.take(q, [2])
    z = ta.take(q, [3])

    def two(a, b):
        return ta.mul(2.0, ta.mul(a, b))

    entries = [
        ta.sub(1.0, ta.add(two(y, y), two(z, z))), ta.sub(two(x, y), two(w, z)), ta.add(two(x, z), two(w, y)),
        ta.add(two(x, y), two(w, z)), ta.sub(1.0, ta.add(two(x, x), two(z, z))), ta.sub(two(y, z), two(w, x)),
        ta.sub(two(x, z), two(w, y)), ta.add(two(y, z), two(w, x)), ta.sub(1.0, ta.add(two(x, x), two(y, y))),
    ]
    return ta.reshape(ta.concat(entries, axis=0), (3, 3))


def _norm(v: Tensor) -> Tensor:
    return ta.tsqrt(ta.tsum(ta.mul(v, v)))


def camera_loss(pred_poses, gt_poses: list[CameraPose], detach_policy: str) -> Tensor:
    """Average relative-transform error over all ordered frame pairs.

    For each pair (i, j) the relative motion composes pose_i^-1 with pose_j;
    the error is the rotation geodesic angle plus the translation L2 gap,
    normalized by T(T-1). Under the ``streaming_path`` policy the earlier
    frame of every pair is pushed through stop_gradient, so no gradient
    reaches it along that route; ``refined_path`` keeps full gradient flow.

    ``pred_poses`` is a list of objects exposing ``quat`` and ``trans``
    tensors (e.g. model.DecodedCamera).
    """
    if detach_policy not in ("streaming_path", "refined_path"):
        raise ValueError(f"unknown detach policy {detach_policy!r}")
    t_frames = len(pred_poses)
    if t_frames < 2 or len(gt_poses) != t_frames:
        raise ValueError("need at least two predicted poses matching ground truth")

    live = []
    stopped = []
    for p in pred_poses:
        quat, trans = p.quat, ta.reshape(p.trans, (3, 1))
        live.append((quat_to_rot_tensor(quat), trans))
        if detach_policy == "streaming_path":
            qs = ta.stop_gradient(quat)
            stopped.append((quat_to_rot_tensor(qs), ta.stop_gradient(trans)))
    gt_mats = [(p.rotation, p.trans.reshape(3, 1)) for p in gt_poses]

    total = None
    for i in range(t_frames):
        for j in range(t_frames):
            if i == j:
                continue
            early = min(i, j)
            pick = lambda f: (stopped[f] if detach_policy == "streaming_path" and f == early
                              else live[f])
            ri, ti = pick(i)
            rj, tj = pick(j)
            rel_r = ta.matmul(ta.transpose(ri), rj)
            rel_t = ta.matmul(ta.transpose(ri), ta.sub(tj, ti))
            gr = gt_mats[i][0].T @ gt_mats[j][0]
            gtv = gt_mats[i][0].T @ (gt_mats[j][1] - gt_mats[i][1])
            tr = ta.tsum(ta.mul(rel_r, ta.asconst(gr)))
            ang = ta.arccos(ta.clamp(ta.mul(ta.sub(tr, 1.0), 0.5), -1.0, 1.0))
            terr = _norm(ta.sub(rel_t, ta.asconst(gtv)))
            term = ta.add(ang, terr)
            total = term if total is None else ta.add(total, term)
    return ta.mul(total, 1.0 / (t_frames * (t_frames - 1)))


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of whichever loss components a step produced."""
    gains = {
        "conf_depth": weights.w_conf,
        "conf_point": weights.w_conf,
        "motion": weights.w_motion,
        "attn": weights.w_attn,
        "cam_stream": weights.w_cam,
        "cam_refined": weights.w_cam,
    }
    total = None
    for name, tensor in components.items():
        if name not in gains:
            raise ValueError(f"unknown loss component {name!r}")
        term = ta.mul(tensor, gains[name])
        total = term if total is None else ta.add(total, term)
    if total is None:
        raise ValueError("no loss components given")
    return total
