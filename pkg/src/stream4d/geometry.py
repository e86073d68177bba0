"""Camera poses, similarity alignment, and trajectory/depth evaluation.

Poses are camera-to-world: ``x_world = R x_cam + t``, so ``t`` is the camera
center and trajectory files (TUM text convention, ``timestamp tx ty tz qx qy
qz qw``) map onto them directly. Quaternions are stored (w, x, y, z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in radians.

    Evaluated through the chordal distance (||ra - rb||_F = 2 sqrt(2)
    sin(theta/2)), which resolves tiny angles exactly where the
    trace/arccos form loses eight digits.
    """
    chord = np.linalg.norm(ra - rb) / (2.0 * math.sqrt(2.0))
    return float(2.0 * np.arcsin(np.clip(chord, 0.0, 1.0)))


def _check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    r = np.asarray(r)
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")


@dataclass(frozen=True)
class CameraPose:
    quat: np.ndarray                      # (w, x, y, z), unit
    trans: np.ndarray                     # camera center, scene units
    focal: np.ndarray | None = None       # (fx, fy), optional
    degenerate: bool = False              # flagged when decoding hit a zero quaternion

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))
        if self.focal is not None:
            object.__setattr__(self, "focal", np.asarray(self.focal, dtype=np.float64).reshape(2))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.quat)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.trans
        return m

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray, focal=None) -> "CameraPose":
        return cls(rot_to_quat(m[:3, :3]), m[:3, 3].copy(), focal)


def relative_motion(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transform taking frame-a camera coordinates to frame-b ones: a^-1 b."""
    return np.linalg.inv(a) @ b


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[CameraPose] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.trans for p in self.poses])

    def matrices(self) -> list[np.ndarray]:
        return [p.matrix() for p in self.poses]

    def transformed(self, scale: float, rot: np.ndarray, trans: np.ndarray) -> "Trajectory":
        """Apply a similarity to every pose (positions scaled, rotations rotated)."""
        poses = [CameraPose(rot_to_quat(rot @ p.rotation), scale * rot @ p.trans + trans,
                            p.focal) for p in self.poses]
        return Trajectory(self.timestamps.copy(), poses)


def load_tum(path) -> Trajectory:
    ts, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"expected 8 columns per pose line, got {len(vals)}")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            ts.append(t)
            poses.append(CameraPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz])))
    return Trajectory(np.array(ts), poses)


def save_tum(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        for t, p in zip(traj.timestamps, traj.poses):
            vals = [t, *p.trans, p.quat[1], p.quat[2], p.quat[3], p.quat[0]]
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def umeyama_alignment(src: np.ndarray, dst: np.ndarray):
    """Closed-form similarity (s, R, t) minimizing ||s R src + t - dst||^2.

    src, dst: (n, 3) matched point sets, n >= 3 and not collinear.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (n, 3)")
    n = src.shape[0]
    if n < 3:
        raise ValueError("need at least 3 matched points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise ValueError("degenerate point configuration (rank-deficient covariance)")
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    var_s = (xs * xs).sum() / n
    scale = float(np.trace(np.diag(d) @ s_fix) / var_s)
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def sim3_align(est: Trajectory, gt: Trajectory):
    """Umeyama on camera centers; returns (scale, R, t) mapping est onto gt."""
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    return umeyama_alignment(est.positions(), gt.positions())


def ate(est_aligned: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera-center errors between an aligned estimate and ground truth."""
    d = est_aligned.positions() - gt.positions()
    return float(np.sqrt((d * d).sum(axis=1).mean()))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1):
    """Relative pose error over a frame delta: (trans RMSE, rot RMSE in degrees)."""
    if delta < 1 or delta >= len(est):
        raise ValueError(f"delta {delta} out of range for {len(est)} poses")
    me, mg = est.matrices(), gt.matrices()
    terrs, rerrs = [], []
    for i in range(len(est) - delta):
        rel_e = relative_motion(me[i], me[i + delta])
        rel_g = relative_motion(mg[i], mg[i + delta])
        terrs.append(np.linalg.norm(rel_e[:3, 3] - rel_g[:3, 3]))
        rerrs.append(math.degrees(rotation_angle(rel_e[:3, :3], rel_g[:3, :3])))
    terrs, rerrs = np.array(terrs), np.array(rerrs)
    return float(np.sqrt((terrs**2).mean())), float(np.sqrt((rerrs**2).mean()))


def evaluate_trajectory(est: Trajectory, gt: Trajectory, delta: int = 1) -> dict:
    """ATE/RPE after Sim(3) alignment of the estimate onto ground truth."""
    s, r, t = sim3_align(est, gt)
    aligned = est.transformed(s, r, t)
    rpe_t, rpe_r = rpe(aligned, gt, delta)
    return {"ATE": ate(aligned, gt), "RPE_trans": rpe_t, "RPE_rot": rpe_r}


def scale_align_depth(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None):
    """Least-squares scale s* = sum(gt*pred)/sum(pred^2); returns (scaled, s*)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    p, g = pred[valid], gt[valid]
    denom = (p * p).sum()
    if denom == 0.0:
        raise ValueError("prediction is all zero on valid pixels")
    s = float((g * p).sum() / denom)
    return pred * s, s


def abs_rel(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    if valid is None:
        valid = np.ones(np.shape(pred), dtype=bool)
    p, g = np.asarray(pred)[valid], np.asarray(gt)[valid]
    return float(np.mean(np.abs(p - g) / g))


def delta_accuracy(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None,
                   tau: float = 1.25) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) below tau."""
    if valid is None:
        valid = np.ones(np.shape(pred), dtype=bool)
    p, g = np.asarray(pred)[valid], np.asarray(gt)[valid]
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < tau))


def _direction_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two translation directions, radians; scale-free."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 and nb < 1e-12:
        return 0.0
    if na < 1e-12 or nb < 1e-12:
        return math.pi
    c = float(np.dot(a, b) / (na * nb))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def pair_angle_errors(est: list[CameraPose], gt: list[CameraPose]):
    """Per unordered pose pair: relative-rotation and translation-direction errors (deg)."""
    if len(est) != len(gt) or len(est) < 2:
        raise ValueError("need two equally long pose lists with >= 2 poses")
    me = [p.matrix() for p in est]
    mg = [p.matrix() for p in gt]
    rot_err, trans_err = [], []
    for i in range(len(est)):
        for j in range(i + 1, len(est)):
            rel_e = relative_motion(me[i], me[j])
            rel_g = relative_motion(mg[i], mg[j])
            rot_err.append(math.degrees(rotation_angle(rel_e[:3, :3], rel_g[:3, :3])))
            trans_err.append(math.degrees(_direction_angle(rel_e[:3, 3], rel_g[:3, 3])))
    return np.array(rot_err), np.array(trans_err)


def rra_rta(est: list[CameraPose], gt: list[CameraPose], tau_deg: float = 30.0):
    """Fractions of pose pairs with rotation / translation-direction error under tau."""
    rot_err, trans_err = pair_angle_errors(est, gt)
    return float((rot_err < tau_deg).mean()), float((trans_err < tau_deg).mean())


def accuracy_curve(errors: np.ndarray, taus: np.ndarray) -> np.ndarray:
    return np.array([(errors < t).mean() for t in taus])


def auc(curve: np.ndarray, taus: np.ndarray) -> float:
    """Normalized trapezoidal area under an accuracy curve."""
    curve = np.asarray(curve, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    return float(np.trapezoid(curve, taus) / (taus[-1] - taus[0]))


def auc_at_30(est: list[CameraPose], gt: list[CameraPose]) -> float:
    """Area under min(RRA, RTA) over integer thresholds 1..30 degrees."""
    rot_err, trans_err = pair_angle_errors(est, gt)
    taus = np.arange(1, 31, dtype=np.float64)
    curve = np.minimum(accuracy_curve(rot_err, taus), accuracy_curve(trans_err, taus))
    return auc(curve, taus)
