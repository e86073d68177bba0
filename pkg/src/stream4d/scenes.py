"""Deterministic toy dynamic scenes: a textured background plane, optional
rigidly translating billboard objects, and a moving pinhole camera.

Geometry is evaluated per pixel by exact ray casting, so depths, motion
masks, analytic flow fields, and oracle segmentations agree to machine
precision with the projection equations used elsewhere. Everything is a
pure function of the spec (seed included), giving bit-identical regeneration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, rot_to_quat
from .motion import FlowField


@dataclass(frozen=True)
class SceneObject:
    center: tuple[float, float, float]       # world position at frame 0
    size: tuple[float, float]                # box extent in world x/y
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    intensity: float = 0.9


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 6
    height: int = 16
    width: int = 16
    patch_size: int = 4
    focal: float | None = None                # defaults to the image width
    camera_velocity: tuple[float, float, float] = (0.05, 0.0, 0.0)
    camera_yaw_step_deg: float = 0.0
    background_depth: float = 6.0
    background_tiles: tuple[int, int] = (2, 4)
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("need at least one frame")
        for o in self.objects:
            if not all(math.isfinite(v) for v in o.velocity):
                raise ValueError("object velocity must be finite")

    @property
    def fx(self) -> float:
        return float(self.focal if self.focal is not None else self.width)

    def intrinsics(self) -> np.ndarray:
        cx, cy = (self.width - 1) / 2.0, (self.height - 1) / 2.0
        return np.array([[self.fx, 0.0, cx], [0.0, self.fx, cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        objs = tuple(SceneObject(tuple(o["center"]), tuple(o["size"]),
                                 tuple(o.get("velocity", (0.0, 0.0, 0.0))),
                                 float(o.get("intensity", 0.9)))
                     for o in d.pop("objects", []))
        for key in ("camera_velocity",):
            if key in d:
                d[key] = tuple(d[key])
        if "background_tiles" in d:
            d["background_tiles"] = tuple(d["background_tiles"])
        return cls(objects=objs, **d)

    def object_moving_rect(self, pixel_rect: tuple[int, int, int, int], depth: float,
                           pixels_per_frame: tuple[float, float]) -> "SceneSpec":
        """Spec copy plus one object exactly covering a pixel rectangle.

        ``pixel_rect`` is (u0, u1, v0, v1) inclusive at frame 0 under an
        identity camera; the velocity moves the footprint by the given pixel
        amounts per frame. Useful for patch-aligned dynamic regions.
        """
        u0, u1, v0, v1 = pixel_rect
        k = self.intrinsics()
        fx, cx, cy = k[0, 0], k[0, 2], k[1, 2]
        x_lo, x_hi = (u0 - 0.5 - cx) * depth / fx, (u1 + 0.5 - cx) * depth / fx
        y_lo, y_hi = (v0 - 0.5 - cy) * depth / fx, (v1 + 0.5 - cy) * depth / fx
        vel = (pixels_per_frame[0] * depth / fx, pixels_per_frame[1] * depth / fx, 0.0)
        obj = SceneObject(((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0, depth),
                          (x_hi - x_lo, y_hi - y_lo), vel)
        return SceneSpec(**{**self.__dict__, "objects": self.objects + (obj,)})


@dataclass
class FrameRecord:
    pixels: np.ndarray            # (H, W) intensity
    depth: np.ndarray             # (H, W), camera-frame z
    points: np.ndarray            # (3, H, W), camera coordinates
    pose: CameraPose
    motion_mask: np.ndarray       # (H, W) 0/1
    segmentation: np.ndarray      # (H, W) oracle labels: tiles then objects


@dataclass
class SceneData:
    spec: SceneSpec
    intrinsics: np.ndarray
    frames: list[FrameRecord] = field(default_factory=list)
    flows: list[FlowField] = field(default_factory=list)   # analytic flow t -> t+1

    def motion_masks(self) -> list[np.ndarray]:
        return [f.motion_mask for f in self.frames]

    def trajectory_poses(self) -> list[CameraPose]:
        return [f.pose for f in self.frames]


def _yaw(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _camera_pose(spec: SceneSpec, t: int) -> CameraPose:
    rot = _yaw(spec.camera_yaw_step_deg * t)
    trans = np.asarray(spec.camera_velocity, dtype=np.float64) * t
    return CameraPose(rot_to_quat(rot), trans)


OBJECT_LABEL_BASE = 100


def _cast_frame(spec: SceneSpec, t: int):
    """Per-pixel nearest hit among the background plane and object billboards."""
    h, w = spec.height, spec.width
    k = spec.intrinsics()
    pose = _camera_pose(spec, t)
    rot, origin = pose.rotation, pose.trans
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(u - k[0, 2]) / k[0, 0], (v - k[1, 2]) / k[1, 1], np.ones_like(u)], -1)
    d_world = d_cam @ rot.T

    def plane_hit(z_plane):
        lam = (z_plane - origin[2]) / d_world[..., 2]
        return lam, origin + lam[..., None] * d_world

    lam_bg, pt_bg = plane_hit(spec.background_depth)
    best_lam, best_pt = lam_bg.copy(), pt_bg.copy()
    label = np.zeros((h, w), dtype=np.int64)
    for oi, obj in enumerate(spec.objects):
        cz = obj.center[2] + obj.velocity[2] * t
        lam, pt = plane_hit(cz)
        cx_o = obj.center[0] + obj.velocity[0] * t
        cy_o = obj.center[1] + obj.velocity[1] * t
        inside = ((np.abs(pt[..., 0] - cx_o) <= obj.size[0] / 2.0)
                  & (np.abs(pt[..., 1] - cy_o) <= obj.size[1] / 2.0)
                  & (lam > 0) & (lam < best_lam))
        best_lam = np.where(inside, lam, best_lam)
        best_pt = np.where(inside[..., None], pt, best_pt)
        label = np.where(inside, oi + 1, label)
    return pose, d_cam, best_lam, best_pt, label


def generate(spec: SceneSpec) -> SceneData:
    """Render every frame plus the analytic optical flow between neighbors."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    tex = rng.uniform(0.5, 2.0, 4)  # background pattern frequencies/phase
    k = spec.intrinsics()
    data = SceneData(spec, k)
    casts = [_cast_frame(spec, t) for t in range(spec.frames)]
    obj_vel = np.array([o.velocity for o in spec.objects], dtype=np.float64).reshape(-1, 3)

    for t, (pose, d_cam, lam, pt_world, label) in enumerate(casts):
        pixels = 0.55 + 0.3 * np.sin(tex[0] * pt_world[..., 0]
                                     + tex[1] * pt_world[..., 1] + tex[2])
        for oi, obj in enumerate(spec.objects):
            pixels = np.where(label == oi + 1, obj.intensity, pixels)
        moving = np.zeros(label.shape, dtype=np.int64)
        for oi in range(len(spec.objects)):
            if np.linalg.norm(obj_vel[oi]) > 0:
                moving |= (label == oi + 1).astype(np.int64)
        seg = _oracle_segmentation(spec, label)
        points = np.moveaxis(lam[..., None] * d_cam, -1, 0)
        data.frames.append(FrameRecord(pixels, lam.copy(), points, pose,
                                       moving, seg))

    for t in range(spec.frames - 1):
        pose_next = casts[t + 1][0]
        _, _, lam, pt_world, label = casts[t]
        moved = pt_world.copy()
        for oi in range(len(spec.objects)):
            sel = label == oi + 1
            moved[sel] += obj_vel[oi]
        inv = np.linalg.inv(pose_next.matrix())
        cam_j = moved @ inv[:3, :3].T + inv[:3, 3]
        in_front = cam_j[..., 2] > 0
        zj = np.where(in_front, cam_j[..., 2], 1.0)
        h, w = spec.height, spec.width
        u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        flow = np.stack([k[0, 0] * cam_j[..., 0] / zj + k[0, 2] - u,
                         k[1, 1] * cam_j[..., 1] / zj + k[1, 2] - v], axis=-1)
        flow = np.where(in_front[..., None], flow, 0.0)
        data.flows.append(FlowField(flow, in_front))
    return data


def _oracle_segmentation(spec: SceneSpec, label: np.ndarray) -> np.ndarray:
    """Background split into a tile grid; objects keep dedicated labels."""
    rows, cols = spec.background_tiles
    h, w = label.shape
    ri = np.minimum(np.arange(h) * rows // h, rows - 1)
    ci = np.minimum(np.arange(w) * cols // w, cols - 1)
    tiles = 1 + ri[:, None] * cols + ci[None, :]
    seg = np.where(label > 0, OBJECT_LABEL_BASE + label - 1, tiles)
    return seg.astype(np.int64)


def tokenize(pixels: np.ndarray, patch_size: int, d_model: int, seed: int) -> np.ndarray:
    """Fixed seeded linear embedding from s x s patches to token features."""
    h, w = pixels.shape
    if h % patch_size or w % patch_size:
        raise ValueError("image not divisible by patch size")
    s = patch_size
    patches = (pixels.reshape(h // s, s, w // s, s)
               .transpose(0, 2, 1, 3).reshape(-1, s * s))
    rng = np.random.Generator(np.random.PCG64(seed))
    weight = rng.normal(0.0, 0.05, (s * s, d_model))
    bias = rng.normal(0.0, 0.02, d_model)
    return patches @ weight + bias


def scene_tokens(data: SceneData, d_model: int) -> list[np.ndarray]:
    """Patch-token features for every frame under the scene's own seed."""
    s = data.spec.patch_size
    return [tokenize(f.pixels, s, d_model, data.spec.seed) for f in data.frames]
