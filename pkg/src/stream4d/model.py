"""Multi-head attention stack and decoding heads.

The forward path is written with taped tensor ops so the same code serves
training (gradients) and reference batch inference (constants). The
streaming engine keeps its own incremental per-frame path; equivalence
between the two is covered by tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ta
from .geometry import CameraPose
from .layout import AttentionMask, FrameLayout
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_ratio: float = 4.0
    patch_size: int = 4
    image_h: int = 16
    image_w: int = 16
    max_frames: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.d_model * self.mlp_ratio)

    @property
    def patch_area(self) -> int:
        return self.patch_size * self.patch_size

    def layout(self, num_frames: int) -> FrameLayout:
        return FrameLayout(num_frames, self.patch_size, self.image_h, self.image_w)


# decoded widths: quaternion + translation + two focals
CAMERA_PARAMS = 9
IDENTITY_CAMERA_BIAS = np.array([1.0, 0, 0, 0, 0, 0, 0, 1.0, 1.0])


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded parameter set; creation order is fixed so runs are reproducible."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, hdim = config.d_model, config.mlp_hidden
    s2 = config.patch_area
    p = {}

    def lin(name, nin, nout):
        p[f"{name}.w"] = rng.normal(0.0, 0.02, (nin, nout))
        p[f"{name}.b"] = np.zeros(nout)

    p["camera_token"] = rng.normal(0.0, 0.02, d)
    p["frame_emb"] = rng.normal(0.0, 0.02, (config.max_frames, d))
    grid = (config.image_h // config.patch_size) * (config.image_w // config.patch_size)
    p["patch_pos"] = rng.normal(0.0, 0.02, (grid, d))
    for i in range(config.n_layers):
        p[f"layers.{i}.ln1.g"] = np.ones(d)
        p[f"layers.{i}.ln1.b"] = np.zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            p[f"layers.{i}.attn.{proj}"] = rng.normal(0.0, 0.02, (d, d))
        for proj in ("bq", "bk", "bv", "bo"):
            p[f"layers.{i}.attn.{proj}"] = np.zeros(d)
        p[f"layers.{i}.ln2.g"] = np.ones(d)
        p[f"layers.{i}.ln2.b"] = np.zeros(d)
        lin(f"layers.{i}.mlp.1", d, hdim)
        lin(f"layers.{i}.mlp.2", hdim, d)
    p["final_norm.g"] = np.ones(d)
    p["final_norm.b"] = np.zeros(d)
    lin("head.camera", d, CAMERA_PARAMS)
    p["head.camera.b"] = IDENTITY_CAMERA_BIAS.copy()
    lin("head.depth", d, s2)
    lin("head.point", d, 3 * s2)
    lin("head.motion", d, s2)
    lin("head.conf", d, s2)
    return p


def to_tensors(params: dict[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: ta.asconst(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


class AttentionRecord:
    """Per-layer, per-head attention weights captured during a forward pass."""

    def __init__(self, layers: list[list[Tensor]] | None = None):
        self.layers = layers if layers is not None else []

    def head_mean(self, layer: int = -1) -> Tensor:
        heads = self.layers[layer]
        acc = heads[0]
        for h in heads[1:]:
            acc = ta.add(acc, h)
        return ta.mul(acc, 1.0 / len(heads))

    def stacked(self, layer: int = -1) -> np.ndarray:
        return np.stack([h.data for h in self.layers[layer]])

    def camera_row(self, layout: FrameLayout, frame: int, layer: int = -1) -> Tensor:
        """Head-averaged attention row of a frame's camera token."""
        mean = self.head_mean(layer)
        return ta.reshape(ta.take(mean, [layout.camera_index(frame)], axis=0), (mean.shape[1],))


def mha_forward(pt: dict[str, Tensor], prefix: str, x: Tensor,
                mask: AttentionMask | np.ndarray | None, n_heads: int,
                capture: bool = True):
    """Masked multi-head attention; returns (output, per-head weight tensors)."""
    if not np.isfinite(x.data).all():
        raise ValueError("attention input contains non-finite values")
    n, d = x.shape
    dh = d // n_heads
    q = ta.add(ta.matmul(x, pt[f"{prefix}.wq"]), pt[f"{prefix}.bq"])
    k = ta.add(ta.matmul(x, pt[f"{prefix}.wk"]), pt[f"{prefix}.bk"])
    v = ta.add(ta.matmul(x, pt[f"{prefix}.wv"]), pt[f"{prefix}.bv"])
    visible = None
    if mask is not None:
        visible = mask.visible if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    outs, weights = [], []
    scale = 1.0 / np.sqrt(dh)
    for h in range(n_heads):
        cols = np.arange(h * dh, (h + 1) * dh)
        qh = ta.take(q, cols, axis=1)
        kh = ta.take(k, cols, axis=1)
        vh = ta.take(v, cols, axis=1)
        scores = ta.mul(ta.matmul(qh, ta.transpose(kh)), scale)
        w = ta.softmax_rows(scores, visible)
        outs.append(ta.matmul(w, vh))
        if capture:
            weights.append(w)
    merged = ta.concat(outs, axis=1)
    out = ta.add(ta.matmul(merged, pt[f"{prefix}.wo"]), pt[f"{prefix}.bo"])
    return out, weights


def block_forward(pt: dict[str, Tensor], layer: int, x: Tensor,
                  mask, n_heads: int, capture: bool = True):
    """Pre-norm residual block: norm, attention, residual, norm, MLP, residual."""
    pre = f"layers.{layer}"
    xn = ta.layer_norm(x, pt[f"{pre}.ln1.g"], pt[f"{pre}.ln1.b"])
    attn, weights = mha_forward(pt, f"{pre}.attn", xn, mask, n_heads, capture)
    x = ta.add(x, attn)
    xn2 = ta.layer_norm(x, pt[f"{pre}.ln2.g"], pt[f"{pre}.ln2.b"])
    h = ta.gelu(ta.add(ta.matmul(xn2, pt[f"{pre}.mlp.1.w"]), pt[f"{pre}.mlp.1.b"]))
    h = ta.add(ta.matmul(h, pt[f"{pre}.mlp.2.w"]), pt[f"{pre}.mlp.2.b"])
    return ta.add(x, h), weights


def forward_tokens(pt: dict[str, Tensor], x: Tensor, mask, config: ModelConfig,
                   capture: bool = True):
    """Run the block stack plus final norm; returns (features, AttentionRecord)."""
    record = AttentionRecord()
    for i in range(config.n_layers):
        x, weights = block_forward(pt, i, x, mask, config.n_heads, capture)
        record.layers.append(weights)
    x = ta.layer_norm(x, pt["final_norm.g"], pt["final_norm.b"])
    return x, record


def embed_frame(pt: dict[str, Tensor], patch_tokens, frame_index: int) -> Tensor:
    """One frame's (1+P, d) token block: camera token first, then patches.

    Adds the learned frame-index embedding to every token and the 2-d patch
    position embedding to patch tokens.
    """
    femb = ta.take(pt["frame_emb"], [frame_index], axis=0)
    cam = ta.add(ta.reshape(pt["camera_token"], (1, -1)), femb)
    patches = ta.add(ta.add(ta.asconst(patch_tokens), pt["patch_pos"]), femb)
    return ta.concat([cam, patches], axis=0)


def embed_frames(pt: dict[str, Tensor], frames) -> Tensor:
    """Concatenate embedded frame blocks into the full (N, d) sequence."""
    return ta.concat([embed_frame(pt, f, t) for t, f in enumerate(frames)], axis=0)


def duplicate_mask(layout: FrameLayout, base: AttentionMask) -> np.ndarray:
    """Visibility for the sequence plus one appended camera duplicate per frame.

    Duplicates see every original token (full visibility) but are invisible
    to everyone, including each other.
    """
    n, t = layout.total_tokens, layout.num_frames
    ext = np.zeros((n + t, n + t), dtype=bool)
    ext[:n, :n] = base.visible
    ext[n:, :n] = True
    return ext


def forward_with_duplicates(pt: dict[str, Tensor], x: Tensor, layout: FrameLayout,
                            base_mask: AttentionMask, config: ModelConfig,
                            capture: bool = True):
    """Forward over [sequence; duplicated camera tokens]; returns both feature blocks."""
    dups = [ta.add(ta.reshape(pt["camera_token"], (1, -1)),
                   ta.take(pt["frame_emb"], [t], axis=0))
            for t in range(layout.num_frames)]
    ext = ta.concat([x] + dups, axis=0)
    feats, record = forward_tokens(pt, ext, duplicate_mask(layout, base_mask), config, capture)
    n = layout.total_tokens
    orig = ta.take(feats, np.arange(n), axis=0)
    dup = ta.take(feats, np.arange(n, n + layout.num_frames), axis=0)
    return orig, dup, record


class DecodedCamera:
    """Camera head output kept as tensors for training, plus the value-level pose."""

    def __init__(self, quat: Tensor, trans: Tensor, focal: Tensor, degenerate: bool):
        self.quat = quat
        self.trans = trans
        self.focal = focal
        self.degenerate = degenerate

    @property
    def pose(self) -> CameraPose:
        return CameraPose(self.quat.data.copy(), self.trans.data.copy(),
                          self.focal.data.copy(), degenerate=self.degenerate)


def decode_camera(pt: dict[str, Tensor], feature: Tensor) -> DecodedCamera:
    """Linear head to 9 values: unit quaternion, translation, focal pair.

    A numerically zero quaternion falls back to the identity rotation and the
    pose is flagged degenerate.
    """
    raw = ta.add(ta.matmul(ta.reshape(feature, (1, -1)), pt["head.camera.w"]),
                 pt["head.camera.b"])
    raw = ta.reshape(raw, (CAMERA_PARAMS,))
    q = ta.take(raw, [0, 1, 2, 3])
    trans = ta.take(raw, [4, 5, 6])
    focal = ta.take(raw, [7, 8])
    norm = ta.tsqrt(ta.tsum(ta.mul(q, q)))
    degenerate = float(norm.data) < 1e-12
    if degenerate:
        qn = ta.asconst(np.array([1.0, 0.0, 0.0, 0.0]))
    else:
        qn = ta.div(q, norm)
    return DecodedCamera(qn, trans, focal, degenerate)


def _unpatchify(x: Tensor, layout: FrameLayout) -> Tensor:
    gh, gw, s = layout.grid_h, layout.grid_w, layout.patch_size
    x = ta.reshape(x, (gh, gw, s, s))
    x = ta.transpose(x, (0, 2, 1, 3))
    return ta.reshape(x, (gh * s, gw * s))


def _unpatchify3(x: Tensor, layout: FrameLayout) -> Tensor:
    gh, gw, s = layout.grid_h, layout.grid_w, layout.patch_size
    x = ta.reshape(x, (gh, gw, 3, s, s))
    x = ta.transpose(x, (2, 0, 3, 1, 4))
    return ta.reshape(x, (3, gh * s, gw * s))


def decode_dense(pt: dict[str, Tensor], patch_features: Tensor, layout: FrameLayout) -> dict:
    """Per-patch linear heads unpatchified to pixel grids.

    Depth goes through softplus (positive); confidence through 1 + softplus
    (at least one); motion stays in logits.
    """

    def head(name):
        return ta.add(ta.matmul(patch_features, pt[f"head.{name}.w"]), pt[f"head.{name}.b"])

    depth = _unpatchify(ta.softplus(head("depth")), layout)
    points = _unpatchify3(head("point"), layout)
    motion = _unpatchify(head("motion"), layout)
    conf = _unpatchify(ta.add(1.0, ta.softplus(head("conf"))), layout)
    return {"depth": depth, "points": points, "motion_logits": motion, "confidence": conf}


def save_params(params: dict[str, np.ndarray], out_dir) -> None:
    """Parameter directory: one MRT1 file per array plus a JSON manifest."""
    import json
    from pathlib import Path

    from . import mrt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in params.items():
        fname = name.replace(".", "_") + ".mrt"
        mrt.write_tensor(out / fname, arr)
        manifest[name] = {"file": fname, "shape": list(arr.shape)}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(in_dir) -> dict[str, np.ndarray]:
    import json
    from pathlib import Path

    from . import mrt

    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    return {name: mrt.read_tensor(src / info["file"]) for name, info in manifest.items()}
