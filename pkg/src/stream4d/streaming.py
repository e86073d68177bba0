"""Incremental per-frame inference with per-layer KV caching.

Each step projects only the incoming frame's tokens, attends against the
cached keys/values of retained frames plus its own, appends its projections
to the cache, and decodes a prediction. Nothing from past frames is ever
recomputed, so predictions are stable under stream extension. A sliding
window drops whole frames from the cache (camera queries survive eviction
because the post-hoc refinement pass needs every frame's query).

The refinement pass (:func:`ba_refine`) replays the layer stack for a
duplicated camera token per frame with full visibility over the cached
keys/values, then decodes a refined pose. Streaming predictions are left
untouched.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as ta
from .geometry import CameraPose
from .layout import build_grouped_causal_mask
from .model import (ModelConfig, decode_camera, decode_dense, embed_frames,
                    forward_tokens, to_tensors)
from .tensor import gelu_np, layer_norm_np


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("MORE_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when MORE_THREADS allows it."""
    workers = max_threads()
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class FramePrediction:
    frame_index: int
    pose: CameraPose
    depth: np.ndarray
    points: np.ndarray
    motion_probability: np.ndarray
    confidence: np.ndarray
    camera_feature: np.ndarray
    camera_attention: list[np.ndarray] | None  # per layer, (heads, attended_keys)
    attended_keys: int


@dataclass
class StreamState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    window_frames: int | None = None
    anchor_frames: int = 0
    init_mode: str = "single_frame"
    capture_attention: bool = True
    ba_variant: str = "full_stack"

    frames_processed: int = 0
    retained: list[int] = field(default_factory=list)
    key_cache: list[list[np.ndarray]] = field(default_factory=list)    # [layer][slot]
    value_cache: list[list[np.ndarray]] = field(default_factory=list)
    cam_queries: list[list[np.ndarray]] = field(default_factory=list)  # [frame][layer]
    cam_layer_inputs: list[list[np.ndarray]] = field(default_factory=list)
    _pt: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.init_mode not in ("single_frame", "frame_pair"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.window_frames is not None and self.window_frames < 1:
            raise ValueError("window_frames must be >= 1 (or None for unbounded)")
        if self.anchor_frames < 0:
            raise ValueError("anchor_frames must be >= 0")
        self.key_cache = [[] for _ in range(self.config.n_layers)]
        self.value_cache = [[] for _ in range(self.config.n_layers)]
        self._pt = to_tensors(self.params)

    @property
    def cached_tokens(self) -> int:
        per = 1 + self.config.layout(1).patch_tokens
        return len(self.retained) * per


def stream_init(config: ModelConfig, params: dict[str, np.ndarray], *,
                window_frames: int | None = None, anchor_frames: int = 0,
                init_mode: str = "single_frame", capture_attention: bool = True,
                ba_variant: str = "full_stack") -> StreamState:
    """Fresh stream with empty caches."""
    return StreamState(config, params, window_frames, anchor_frames,
                       init_mode, capture_attention, ba_variant)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dh)


def _layer_step(params, li: int, x: np.ndarray, past_k, past_v, n_heads: int,
                capture: bool, visible=None, attend_own: bool = True):
    """One pre-norm block over the current tokens against cached keys/values.

    ``attend_own=False`` keeps the current tokens' keys out of the attended
    set (the refinement pass queries only the cached sequence).
    """
    pre = f"layers.{li}"
    xn, _, _ = layer_norm_np(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    q = _split_heads(xn @ params[f"{pre}.attn.wq"] + params[f"{pre}.attn.bq"], n_heads)
    k_new = _split_heads(xn @ params[f"{pre}.attn.wk"] + params[f"{pre}.attn.bk"], n_heads)
    v_new = _split_heads(xn @ params[f"{pre}.attn.wv"] + params[f"{pre}.attn.bv"], n_heads)
    if attend_own:
        k = k_new if past_k is None else np.concatenate([past_k, k_new], axis=1)
        v = v_new if past_v is None else np.concatenate([past_v, v_new], axis=1)
    else:
        if past_k is None:
            raise ValueError("nothing to attend to without own keys or a cache")
        k, v = past_k, past_v
    out, weights = kernels.sdpa(q, k, v, visible, return_weights=capture)
    x = x + (_merge_heads(out) @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"])
    xn2, _, _ = layer_norm_np(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    h = gelu_np(xn2 @ params[f"{pre}.mlp.1.w"] + params[f"{pre}.mlp.1.b"])
    x = x + (h @ params[f"{pre}.mlp.2.w"] + params[f"{pre}.mlp.2.b"])
    return x, k_new, v_new, q, weights


def _decode_frame(state: StreamState, feats: np.ndarray, frame_index: int,
                  camera_attention, attended: int) -> FramePrediction:
    layout = state.config.layout(1)
    cam_feat = feats[0]
    dec = decode_camera(state._pt, ta.asconst(cam_feat))
    dense = decode_dense(state._pt, ta.asconst(feats[1:]), layout)
    motion_prob = 1.0 / (1.0 + np.exp(-dense["motion_logits"].data))
    return FramePrediction(
        frame_index=frame_index,
        pose=dec.pose,
        depth=dense["depth"].data,
        points=dense["points"].data,
        motion_probability=motion_prob,
        confidence=dense["confidence"].data,
        camera_feature=cam_feat.copy(),
        camera_attention=camera_attention,
        attended_keys=attended,
    )


def stream_step(state: StreamState, frame_tokens: np.ndarray) -> FramePrediction:
    """Ingest one embedded frame block, update caches, decode its prediction."""
    cfg = state.config
    per = 1 + cfg.layout(1).patch_tokens
    frame_tokens = np.asarray(frame_tokens, dtype=np.float64)
    if frame_tokens.shape != (per, cfg.d_model):
        raise ValueError(
            f"expected frame tokens of shape {(per, cfg.d_model)}, got {frame_tokens.shape}")
    if state.init_mode == "frame_pair" and state.frames_processed == 0:
        raise ValueError("frame_pair init: call stream_init_pair with the first two frames")

    t = state.frames_processed
    attended = (len(state.retained) + 1) * per
    x = frame_tokens
    cam_q, cam_in, attn_rows = [], [], ([] if state.capture_attention else None)
    for li in range(cfg.n_layers):
        past_k = (np.concatenate(state.key_cache[li], axis=1)
                  if state.key_cache[li] else None)
        past_v = (np.concatenate(state.value_cache[li], axis=1)
                  if state.value_cache[li] else None)
        cam_in.append(x[0].copy())
        x, k_new, v_new, q, weights = _layer_step(
            state.params, li, x, past_k, past_v, cfg.n_heads, state.capture_attention)
        state.key_cache[li].append(k_new)
        state.value_cache[li].append(v_new)
        cam_q.append(q[:, 0:1, :].copy())
        if attn_rows is not None:
            attn_rows.append(weights[:, 0, :].copy())
    state.cam_queries.append(cam_q)
    state.cam_layer_inputs.append(cam_in)
    state.retained.append(t)
    state.frames_processed = t + 1

    feats, _, _ = layer_norm_np(x, state.params["final_norm.g"], state.params["final_norm.b"])
    pred = _decode_frame(state, feats, t, attn_rows, attended)
    if state.window_frames is not None:
        evict_window(state)
    return pred


def stream_init_pair(state: StreamState, tokens_a: np.ndarray, tokens_b: np.ndarray):
    """Joint two-frame cache initialization with bidirectional pair attention.

    Only meaningful as the very first ingestion in frame_pair mode; later
    frames go through :func:`stream_step` as usual and therefore see the
    pair's cached keys/values.
    """
    if state.init_mode != "frame_pair":
        raise ValueError("stream was not initialized in frame_pair mode")
    if state.frames_processed:
        raise ValueError("pair initialization must happen before any step")
    cfg = state.config
    per = 1 + cfg.layout(1).patch_tokens
    x = np.concatenate([np.asarray(tokens_a, dtype=np.float64),
                        np.asarray(tokens_b, dtype=np.float64)], axis=0)
    if x.shape != (2 * per, cfg.d_model):
        raise ValueError("pair initialization needs two full frame blocks")
    cam_in = [[], []]
    cam_q = [[], []]
    rows = [[], []] if state.capture_attention else None
    for li in range(cfg.n_layers):
        cam_in[0].append(x[0].copy())
        cam_in[1].append(x[per].copy())
        x, k_new, v_new, q, weights = _layer_step(
            state.params, li, x, None, None, cfg.n_heads, state.capture_attention)
        state.key_cache[li].append(k_new[:, :per, :])
        state.key_cache[li].append(k_new[:, per:, :])
        state.value_cache[li].append(v_new[:, :per, :])
        state.value_cache[li].append(v_new[:, per:, :])
        cam_q[0].append(q[:, 0:1, :].copy())
        cam_q[1].append(q[:, per:per + 1, :].copy())
        if rows is not None:
            rows[0].append(weights[:, 0, :].copy())
            rows[1].append(weights[:, per, :].copy())
    state.cam_queries.extend(cam_q)
    state.cam_layer_inputs.extend(cam_in)
    state.retained.extend([0, 1])
    state.frames_processed = 2
    feats, _, _ = layer_norm_np(x, state.params["final_norm.g"], state.params["final_norm.b"])
    preds = tuple(
        _decode_frame(state, feats[f * per:(f + 1) * per], f,
                      None if rows is None else rows[f], 2 * per)
        for f in (0, 1))
    if state.window_frames is not None:
        evict_window(state)
    return preds


def evict_window(state: StreamState) -> StreamState:
    """Keep the most recent window_frames frames plus the configured anchors.

    Drops cached keys/values only; camera queries and per-layer camera inputs
    are kept for the refinement pass.
    """
    if state.window_frames is None:
        return state
    recent = set(range(max(0, state.frames_processed - state.window_frames),
                       state.frames_processed))
    anchors = set(range(min(state.anchor_frames, state.frames_processed)))
    keep = sorted(recent | anchors)
    keep_slots = [i for i, f in enumerate(state.retained) if f in keep]
    for li in range(state.config.n_layers):
        state.key_cache[li] = [state.key_cache[li][i] for i in keep_slots]
        state.value_cache[li] = [state.value_cache[li][i] for i in keep_slots]
    state.retained = [state.retained[i] for i in keep_slots]
    return state


def _refine_one(state: StreamState, frame: int, full_k, full_v):
    cfg = state.config
    if state.ba_variant == "single_final":
        li = cfg.n_layers - 1
        x = state.cam_layer_inputs[frame][li][None, :]
        x, _, _, _, _ = _layer_step(state.params, li, x, full_k[li], full_v[li],
                                    cfg.n_heads, capture=False, attend_own=False)
    else:
        x = state.cam_layer_inputs[frame][0][None, :]
        for li in range(cfg.n_layers):
            x, _, _, _, _ = _layer_step(state.params, li, x, full_k[li], full_v[li],
                                        cfg.n_heads, capture=False, attend_own=False)
    feats, _, _ = layer_norm_np(x, state.params["final_norm.g"], state.params["final_norm.b"])
    return feats[0]


def ba_refine(state: StreamState, return_features: bool = False):
    """Refined camera pose per processed frame via full-visibility re-attention.

    Each frame's duplicated camera token starts from its original embedded
    feature and re-runs the layer stack against the cached keys/values of all
    retained frames (no causal restriction). Requires the whole sequence to
    have been streamed; streaming predictions are not modified.
    """
    if state.frames_processed == 0:
        raise ValueError("ba_refine called on an empty stream")
    if len(state.cam_queries) != state.frames_processed:
        raise ValueError("camera queries missing; stream is mid-flight")
    cfg = state.config
    full_k = [np.concatenate(state.key_cache[li], axis=1) for li in range(cfg.n_layers)]
    full_v = [np.concatenate(state.value_cache[li], axis=1) for li in range(cfg.n_layers)]
    feats = parallel_map(lambda t: _refine_one(state, t, full_k, full_v),
                         range(state.frames_processed))
    poses = [decode_camera(state._pt, ta.asconst(f)).pose for f in feats]
    if return_features:
        return poses, np.stack(feats)
    return poses


def batch_predict(params: dict[str, np.ndarray], frames: list[np.ndarray],
                  config: ModelConfig, mask=None) -> list[FramePrediction]:
    """Reference batch pass over all frames at once (grouped causal by default).

    Produces the same per-frame outputs as streaming with an unbounded
    window; used as the equivalence oracle and by offline evaluation.
    """
    layout = config.layout(len(frames))
    if mask is None:
        mask = build_grouped_causal_mask(layout)
    pt = to_tensors(params)
    x = embed_frames(pt, frames)
    feats, record = forward_tokens(pt, x, mask, config, capture=True)
    per = layout.tokens_per_frame
    preds = []
    for t in range(len(frames)):
        base = layout.camera_index(t)
        block = feats.data[base:base + per]
        seen = np.flatnonzero(mask.visible[base])
        rows = [np.stack([record.layers[li][h].data[base, seen]
                          for h in range(config.n_heads)])
                for li in range(config.n_layers)]
        attended = int(seen.size)
        pred = _decode_frame_like(params, pt, config, block, t, rows, attended)
        preds.append(pred)
    return preds


def _decode_frame_like(params, pt, config, block, frame_index, rows, attended):
    layout = config.layout(1)
    dec = decode_camera(pt, ta.asconst(block[0]))
    dense = decode_dense(pt, ta.asconst(block[1:]), layout)
    motion_prob = 1.0 / (1.0 + np.exp(-dense["motion_logits"].data))
    return FramePrediction(
        frame_index=frame_index,
        pose=dec.pose,
        depth=dense["depth"].data,
        points=dense["points"].data,
        motion_probability=motion_prob,
        confidence=dense["confidence"].data,
        camera_feature=block[0].copy(),
        camera_attention=rows,
        attended_keys=attended,
    )


def prediction_deviation(a: FramePrediction, b: FramePrediction) -> float:
    """Max absolute difference over every numeric output of two predictions."""
    devs = [
        np.abs(a.depth - b.depth).max(),
        np.abs(a.points - b.points).max(),
        np.abs(a.motion_probability - b.motion_probability).max(),
        np.abs(a.confidence - b.confidence).max(),
        np.abs(a.camera_feature - b.camera_feature).max(),
        np.abs(a.pose.quat - b.pose.quat).max(),
        np.abs(a.pose.trans - b.pose.trans).max(),
        np.abs(a.pose.focal - b.pose.focal).max(),
    ]
    if a.camera_attention is not None and b.camera_attention is not None:
        for ra, rb in zip(a.camera_attention, b.camera_attention):
            if ra.shape != rb.shape:
                raise ValueError("attention rows cover different key sets")
            devs.append(np.abs(ra - rb).max())
    return float(max(devs))


def streaming_vs_batch_deviation(params, frames, config: ModelConfig) -> float:
    """Max deviation between the streaming path and the batch oracle."""
    state = stream_init(config, params)
    stream_preds = [stream_step(state, f) for f in _embedded(params, frames)]
    batch_preds = batch_predict(params, frames, config)
    return max(prediction_deviation(s, b) for s, b in zip(stream_preds, batch_preds))


def _embedded(params, frames):
    pt = to_tensors(params)
    from .model import embed_frame

    return [embed_frame(pt, f, t).data for t, f in enumerate(frames)]


def bench_step_latency(config: ModelConfig, params, steps: int, repetitions: int = 3,
                       window_frames: int | None = None, anchor_frames: int = 0,
                       seed: int = 0):
    """Wall time and attended-key count per streaming step.

    Attention capture is off (matching a deployment loop); each repetition
    replays the identical stream and the per-step minimum is reported.
    """
    per = 1 + config.layout(1).patch_tokens
    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = [rng.normal(0.0, 1.0, (per, config.d_model)) for _ in range(steps)]
    attended = None
    times = np.full((repetitions, steps), np.inf)
    for rep in range(repetitions):
        state = stream_init(config, params, window_frames=window_frames,
                            anchor_frames=anchor_frames, capture_attention=False)
        counts = []
        for i, tok in enumerate(tokens):
            t0 = time.perf_counter()
            pred = stream_step(state, tok)
            times[rep, i] = time.perf_counter() - t0
            counts.append(pred.attended_keys)
        attended = counts
    return {"attended_keys": attended, "times": times, "min_times": times.min(axis=0)}


def latency_growth_pvalue(step_times: np.ndarray, skip: int = 0) -> float:
    """One-sided p-value that per-step latency grows with the step index."""
    from scipy import stats

    y = np.asarray(step_times[skip:], dtype=np.float64)
    x = np.arange(y.size, dtype=np.float64)
    res = stats.linregress(x, y)
    # two-sided p halved toward the positive-slope alternative
    return float(res.pvalue / 2.0 if res.slope > 0 else 1.0 - res.pvalue / 2.0)
