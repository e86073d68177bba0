"""Toy gradient-descent training over synthetic scenes.

Each step samples a short contiguous frame window from the scene, runs the
batch forward with appended duplicated camera tokens, and optimizes the
combined objective: confidence-weighted depth/point regression, motion BCE,
attention forcing on the last layer's head-averaged camera rows, and the
pairwise camera loss on both the streaming-path poses (earlier frame of
each pair detached) and the duplicated-token poses (full gradient flow).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mrt
from . import tensor as ta
from .config import DEFAULT_CONFIG
from .layout import build_grouped_causal_mask
from .losses import (LossWeights, attention_forcing_loss, camera_loss,
                     conf_regression_loss, motion_bce_loss, total_loss)
from .model import (ModelConfig, decode_camera, decode_dense, embed_frames,
                    forward_with_duplicates, init_params, save_params, to_tensors)
from .model import forward_tokens
from .motion import motion_score
from .scenes import SceneSpec, generate, scene_tokens
from .tensor import Tape

LOSS_COLUMNS = ("L_conf_depth", "L_conf_point", "L_motion", "L_attn",
                "L_cam_stream", "L_cam_refined")

DYNAMIC_TOKEN_THRESHOLD = 0.5


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]
    probe: dict


def model_config_from(config: dict) -> ModelConfig:
    return ModelConfig(**config["model"])


def weights_from(config: dict) -> LossWeights:
    return LossWeights(**config["loss"])


def scene_spec_from(config: dict) -> SceneSpec:
    scene = dict(config["scene"])
    scene.setdefault("seed", config["seed"])
    return SceneSpec.from_dict(scene)


class AdamState:
    def __init__(self, params: dict[str, np.ndarray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, params, grads, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            out[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _visible_patch_columns(layout, frame: int) -> np.ndarray:
    return np.concatenate([layout.patch_indices(f) for f in range(frame + 1)])


def step_losses(params, tokens, scene, start: int, count: int,
                cfg: ModelConfig, weights: LossWeights, tape: Tape):
    """Loss components for one sampled frame window, on the given tape."""
    pt = to_tensors(params, tape)
    layout = cfg.layout(count)
    mask = build_grouped_causal_mask(layout)
    x = embed_frames(pt, tokens[start:start + count])
    orig, dup, record = forward_with_duplicates(pt, x, layout, mask, cfg)

    conf_depth = conf_point = motion = attn = None
    stream_poses, refined_poses = [], []
    for f in range(count):
        frame = scene.frames[start + f]
        cam = ta.reshape(ta.take(orig, [layout.camera_index(f)], axis=0), (cfg.d_model,))
        stream_poses.append(decode_camera(pt, cam))
        dup_cam = ta.reshape(ta.take(dup, [f], axis=0), (cfg.d_model,))
        refined_poses.append(decode_camera(pt, dup_cam))

        dense = decode_dense(pt, ta.take(orig, layout.patch_indices(f), axis=0),
                             cfg.layout(1))
        ld = conf_regression_loss(dense["depth"], frame.depth, dense["confidence"],
                                  weights.lambda_conf)
        lp = conf_regression_loss(dense["points"], frame.points, dense["confidence"],
                                  weights.lambda_conf, vector_axis=0)
        lm = motion_bce_loss(dense["motion_logits"], frame.motion_mask.astype(np.float64))
        conf_depth = ld if conf_depth is None else ta.add(conf_depth, ld)
        conf_point = lp if conf_point is None else ta.add(conf_point, lp)
        motion = lm if motion is None else ta.add(motion, lm)

        row = record.camera_row(layout, f, layer=-1)
        cols = _visible_patch_columns(layout, f)
        sub = ta.take(row, cols)
        alpha = ta.div(sub, ta.tsum(sub))
        scores = np.concatenate([
            motion_score(scene.frames[start + g].motion_mask, cfg.patch_size).values
            for g in range(f + 1)])
        la = attention_forcing_loss(alpha, scores, weights.penalty_c)
        attn = la if attn is None else ta.add(attn, la)

    motion = ta.mul(motion, 1.0 / count)
    attn = ta.mul(attn, 1.0 / count)
    gt_poses = [scene.frames[start + f].pose for f in range(count)]
    components = {
        "conf_depth": conf_depth,
        "conf_point": conf_point,
        "motion": motion,
        "attn": attn,
        "cam_stream": camera_loss(stream_poses, gt_poses, "streaming_path"),
        "cam_refined": camera_loss(refined_poses, gt_poses, "refined_path"),
    }
    return components, pt


def attention_probe(params, scene, cfg: ModelConfig) -> dict:
    """Mean last-layer camera attention mass on dynamic vs static patch tokens.

    Dynamic tokens are patches whose pooled moving fraction exceeds 0.5 in
    their frame; masses come from the image-token-normalized camera rows of
    the whole scene run at inference.
    """
    tokens = scene_tokens(scene, cfg.d_model)
    count = len(tokens)
    layout = cfg.layout(count)
    pt = to_tensors(params)
    x = embed_frames(pt, tokens)
    feats, record = forward_tokens(pt, x, build_grouped_causal_mask(layout), cfg)
    dyn_masses, stat_masses, rows = [], [], []
    for f in range(count):
        row = record.camera_row(layout, f, layer=-1).data
        cols = _visible_patch_columns(layout, f)
        alpha = row[cols]
        alpha = alpha / alpha.sum()
        scores = np.concatenate([
            motion_score(scene.frames[g].motion_mask, cfg.patch_size).values
            for g in range(f + 1)])
        dyn = scores > DYNAMIC_TOKEN_THRESHOLD
        dyn_masses.append(alpha[dyn].sum() if dyn.any() else 0.0)
        stat_masses.append(alpha[~dyn].sum())
        padded = np.zeros(layout.patch_tokens * count)
        padded[:alpha.size] = alpha
        rows.append(padded)
    dyn_m, stat_m = float(np.mean(dyn_masses)), float(np.mean(stat_masses))
    return {
        "dynamic_mass": dyn_m,
        "static_mass": stat_m,
        "ratio": dyn_m / stat_m if stat_m > 0 else float("inf"),
        "rows": np.stack(rows),
    }


def _float_cell(x: float) -> str:
    return repr(float(x))


def train_toy(config: dict, out_dir=None) -> TrainResult:
    """Run the configured training loop; optionally write the artifact layout.

    Writes ``losses.csv``, ``params/``, and ``attn/`` snapshots under
    ``out_dir`` when given. Aborts with a state dump if the loss goes
    non-finite.
    """
    cfg = model_config_from(config)
    weights = weights_from(config)
    spec = scene_spec_from(config)
    train = {**DEFAULT_CONFIG["train"], **config["train"]}
    scene = generate(spec)
    tokens = scene_tokens(scene, cfg.d_model)

    params = init_params(cfg, config["seed"])
    adam = AdamState(params)
    rng = np.random.Generator(np.random.PCG64(config["seed"]))
    lo = max(2, int(train["min_frames"]))
    hi = min(int(train["max_frames"]), spec.frames)
    if hi < lo:
        raise ValueError("scene too short for the configured frame sampling range")

    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "attn").mkdir(exist_ok=True)
        csv_f = open(out / "losses.csv", "w")
        csv_f.write("step," + ",".join(LOSS_COLUMNS) + ",total\n")
    else:
        csv_f = None

    try:
        for step in range(int(train["steps"])):
            count = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.frames - count + 1))
            tape = Tape()
            components, pt = step_losses(params, tokens, scene, start, count,
                                         cfg, weights, tape)
            loss = total_loss(components, weights)
            values = {k: float(v.data) for k, v in components.items()}
            values["total"] = float(loss.data)
            if not np.isfinite(values["total"]):
                if out is not None:
                    dump = {"step": step, "losses": values,
                            "param_norms": {k: float(np.linalg.norm(v))
                                            for k, v in params.items()}}
                    (out / "divergence.json").write_text(json.dumps(dump, indent=2))
                raise RuntimeError(f"training diverged at step {step}")
            grads_by_node = tape.backward(loss)
            grads = {k: grads_by_node[t.node_id].data for k, t in pt.items()}
            params = adam.update(params, grads, float(train["lr"]))
            history.append({"step": step, **values})
            if csv_f is not None:
                row = [str(step)] + [_float_cell(values[c]) for c in LOSS_COLUMNS]
                csv_f.write(",".join(row) + f",{_float_cell(values['total'])}\n")
            snap = int(train["snapshot_every"])
            if out is not None and snap > 0 and (step + 1) % snap == 0:
                probe = attention_probe(params, scene, cfg)
                mrt.write_tensor(out / "attn" / f"step_{step + 1:06d}.mrt", probe["rows"])
    finally:
        if csv_f is not None:
            csv_f.close()

    probe = attention_probe(params, scene, cfg)
    if out is not None:
        mrt.write_tensor(out / "attn" / "final.mrt", probe["rows"])
        save_params(params, out / "params")
        (out / "report.json").write_text(json.dumps(
            {"final_losses": history[-1],
             "attention": {k: probe[k] for k in ("dynamic_mass", "static_mass", "ratio")}},
            indent=2, sort_keys=True) + "\n")
    return TrainResult(params, history, probe)
