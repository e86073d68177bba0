"""Single command-line entry point for every workflow.

Subcommands: masks, gen-scene, stream-demo, equivalence, extract-motion,
eval-traj, eval-depth, train-toy, bench. Runtime failures are reported as a
JSON object on stderr with a nonzero exit code. ``MORE_THREADS`` caps the
parallelism of the refinement pass; ``STREAM4D_BACKEND`` (or ``--backend``
where offered) selects the attention kernel implementation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels, mrt
from .config import load_config, write_run_manifest
from .geometry import (CameraPose, Trajectory, abs_rel, delta_accuracy,
                       evaluate_trajectory, load_tum, save_tum, scale_align_depth)
from .layout import (FrameLayout, build_flat_causal_mask, build_full_mask,
                     build_grouped_causal_mask, build_sliding_window_mask)
from .model import init_params, load_params, to_tensors
from .motion import FlowField, build_motion_mask, ego_flow, region_discrepancy, threshold_regions
from .scenes import SceneSpec, generate, scene_tokens
from .streaming import (ba_refine, bench_step_latency, latency_growth_pvalue,
                        stream_init, stream_step, streaming_vs_batch_deviation)
from .training import model_config_from, train_toy


def _config(args) -> dict:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def _layout_from_args(args) -> FrameLayout:
    if args.patch_tokens is not None:
        return FrameLayout.from_patch_count(args.frames, args.patch_tokens)
    return FrameLayout(args.frames, args.patch_size, args.image_h, args.image_w)


def cmd_masks(args) -> int:
    layout = _layout_from_args(args)
    if args.kind == "grouped_causal":
        mask = build_grouped_causal_mask(layout)
    elif args.kind == "flat_causal":
        mask = build_flat_causal_mask(layout)
    elif args.kind == "full":
        mask = build_full_mask(layout)
    else:
        if args.window is None:
            raise ValueError("sliding_window needs --window")
        mask = build_sliding_window_mask(layout, args.window)
    text = mask.to_text()
    if args.out_text:
        Path(args.out_text).write_text(text + "\n")
    else:
        print(text)
    if args.out_mrt:
        mrt.write_tensor(args.out_mrt, mask.visible.astype(np.float64))
    return 0


def cmd_gen_scene(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    cfg = _config(args)
    merged = {**cfg["scene"], **spec_dict}
    merged.setdefault("seed", cfg["seed"])
    spec = SceneSpec.from_dict(merged)
    data = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg)
    (out / "scene.json").write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    (out / "intrinsics.json").write_text(json.dumps(
        {"fx": data.intrinsics[0, 0], "fy": data.intrinsics[1, 1],
         "cx": data.intrinsics[0, 2], "cy": data.intrinsics[1, 2]},
        indent=2, sort_keys=True) + "\n")
    tokens = scene_tokens(data, model_config_from(cfg).d_model)
    for t, frame in enumerate(data.frames):
        mrt.write_tensor(out / f"pixels_{t:03d}.mrt", frame.pixels)
        mrt.write_tensor(out / f"depth_{t:03d}.mrt", frame.depth)
        mrt.write_tensor(out / f"points_{t:03d}.mrt", frame.points)
        mrt.write_tensor(out / f"seg_{t:03d}.mrt", frame.segmentation.astype(np.float64))
        mrt.write_tensor(out / f"mask_{t:03d}.mrt", frame.motion_mask.astype(np.float64))
        mrt.write_pgm(out / f"mask_{t:03d}.pgm", frame.motion_mask)
        mrt.write_tensor(out / f"tokens_{t:03d}.mrt", tokens[t])
        (out / f"pose_{t:03d}.json").write_text(json.dumps(
            {"quat": list(frame.pose.quat), "trans": list(frame.pose.trans)},
            indent=2) + "\n")
    for t, flow in enumerate(data.flows):
        mrt.write_tensor(out / f"flow_{t:03d}.mrt", flow.flow)
    save_tum(out / "traj_gt.txt",
             Trajectory(np.arange(spec.frames, dtype=np.float64),
                        [f.pose for f in data.frames]))
    return 0


def _pose_from_json(path) -> CameraPose:
    d = json.loads(Path(path).read_text())
    return CameraPose(np.asarray(d["quat"], dtype=np.float64),
                      np.asarray(d["trans"], dtype=np.float64))


def _intrinsics_from_json(path) -> np.ndarray:
    d = json.loads(Path(path).read_text())
    if "matrix" in d:
        return np.asarray(d["matrix"], dtype=np.float64)
    return np.array([[d["fx"], 0.0, d["cx"]], [0.0, d["fy"], d["cy"]], [0.0, 0.0, 1.0]])


def cmd_extract_motion(args) -> int:
    flow = mrt.read_tensor(args.flow)
    pred = FlowField(flow, np.ones(flow.shape[:2], dtype=bool))
    seg = mrt.read_int_grid(args.seg)
    depth = mrt.read_tensor(args.depth)
    pose_i = _pose_from_json(args.pose_i)
    pose_j = _pose_from_json(args.pose_j)
    intr = _intrinsics_from_json(args.K)
    ego = ego_flow(depth, pose_i, pose_j, intr)
    disc = region_discrepancy(pred, ego, seg)
    moving = threshold_regions(disc)
    mask = build_motion_mask(seg, moving)
    mrt.write_tensor(args.out_mask, mask.astype(np.float64))
    if args.out_pgm:
        mrt.write_pgm(args.out_pgm, mask)
    vals = np.array(list(disc.values())) if disc else np.zeros(0)
    report = {
        "regions": {str(k): {"discrepancy": v, "flagged": k in moving}
                    for k, v in sorted(disc.items())},
        "mean": float(vals.mean()) if vals.size else None,
        "stddev": float(vals.std()) if vals.size else None,
        "stddev_convention": "population",
        "threshold": float(vals.mean() + 2 * vals.std()) if vals.size else None,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_eval_traj(args) -> int:
    est, gt = load_tum(args.est), load_tum(args.gt)
    print(json.dumps(evaluate_trajectory(est, gt, delta=args.delta),
                     indent=2, sort_keys=True))
    return 0


def cmd_eval_depth(args) -> int:
    pred = mrt.read_tensor(args.pred)
    gt = mrt.read_tensor(args.gt)
    valid = mrt.read_int_grid(args.valid).astype(bool) if args.valid else None
    aligned, scale = scale_align_depth(pred, gt, valid)
    print(json.dumps({
        "abs_rel": abs_rel(aligned, gt, valid),
        "delta_1.25": delta_accuracy(aligned, gt, valid),
        "scale": scale,
    }, indent=2, sort_keys=True))
    return 0


def _demo_params(cfg, args):
    if getattr(args, "params", None):
        return load_params(args.params)
    return init_params(model_config_from(cfg), cfg["seed"])


def cmd_stream_demo(args) -> int:
    cfg = _config(args)
    mc = model_config_from(cfg)
    params = _demo_params(cfg, args)
    token_files = sorted(Path(args.input).glob("tokens_*.mrt"))
    if not token_files:
        raise FileNotFoundError(f"no tokens_*.mrt files under {args.input}")
    if len(token_files) > mc.max_frames:
        raise ValueError("sequence longer than the model's frame embedding table")
    out = Path(args.out)
    preds_dir = out / "preds"
    preds_dir.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg)
    window = args.window if args.window is not None else cfg["stream"]["window"]
    state = stream_init(mc, params, window_frames=window,
                        anchor_frames=cfg["stream"]["anchors"],
                        ba_variant=cfg["stream"]["ba_variant"])
    pt = to_tensors(params)
    from .model import embed_frame

    rows = []
    for t, f in enumerate(token_files):
        tokens = embed_frame(pt, mrt.read_tensor(f), t).data
        pred = stream_step(state, tokens)
        p = pred.pose
        rows.append([t, *p.quat, *p.trans, *p.focal])
        mrt.write_tensor(preds_dir / f"depth_{t:03d}.mrt", pred.depth)
        mrt.write_tensor(preds_dir / f"points_{t:03d}.mrt", pred.points)
        mrt.write_tensor(preds_dir / f"motion_{t:03d}.mrt", pred.motion_probability)
        mrt.write_tensor(preds_dir / f"confidence_{t:03d}.mrt", pred.confidence)
        (preds_dir / f"frame_{t:03d}.json").write_text(json.dumps({
            "frame": t,
            "pose": {"quat": list(p.quat), "trans": list(p.trans),
                     "focal": list(p.focal), "degenerate": p.degenerate},
            "attended_keys": pred.attended_keys,
            "mean_depth": float(pred.depth.mean()),
            "dynamic_fraction": float((pred.motion_probability > 0.5).mean()),
        }, indent=2, sort_keys=True) + "\n")
    _write_traj_csv(out / "trajectory.csv", rows)
    if args.ba == "on":
        refined = ba_refine(state)
        _write_traj_csv(out / "trajectory_refined.csv",
                        [[t, *p.quat, *p.trans, *(p.focal if p.focal is not None else (0, 0))]
                         for t, p in enumerate(refined)])
    return 0


def _write_traj_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write("frame,qw,qx,qy,qz,tx,ty,tz,fx,fy\n")
        for row in rows:
            f.write(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) + "\n")


def cmd_equivalence(args) -> int:
    cfg = _config(args)
    mc = model_config_from(cfg)
    worst = 0.0
    for seed in args.seeds:
        params = init_params(mc, seed)
        spec = SceneSpec.from_dict({**cfg["scene"], "seed": seed, "frames": args.frames})
        tokens = scene_tokens(generate(spec), mc.d_model)
        dev = streaming_vs_batch_deviation(params, tokens, mc)
        worst = max(worst, dev)
        print(f"seed={seed} frames={args.frames} max_abs_deviation={dev:.3e}")
    print(f"worst={worst:.3e} tolerance={args.tol:.3e}")
    return 0 if worst <= args.tol else 1


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    write_run_manifest(out, cfg)
    result = train_toy(cfg, out)
    last = result.history[-1]
    print(json.dumps({"final_total": last["total"],
                      "dynamic_mass": result.probe["dynamic_mass"],
                      "static_mass": result.probe["static_mass"]},
                     indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    mc = model_config_from(cfg)
    params = init_params(mc, cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, cfg)
    backends = kernels.available_backends() if args.compare_backends else [
        args.backend if args.backend != "auto" else kernels.get_backend()]
    summary = {}
    for backend in backends:
        kernels.set_backend(backend)
        res = bench_step_latency(mc, params, steps=args.steps, repetitions=args.reps,
                                 window_frames=args.window, seed=cfg["seed"])
        times = res["min_times"]
        skip = (args.window or 0) + 1
        summary[backend] = {
            "total_s": float(times.sum()),
            "mean_step_ms": float(times.mean() * 1e3),
            "growth_pvalue": latency_growth_pvalue(times, skip=min(skip, args.steps - 2)),
        }
        suffix = f"_{backend}" if args.compare_backends else ""
        with open(out / f"bench{suffix}.csv", "w") as f:
            f.write("step,attended_keys\n")
            for i, n in enumerate(res["attended_keys"]):
                f.write(f"{i},{n}\n")
        with open(out / f"bench_times{suffix}.csv", "w") as f:
            f.write("step,rep,seconds\n")
            for rep in range(res["times"].shape[0]):
                for i in range(res["times"].shape[1]):
                    f.write(f"{i},{rep},{res['times'][rep, i]!r}\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stream4d")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override")

    p = sub.add_parser("masks", help="dump an attention mask as text/MRT1")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--patch-tokens", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--image-h", type=int, default=16)
    p.add_argument("--image-w", type=int, default=16)
    p.add_argument("--kind", default="grouped_causal",
                   choices=["grouped_causal", "flat_causal", "sliding_window", "full"])
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out-text", default=None)
    p.add_argument("--out-mrt", default=None)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    common(p)
    p.add_argument("--spec", default=None, help="scene spec JSON (overrides config scene)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("stream-demo", help="stream token files through the model")
    common(p)
    p.add_argument("--input", required=True, help="directory with tokens_*.mrt")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--ba", choices=["on", "off"], default="on")
    p.add_argument("--params", default=None, help="trained parameter directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stream_demo)

    p = sub.add_parser("equivalence", help="compare streaming against the batch pass")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_equivalence)

    p = sub.add_parser("extract-motion", help="motion mask from flow discrepancy")
    p.add_argument("--flow", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--pose-i", required=True)
    p.add_argument("--pose-j", required=True)
    p.add_argument("--K", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-pgm", default=None)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_extract_motion)

    p = sub.add_parser("eval-traj", help="ATE/RPE of a TUM-format trajectory")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--delta", type=int, default=1)
    p.set_defaults(func=cmd_eval_traj)

    p = sub.add_parser("eval-depth", help="scale-aligned depth metrics on MRT1 grids")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--valid", default=None)
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("train-toy", help="toy training run on a synthetic scene")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="per-step streaming latency")
    common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--backend", default="auto",
                   choices=["auto", "compiled", "numpy"])
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
