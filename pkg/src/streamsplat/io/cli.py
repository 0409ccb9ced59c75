"""Command-line interface.

Subcommands:
  synth    generate a synthetic SceneStream with ground truth
  run      stream a scene through the engine; writes gaussians.ply,
           cache.json, metrics.jsonl, a report/ directory and, on request,
           occupancy.occ / bboxes.json / mesh.obj
  render   novel-view render from a saved gaussians.ply
  decode   occupancy / boxes / mesh from a saved gaussians.ply
  metrics  re-evaluate a finished run against a scene's held-out views

Exit codes: 0 success, 2 malformed scene stream (message names the first
invalid file), 1 any other engine failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from ..core import EngineConfig
from ..errors import EngineError, MalformedStream


def _load_config(path: str | None, overrides: dict | None = None) -> EngineConfig:
    kv = {}
    if path:
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"config line without '=': {line!r}")
                key, val = (s.strip() for s in line.split("=", 1))
                kv[key] = val
    if overrides:
        kv.update({k: v for k, v in overrides.items() if v is not None})
    return EngineConfig.from_mapping(kv)


def _cmd_synth(args) -> int:
    from .synth import SynthSpec, generate

    spec = SynthSpec(
        n_gaussians=args.gaussians,
        n_classes=args.classes,
        instances_per_class=args.instances,
        n_frames=args.frames,
        width=args.size,
        height=args.size,
        orbit_radius=args.orbit_radius,
        noise_pointmap=args.noise,
        seed=args.seed,
    )
    scene = generate(spec, args.out)
    print(f"wrote {spec.n_frames} frames, {len(scene.arrays)} ground-truth Gaussians -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    from .runner import run_stream

    cfg = _load_config(args.config, {"seed": args.seed})
    decode = tuple(s for s in (args.decode or "").split(",") if s)
    summary = run_stream(
        args.scene,
        args.out,
        cfg,
        poses_mode=args.poses,
        holdout_every=args.holdout_every,
        decode=decode,
        decode_voxel=args.voxel,
        max_frames=args.max_frames,
    )
    psnr = summary["final_psnr"]
    psnr_s = "n/a" if psnr is None else ("inf" if math.isinf(psnr) else f"{psnr:.2f} dB")
    print(
        f"processed {summary['trained_frames']}/{summary['frames']} frames, "
        f"{summary['final_gaussians']} Gaussians, held-out PSNR {psnr_s}"
    )
    return 0


def _cmd_render(args) -> int:
    from . import formats
    from ..rasterizer import render

    arrays = formats.read_gaussians_ply(args.ply)
    cam = formats.read_intrinsics(args.intrinsics)
    poses = formats.read_poses(args.poses)
    if not (0 <= args.frame_index < len(poses)):
        raise EngineError(f"frame index {args.frame_index} out of range")
    out = render(arrays, cam.with_pose(poses[args.frame_index]))
    formats.write_png(args.out, np.clip(out.rgb, 0.0, 1.0))
    print(f"rendered view {args.frame_index} -> {args.out}")
    return 0


def _cmd_decode(args) -> int:
    from . import formats
    from .. import decoders

    arrays = formats.read_gaussians_ply(args.ply)
    cache = formats.read_cache_json(args.cache) if args.cache else None
    os.makedirs(args.out, exist_ok=True)
    what = set(args.what.split(","))
    if "occ" in what:
        grid = decoders.gaussian_to_voxel(arrays, args.voxel, cache)
        formats.write_occ(os.path.join(args.out, "occupancy.occ"), grid)
    if "bbox" in what:
        boxes = decoders.extract_bboxes(arrays, cache, min_cluster=args.min_cluster)
        formats.write_bboxes_json(os.path.join(args.out, "bboxes.json"), boxes, cache)
    if "mesh" in what:
        if not (args.intrinsics and args.poses):
            raise EngineError("mesh decoding needs --intrinsics and --poses")
        cam = formats.read_intrinsics(args.intrinsics)
        poses = formats.read_poses(args.poses)
        cams = [cam.with_pose(p) for p in poses]
        mesh = decoders.extract_mesh(arrays, cams, args.voxel, cache=cache)
        formats.write_mesh_obj(os.path.join(args.out, "mesh.obj"), mesh)
    print(f"decoded {sorted(what)} -> {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    from . import formats
    from .runner import _gt_class_map, is_holdout, predicted_classes
    from .metrics import MetricsRecord, ssim as ssim_of, confusion_matrix
    from ..rasterizer import render
    from .report import write_report

    stream = formats.SceneStream.open(args.scene)
    arrays = formats.read_gaussians_ply(os.path.join(args.run, "gaussians.ply"))
    if stream.poses is None:
        raise EngineError("scene has no poses.txt; cannot evaluate held-out views")
    q = max(arrays.feat_dim - 3, 0)
    mse_sum, ssim_sum, n_px, cm, count = 0.0, 0.0, 0, None, 0
    for t in range(stream.n_frames):
        if not is_holdout(t, args.holdout_every):
            continue
        frame = stream.load_frame(t)
        cam = stream.camera.with_pose(stream.poses[t])
        out = render(arrays, cam)
        rgb = np.clip(out.rgb, 0.0, 1.0)
        mse_sum += float(((rgb - frame.rgb) ** 2).sum())
        n_px += frame.rgb.size
        ssim_sum += ssim_of(rgb, frame.rgb)
        count += 1
        if q:
            pred = predicted_classes(out.feature, out.alpha, q)
            c = confusion_matrix(pred, _gt_class_map(frame.feature_map), q)
            cm = c if cm is None else cm + c
    if count == 0:
        raise EngineError("no held-out frames at this interval")
    mse = mse_sum / n_px
    rec = MetricsRecord(
        frame=stream.n_frames - 1,
        trained=False,
        n_gaussians=len(arrays),
        psnr=float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse),
        ssim=ssim_sum / count,
    )
    if cm is not None:
        ious, accs = [], []
        for c in range(q):
            gt_c = cm[c].sum()
            if gt_c == 0:
                continue
            tp = cm[c, c]
            fp = cm[:, c].sum() - tp
            fn = gt_c - tp
            ious.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
            accs.append(tp / gt_c)
        rec.miou = float(np.mean(ious)) if ious else None
        rec.macc = float(np.mean(accs)) if accs else None
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.jsonl"), "w") as f:
        f.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    write_report(args.out, [rec])
    p = rec.psnr
    print(
        f"held-out views: {count}  PSNR {'inf' if math.isinf(p) else f'{p:.2f} dB'}  "
        f"SSIM {rec.ssim:.4f}" + (f"  mIoU {rec.miou:.4f}" if rec.miou is not None else "")
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamsplat", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene stream")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gaussians", type=int, default=200)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--instances", type=int, default=1)
    sp.add_argument("--frames", type=int, default=60)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--orbit-radius", type=float, default=3.0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_synth)

    rp = sub.add_parser("run", help="stream a scene through the engine")
    rp.add_argument("scene")
    rp.add_argument("--out", required=True)
    rp.add_argument("--config", default=None)
    rp.add_argument("--poses", choices=("given", "estimate"), default="given")
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--holdout-every", type=int, default=5)
    rp.add_argument("--decode", default="", help="comma list: occ,bbox,mesh")
    rp.add_argument("--voxel", type=float, default=None)
    rp.add_argument("--max-frames", type=int, default=None)
    rp.set_defaults(func=_cmd_run)

    np_ = sub.add_parser("render", help="novel-view render from a saved PLY")
    np_.add_argument("ply")
    np_.add_argument("--intrinsics", required=True)
    np_.add_argument("--poses", required=True)
    np_.add_argument("--frame-index", type=int, default=0)
    np_.add_argument("--out", required=True)
    np_.set_defaults(func=_cmd_render)

    dp = sub.add_parser("decode", help="decode occupancy/bboxes/mesh from a PLY")
    dp.add_argument("ply")
    dp.add_argument("--what", default="occ,bbox,mesh")
    dp.add_argument("--voxel", type=float, required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--cache", default=None)
    dp.add_argument("--min-cluster", type=int, default=20)
    dp.add_argument("--intrinsics", default=None)
    dp.add_argument("--poses", default=None)
    dp.set_defaults(func=_cmd_decode)

    mp = sub.add_parser("metrics", help="evaluate a finished run against held-out views")
    mp.add_argument("scene")
    mp.add_argument("--run", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--holdout-every", type=int, default=5)
    mp.set_defaults(func=_cmd_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MalformedStream as e:
        print(f"error: invalid scene stream: {e}", file=sys.stderr)
        return 2
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
