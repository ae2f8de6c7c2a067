"""Command-line entry point: ``uavsynth <command> ...``.

Every command writes its outputs through a staging location that only
replaces ``--out`` on success, and echoes its effective settings to a
``run.json`` next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotator import InstancePalette, annotate, annotate_scalar_mask
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import CLI_MODES, PRESETS, RunConfig, init_state, load_config, prepare_data
from .dataset_io import (MANIFEST, SceneFormatError, assemble_hybrid, build_mask_images, export_detection,
                         load_scene, read_detection, read_png, save_scene, split_frames,
                         staged_dir, to_u16, to_u8, write_png)
from .pose_sampler import (OrbitSpec, load_requests, sample_dynamic_requests,
                           sample_static_poses, save_requests, static_requests)
from .renderer import RenderSettings, render_image
from .scene_model import SceneBounds
from .scene_synth import PoseNoiseSpec, builtin_spec, generate_scene, perturb_poses
from .trainer import ConfigError, evaluate_psnr, train

log = logging.getLogger("uavsynth")


class CommandError(Exception):
    pass


def _write_run_json(path: Path, args, extra=None) -> None:
    rec = {"command": args.command, "version": __version__,
           "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                    if k not in ("func",)}}
    rec.update(extra or {})
    path.write_text(json.dumps(rec, indent=1, default=str))


def _palette_for(ds) -> InstancePalette:
    seen = {}
    for fr in ds.frames:
        for b in fr.boxes or []:
            seen.setdefault(b.instance_id, b.class_id)
    ids = sorted(seen)
    return InstancePalette.generate(ids, [seen[i] for i in ids])


def _load_palette(path) -> InstancePalette:
    return InstancePalette.from_json(json.loads(Path(path).read_text()))


def _settings_from(extra: dict, samples: int | None, threads: int) -> RenderSettings:
    if "bounds" not in extra:
        raise CommandError("checkpoint carries no scene bounds; retrain with this tool")
    b = extra["bounds"]
    return RenderSettings(SceneBounds(b["min"], b["max"]), samples or extra.get("eval_samples", 192),
                          False, 0, tuple(extra.get("background", (0.0, 0.0, 0.0))),
                          threads=threads)


# -- commands -----------------------------------------------------------------

def cmd_gen_scene(args):
    spec = builtin_spec(args.spec)
    ds = generate_scene(spec, threads=args.threads)
    save_scene(ds, args.out)
    _write_run_json(Path(args.out) / "run.json", args, {"spec": spec.to_dict()})
    print(f"wrote {ds.frame_count} frames to {args.out}")


def cmd_perturb_poses(args):
    ds = load_scene(args.input)
    noisy = perturb_poses(ds, PoseNoiseSpec(args.rot_sigma, args.trans_sigma, args.seed))
    save_scene(noisy, args.out)
    _write_run_json(Path(args.out) / "run.json", args)
    print(f"wrote perturbed scene to {args.out}")


def cmd_mask_scene(args):
    ds = load_scene(args.scene)
    palette = _load_palette(args.palette) if args.palette else _palette_for(ds)
    masked = build_mask_images(ds, palette)
    with staged_dir(args.out) as tmp:
        save_scene(masked, tmp / "scene")
        for item in (tmp / "scene").iterdir():
            item.rename(tmp / item.name)
        (tmp / "scene").rmdir()
        (tmp / "palette.json").write_text(json.dumps(palette.to_json(), indent=1))
        _write_run_json(tmp / "run.json", args)
    print(f"wrote {masked.frame_count} mask frames to {args.out}")


def cmd_train(args):
    ds = load_scene(args.scene)
    cfg_dict = load_config(args.config) if args.config else {}
    if args.mode:
        cfg_dict["mode"] = args.mode
    sched = dict(cfg_dict.get("schedule", {}))
    for key in ("iterations", "eval_every"):
        if getattr(args, key) is not None:
            sched[key] = getattr(args, key)
    cfg_dict["schedule"] = sched
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = RunConfig.from_dict(cfg_dict)
    data = prepare_data(ds, cfg.holdout_every)
    n_train = len(split_frames(ds, cfg.holdout_every)[0])
    state = init_state(cfg, n_train)
    out = Path(args.out)
    b = ds.bounds
    extra = {"bounds": b.to_dict(), "background": list(cfg.schedule.background),
             "eval_samples": cfg.schedule.eval_samples, "scene": ds.name,
             "holdout_every": cfg.holdout_every, "config": cfg.to_dict()}
    log_path = out.with_name(out.name + ".log.jsonl")
    records = []
    state, curve, _ = train(state, data, cfg.schedule, cfg.weights, on_record=records.append)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp_log = log_path.with_name("." + log_path.name + ".tmp")
    tmp_log.write_text("".join(json.dumps(r) + "\n" for r in records))
    save_checkpoint(state, out, extra)
    tmp_log.replace(log_path)
    _write_run_json(out.with_name(out.name + ".run.json"), args, {"config": cfg.to_dict()})
    if curve:
        print(f"final held-out PSNR {curve[-1][1]:.2f} dB")
    print(f"wrote checkpoint {out} (step {state.step})")


def _render_requests(state, settings, requests, tmp: Path, depth_scale: float):
    for sub in ("rgb", "mask", "depth"):
        (tmp / sub).mkdir()
    images = []
    for i, req in enumerate(requests):
        img = render_image(state.stack, state.decoder, req.pose, req.timestamp, settings)
        name = f"{i:04d}_{req.tag}"
        rgb = to_u8(np.clip(img.rgb, 0, 1))
        write_png(tmp / "rgb" / f"{name}.png", rgb)
        write_png(tmp / "mask" / f"{name}.png", to_u8(np.clip(img.mask, 0, 1)))
        write_png(tmp / "depth" / f"{name}.png", to_u16(img.depth, depth_scale))
        images.append((name, rgb, img))
    return images


def cmd_render(args):
    state, extra = load_checkpoint(args.ckpt, return_extra=True)
    settings = _settings_from(extra, args.samples, args.threads)
    requests = load_requests(args.requests)
    with staged_dir(args.out) as tmp:
        _render_requests(state, settings, requests, tmp, settings.bounds.diagonal * 2)
        _write_run_json(tmp / "run.json", args, {"requests": len(requests)})
    print(f"rendered {len(requests)} views to {args.out}")


def cmd_sample_poses(args):
    ds = load_scene(args.scene)
    if args.dynamic is not None:
        reqs = sample_dynamic_requests(ds.trajectory(), args.dynamic, args.seed)
    else:
        center = args.center or list(ds.bounds.center)
        spec = OrbitSpec(tuple(center), tuple(args.altitude), tuple(args.radius),
                         tuple(args.view_angle) if args.view_angle else None, args.count, args.seed)
        k = ds.frames[0].pose.intrinsics
        reqs = static_requests(sample_static_poses(spec, k, args.waypoints))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name("." + out.name + ".tmp")
    save_requests(reqs, tmp)
    tmp.replace(out)
    _write_run_json(out.with_name(out.stem + ".run.json"), args, {"requests": len(reqs)})
    print(f"wrote {len(reqs)} requests to {out}")


def _mask_files(path: Path):
    files = sorted(p for p in path.rglob("*.png"))
    if not files:
        raise CommandError(f"no PNG mask images under {path}")
    return files


def cmd_annotate(args):
    files = _mask_files(Path(args.masks))
    palette = _load_palette(args.palette) if args.palette else None
    items, boxes_json = [], {}
    for f in files:
        img = read_png(f)
        if palette is not None:
            if img.ndim == 2:
                raise CommandError(f"{f}: palette annotation needs RGB mask images")
            boxes = annotate(img[..., :3], palette, args.threshold, args.tolerance, args.min_area)
        else:
            gray = img if img.ndim == 2 else img[..., :3].max(axis=-1)
            boxes = annotate_scalar_mask(gray / 255.0, args.threshold, args.class_id, args.min_area)
        name = f.stem
        items.append((name, img if img.ndim == 3 else np.repeat(img[..., None], 3, -1), boxes))
        boxes_json[name] = [{"class": b.class_id, "instance": b.instance_id, "box": list(b.box),
                             "area": b.area} for b in boxes]
    with staged_dir(args.out) as tmp:
        export_detection(items, tmp / "export", "synthetic")
        for item in (tmp / "export").iterdir():
            item.rename(tmp / item.name)
        (tmp / "export").rmdir()
        (tmp / "boxes.json").write_text(json.dumps(boxes_json, indent=1))
        _write_run_json(tmp / "run.json", args)
    print(f"annotated {len(items)} images into {args.out}")


def cmd_augment(args):
    ds = load_scene(args.scene)
    im_state, im_extra = load_checkpoint(args.ckpt_im, return_extra=True)
    settings = _settings_from(im_extra, args.samples, args.threads)
    requests = load_requests(args.requests)
    bbox_state = None
    if args.ckpt_bbox:
        bbox_state, bbox_extra = load_checkpoint(args.ckpt_bbox, return_extra=True)
        bbox_settings = _settings_from(bbox_extra, args.samples, args.threads)
        palette = _load_palette(args.palette) if args.palette else _palette_for(ds)
    elif im_state.mode != "extended":
        raise CommandError("without --ckpt-bbox the image checkpoint must be extended mode "
                           "(its mask channel supplies the boxes)")
    items = []
    with staged_dir(args.out) as tmp:
        for i, req in enumerate(requests):
            img = render_image(im_state.stack, im_state.decoder, req.pose, req.timestamp, settings)
            if bbox_state is not None:
                m = render_image(bbox_state.stack, bbox_state.decoder, req.pose, req.timestamp,
                                 bbox_settings)
                boxes = annotate(np.clip(m.rgb, 0, 1), palette, args.threshold, args.tolerance,
                                 args.min_area)
            else:
                boxes = annotate_scalar_mask(img.mask, args.threshold, args.class_id,
                                             args.min_area)
            items.append((f"{i:04d}_{req.tag}", to_u8(np.clip(img.rgb, 0, 1)), boxes))
        export_detection(items, tmp / "export", "synthetic")
        for item in (tmp / "export").iterdir():
            item.rename(tmp / item.name)
        (tmp / "export").rmdir()
        _write_run_json(tmp / "run.json", args, {"requests": len(requests)})
    print(f"wrote {len(items)} annotated synthetic images to {args.out}")


def cmd_eval_psnr(args):
    state, extra = load_checkpoint(args.ckpt, return_extra=True)
    ds = load_scene(args.scene)
    settings = _settings_from(extra, args.samples, args.threads)
    _, held = split_frames(ds, extra.get("holdout_every", 2))
    frames = [(ds.frames[i].pose, ds.frames[i].image / 255.0) for i in held]
    values = evaluate_psnr(state, frames, settings.bounds, settings.n_samples,
                           settings.background, args.threads)
    print(f"{'frame':>6} {'time':>8} {'psnr_db':>8}")
    for i, v in zip(held, values):
        print(f"{i:6d} {ds.frames[i].time:8.4f} {v:8.3f}")
    mean = float(np.mean(values)) if values else float("nan")
    print(f"{'mean':>6} {'':>8} {mean:8.3f}")
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps({"frames": held, "psnr": values, "mean": mean}, indent=1))


def _real_export(path: Path, staging: Path):
    """A detection export as-is, or a scene directory exported from its ground-truth boxes."""
    if (path / MANIFEST).is_file():
        ds = load_scene(path)
        items = [(Path(fr.image_path).stem, fr.image, fr.boxes or []) for fr in ds.frames]
        return export_detection(items, staging, "real")
    return read_detection(path)


def cmd_merge(args):
    syn = read_detection(args.synthetic)
    with staged_dir(Path(args.out).with_name(Path(args.out).name + ".real")) as tmp:
        real = _real_export(Path(args.real), tmp / "export")
        merged = assemble_hybrid(real, syn, args.out)
        shutil.rmtree(tmp / "export", ignore_errors=True)
    shutil.rmtree(Path(args.out).with_name(Path(args.out).name + ".real"), ignore_errors=True)
    _write_run_json(Path(args.out) / "run.json", args,
                    {"real": merged.count("real"), "synthetic": merged.count("synthetic")})
    print(f"merged {len(merged)} entries ({merged.count('real')} real, "
          f"{merged.count('synthetic')} synthetic) into {args.out}")


# -- parser -------------------------------------------------------------------

def _annot_flags(p):
    p.add_argument("--threshold", type=float, default=0.3, help="mask threshold in (0, 1)")
    p.add_argument("--tolerance", type=int, default=80, help="palette colour tolerance (8-bit)")
    p.add_argument("--min-area", type=int, default=4, help="smallest blob kept, in pixels")
    p.add_argument("--class-id", type=int, default=0, help="class for scalar-mask boxes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uavsynth", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads; 1 gives bit-reproducible single-threaded runs")
    ap.add_argument("--log-level", default="WARNING", help="logging level")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a procedural scene dataset")
    p.add_argument("--spec", required=True, help="built-in name (toy-dyn-1) or spec JSON path")
    p.add_argument("--out", required=True, type=Path, help="output scene directory")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("perturb-poses", help="add seeded noise to a scene's camera poses")
    p.add_argument("--in", dest="input", required=True, type=Path, help="input scene directory")
    p.add_argument("--out", required=True, type=Path, help="output scene directory")
    p.add_argument("--rot-sigma", type=float, default=0.5, help="rotation sigma in degrees")
    p.add_argument("--trans-sigma", type=float, default=0.01,
                   help="translation sigma as a fraction of the scene diagonal")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(func=cmd_perturb_poses)

    p = sub.add_parser("mask-scene", help="box-painted mask images for a box field")
    p.add_argument("--scene", required=True, type=Path, help="scene with ground-truth boxes")
    p.add_argument("--palette", type=Path, help="palette JSON (default: generated)")
    p.add_argument("--out", required=True, type=Path, help="output scene directory")
    p.set_defaults(func=cmd_mask_scene)

    p = sub.add_parser("train", help="train a plane field on a scene")
    p.add_argument("--scene", required=True, type=Path, help="scene directory")
    p.add_argument("--mode", choices=sorted(CLI_MODES), help="field layout (overrides config)")
    p.add_argument("--config", help=f"run config JSON path or preset ({', '.join(PRESETS)})")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--iterations", type=int, help="override schedule iterations")
    p.add_argument("--eval-every", type=int, help="override evaluation interval")
    p.add_argument("--seed", type=int, help="override seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render requested views from a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path, help="checkpoint path")
    p.add_argument("--requests", required=True, type=Path, help="request JSON")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--samples", type=int, help="samples per ray (default: checkpoint's)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sample-poses", help="sample novel-view requests")
    p.add_argument("--scene", required=True, type=Path, help="scene directory")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--orbit", action="store_true", help="randomised orbit poses")
    g.add_argument("--dynamic", type=int, metavar="N", help="N trajectory locations, 3N requests")
    p.add_argument("--center", type=float, nargs=3, help="orbit centre (default: bounds centre)")
    p.add_argument("--altitude", type=float, nargs=2, default=(15.0, 50.0), help="lo hi metres")
    p.add_argument("--radius", type=float, nargs=2, default=(15.0, 50.0), help="lo hi metres")
    p.add_argument("--view-angle", type=float, nargs=2,
                   help="lo hi degrees below horizontal (default: aim at the centre)")
    p.add_argument("--count", type=int, default=10, help="orbit pose count")
    p.add_argument("--waypoints", type=int, default=0,
                   help="interpolated poses between consecutive orbit samples")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True, type=Path, help="request JSON path")
    p.set_defaults(func=cmd_sample_poses)

    p = sub.add_parser("annotate", help="extract boxes from mask images")
    p.add_argument("--masks", required=True, type=Path, help="directory of mask PNGs")
    p.add_argument("--palette", type=Path, help="palette JSON (omit for scalar masks)")
    p.add_argument("--out", required=True, type=Path, help="output detection export")
    _annot_flags(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("augment", help="render, annotate and export synthetic images")
    p.add_argument("--scene", required=True, type=Path, help="training scene directory")
    p.add_argument("--ckpt-im", required=True, type=Path, help="image field checkpoint")
    p.add_argument("--ckpt-bbox", type=Path, help="box field checkpoint (mask images)")
    p.add_argument("--palette", type=Path, help="palette JSON for the box field")
    p.add_argument("--requests", required=True, type=Path, help="request JSON")
    p.add_argument("--out", required=True, type=Path, help="output detection export")
    p.add_argument("--samples", type=int, help="samples per ray")
    _annot_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval-psnr", help="held-out PSNR table")
    p.add_argument("--ckpt", required=True, type=Path, help="checkpoint path")
    p.add_argument("--scene", required=True, type=Path, help="scene directory")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--out", type=Path, help="optional JSON output")
    p.set_defaults(func=cmd_eval_psnr)

    p = sub.add_parser("merge", help="merge real and synthetic detection exports")
    p.add_argument("--real", required=True, type=Path,
                   help="real detection export, or a scene directory (ground-truth boxes)")
    p.add_argument("--synthetic", required=True, type=Path, help="synthetic export")
    p.add_argument("--out", required=True, type=Path, help="merged export")
    p.set_defaults(func=cmd_merge)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (CommandError, ConfigError, SceneFormatError, CheckpointError, ValueError,
            KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
