"""Command-line entry points: synth, train, render, edit, eval.

Every hyperparameter has a default in code, may be set in a JSON config file
(``--config``) and overridden with ``--set key=value`` (dotted keys, JSON
values).  Flags win over the config file.

Exit codes: 0 success, 1 usage, 2 numeric failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import scenes
from .camera import CameraPose
from .dataset import _to_u8, generate_synthetic_scene, load_dataset
from .edit_compose import EditScript, render_view
from .errors import (ConfigurationError, InputError, LoadError, NumericError, UsageError,
                     ValidationError)
from .evaluation import psnr, render_image, soft_iou
from .field_network import load_checkpoint
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("objnerf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(base: dict, pairs):
    """Apply ``key=value`` strings to a nested dict; dotted keys descend."""
    out = json.loads(json.dumps(base))
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown option {key!r}")
            node = node[p]
        if leaf not in node:
            raise UsageError(f"unknown option {key!r}")
        node[leaf] = _parse_value(value)
    return out


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as exc:
        raise LoadError(path, "file not found") from exc
    except ValueError as exc:
        raise LoadError(path, f"invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise LoadError(path, "config must be a JSON object")
    return cfg


def _read_poses(path):
    """Poses from a dataset directory or a JSON list of pose dicts."""
    path = Path(path)
    file = path / "poses.json" if path.is_dir() else path
    try:
        with open(file) as f:
            raw = json.load(f)
        return [CameraPose.from_dict(d) for d in raw]
    except FileNotFoundError as exc:
        raise LoadError(file, "file not found") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(file, f"malformed poses ({exc})") from exc


def _select(items, views):
    if views is None:
        return list(range(len(items)))
    for v in views:
        if not 0 <= v < len(items):
            raise UsageError(f"view {v} out of range 0..{len(items) - 1}")
    return list(views)


def _save_png(path, rgb):
    Image.fromarray(_to_u8(rgb), "RGB").save(path)


def _save_depth(path, depth):
    np.asarray(depth, dtype="<f4").tofile(path)


def _load_model(path):
    model, extra = load_checkpoint(path)
    boxes = {
        int(k): (np.asarray(b[0]), np.asarray(b[1]))
        for k, b in extra.get("object_boxes", {}).items()
    }
    return model, extra, boxes


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, cfg):
    opts = apply_overrides(
        {"scene": "occlusion", "density": 30.0, "n_views": 60, "size": 64, "focal": 100.0,
         "radius": 2.8, "oracle_samples": 1024, "held_out": True},
        None,
    )
    opts.update({k: v for k, v in cfg.items() if k in opts})
    opts = apply_overrides(opts, args.set)
    if opts["scene"] not in scenes.SCENES:
        raise UsageError(f"unknown scene {opts['scene']!r}; choose from {sorted(scenes.SCENES)}")
    scene = scenes.SCENES[opts["scene"]](opts["density"])
    poses = scenes.arc_poses(opts["n_views"], radius=opts["radius"], focal=opts["focal"], size=opts["size"])
    val = []
    if opts["held_out"]:
        extra = scenes.held_out_poses(opts["radius"], opts["focal"], opts["size"])
        val = list(range(len(poses), len(poses) + len(extra)))
        poses = poses + extra
    out = Path(args.out)
    generate_synthetic_scene(scene, poses, opts["oracle_samples"], out)
    with open(out / "splits.json", "w") as f:
        json.dump({"train": [i for i in range(len(poses)) if i not in val], "val": val}, f)
    print(f"wrote {len(poses)} views ({len(val)} held out) to {out}")
    return EXIT_OK


def _dataset_val_views(path):
    f = Path(path) / "splits.json"
    if not f.exists():
        return []
    try:
        return json.loads(f.read_text()).get("val", [])
    except ValueError as exc:
        raise LoadError(f, f"invalid JSON ({exc})") from exc


def cmd_train(args, cfg):
    base = TrainConfig().to_dict()
    base["val_views"] = _dataset_val_views(args.data)
    for key, value in cfg.items():
        if key not in base:
            raise UsageError(f"unknown option {key!r} in config file")
        if isinstance(base[key], dict) and isinstance(value, dict):
            base[key].update(value)
        else:
            base[key] = value
    if args.seed is not None:
        base["seed"] = args.seed
    opts = apply_overrides(base, args.set)
    config = TrainConfig.from_dict(opts)
    data = load_dataset(args.data)
    model, history = train(data, config, out_dir=args.out)
    last = history[-1]
    print(f"trained {config.steps} steps: L_scn={last['L_scn']:.6f} L_obj={last['L_obj']:.6f}")
    print(f"checkpoint: {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def _field(text, n_objects):
    if text == "scene":
        return "scene"
    try:
        k = int(text)
    except ValueError:
        raise UsageError(f"--field must be 'scene' or an object id, got {text!r}") from None
    if not 1 <= k <= n_objects:
        raise UsageError(f"object id {k} out of range 1..{n_objects}")
    return k


def cmd_render(args, cfg):
    model, _, _ = _load_model(args.checkpoint)
    poses = _read_poses(args.poses)
    field = _field(args.field, model.n_objects)
    n_samples = int(cfg.get("n_samples", args.n_samples))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in _select(poses, args.views):
        res = render_image(model, poses[v], model.bounds, field, n_samples)
        _save_png(out / f"{v:04d}.png", res.color)
        if args.depth:
            _save_depth(out / f"{v:04d}.f32", res.depth)
    print(f"rendered to {out}")
    return EXIT_OK


def cmd_edit(args, cfg):
    model, _, boxes = _load_model(args.checkpoint)
    script = EditScript.load(args.script)
    poses = _read_poses(args.poses)
    n_samples = int(cfg.get("n_samples", args.n_samples))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in _select(poses, args.views):
        res = render_view(model, poses[v], script, n_samples=n_samples, default_boxes=boxes)
        _save_png(out / f"{v:04d}.png", res.color)
        if args.depth:
            _save_depth(out / f"{v:04d}.f32", res.depth)
    print(f"rendered edits to {out}")
    return EXIT_OK


def evaluate(model, data, views, n_samples=64):
    """Per-view scene PSNR and per-object soft IoU against the instance masks."""
    rows = []
    for v in views:
        res = render_image(model, data.poses[v], model.bounds, "scene", n_samples)
        row = {"view": v, "psnr": psnr(res.color, data.rgb[v]), "iou": {}}
        for k in range(1, model.n_objects + 1):
            o = render_image(model, data.poses[v], model.bounds, k, n_samples).opacity
            row["iou"][str(k)] = soft_iou(o, data.masks[v] == k)
        rows.append(row)
    mean_iou = {
        str(k): float(np.mean([r["iou"][str(k)] for r in rows])) for k in range(1, model.n_objects + 1)
    }
    return {"views": rows, "mean_psnr": float(np.mean([r["psnr"] for r in rows])), "mean_iou": mean_iou}


def cmd_eval(args, cfg):
    model, _, _ = _load_model(args.checkpoint)
    data = load_dataset(args.data)
    views = args.views if args.views is not None else (_dataset_val_views(args.data) or None)
    views = _select(data.poses, views)
    report = evaluate(model, data, views, int(cfg.get("n_samples", args.n_samples)))
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(f"{'view':>6} {'psnr':>8}  iou")
    for r in report["views"]:
        ious = " ".join(f"{k}:{x:.3f}" for k, x in r["iou"].items())
        print(f"{r['view']:>6} {r['psnr']:8.3f}  {ious}")
    print(f"{'mean':>6} {report['mean_psnr']:8.3f}  "
          + " ".join(f"{k}:{x:.3f}" for k, x in report["mean_iou"].items()))
    return EXIT_OK


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one option (repeatable; dotted keys, JSON values)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--workers", type=int, default=1,
                        help="worker count (work is vectorized in one process; values > 1 are accepted and ignored)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="objnerf", description="Object-compositional radiance fields at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render a procedural dataset with the analytic oracle")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train scene and object branches")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render novel views"),
                                 ("edit", cmd_edit, "render views of an edited scene")):
        r = sub.add_parser(name, parents=[common], help=helptext)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--poses", required=True, help="dataset directory or poses JSON file")
        r.add_argument("--out", required=True)
        r.add_argument("--views", type=int, nargs="+")
        r.add_argument("--n-samples", type=int, default=64)
        r.add_argument("--depth", action="store_true", help="also write .f32 depth maps")
        if name == "render":
            r.add_argument("--field", default="scene", help="'scene' or an object id")
        else:
            r.add_argument("--script", required=True, help="edit script JSON")
        r.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="PSNR and object IoU report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--views", type=int, nargs="+")
    e.add_argument("--n-samples", type=int, default=64)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = _read_config(args.config)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, ValidationError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, InputError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
