"""Command-line entry point: synth, train, predict, eval, gradcheck, convert, info.

Exit codes: 0 ok, 2 usage/config error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import imageio
from . import tensor as T
from .geometry import FACE_NAMES, SphereDims, cubemap_to_equirect, equirect_to_cubemap
from .models import CheckpointError, ConfigError, ModelSpec, build_model, load_checkpoint
from .renderer import generated_scenes, manifest_dir, read_manifest, read_triplet, render_dataset
from .scene import SceneError, parse_scene

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
FACE_FILES = ("px", "nx", "py", "ny", "pz", "nz")


class UsageError(Exception):
    """Bad flag combination or config file."""


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like HxW, got {text!r}") from None
    return h, w


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panodepth", description="360-degree depth estimation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="text file of 'key value' lines; keys must not repeat flags")
        return p

    p = add("synth", "render a synthetic color/depth/mask dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenes", type=int, help="number of generated rooms")
    src.add_argument("--scene-file", nargs="+", help="scene description file(s)")
    p.add_argument("--width", type=int, default=256, help="panorama width (height is width / 2)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = add("train", "train a depth network on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=("rectnet", "uresnet"), default="rectnet")
    p.add_argument("--channels", type=int, default=8, help="base channel width")
    p.add_argument("--dims", type=_dims, help="input HxW (default: from the dataset)")
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--padding", choices=T.PADDING_MODES, default="sphere")
    p.add_argument("--out", required=True)

    p = add("predict", "predict a depth map for one color panorama")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="PPM color image")
    p.add_argument("--out", required=True, help="PFM depth output")

    p = add("eval", "score a checkpoint on a manifest, or one predicted PFM")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--pred", help="predicted depth PFM (instead of --ckpt/--manifest)")
    p.add_argument("--gt", help="ground-truth depth PFM for --pred")
    p.add_argument("--mask", help="mask PGM for --pred (default: all valid)")
    p.add_argument("--out", help="per-sample CSV")
    p.add_argument("--jobs", type=int, default=1)

    p = add("gradcheck", "compare analytic and finite-difference gradients of a model")
    p.add_argument("--arch", choices=("rectnet", "uresnet"), default="rectnet")
    p.add_argument("--width", type=int, default=2, help="base channel width")
    p.add_argument("--dims", type=_dims, default=(8, 16))
    p.add_argument("--samples", type=int, default=8, help="probed entries per parameter tensor")
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("convert", "equirectangular <-> cubemap conversion")
    p.add_argument("--to", choices=("cubemap", "equirect"), required=True)
    p.add_argument("--in", dest="input", required=True, help="image file, or face directory for --to equirect")
    p.add_argument("--out", required=True, help="face directory, or image file for --to equirect")
    p.add_argument("--face-size", type=int, help="default: panorama height")
    p.add_argument("--width", type=int, help="output panorama width (default: 4 x face size)")

    p = add("info", "describe a manifest or checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    return ap


def _explicit(parser, argv) -> set[str]:
    """Destinations set by flags actually present in argv."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    given = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    found = set()
    for p in sub.choices.values():
        for action in p._actions:
            if given & set(action.option_strings):
                found.add(action.dest)
    return found


def _apply_config(parser, args, argv):
    """Merge ``key value`` lines from --config; a key also given as a flag is an error."""
    if not args.config:
        return args
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    explicit = _explicit(parser, argv)
    try:
        lines = Path(args.config).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc.strerror}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{args.config}:{n}: unknown key {key!r} for {args.command}")
        if dest in explicit:
            raise UsageError(f"{args.config}:{n}: {key!r} is also given on the command line")
        action = actions[dest]
        value = value.strip()
        try:
            if action.nargs == "+":
                parsed = [action.type(v) if action.type else v for v in value.split()]
            elif action.type is not None:
                parsed = action.type(value)
            else:
                parsed = value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}:{n}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and parsed not in action.choices:
            raise UsageError(f"{args.config}:{n}: {key!r} must be one of {list(action.choices)}")
        setattr(args, dest, parsed)
    return args


def _echo(args):
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + " ".join(f"{k}={v}" for k, v in items.items()), flush=True)


# subcommands ---------------------------------------------------------------

def cmd_synth(args):
    dims = SphereDims.from_width(args.width)
    if args.scene_file:
        scenes = [(Path(f).stem, parse_scene(Path(f).read_text())) for f in args.scene_file]
    else:
        count = 1 if args.scenes is None else args.scenes
        if count < 1:
            raise ConfigError("--scenes must be >= 1")
        scenes = generated_scenes(count, args.seed)
    records = render_dataset(scenes, dims, args.out, jobs=args.jobs)
    print(f"wrote {len(records)} samples ({len(scenes)} scenes, {dims.width}x{dims.height}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .training import TrainConfig, train

    records = read_manifest(args.manifest)
    if args.dims is None:
        if not records:
            raise ConfigError(f"{args.manifest}: no samples")
        first = imageio.read_pfm(os.path.join(manifest_dir(args.manifest), records[0].depth))
        args.dims = first.shape
    h, w = args.dims
    spec = ModelSpec(args.arch, h, w, args.channels, dropout=args.dropout, padding=args.padding)
    cfg = TrainConfig(spec, args.manifest, out_dir=args.out, batch_size=args.batch_size,
                      iterations=args.iterations, lr=args.lr, seed=args.seed)
    every = max(args.iterations // 20, 1)
    result = train(cfg, lambda r: print(f"step {r[0]} loss {r[1]:.6f}", flush=True) if r[0] % every == 0 else None)
    last = result.rows[-1][1] if result.rows else float("nan")
    print(f"final loss {last:.6f}; checkpoint {result.checkpoint}; log {result.log}")
    return EXIT_OK


def cmd_predict(args):
    from .training import predict

    color = imageio.read_ppm(args.input)
    depth = predict(args.ckpt, color)
    imageio.write_pfm(args.out, depth)
    print(f"wrote {args.out} ({depth.shape[1]}x{depth.shape[0]}, depth {depth.min():.3f}..{depth.max():.3f} m)")
    return EXIT_OK


def cmd_eval(args):
    from .evaluation import compute_metrics, evaluate, format_record, write_metrics_csv

    if args.pred:
        if args.ckpt or args.manifest or not args.gt:
            raise UsageError("--pred needs --gt and excludes --ckpt/--manifest")
        pred, gt = imageio.read_pfm(args.pred), imageio.read_pfm(args.gt)
        mask = imageio.read_mask(args.mask) if args.mask else np.ones(gt.shape, np.uint8)
        rec = compute_metrics(pred, gt, mask)
        if args.out:
            write_metrics_csv(args.out, [(args.pred, rec)])
        print(format_record(rec))
        return EXIT_OK
    if not (args.ckpt and args.manifest):
        raise UsageError("eval needs --ckpt and --manifest, or --pred and --gt")
    result = evaluate(args.ckpt, args.manifest, args.out, jobs=args.jobs)
    for name, reason in result.skipped:
        print(f"skipped {name}: {reason}", file=sys.stderr)
    if result.aggregate is not None:
        print(f"{len(result.samples)} samples: {format_record(result.aggregate)}")
    return EXIT_IO if result.skipped else EXIT_OK


def cmd_gradcheck(args):
    from .training import LossWeights, downscale_gt, loss

    h, w = args.dims
    spec = ModelSpec(args.arch, h, w, args.width)
    model = build_model(spec, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    x = T.tensor(rng.random((1, 3, h, w)), np.float64, requires_grad=True)
    gt = rng.uniform(1.0, 5.0, (1, 1, h, w))
    mask = (rng.random((1, 1, h, w)) > 0.2).astype(np.uint8)
    targets = {s: downscale_gt(gt, mask, s, 20.0) for s in spec.scales}
    weights = LossWeights.default(spec.scales)

    def objective():
        out = model(x)
        return loss(out.preds, {s: t[0] for s, t in targets.items()}, {s: t[1] for s, t in targets.items()}, weights).total

    err = T.grad_check(objective, model.parameters() + [x], samples=args.samples, seed=args.seed)
    print(f"{args.arch} width {args.width} dims {h}x{w}: max relative error {err:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if err < args.tol else EXIT_NUMERIC


def _read_image(path):
    return imageio.read_pfm(path) if str(path).endswith(".pfm") else imageio.read_ppm(path)


def _write_image(path, img):
    if str(path).endswith(".pfm"):
        imageio.write_pfm(path, img)
    else:
        imageio.write_ppm(path, img)


def cmd_convert(args):
    if args.to == "cubemap":
        img = _read_image(args.input)
        SphereDims.of(img)
        size = args.face_size or img.shape[0]
        faces = equirect_to_cubemap(img, size)
        ext = Path(args.input).suffix or ".ppm"
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for tag, face in zip(FACE_FILES, faces):
            _write_image(out / f"face_{tag}{ext}", face)
        print(f"wrote 6 faces {size}x{size} ({', '.join(FACE_NAMES)}) to {out}")
        return EXIT_OK
    src = Path(args.input)
    found = [sorted(src.glob(f"face_{tag}.*")) for tag in FACE_FILES]
    missing = [tag for tag, f in zip(FACE_FILES, found) if not f]
    if missing:
        raise FileNotFoundError(f"{src}: missing faces {', '.join(missing)}")
    faces = [_read_image(f[0]) for f in found]
    dims = SphereDims.from_width(args.width or 4 * faces[0].shape[0])
    _write_image(args.out, cubemap_to_equirect(faces, dims))
    print(f"wrote {args.out} ({dims.width}x{dims.height})")
    return EXIT_OK


def cmd_info(args):
    if not (args.manifest or args.ckpt):
        raise UsageError("info needs --manifest or --ckpt")
    if args.manifest:
        records = read_manifest(args.manifest)
        scenes = sorted({r.scene_id for r in records})
        dims = "n/a"
        if records:
            t = read_triplet(*(os.path.join(manifest_dir(args.manifest), p)
                               for p in (records[0].color, records[0].depth, records[0].mask)))
            dims = f"{t.depth.shape[1]}x{t.depth.shape[0]}"
        print(f"manifest {args.manifest}: {len(records)} records, {len(scenes)} scenes, dims {dims}")
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        print(f"checkpoint {args.ckpt}: step {model.step}, {model.n_params} parameters")
        print(f"spec {model.spec.to_json()}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "convert": cmd_convert, "info": cmd_info}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        args = _apply_config(parser, args, argv)
        np.random.seed(args.seed % 2**32)
        _echo(args)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, imageio.FormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
