"""Command-line entry point tying the pipeline together.

Subcommands: demo-data, synth, train, infer, eval, gradcheck.  Commands
that take many knobs accept a JSON config file; explicit flags override
file values, and unknown file keys are rejected by name so typos cannot
silently fall back to defaults.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import gradcheck, metrics, network, synth
from . import train as train_mod
from .engine import ConfigError, ShapeError, tensor


def _dataclass_defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


NET_DEFAULTS = _dataclass_defaults(network.NetworkConfig)
TRAIN_DEFAULTS = {**NET_DEFAULTS, **_dataclass_defaults(train_mod.TrainConfig)}
SYNTH_DEFAULTS = _dataclass_defaults(synth.SynthesisParams)


def resolve_config(args, defaults: dict) -> dict:
    """defaults, then config-file values, then explicitly passed flags."""
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key in file_cfg:
            if key not in cfg:
                raise ConfigError(f"unknown config key '{key}' in {path}")
        cfg.update(file_cfg)
    for key in cfg:
        # flags use argparse.SUPPRESS, so presence means the user typed it
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


def _dump_requested(args, cfg: dict) -> bool:
    if getattr(args, "dump_config", False):
        print(json.dumps(cfg, sort_keys=True, indent=2))
        return True
    return False


# ---------------------------------------------------------------------------
# subcommands


def cmd_demo_data(args) -> int:
    out = Path(args.out)
    synth.write_demo_backgrounds(out / "backgrounds", n=args.n_backgrounds,
                                 size=args.size, seed=args.seed)
    synth.write_demo_assets(out / "assets", n=args.n_assets, seed=args.seed + 1)
    print(f"wrote {args.n_backgrounds} backgrounds and {args.n_assets} assets under {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args, SYNTH_DEFAULTS)
    if _dump_requested(args, cfg):
        return 0
    for name in ("backgrounds", "assets", "out"):
        if getattr(args, name) is None:
            raise ConfigError(f"--{name} is required")
    params = synth.SynthesisParams(**cfg)
    records = synth.generate_dataset(args.backgrounds, args.assets, params,
                                     args.n, args.out)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, TRAIN_DEFAULTS)
    if _dump_requested(args, cfg):
        return 0
    if args.data is None or args.out is None:
        raise ConfigError("--data and --out are required")
    net_cfg = network.NetworkConfig(**{k: cfg[k] for k in NET_DEFAULTS})
    train_cfg = train_mod.TrainConfig(**{k: cfg[k] for k in TRAIN_DEFAULTS
                                         if k not in NET_DEFAULTS})
    data = train_mod.load_training_set(args.data)
    result = train_mod.train(net_cfg, train_cfg, data, args.out,
                             resume_from=args.resume)
    last = result.history[-1]["loss_total"] if result.history else float("nan")
    print(f"trained {len(result.history)} steps (final loss {last:.6f}) "
          f"-> {result.checkpoint_path}")
    return 0


def cmd_infer(args) -> int:
    tensors = ckpt_io.load_checkpoint(args.ckpt)
    net_cfg = train_mod.network_config_from_checkpoint(tensors)
    params = network.init_params(net_cfg, seed=0)
    named = network.named_parameters(params)
    ckpt_io.load_into(named, tensors)

    img = synth.load_image(args.input)
    out = network.forward(params, tensor(img[None].astype(np.float32)),
                          net_cfg, mode="infer")
    restored = out.images[3].numpy()[0]
    mask = out.masks[3].numpy()[0, 0]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth.save_image(out_dir / "restored.png", restored)
    synth.save_probability(out_dir / "mask.png", mask)
    if args.verbose:
        print(json.dumps({
            "decoder_nodes": [list(n) for n in out.stats["decoder_nodes"]],
            "head_calls": out.stats["head_calls"],
        }))
    print(f"wrote {out_dir / 'restored.png'} and {out_dir / 'mask.png'}")
    return 0


def _sorted_pngs(directory, kind) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{kind} directory not found: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise ConfigError(f"no .png files in {kind} directory {d}")
    return files


def cmd_eval(args) -> int:
    preds = _sorted_pngs(args.pred_dir, "pred")
    gts = _sorted_pngs(args.gt_dir, "gt")
    masks = _sorted_pngs(args.mask_dir, "mask")
    if not (len(preds) == len(gts) == len(masks)):
        raise ConfigError(f"file counts differ: pred {len(preds)}, "
                          f"gt {len(gts)}, mask {len(masks)}")
    pred_masks = None
    if args.pred_mask_dir:
        pred_masks = _sorted_pngs(args.pred_mask_dir, "pred-mask")
        if len(pred_masks) != len(preds):
            raise ConfigError(f"file counts differ: pred {len(preds)}, "
                              f"pred-mask {len(pred_masks)}")

    rows = []
    for i, (pp, gp, mp) in enumerate(zip(preds, gts, masks)):
        pred = synth.load_image(pp)
        gt = synth.load_image(gp)
        gt_mask = synth.load_mask(mp)
        if pred_masks is not None:
            row = metrics.evaluate_image(pred, gt, gt_mask,
                                         synth.load_mask(pred_masks[i]))
        else:
            row = {"psnr": metrics.psnr(pred, gt), "ssim": metrics.ssim(pred, gt),
                   "rmse": metrics.rmse(pred, gt),
                   "rmse_w": metrics.rmse_w(pred, gt, gt_mask),
                   "f1": None, "iou": None}
        rows.append({"path": pp.name, **row})
    metrics.write_report(args.report, rows)
    agg = metrics.aggregate_rows(rows)
    print(json.dumps({k: v for k, v in agg.items() if k != "path"}))
    return 0


def cmd_gradcheck(args) -> int:
    suites = {"ops": gradcheck.ops_suite, "block": gradcheck.block_suite,
              "net": gradcheck.net_suite}
    results = suites[args.scope](seed=args.seed)
    failures = 0
    for name, err, tol in results:
        ok = err <= tol
        failures += not ok
        print(f"{'ok' if ok else 'FAIL':4s} {name:22s} max_rel {err:.3e}  tol {tol:g}")
    print(f"gradcheck {args.scope}: {len(results) - failures}/{len(results)} within tolerance")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="JSON file of config keys; flags override it")
    p.add_argument("--dump-config", action="store_true",
                   help="print the merged effective config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demark",
        description="Watermark-removal pipeline: synthesize data, train, "
                    "run inference, evaluate, verify gradients.",
        epilog="WMF_THREADS caps worker threads; WMF_NO_EXT forces the "
               "pure-numpy kernel backend.")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("demo-data", help="write procedural backgrounds and watermark assets")
    p.add_argument("--out", required=True)
    p.add_argument("--n-backgrounds", type=int, default=8)
    p.add_argument("--n-assets", type=int, default=4)
    p.add_argument("--size", type=int, default=64, help="background edge length")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo_data)

    p = sub.add_parser("synth", help="composite watermarks over backgrounds")
    p.add_argument("--backgrounds")
    p.add_argument("--assets")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--seed", type=int, default=S, help="dataset seed")
    p.add_argument("--size", type=int, default=S, help="background edge length")
    p.add_argument("--alpha", dest="alpha_range", nargs=2, type=float, default=S,
                   metavar=("LO", "HI"), help="global opacity range")
    p.add_argument("--scale", dest="scale_range", nargs=2, type=float, default=S,
                   metavar=("LO", "HI"), help="watermark size as fraction of background")
    p.add_argument("--rotation", dest="rotation_range", nargs=2, type=float, default=S,
                   metavar=("LO", "HI"), help="rotation range in degrees")
    p.add_argument("--mask-threshold", type=float, default=S,
                   help="effective alpha above which a pixel counts as watermarked")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a synthesized dataset")
    p.add_argument("--data", help="dataset directory from `synth`")
    p.add_argument("--out", help="run directory for checkpoint + log")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--image-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--weight-decay", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--eval-every", type=int, default=S)
    p.add_argument("--checkpoint-every", type=int, default=S)
    p.add_argument("--extractor-seed", type=int, default=S)
    p.add_argument("--lambda-d", nargs=3, type=float, default=S,
                   metavar=("L1", "L2", "L3"), help="per-depth loss weights")
    p.add_argument("--lambda-mask", type=float, default=S)
    p.add_argument("--lambda-perc", type=float, default=S)
    p.add_argument("--base-channels", type=int, default=S)
    p.add_argument("--blocks-per-level", nargs=4, type=int, default=S)
    p.add_argument("--heads-per-level", nargs=4, type=int, default=S)
    p.add_argument("--no-nested", dest="nested_enabled", action="store_false",
                   default=S, help="use only the plain decoder diagonal")
    p.add_argument("--no-deep-sup", dest="deep_supervision_enabled",
                   action="store_false", default=S,
                   help="supervise only the deepest output")
    p.add_argument("--no-gdfn", dest="gdfn_enabled", action="store_false",
                   default=S, help="drop the gated feed-forward sublayer")
    p.add_argument("--gdfn-dconv", action="store_true", default=S,
                   help="add a depthwise conv inside the feed-forward gate")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore one watermarked image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="watermarked PNG")
    p.add_argument("--out", required=True, help="directory for restored.png + mask.png")
    p.add_argument("--verbose", action="store_true",
                   help="print decoder node and head-call instrumentation")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--mask-dir", required=True, help="ground-truth masks")
    p.add_argument("--pred-mask-dir", help="predicted masks; omits F1/IoU when absent")
    p.add_argument("--report", required=True, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("ops", "block", "net"), required=True)
    p.add_argument("--dtype", choices=("f64",), default="f64",
                   help="checks only run in 64-bit")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ckpt_io.CheckpointError, synth.PlacementError,
            train_mod.TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
