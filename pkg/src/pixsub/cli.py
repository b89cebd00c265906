"""Command-line entry point: ``pixsub {degrade,sr,train,eval,check-constraint}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
failure (an iterative refiner's divergence guard tripped).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from pixsub.cascade import run_cascade, train_cascade, train_soft_constraint
from pixsub.config import ConfigError, RunConfig
from pixsub.degrade import degrade
from pixsub.formation import constraint_residual
from pixsub.image import SUPPORTED_SUFFIXES, Image, ImageIOError, load_image, save_image
from pixsub.metrics import evaluate_sr
from pixsub.neural import WeightFileError, save_weights

log = logging.getLogger("pixsub")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


_SCALE_SUFFIX = re.compile(r"_x\d+$")


def base_stem(path: Path) -> str:
    """File stem without a trailing ``_x<s>`` scale tag."""
    return _SCALE_SUFFIX.sub("", path.stem)


def list_images(path) -> list:
    p = Path(path)
    if not str(path):
        raise ConfigError("no input path given")
    if p.is_file():
        return [p]
    if p.is_dir():
        return sorted(f for f in p.iterdir() if f.suffix.lower() in SUPPORTED_SUFFIXES and f.is_file())
    raise DataError(f"{p} does not exist")


def _need(cfg: RunConfig, key: str) -> str:
    v = cfg[key]
    if not v:
        raise ConfigError(f"{key} is required (set it in the config or with a flag)")
    return v


def _fmt_num(v: float, digits: int = 4) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def _json_num(v):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return _json_num(obj)


def _write_json(path: Path, payload):
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_degrade(cfg: RunConfig, args) -> int:
    spec = cfg.degrade_spec()
    inputs = list_images(_need(cfg, "io.input"))
    if not inputs:
        raise DataError(f"no images found in {cfg['io.input']}")
    out_dir = Path(_need(cfg, "io.output"))
    out_dir.mkdir(parents=True, exist_ok=True)
    base_seed = cfg["degrade.seed"]
    entries = []
    for i, src in enumerate(inputs):
        hr = load_image(src)
        s = spec.scale
        if hr.width % s or hr.height % s:
            raise DataError(f"{src.name}: {hr.width}x{hr.height} is not divisible by scale {s}")
        seed = base_seed + i
        lr = degrade(hr, spec, seed)
        dst = out_dir / f"{src.stem}_x{s}.png"
        save_image(lr, dst)
        entries.append({"input": str(src), "output": dst.name, "seed": seed,
                        "hr_size": [hr.width, hr.height], "lr_size": [lr.width, lr.height]})
        log.info("%s -> %s", src.name, dst.name)
    manifest = {
        "mode": spec.mode,
        "scale": spec.scale,
        "sigma": spec.blur_sigma if spec.mode == "gaussian" else None,
        "kernel_size": spec.blur_kernel().size if spec.mode == "gaussian" else None,
        "noise_level": spec.noise_level,
        "seed": base_seed,
        "files": entries,
    }
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK


def cmd_sr(cfg: RunConfig, args) -> int:
    ccfg = cfg.cascade_config()
    inputs = list_images(_need(cfg, "io.input"))
    if not inputs:
        raise DataError(f"no images found in {cfg['io.input']}")
    out_path = Path(_need(cfg, "io.output"))
    single_file = len(inputs) == 1 and out_path.suffix.lower() in SUPPORTED_SUFFIXES
    if not single_file:
        out_path.mkdir(parents=True, exist_ok=True)
    gt_dir = Path(cfg["io.gt"]) if cfg["io.gt"] else None
    diverged = False
    for src in inputs:
        lr = load_image(src)
        stem = base_stem(src)
        hr_gt = None
        if gt_dir is not None:
            gt_path = _find_stem(gt_dir, stem)
            hr_gt = load_image(gt_path) if gt_path else None
        sr, trace = run_cascade(lr, ccfg, hr_gt=hr_gt)
        dst = out_path if single_file else out_path / f"{stem}.png"
        save_image(sr, dst)
        diverged |= any(rec.diverged for rec in trace)
        if args.trace:
            tdir = dst.parent / "trace"
            tdir.mkdir(exist_ok=True)
            for t, rec in enumerate(trace, 1):
                save_image(rec.output, tdir / f"{stem}_stage{t}_I.png")
                save_image(rec.substituted, tdir / f"{stem}_stage{t}_Bhat.png")
            _write_json(tdir / f"{stem}_trace.json",
                        {"image": src.name, "stages": [rec.summary() for rec in trace]})
        if args.check:
            for t, rec in enumerate(trace, 1):
                print(f"{stem} stage {t}: B-hat residual mse={rec.substituted_residual.mse!r} "
                      f"max_abs={rec.substituted_residual.max_abs!r}; "
                      f"I_t regenerated mse={rec.output_residual.mse:.6g} "
                      f"psnr={_fmt_num(rec.output_residual.psnr, 2)}")
    if diverged:
        log.error("divergence guard tripped in at least one iterative stage")
        return EXIT_NUMERIC
    return EXIT_OK


def _find_stem(directory: Path, stem: str):
    for f in list_images(directory):
        if base_stem(f) == stem:
            return f
    return None


def _crop_pair(lr: Image, hr: Image, patch: int, s: int, rng):
    if patch <= 0 or (lr.height <= patch and lr.width <= patch):
        return lr, hr
    ph, pw = min(patch, lr.height), min(patch, lr.width)
    y = int(rng.integers(0, lr.height - ph + 1))
    x = int(rng.integers(0, lr.width - pw + 1))
    return (Image(lr.data[:, y:y + ph, x:x + pw]),
            Image(hr.data[:, y * s:(y + ph) * s, x * s:(x + pw) * s]))


def load_pairs(cfg: RunConfig):
    lr_files = list_images(_need(cfg, "io.lr"))
    gt_dir = Path(_need(cfg, "io.gt"))
    s = cfg["scale"]
    rng = np.random.default_rng(cfg["train.seed"])
    pairs = []
    for f in lr_files:
        gt = _find_stem(gt_dir, base_stem(f))
        if gt is None:
            log.warning("no ground truth for %s; skipped", f.name)
            continue
        lr, hr = load_image(f), load_image(gt)
        if (hr.height, hr.width) != (lr.height * s, lr.width * s) or hr.channels != lr.channels:
            raise DataError(f"{f.name}: LR {lr.shape} and HR {hr.shape} inconsistent at x{s}")
        pairs.append(_crop_pair(lr, hr, cfg["train.patch"], s, rng))
    if not pairs:
        raise DataError("training set is empty")
    return pairs


def cmd_train(cfg: RunConfig, args) -> int:
    ccfg = cfg.cascade_config()
    pairs = load_pairs(cfg)
    out_dir = Path(_need(cfg, "io.output"))
    out_dir.mkdir(parents=True, exist_ok=True)
    opt = dict(lr=cfg["train.lr"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"], eps=cfg["train.eps"])
    epochs, seed = cfg["train.epochs"], cfg["train.seed"]
    if epochs < 0:
        raise ConfigError("train.epochs must be >= 0")
    try:
        if cfg["train.loss"] == "soft":
            if ccfg.T != 1:
                log.warning("soft-constraint loss trains a single feed-forward stage; ignoring stages 2..%d", ccfg.T)
                ccfg = ccfg.truncated(1)
            result = train_soft_constraint(pairs, ccfg, cfg["train.lambda"], epochs, seed, **opt)
        else:
            result = train_cascade(pairs, ccfg, epochs, seed, **opt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    written = set()
    for t, net in enumerate(result.nets, 1):
        if id(net) in written:
            continue
        written.add(id(net))
        save_weights(net.params, out_dir / f"stage{t}.pxw")
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "loss"])
        for stage, step, loss in result.history:
            w.writerow([stage, step, repr(float(loss))])
    for t, (before, after) in sorted(result.stage_losses.items()):
        print(f"stage {t}: mean L1 {before:.6f} -> {after:.6f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    s = cfg["scale"]
    protocol = cfg["eval.protocol"]
    sr_files = list_images(_need(cfg, "io.input"))
    gt_dir = Path(_need(cfg, "io.gt"))
    lr_dir = Path(cfg["io.lr"]) if cfg["io.lr"] else None
    spec = cfg.degrade_spec()
    rows, regen_rows, skipped = [], [], []
    for f in sr_files:
        stem = base_stem(f)
        gt = _find_stem(gt_dir, stem)
        if gt is None:
            log.warning("no ground truth matching %s; skipped", f.name)
            skipped.append(f.name)
            continue
        sr, hr = load_image(f), load_image(gt)
        if sr.shape != hr.shape:
            log.warning("%s: size %s differs from ground truth %s; skipped", f.name, sr.shape, hr.shape)
            skipped.append(f.name)
            continue
        rep = evaluate_sr(sr, hr, s, protocol)
        rows.append({"image": stem, "psnr": rep.psnr, "ssim": rep.ssim, "mse": rep.mse})
        if lr_dir is not None:
            lrf = _find_stem(lr_dir, stem)
            if lrf is None:
                log.warning("no LR observation for %s; regenerated-LR row skipped", stem)
            else:
                res = constraint_residual(sr, load_image(lrf), spec, quantize=cfg["eval.lr_mode"] == "8bit")
                regen_rows.append({"image": stem, "psnr": res.psnr, "mse": res.mse, "mse_8bit": res.mse_8bit})
    if not rows:
        print("no image pairs evaluated", file=sys.stderr)
        return EXIT_DATA

    def mean_row(rs, keys):
        return {"image": "MEAN", **{k: float(np.mean([r[k] for r in rs])) for k in keys}}

    mean = mean_row(rows, ("psnr", "ssim", "mse"))
    print(f"protocol: {protocol}, scale x{s}")
    print(f"{'image':<24} {'PSNR':>10} {'SSIM':>8}")
    for r in rows + [mean]:
        print(f"{r['image']:<24} {_fmt_num(r['psnr']):>10} {_fmt_num(r['ssim']):>8}")
    payload = {"protocol": protocol, "scale": s, "images": rows, "mean": mean, "skipped": skipped}
    if regen_rows:
        rmean = mean_row(regen_rows, ("psnr", "mse", "mse_8bit"))
        print()
        print(f"regenerated LR ({cfg['eval.lr_mode']}, {spec.mode})")
        print(f"{'image':<24} {'PSNR':>10} {'MSE(0-255)':>12}")
        for r in regen_rows + [rmean]:
            print(f"{r['image']:<24} {_fmt_num(r['psnr']):>10} {_fmt_num(r['mse_8bit']):>12}")
        payload["regenerated_lr"] = {"mode": cfg["eval.lr_mode"], "images": regen_rows, "mean": rmean}
    if args.json:
        _write_json(Path(args.json), payload)
    return EXIT_OK


def cmd_check_constraint(cfg: RunConfig, args) -> int:
    sr = load_image(_need(cfg, "io.input"))
    lr = load_image(_need(cfg, "io.lr"))
    spec = cfg.degrade_spec()
    rep = constraint_residual(sr, lr, spec, quantize=cfg["eval.lr_mode"] == "8bit")
    payload = {"sr": cfg["io.input"], "lr": cfg["io.lr"], "mode": spec.mode, "scale": spec.scale, **rep.as_dict()}
    if args.json:
        print(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
    else:
        print(f"regenerated LR vs observation ({spec.mode}, x{spec.scale}, {cfg['eval.lr_mode']})")
        print(f"  MSE      {rep.mse!r}")
        print(f"  MSE(255) {rep.mse_8bit!r}")
        print(f"  PSNR     {_fmt_num(rep.psnr)} dB")
        print(f"  max|d|   {rep.max_abs!r}")
    return EXIT_OK


COMMANDS = {
    "degrade": cmd_degrade,
    "sr": cmd_sr,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-constraint": cmd_check_constraint,
}

# flag dest -> config key
FLAG_KEYS = {
    "scale": "scale",
    "mode": "degrade.mode",
    "sigma": "degrade.sigma",
    "noise": "degrade.noise",
    "stages": "cascade.T",
    "epochs": "train.epochs",
    "loss": "train.loss",
    "lam": "train.lambda",
    "patch": "train.patch",
    "protocol": "eval.protocol",
    "lr_mode": "eval.lr_mode",
    "input": "io.input",
    "output": "io.output",
    "gt": "io.gt",
    "lr": "io.lr",
    "weights": "io.weights",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--scale", type=str)
    common.add_argument("-i", "--input", type=str)
    common.add_argument("-o", "--output", type=str)
    common.add_argument("--gt", type=str, help="ground-truth HR directory")
    common.add_argument("--lr", type=str, help="LR image or directory")
    common.add_argument("--seed", type=str)

    parser = argparse.ArgumentParser(prog="pixsub", description="Super-resolution with an exact image-formation constraint.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[common], help="make LR observations from HR images")
    p.add_argument("--mode", choices=["bicubic", "gaussian"])
    p.add_argument("--sigma", type=str)
    p.add_argument("--noise", type=str)

    p = sub.add_parser("sr", parents=[common], help="super-resolve LR images with the cascade")
    p.add_argument("-T", "--stages", type=str)
    p.add_argument("--mode", choices=["bicubic", "gaussian"])
    p.add_argument("--weights", type=str, help="directory holding stage<i>.pxw files")
    p.add_argument("--trace", action="store_true", help="write per-stage images and a JSON trace")
    p.add_argument("--check", action="store_true", help="print the constraint residual of every stage")

    p = sub.add_parser("train", parents=[common], help="train toynet stages")
    p.add_argument("-T", "--stages", type=str)
    p.add_argument("--mode", choices=["bicubic", "gaussian"])
    p.add_argument("--epochs", type=str)
    p.add_argument("--loss", choices=["hard", "soft"])
    p.add_argument("--lambda", dest="lam", type=str)
    p.add_argument("--patch", type=str)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM against ground truth")
    p.add_argument("--mode", choices=["bicubic", "gaussian"])
    p.add_argument("--protocol", choices=["y-channel-shaved", "rgb-full"])
    p.add_argument("--lr-mode", choices=["float", "8bit"])
    p.add_argument("--json", help="also write the report as JSON")

    p = sub.add_parser("check-constraint", parents=[common], help="regenerated-LR residual of one SR image")
    p.add_argument("--mode", choices=["bicubic", "gaussian"])
    p.add_argument("--lr-mode", choices=["float", "8bit"])
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(*item.split("=", 1))
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg.set(key, str(val))
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed" if args.command == "train" else "degrade.seed", args.seed)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"pixsub: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ImageIOError, WeightFileError, FileNotFoundError, ValueError) as exc:
        print(f"pixsub: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
