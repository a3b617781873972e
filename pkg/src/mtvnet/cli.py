"""Command-line interface: make-data, train, eval, lam, profile.

Artifacts are written atomically (temp-then-rename).  The data store root
defaults to $MTVNET_DATA_DIR, falling back to ./data.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import torch

from . import analysis, config as config_mod, evaluator, trainer, volumes
from .network import MtvnetModel, load_params
from .volumes import VOLUME_SUFFIX, Volume, atomic_write_text

logger = logging.getLogger("mtvnet")


def data_root(override: str | None) -> str:
    return override or os.environ.get("MTVNET_DATA_DIR", "data")


def _usage_error(message: str) -> SystemExit:
    print(f"usage error: {message}", file=sys.stderr)
    return SystemExit(2)


def _parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise _usage_error(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_configs(args, extra: dict[str, str] | None = None):
    overrides = _parse_overrides(getattr(args, "set", None))
    overrides.update(extra or {})
    if getattr(args, "config", None):
        model_cfg, train_cfg = config_mod.load_config(args.config, overrides)
    else:
        items = {"preset": args.preset}
        items.update(overrides)
        model_cfg, train_cfg = config_mod.configs_from_items(items)
    return model_cfg, train_cfg


def _load_pairs(root: str, limit: int | None = None):
    hr_paths = volumes.list_store(os.path.join(root, "hr"))
    pairs = []
    for hr_path in hr_paths[:limit]:
        lr_path = os.path.join(root, "lr", os.path.basename(hr_path))
        if not os.path.exists(lr_path):
            raise FileNotFoundError(f"no LR counterpart for {hr_path}")
        pairs.append((volumes.read_volume(lr_path), volumes.read_volume(hr_path)))
    if not pairs:
        raise FileNotFoundError(f"no volume pairs under {root} "
                                f"(expected hr/*{VOLUME_SUFFIX} and lr/*{VOLUME_SUFFIX})")
    return pairs


def cmd_make_data(args) -> int:
    root = data_root(args.data_dir)
    hr_volumes = volumes.make_synthetic_corpus(args.generator, args.count,
                                               args.edge, args.seed)
    hr_dir = os.path.join(root, "hr")
    lr_dir = os.path.join(root, "lr")
    os.makedirs(hr_dir, exist_ok=True)
    os.makedirs(lr_dir, exist_ok=True)
    written = []
    for vol in hr_volumes:
        hr_path = os.path.join(hr_dir, vol.name + VOLUME_SUFFIX)
        lr_path = os.path.join(lr_dir, vol.name + VOLUME_SUFFIX)
        volumes.write_volume(vol, hr_path)
        volumes.write_volume(volumes.degrade(vol, args.scale, blur=args.blur), lr_path)
        written += [hr_path, lr_path]
    for path in written:
        print(f"wrote {path}")
    print(f"make-data ok generator={args.generator} count={args.count} "
          f"edge={args.edge} scale={args.scale} seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.steps is not None:
        extra["total_iters"] = str(args.steps)
        extra["milestone_fracs"] = ",".join(str(f) for f in config_mod.MILESTONE_FRACS)
    if args.seed is not None:
        extra["seed"] = str(args.seed)
    model_cfg, train_cfg = _load_configs(args, extra)
    pairs = _load_pairs(data_root(args.data_dir))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "resolved.cfg"),
                      config_mod.render_config(model_cfg, train_cfg))
    if args.resume:
        state = trainer.load_checkpoint(args.resume, model_cfg, train_cfg)
    else:
        state = trainer.init_train_state(model_cfg, train_cfg)
    steps = train_cfg.total_iters - state.iteration
    if steps <= 0:
        print(f"train ok iterations={state.iteration} (nothing to do)")
        return 0
    trainer.train(state, pairs, steps, out_dir=args.out,
                  ckpt_interval=args.ckpt_interval, pad=args.pad)
    final_loss = state.trace[-1][1] if state.trace else float("nan")
    print(f"wrote {os.path.join(args.out, 'last.params')}")
    print(f"wrote {os.path.join(args.out, 'loss_trace.csv')}")
    print(f"train ok iterations={state.iteration} final_loss={final_loss:.6f}")
    return 0


def _build_predictor(args, model_cfg):
    if args.model == "trilinear":
        return evaluator.TrilinearPredictor(model_cfg.scale,
                                            model_cfg.finest.context_extent)
    model = MtvnetModel(model_cfg)
    state = load_params(args.ckpt)
    model.load_state_dict(state)
    return evaluator.ModelPredictor(model)


def cmd_eval(args) -> int:
    model_cfg, _ = _load_configs(args)
    if args.model == "checkpoint" and not args.ckpt:
        raise _usage_error("eval: --ckpt is required unless --model trilinear")
    predictor = _build_predictor(args, model_cfg)
    pairs = _load_pairs(data_root(args.data_dir), limit=args.limit)
    os.makedirs(args.out, exist_ok=True)
    if args.save_sr:
        sr_dir = os.path.join(args.out, "sr")
        os.makedirs(sr_dir, exist_ok=True)
        report = evaluator.MetricsReport()
        for lr_vol, gt_vol in pairs:
            sr = evaluator.reconstruct(lr_vol, predictor, pad=args.pad)
            sr_path = os.path.join(sr_dir, sr.name + VOLUME_SUFFIX)
            volumes.write_volume(sr, sr_path)
            print(f"wrote {sr_path}")
            metrics = evaluator.slice_metrics(gt_vol, sr)
            if metrics is None:
                report.skipped.append(gt_vol.name)
            else:
                report.volumes.append(metrics)
    else:
        report = evaluator.evaluate(pairs, predictor, pad=args.pad)
    csv_path = os.path.join(args.out, "metrics.csv")
    txt_path = os.path.join(args.out, "metrics.txt")
    atomic_write_text(csv_path, report.to_csv())
    atomic_write_text(txt_path, report.to_text())
    print(f"wrote {csv_path}")
    print(f"wrote {txt_path}")
    print(f"eval ok volumes={len(report.volumes)} psnr={report.psnr:.4f} "
          f"ssim={report.ssim:.6f} nrmse={report.nrmse:.6f}")
    return 0


def cmd_lam(args) -> int:
    model_cfg, _ = _load_configs(args)
    model = MtvnetModel(model_cfg)
    model.load_state_dict(load_params(args.ckpt))
    model.eval()
    pairs = _load_pairs(data_root(args.data_dir))
    lr_vol, _ = pairs[args.index]
    extents = model.context_extents
    outer = extents[0]
    center = tuple(n // 2 for n in lr_vol.shape)
    context = volumes.crop_centered(lr_vol.data, center, outer, pad=True)
    s = model_cfg.scale
    out_edge = s * extents[-1]
    box_lo = (out_edge - args.box_edge * s) // 2
    box = ((box_lo, box_lo + args.box_edge * s),) * 3
    lam = analysis.lam_3d(model, context, box, context_extents=extents,
                          steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    vol_path = os.path.join(args.out, "attribution" + VOLUME_SUFFIX)
    volumes.write_volume(
        Volume(volumes.normalize_intensities(lam.attribution)[None],
               name="attribution"), vol_path)
    png_path = os.path.join(args.out, "attribution.png")
    analysis.render_lam_heatmap(lam, png_path, scale=s)
    print(f"wrote {vol_path}")
    print(f"wrote {png_path}")
    print(f"lam ok volume={lr_vol.name} di={lam.di:.4f} steps={args.steps}")
    return 0


def cmd_profile(args) -> int:
    model_cfg, _ = _load_configs(args)
    resolutions = [int(r) for r in args.resolutions.split(",")]
    name = args.config or args.preset
    profile = analysis.profile_memory(model_cfg, resolutions, name=name,
                                      measure=args.measure)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "memory_profile.csv")
    atomic_write_text(csv_path, profile.to_csv())
    png_path = os.path.join(args.out, "memory_profile.png")
    analysis.render_memory_curves([profile], png_path)
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    valid = sum(r.valid for r in profile.rows)
    print(f"profile ok rows={len(profile.rows)} valid={valid}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtvnet",
        description="Multi-context volumetric super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable INFO logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate paired HR/LR phantom volumes")
    p.add_argument("--generator", required=True,
                   choices=sorted(volumes.GENERATORS),
                   help="synthetic volume generator")
    p.add_argument("--count", type=int, required=True, help="number of volumes")
    p.add_argument("--edge", type=int, required=True, help="HR volume edge (voxels)")
    p.add_argument("--scale", type=int, required=True, help="downsampling factor")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--blur", action=argparse.BooleanOptionalAction, default=True,
                   help="Gaussian blur before downsampling")
    p.add_argument("--data-dir", default=None,
                   help="store root (default: $MTVNET_DATA_DIR or ./data)")
    p.set_defaults(func=cmd_make_data)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--preset", default="desk",
                       choices=config_mod.PRESET_NAMES,
                       help="built-in preset used when no --config is given")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("train", help="train a model on a volume store")
    add_config_args(p)
    p.add_argument("--steps", type=int, default=None,
                   help="override total iterations (milestones rescale)")
    p.add_argument("--seed", type=int, default=None, help="override training seed")
    p.add_argument("--data-dir", default=None, help="volume store root")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--ckpt-interval", type=int, default=500,
                   help="checkpoint every N iterations (0 = final only)")
    p.add_argument("--resume", default=None, help="resume from a .state sidecar")
    p.add_argument("--pad", action=argparse.BooleanOptionalAction, default=True,
                   help="reflection-pad patch contexts at volume borders")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the baseline")
    add_config_args(p)
    p.add_argument("--model", choices=("checkpoint", "trilinear"),
                   default="checkpoint", help="predictor to evaluate")
    p.add_argument("--ckpt", default=None, help="checkpoint .params path")
    p.add_argument("--data-dir", default=None, help="volume store root")
    p.add_argument("--limit", type=int, default=None, help="evaluate first N pairs")
    p.add_argument("--out", default="runs/eval", help="output directory")
    p.add_argument("--pad", action=argparse.BooleanOptionalAction, default=True,
                   help="reflection-pad tile contexts at volume borders")
    p.add_argument("--save-sr", action="store_true",
                   help="also write reconstructions in the volume store format")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lam", help="attribution map for one volume")
    add_config_args(p)
    p.add_argument("--ckpt", required=True, help="checkpoint .params path")
    p.add_argument("--data-dir", default=None, help="volume store root")
    p.add_argument("--index", type=int, default=0, help="volume index in the store")
    p.add_argument("--steps", type=int, default=32, help="integration steps")
    p.add_argument("--box-edge", type=int, default=8,
                   help="prediction box edge in LR voxels")
    p.add_argument("--out", default="runs/lam", help="output directory")
    p.set_defaults(func=cmd_lam)

    p = sub.add_parser("profile", help="token/memory scaling analysis")
    add_config_args(p)
    p.add_argument("--resolutions", required=True,
                   help="comma-separated outermost context edges")
    p.add_argument("--measure", action="store_true",
                   help="also instrument a real forward pass")
    p.add_argument("--out", default="runs/profile", help="output directory")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    try:
        return args.func(args)
    except (config_mod.ConfigError, volumes.VolumeError, evaluator.EvalError,
            analysis.AnalysisError, trainer.TrainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
