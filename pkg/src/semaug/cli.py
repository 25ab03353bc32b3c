"""Experiment runner: data generation, VAE-GAN training, augmentation, strategy comparison."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import augment as aug
from . import data as dat
from . import evalcls, report
from .vaegan import TrainedVaeGan, TrainingDiverged, VaeGanConfig, train_vaegan

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

DEFAULTS = {
    "data": {
        "classes": 7,
        "head": 477,
        "tail": 28,
        "decay": 0.62,
        "image_size": 32,
        "test_frac": 0.25,
    },
    "vaegan": {
        "steps": 2000,
        "latent_dim": 64,
        "batch_size": 16,
        "beta_max": 1.0,
        "lambda_p": 1.0,
        "lr": 2e-4,
        "base_channels": 32,
    },
    "augment": {
        "strength": 1.0,
        "ratio": 0.5,
        "grid": True,
    },
    "classifier": {
        "epochs": 40,
        "batch_size": 32,
        "lr": 1e-3,
        "width": 16,
        "original_only_tail": 5,
        "seeds": "0,1,2",
    },
}


def _version() -> str:
    try:
        from importlib.metadata import version

        v = version("semaug")
    except Exception:
        v = "0.0.0"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        ).stdout.strip()
    except Exception:
        desc = ""
    return f"semaug-{v}" + (f"+{desc}" if desc else "")


def _default_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SEMAUG_SEED")
    if env is not None:
        return int(env)
    return 0


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _resolve(section: str, key: str, flag_value, file_cfg: dict):
    """Precedence: command-line flag > config file > built-in default."""
    if flag_value is not None:
        return flag_value
    if section in file_cfg and key in file_cfg[section]:
        return file_cfg[section][key]
    return DEFAULTS[section][key]


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_summary(out_dir: str, command: str, config: dict, artifacts: dict) -> None:
    # summary is written last so a failed run never lists artifacts
    summary = {
        "command": command,
        "version": _version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": config,
        "artifacts": artifacts,
    }
    with open(os.path.join(out_dir, "run_summary.json"), "w") as f:
        json.dump(summary, f, indent=1)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, file_cfg) -> int:
    seed = _default_seed(args)
    g = lambda k, v: _resolve("data", k, v, file_cfg)
    classes, head, tail = g("classes", args.classes), g("head", args.head), g("tail", args.tail)
    decay, size, test_frac = g("decay", args.decay), g("image_size", args.image_size), g("test_frac", args.test_frac)
    if not (0.0 < decay <= 1.0):
        print(f"error: --decay must be in (0, 1], got {decay}", file=sys.stderr)
        return EXIT_VALIDATION

    shape = (3, size, size)
    train = dat.make_longtail_synthetic(classes, head, tail, decay, shape, seed)
    test_head = max(1, round(head * test_frac))
    test_tail = max(1, round(tail * test_frac))
    test = dat.make_longtail_synthetic(classes, test_head, test_tail, decay, shape, seed + 1)

    os.makedirs(args.out, exist_ok=True)
    train_dir = os.path.join(args.out, "train")
    test_dir = os.path.join(args.out, "test")
    train_path = dat.save_manifest(train, train_dir)
    test_path = dat.save_manifest(test, test_dir)
    report.plot_histogram(train, os.path.join(args.out, "class_histogram.png"))

    config = {"classes": classes, "head": head, "tail": tail, "decay": decay,
              "image_size": size, "test_frac": test_frac, "seed": seed}
    _write_summary(args.out, "gen-data", config, {
        "train_manifest": train_path,
        "test_manifest": test_path,
        "train_manifest_sha256": _file_hash(train_path),
        "histogram_figure": os.path.join(args.out, "class_histogram.png"),
    })
    print(f"train histogram: {train.histogram}")
    print(f"wrote {train_path} and {test_path}")
    return EXIT_OK


def cmd_train_vaegan(args, file_cfg) -> int:
    seed = _default_seed(args)
    g = lambda k, v: _resolve("vaegan", k, v, file_cfg)
    manifest = dat.load_manifest(args.data)
    cfg = VaeGanConfig(
        latent_dim=g("latent_dim", args.latent_dim),
        image_shape=manifest.image_shape,
        beta_max=g("beta_max", args.beta_max),
        lambda_p=g("lambda_p", args.lambda_p),
        lr_eg=g("lr", args.lr),
        lr_d=g("lr", args.lr),
        batch_size=g("batch_size", args.batch_size),
        total_steps=g("steps", args.steps),
        base_channels=g("base_channels", args.base_channels),
        seed=seed,
    )
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "vaegan_losses.csv")

    def progress(step, entry):
        if step % 100 == 0 or step == cfg.total_steps - 1:
            print(f"step {step}: recon_l1={entry['recon_l1']:.4f} kld={entry['kld']:.4f} d={entry['d_loss']:.4f}")

    model, log = train_vaegan(manifest, cfg, log_path=log_path, progress=progress)
    ckpt_path = os.path.join(args.out, "vaegan.pt")
    model.save(ckpt_path)
    report.plot_loss_curves(log, os.path.join(args.out, "vaegan_losses.png"))
    _write_summary(args.out, "train-vaegan", cfg.__dict__ | {"image_shape": list(cfg.image_shape)}, {
        "checkpoint": ckpt_path,
        "loss_log": log_path,
        "loss_figure": os.path.join(args.out, "vaegan_losses.png"),
    })
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_augment(args, file_cfg) -> int:
    seed = _default_seed(args)
    g = lambda k, v: _resolve("augment", k, v, file_cfg)
    strength = g("strength", args.strength)
    if strength < 0:
        print(f"error: --strength must be >= 0, got {strength}", file=sys.stderr)
        return EXIT_VALIDATION
    manifest = dat.load_manifest(args.data)
    model = TrainedVaeGan.load(args.model)
    os.makedirs(args.out, exist_ok=True)

    mus, _ = model.encode_np(dat.load_images(manifest))
    labels = [s.label for s in manifest.samples]
    stats = aug.compute_class_stats(mus, labels, manifest.class_count)
    stats_path = os.path.join(args.out, "class_stats.json")
    stats.save(stats_path)

    plan = aug.AugmentPlan(strength=strength, augment_ratio=g("ratio", args.ratio), seed=seed)
    augmented = aug.synthesize_balanced(manifest, model, stats, plan)
    aug_path = aug.save_augmented(augmented, args.out)

    artifacts = {"stats": stats_path, "augmented_manifest": aug_path}
    if g("grid", None if not args.no_grid else False):
        src_grid = os.path.join(args.out, "source_vs_augmented.png")
        cls_grid = os.path.join(args.out, "per_class_grid.png")
        report.source_vs_augmented_grid(manifest, model, stats, strength, src_grid, seed=seed)
        report.per_class_grid(augmented, cls_grid, seed=seed)
        report.plot_histogram(manifest, os.path.join(args.out, "balanced_histogram.png"),
                              combined=augmented.combined_histogram())
        artifacts |= {"source_grid": src_grid, "class_grid": cls_grid,
                      "histogram_figure": os.path.join(args.out, "balanced_histogram.png")}

    _write_summary(args.out, "augment",
                   {"strength": strength, "ratio": plan.augment_ratio, "seed": seed,
                    "targets": augmented.combined_histogram()},
                   artifacts)
    print(f"generated {len(augmented.generated)} samples; combined histogram {augmented.combined_histogram()}")
    return EXIT_OK


def cmd_compare(args, file_cfg) -> int:
    seed = _default_seed(args)
    g = lambda k, v: _resolve("classifier", k, v, file_cfg)
    train_manifest = dat.load_manifest(args.data)
    test_manifest = dat.load_manifest(args.test)
    augmented = None
    if args.augmented is not None:
        augmented = aug.load_augmented(args.augmented, train_manifest)
    strategies = args.strategies.split(",") if args.strategies else list(evalcls.STRATEGIES)
    if "ours" in strategies and augmented is None:
        print("error: strategy 'ours' needs --augmented", file=sys.stderr)
        return EXIT_VALIDATION
    seeds = [int(s) for s in str(g("seeds", args.seeds)).split(",")]
    seeds = [seed + s for s in seeds]
    cfg = evalcls.ClassifierConfig(
        epochs=g("epochs", args.epochs),
        batch_size=g("batch_size", args.batch_size),
        lr=g("lr", args.lr),
        width=g("width", args.width),
        augment_ratio=_resolve("augment", "ratio", args.ratio, file_cfg),
        original_only_tail=g("original_only_tail", args.original_only_tail),
    )
    os.makedirs(args.out, exist_ok=True)

    def progress(strategy, run_seed, rep):
        print(f"{strategy} seed={run_seed}: total_precision={rep.total_precision:.4f} mAP={rep.mean_ap:.4f}")

    result = evalcls.run_strategy_comparison(
        train_manifest, test_manifest, cfg, seeds,
        augmented=augmented, strategies=strategies, progress=progress,
    )
    csv_path = os.path.join(args.out, "comparison.csv")
    md_path = os.path.join(args.out, "comparison.md")
    fig_path = os.path.join(args.out, "comparison.png")
    result.write_csv(csv_path)
    with open(md_path, "w") as f:
        f.write(result.to_markdown())
    report.plot_comparison(result, fig_path)
    _write_summary(args.out, "compare",
                   cfg.__dict__ | {"seeds": seeds, "strategies": strategies},
                   {"csv": csv_path, "markdown": md_path, "figure": fig_path})
    print(result.to_markdown())
    return EXIT_OK


def cmd_all(args, file_cfg) -> int:
    out = args.out
    ns = argparse.Namespace(**vars(args))
    ns.out = os.path.join(out, "data")
    rc = cmd_gen_data(ns, file_cfg)
    if rc != EXIT_OK:
        return rc

    ns = argparse.Namespace(**vars(args))
    ns.data = os.path.join(out, "data", "train", "manifest.jsonl")
    ns.out = os.path.join(out, "vaegan")
    rc = cmd_train_vaegan(ns, file_cfg)
    if rc != EXIT_OK:
        return rc

    ns = argparse.Namespace(**vars(args))
    ns.data = os.path.join(out, "data", "train", "manifest.jsonl")
    ns.model = os.path.join(out, "vaegan", "vaegan.pt")
    ns.out = os.path.join(out, "augmented")
    rc = cmd_augment(ns, file_cfg)
    if rc != EXIT_OK:
        return rc

    ns = argparse.Namespace(**vars(args))
    ns.data = os.path.join(out, "data", "train", "manifest.jsonl")
    ns.test = os.path.join(out, "data", "test", "manifest.jsonl")
    ns.augmented = os.path.join(out, "augmented", "augmented.jsonl")
    ns.strategies = args.strategies
    ns.out = os.path.join(out, "comparison")
    return cmd_compare(ns, file_cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semaug",
                                     description="Latent-space semantic augmentation for long-tailed classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file (flags override it)")
        p.add_argument("--seed", type=int, default=None, help="global seed (or SEMAUG_SEED env)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic long-tailed dataset")
    common(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--head", type=int, default=None)
    p.add_argument("--tail", type=int, default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--test-frac", dest="test_frac", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vaegan", help="train the VAE-GAN on a manifest")
    common(p)
    p.add_argument("--data", required=True, help="training manifest (JSONL)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--beta-max", dest="beta_max", type=float, default=None)
    p.add_argument("--lambda-p", dest="lambda_p", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.set_defaults(func=cmd_train_vaegan)

    p = sub.add_parser("augment", help="compute class stats and synthesize the balanced dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="VAE-GAN checkpoint")
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--no-grid", action="store_true", help="skip grid/figure export")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("compare", help="train and evaluate classifiers per strategy")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--augmented", default=None, help="augmented manifest (needed for 'ours')")
    p.add_argument("--strategies", default=None, help="comma list from none,balanced,ours")
    p.add_argument("--seeds", default=None, help="comma list of seed offsets")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--original-only-tail", dest="original_only_tail", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("all", help="gen-data + train-vaegan + augment + compare")
    common(p)
    for flags, kw in [
        (["--classes"], dict(type=int)), (["--head"], dict(type=int)), (["--tail"], dict(type=int)),
        (["--decay"], dict(type=float)), (["--image-size"], dict(dest="image_size", type=int)),
        (["--test-frac"], dict(dest="test_frac", type=float)),
        (["--steps"], dict(type=int)), (["--latent-dim"], dict(dest="latent_dim", type=int)),
        (["--batch-size"], dict(dest="batch_size", type=int)), (["--beta-max"], dict(dest="beta_max", type=float)),
        (["--lambda-p"], dict(dest="lambda_p", type=float)), (["--lr"], dict(type=float)),
        (["--base-channels"], dict(dest="base_channels", type=int)),
        (["--strength"], dict(type=float)), (["--ratio"], dict(type=float)),
        (["--strategies"], dict()), (["--seeds"], dict()), (["--epochs"], dict(type=int)),
        (["--width"], dict(type=int)), (["--original-only-tail"], dict(dest="original_only_tail", type=int)),
    ]:
        p.add_argument(*flags, default=None, **kw)
    p.add_argument("--no-grid", action="store_true")
    p.set_defaults(func=cmd_all)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code not in (0, None) else EXIT_OK
    try:
        file_cfg = _load_config_file(args.config)
    except (OSError, tomllib.TOMLDecodeError) as e:
        print(f"error: bad config file: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args, file_cfg)
    except (dat.ManifestError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
