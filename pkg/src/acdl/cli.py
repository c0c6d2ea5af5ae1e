"""``acdl`` command line: synth-data, preprocess, train-gan, augment, train, evaluate, report.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/input error.
Failures print one ``error kind=<Kind> ... message="<text>"`` line on stderr.
"""

import argparse
import csv
import json
import re
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, dump_config, load_config
from .errors import (AcdlError, CheckpointFormatError, DatasetError, MissingArtifactError, ShapeError,
                     TrainingDiverged)
from .gan import GanTrainConfig, generate_images, train_gan
from .metrics import build_report, render_report, write_report
from .models import VitConfig, build_cnn, build_ftcnn, build_vit
from .training import TrainRun, evaluate, load_checkpoint, log_curves, save_checkpoint, train_classifier

DISPLAY = {"cnn": "CNN", "ftcnn": "FTCNN", "vit": "ViT Model"}

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed", "run_dir": "run_dir", "root": "data.root",
    "no_enhance": "data.enhance",
    "n": "synth.n", "size": "synth.size",
    "model": "train.model", "input": "train.input", "epochs": "train.epochs",
    "batch_size": "train.batch_size", "lr": "train.lr", "dropout": "train.dropout",
    "patch": "vit.patch", "projection_dim": "vit.projection_dim", "heads": "vit.heads",
    "layers": "vit.layers", "mlp_hidden": "vit.mlp_hidden",
    "latent_dim": "gan.latent_dim", "gan_epochs": "gan.epochs", "gan_batch_size": "gan.batch_size",
    "gan_lr": "gan.lr", "gan_loss": "gan.loss", "report_interval": "gan.report_interval",
    "save_interval": "gan.save_interval", "per_class": "gan.per_class",
}


def _out(line):
    print(line, flush=True)


def _slug(name):
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def _run_dir(cfg, create=True):
    if cfg.run_dir is None:
        cfg.run_dir = f"runs/{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"
    path = Path(cfg.run_dir)
    if create:
        path.mkdir(parents=True, exist_ok=True)
    return path


def _enhance_params(cfg):
    d = cfg.data
    return D.EnhanceParams(d.saturation_gain, d.contrast_gain, d.brightness_offset) if d.enhance else None


def _dataset_root(cfg, run_dir):
    """The augmented copy inside the run directory wins over ``data.root``."""
    aug = run_dir / "dataset"
    return aug if aug.is_dir() else Path(cfg.data.root)


def _require(path, what):
    if not Path(path).is_file():
        raise MissingArtifactError(path, what)
    return Path(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(cfg, args):
    root = Path(cfg.data.root)
    manifest = D.make_synthetic_dataset(root, seed=cfg.seed, n_per_class=cfg.synth.n, size=cfg.synth.size,
                                        class_names=tuple(cfg.data.classes), force=args.force)
    dump_config(cfg, root / "synth-data.config.yaml")
    total = sum(sum(c.values()) for c in manifest["counts"].values())
    _out(f"wrote {total} images under {root}")


def cmd_preprocess(cfg, args):
    src = Path(cfg.data.root)
    dest = Path(args.out)
    if dest.resolve() == src.resolve():
        raise ConfigError("preprocess output must differ from the dataset root")
    index = D.index_dataset(src, cfg.data.classes)
    size = (cfg.train.input, cfg.train.input)
    params = _enhance_params(cfg)
    count = 0
    for split, idx in index.items():
        for path, _ in idx.items():
            target = dest / path.relative_to(src)
            target.parent.mkdir(parents=True, exist_ok=True)
            D.write_image(target, D.preprocess(D.read_image(path), size, params))
            count += 1
    dump_config(cfg, dest / "preprocess.config.yaml")
    _out(f"preprocessed {count} images into {dest}")


def _gan_config(cfg, **extra):
    g = cfg.gan
    return GanTrainConfig(batch_size=g.batch_size, epochs=g.epochs, loss=g.loss, lr=g.lr, beta1=g.beta1,
                          beta2=g.beta2, latent_dim=g.latent_dim, report_interval=g.report_interval,
                          save_interval=g.save_interval, **extra)


def cmd_train_gan(cfg, args):
    run_dir = _run_dir(cfg)
    dump_config(cfg, run_dir / "train-gan.config.yaml")
    train = D.index_dataset(cfg.data.root, cfg.data.classes, ("train",))["train"]
    for label, name in enumerate(train.class_names):
        paths = train.files[name]
        # generator learns un-enhanced pixels; enhancement is applied once at load time
        images = np.stack([D.normalize(D.read_image(p)).pixels for p in paths])
        if len({im.shape for im in images}) != 1:
            raise DatasetError(f"{train.root / 'train' / name}: images differ in size")
        out = run_dir / "gan" / _slug(name)
        gcfg = _gan_config(cfg, seed=int(np.random.SeedSequence([cfg.seed, label]).generate_state(1)[0]))
        result = train_gan(images, gcfg, out_dir=out, log=lambda s, n=name: _out(f"class={_slug(n)} {s}"))
        meta = {"class": name, "label": label, "seed": gcfg.seed, "epochs": gcfg.epochs, "loss": gcfg.loss}
        save_checkpoint(result.gen, out / "generator.ckpt", meta)
        save_checkpoint(result.disc, out / "discriminator.ckpt", meta)
        with (out / "losses.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "l_d", "l_g", "d_acc_real", "d_acc_fake"))
            for e, s in enumerate(result.epoch_stats, 1):
                w.writerow([e] + [f"{v:.6f}" for v in s])
        _out(f"class={_slug(name)} saved {out / 'generator.ckpt'}")


def cmd_augment(cfg, args):
    run_dir = _run_dir(cfg, create=False)
    src = Path(cfg.data.root)
    source = D.index_dataset(src, cfg.data.classes)
    gens = {name: _require(run_dir / "gan" / _slug(name) / "generator.ckpt", "GAN generator checkpoint")
            for name in source["train"].class_names}
    dump_config(cfg, run_dir / "augment.config.yaml")
    dest = run_dir / "dataset"
    if dest.exists():
        shutil.rmtree(dest)
    for split in D.SPLITS:
        for name in cfg.data.classes:
            shutil.copytree(src / split / name, dest / split / name)
    copied = D.index_dataset(dest, cfg.data.classes)
    images, labels = [], []
    for label, name in enumerate(copied["train"].class_names):
        gen = load_checkpoint(gens[name])
        seed = int(np.random.SeedSequence([cfg.seed, label, 1]).generate_state(1)[0])
        images += generate_images(gen, cfg.gan.per_class, seed=seed)
        labels += [label] * cfg.gan.per_class
    before = copied["train"].counts()
    merged = D.merge_augmented(copied["train"], images, labels) if images else copied["train"]
    summary = {
        "source": str(src),
        "dataset": str(dest),
        "per_class": cfg.gan.per_class,
        "train_counts_before": before,
        "train_counts_after": merged.counts(),
        "digests": {s: {"source": source[s].digest(), "augmented": copied[s].digest()} for s in ("val", "test")},
    }
    for s, d in summary["digests"].items():
        if d["source"] != d["augmented"]:
            raise RuntimeError(f"{s} split changed during augmentation")
    (run_dir / "augment.json").write_text(json.dumps(summary, indent=2))
    _out(f"augmented train split: {before} -> {merged.counts()} in {dest}")


def _build_model(cfg):
    t, size = cfg.train, cfg.train.input
    if t.model == "cnn":
        return build_cnn((size, size, 3), seed=cfg.seed)
    if t.model == "ftcnn":
        return build_ftcnn((size, size, 3), seed=cfg.seed, dropout=t.dropout)
    v = cfg.vit
    return build_vit(VitConfig(size, 3, v.patch, v.projection_dim, v.heads, v.layers, v.mlp_hidden), seed=cfg.seed)


def cmd_train(cfg, args):
    run_dir = _run_dir(cfg)
    dump_config(cfg, run_dir / "train.config.yaml")
    root = _dataset_root(cfg, run_dir)
    index = D.index_dataset(root, cfg.data.classes, ("train", "val"))
    model = _build_model(cfg)
    size, params = model.input_spec[:2], _enhance_params(cfg)
    train, val = D.load_split(index["train"], size, params), D.load_split(index["val"], size, params)
    t = cfg.train
    run = TrainRun(t.model, t.epochs, t.batch_size, cfg.resolved_lr(), t.beta1, t.beta2, t.eps, cfg.seed,
                   keep_best=t.keep_best)
    _out(f"training {t.model} on {root} ({len(train)} train / {len(val)} val, {model.param_count()} params)")
    try:
        train_classifier(model, train, val, run, log=_out)
    finally:
        if run.curves:
            log_curves(run, run_dir / "curves.csv")
    meta = {"seed": cfg.seed, "epochs": len(run.curves), "best_epoch": run.best_epoch,
            "best_val_acc": run.best_val_acc, "dataset": str(root)}
    save_checkpoint(model, run_dir / "model.ckpt", meta)
    _out(f"saved {run_dir / 'model.ckpt'} (best epoch {run.best_epoch}, val acc {run.best_val_acc})")


def cmd_evaluate(cfg, args):
    run_dir = _run_dir(cfg, create=False)
    ckpt = _require(args.checkpoint or run_dir / "model.ckpt", "model checkpoint")
    model = load_checkpoint(ckpt)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "evaluate.config.yaml")
    root = _dataset_root(cfg, run_dir)
    index = D.index_dataset(root, cfg.data.classes, (args.split,))[args.split]
    result = evaluate(model, index, _enhance_params(cfg))
    with (run_dir / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "label", "score", "prediction"))
        for p, y, s, q in zip(result.paths, result.labels, result.scores, result.predictions):
            w.writerow((Path(p).relative_to(root).as_posix(), int(y), repr(float(s)), int(q)))
    info = {"checkpoint": str(ckpt), "model": model.tag, "split": args.split, "dataset": str(root),
            "count": len(result.labels)}
    (run_dir / "evaluation.json").write_text(json.dumps(info, indent=2))
    acc = float(np.mean(result.labels == result.predictions))
    _out(f"evaluated {len(result.labels)} {args.split} images: accuracy={acc:.6f}")


def cmd_report(cfg, args):
    run_dir = _run_dir(cfg, create=False)
    path = _require(args.predictions or run_dir / "predictions.csv", "predictions file")
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "report.config.yaml")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: no predictions")
    labels = np.array([int(r["label"]) for r in rows])
    scores = np.array([float(r["score"]) for r in rows])
    preds = np.array([int(r["prediction"]) for r in rows])
    info_path = run_dir / "evaluation.json"
    tag = json.loads(info_path.read_text()).get("model", "") if info_path.is_file() else ""
    report = build_report(labels, scores, preds, model=DISPLAY.get(tag, tag))
    write_report(report, run_dir)
    sys.stdout.write(render_report(report))


COMMANDS = {
    "synth-data": cmd_synth_data, "preprocess": cmd_preprocess, "train-gan": cmd_train_gan,
    "augment": cmd_augment, "train": cmd_train, "evaluate": cmd_evaluate, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parents():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--run-dir", dest="run_dir", help="run output directory")
    common.add_argument("--root", help="dataset root")
    common.add_argument("--no-enhance", dest="no_enhance", action="store_const", const=False,
                        help="skip saturation/contrast/brightness enhancement")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--model", choices=("cnn", "ftcnn", "vit"))
    train.add_argument("--input", type=int, help="square input size")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--dropout", type=float)
    train.add_argument("--patch", type=int)
    train.add_argument("--projection-dim", dest="projection_dim", type=int)
    train.add_argument("--heads", type=int)
    train.add_argument("--layers", type=int)
    train.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)

    gan = argparse.ArgumentParser(add_help=False)
    gan.add_argument("--latent-dim", dest="latent_dim", type=int)
    gan.add_argument("--gan-epochs", dest="gan_epochs", type=int)
    gan.add_argument("--gan-batch-size", dest="gan_batch_size", type=int)
    gan.add_argument("--gan-lr", dest="gan_lr", type=float)
    gan.add_argument("--gan-loss", dest="gan_loss", choices=("bce", "lsgan"))
    gan.add_argument("--report-interval", dest="report_interval", type=int)
    gan.add_argument("--save-interval", dest="save_interval", type=int)
    return common, train, gan


def build_parser():
    common, train, gan = _parents()
    parser = argparse.ArgumentParser(prog="acdl", description="GAN-augmented accident detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", parents=[common], help="write the synthetic desk-scale dataset")
    p.add_argument("--n", type=int, help="images per class per split")
    p.add_argument("--size", type=int, help="image side length")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty root")

    p = sub.add_parser("preprocess", parents=[common, train], help="resize/normalize/enhance a dataset copy")
    p.add_argument("--out", required=True, help="destination root")

    sub.add_parser("train-gan", parents=[common, gan], help="train one DCGAN per class")

    p = sub.add_parser("augment", parents=[common, gan], help="merge GAN images into a copy of the train split")
    p.add_argument("--per-class", dest="per_class", type=int, help="generated images per class")

    sub.add_parser("train", parents=[common, train], help="train a classifier")

    p = sub.add_parser("evaluate", parents=[common, train], help="score a split with a checkpoint")
    p.add_argument("--checkpoint", help="model checkpoint (default: <run-dir>/model.ckpt)")
    p.add_argument("--split", default="test", choices=D.SPLITS)

    p = sub.add_parser("report", parents=[common], help="render the classification report")
    p.add_argument("--predictions", help="predictions CSV (default: <run-dir>/predictions.csv)")
    return parser


def overrides_from(args):
    return {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}


def _error_line(exc, code):
    fields = [f"kind={type(exc).__name__}", f"exit={code}"]
    if isinstance(exc, MissingArtifactError):
        fields.append(f"path={json.dumps(exc.path)}")
    if isinstance(exc, TrainingDiverged):
        fields.append(f"epoch={exc.epoch}")
    fields.append(f"message={json.dumps(str(exc))}")
    return "error " + " ".join(fields)


USAGE_ERRORS = (ConfigError, DatasetError, MissingArtifactError, CheckpointFormatError, ShapeError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, overrides_from(args))
        COMMANDS[args.command](cfg, args)
    except USAGE_ERRORS as exc:
        print(_error_line(exc, 2), file=sys.stderr)
        return 2
    except (AcdlError, OSError, RuntimeError, ValueError) as exc:
        print(_error_line(exc, 1), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
