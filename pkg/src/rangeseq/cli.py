"""Command line entry point: ``rangeseq <command> [--config PATH] [--seed N] [--threads N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from rangeseq import config as cfgmod
from rangeseq.config import ConfigError
from rangeseq.dataio import (DataError, DatasetManifest, generate_synthetic_sequence, frames_to_images,
                             read_manifest_file, scene_config_dict, window_sequences, write_kitti_scan,
                             write_labels, write_manifest_file)
from rangeseq.model import PredictionNet, count_params_flops
from rangeseq.rangeimg import SensorModel, range_image_to_cloud
from rangeseq.semseg import SegmenterTrainingError, pretrain_segmenter
from rangeseq.tensor_core import configure_threads
from rangeseq.trainer import (ConfigMismatchError, NumericError, evaluate_model, load_checkpoint,
                              load_segmenter, save_segmenter, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")

log = logging.getLogger("rangeseq")


# --------------------------------------------------------------------------
# data resolution


def synthetic_seeds(base_seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(n)]


def split_counts(n: int, val_fraction: float, test_fraction: float) -> dict:
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ConfigError("data.synthetic: fractions leave no training sequences")
    return {"train": n_train, "val": n_val, "test": n_test}


def synthetic_manifests(cfg: dict, sensor) -> dict:
    syn = cfg["data"]["synthetic"]
    seeds = synthetic_seeds(syn["seed"], syn["n_sequences"])
    counts = split_counts(len(seeds), syn["val_fraction"], syn["test_fraction"])
    out, i = {}, 0
    for split in SPLITS:
        out[split] = [DatasetManifest(sensor, synthetic=cfgmod.scene_from(cfg, s), split=split)
                      for s in seeds[i:i + counts[split]]]
        i += counts[split]
    return out


def resolve_manifests(cfg: dict, sensor) -> dict:
    """Manifests per split; every referenced file is checked before anything runs."""
    data = cfg["data"]
    if data["dataset"]:
        root = Path(data["dataset"])
        if not root.is_dir():
            raise DataError(f"data.dataset: directory not found: {root}")
        out = {}
        for split in SPLITS:
            listing = root / "splits" / f"{split}.txt"
            paths = []
            if listing.exists():
                for line in listing.read_text().splitlines():
                    line = line.split("#", 1)[0].strip()
                    if line:
                        paths.append(root / line)
            out[split] = [read_manifest_file(p, sensor, split) for p in paths]
        return out
    if data["manifest"] or data["val_manifest"] or data["test_manifest"]:
        keys = {"train": "manifest", "val": "val_manifest", "test": "test_manifest"}
        return {split: [read_manifest_file(p, sensor, split) for p in data[key]] for split, key in keys.items()}
    return synthetic_manifests(cfg, sensor)


def windows(manifests, model_cfg, stride: int) -> list:
    samples = []
    for m in manifests:
        samples.extend(window_sequences(m, model_cfg.P, model_cfg.F, stride=stride))
    return samples


def require(samples, split: str):
    if not samples:
        raise DataError(f"no {split} samples: the {split} split is empty or its sequences are too short")
    return samples


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, args, out: Path) -> int:
    sensor = cfgmod.sensor_from(cfg)
    manifests = synthetic_manifests(cfg, sensor)
    listing = {split: [] for split in SPLITS}
    k = 0
    for split in SPLITS:
        for m in manifests[split]:
            rel = Path("sequences") / f"{k:02d}"
            seq_dir = out / rel
            seq_dir.mkdir(parents=True, exist_ok=True)
            names = []
            for rec in generate_synthetic_sequence(m.synthetic, sensor):
                name = f"{rec.frame_index:06d}.bin"
                (seq_dir / name).write_bytes(write_kitti_scan(rec.cloud))
                (seq_dir / f"{rec.frame_index:06d}.label").write_bytes(write_labels(rec.labels))
                names.append(name)
            write_manifest_file(seq_dir / "manifest.txt", names, header=f"synthetic sequence {k:02d}")
            (seq_dir / "scene.json").write_text(json.dumps(scene_config_dict(m.synthetic), sort_keys=True) + "\n")
            listing[split].append(str(rel / "manifest.txt"))
            k += 1
    (out / "splits").mkdir(exist_ok=True)
    for split in SPLITS:
        write_manifest_file(out / "splits" / f"{split}.txt", listing[split])
    print(f"wrote {k} sequences to {out} "
          f"(train {len(listing['train'])}, val {len(listing['val'])}, test {len(listing['test'])})")
    return EXIT_OK


def _labelled_images(manifests, sensor, split):
    xs, ys = [], []
    for m in manifests:
        ranges, labels = frames_to_images(m.load(), sensor)
        if labels is None:
            raise DataError(f"{split} split: sequence without per-point labels cannot train the segmenter")
        xs.append(ranges)
        ys.append(labels)
    if not xs:
        raise DataError(f"segmenter pre-training needs a non-empty {split} split")
    return np.concatenate(xs) / sensor.max_range, np.concatenate(ys)


def cmd_pretrain_seg(cfg: dict, args, out: Path) -> int:
    sensor = cfgmod.sensor_from(cfg)
    seg_cfg = cfgmod.segmenter_from(cfg)
    manifests = resolve_manifests(cfg, sensor)
    x_tr, y_tr = _labelled_images(manifests["train"], sensor, "train")
    x_va, y_va = _labelled_images(manifests["val"], sensor, "val")
    seg, acc = pretrain_segmenter(x_tr, y_tr, x_va, y_va, sensor, seg_cfg,
                                  epochs=cfg["seg"]["epochs"], lr=cfg["seg"]["lr"])
    save_segmenter(out / "segmenter.rctf", seg, sensor, val_accuracy=acc)
    (out / "segmenter.json").write_text(json.dumps({"val_accuracy": acc}) + "\n")
    print(f"segmenter held-out pixel accuracy {acc:.4f}; saved {out / 'segmenter.rctf'}")
    return EXIT_OK


def _segmenter(cfg: dict, args, sensor, required: bool = False):
    path = args.segmenter or cfg["seg"]["checkpoint"]
    if not path:
        if required:
            raise ConfigError("train.alpha_s > 0 requires seg.checkpoint (or --segmenter)")
        return None
    if not Path(path).exists():
        raise DataError(f"seg.checkpoint: file not found: {path}")
    seg, meta = load_segmenter(path)
    trained_for = SensorModel(**meta["sensor"])
    if trained_for != sensor:
        raise ConfigError(f"seg.checkpoint: segmenter was trained for {trained_for}, run uses {sensor}")
    return seg


def _model(args, model_cfg) -> PredictionNet:
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        model, _ = load_checkpoint(args.checkpoint, model_cfg)
        return model
    return PredictionNet(model_cfg)


def cmd_train(cfg: dict, args, out: Path) -> int:
    from rangeseq.plotting import plot_training_curves

    sensor = cfgmod.sensor_from(cfg)
    model_cfg = cfgmod.model_from(cfg)
    train_cfg = cfgmod.train_from(cfg)
    seg = _segmenter(cfg, args, sensor, required=train_cfg.alpha_s > 0)
    manifests = resolve_manifests(cfg, sensor)
    model = _model(args, model_cfg)
    train_s = require(windows(manifests["train"], model_cfg, cfg["data"]["stride"]), "train")
    val_s = windows(manifests["val"], model_cfg, cfg["data"]["stride"])
    result = train(model_cfg, train_cfg, train_s, val_s, segmenter=seg, out_dir=out,
                   progress_every=cfg["train"]["progress_every"], model=model)
    plot_training_curves(result.log.steps, out / "loss_curves.png")
    last = result.log.epochs[-1]
    print(json.dumps(last))
    return EXIT_OK


def cmd_eval(cfg: dict, args, out: Path) -> int:
    from rangeseq.plotting import plot_step_chamfer

    sensor = cfgmod.sensor_from(cfg)
    model_cfg = cfgmod.model_from(cfg)
    seg = _segmenter(cfg, args, sensor)
    manifests = resolve_manifests(cfg, sensor)
    model = _model(args, model_cfg)
    samples = require(windows(manifests[args.split], model_cfg, cfg["data"]["stride"]), args.split)
    report = evaluate_model(model, samples, seg, threshold=cfg["train"]["threshold"])
    report.write(out)
    plot_step_chamfer(report.chamfer, report.baseline_chamfer, out / "step_chamfer.png")
    print(report.table())
    return EXIT_OK


def cmd_predict(cfg: dict, args, out: Path) -> int:
    import torch

    sensor = cfgmod.sensor_from(cfg)
    model_cfg = cfgmod.model_from(cfg)
    manifests = resolve_manifests(cfg, sensor)
    model = _model(args, model_cfg)
    model.eval()
    threshold = cfg["train"]["threshold"]
    n_files = 0
    for i, m in enumerate(manifests[args.split]):
        for s in window_sequences(m, model_cfg.P, model_cfg.F, stride=cfg["data"]["stride"]):
            with torch.no_grad():
                pred = model.predict(s.past)
            dest = out / "predictions" / f"seq{i:02d}_start{s.start:04d}"
            dest.mkdir(parents=True, exist_ok=True)
            for k in range(model_cfg.F):
                cloud = range_image_to_cloud(pred.range_pred[k].double().numpy(),
                                             pred.mask_prob[k].double().numpy(), sensor, threshold)
                (dest / f"{k + 1:02d}.bin").write_bytes(write_kitti_scan(cloud))
                n_files += 1
    if not n_files:
        raise DataError(f"no {args.split} samples to predict")
    print(f"wrote {n_files} predicted scans under {out / 'predictions'}")
    return EXIT_OK


def cmd_info(cfg: dict, args, out: Path) -> int:
    model_cfg = cfgmod.model_from(cfg)
    c = count_params_flops(model_cfg)
    lines = [f"input      {model_cfg.P}x{model_cfg.height}x{model_cfg.width} -> {model_cfg.F} frames",
             f"channels   {list(model_cfg.channels)}  branch {model_cfg.branch}",
             f"params     {c.params}",
             f"macs       {c.macs}",
             f"gflops     {2 * c.macs / 1e9:.3f}"]
    text = "\n".join(lines)
    print(text)
    (out / "info.txt").write_text(text + "\n")
    with open(out / "info.jsonl", "w") as fh:
        fh.write(json.dumps({"params": c.params, "macs": c.macs, "config_hash": model_cfg.config_hash()}) + "\n")
        for name, macs in c.per_layer:
            fh.write(json.dumps({"layer": name, "macs": macs}) + "\n")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args, out: Path) -> int:
    from rangeseq.gradcheck import run_suite

    results = run_suite(cfg["train"]["seed"])
    lines = [f"{'PASS' if r.ok else 'FAIL'}  {r.name:32s} rel_err {r.rel_err:.3e}  "
             f"entries {r.n_checked}  retried {r.n_retried}" for r in results]
    print("\n".join(lines))
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset on disk"),
    "pretrain-seg": (cmd_pretrain_seg, "pre-train and freeze the range-image segmenter"),
    "train": (cmd_train, "train the predictor"),
    "eval": (cmd_eval, "per-step chamfer against the copy-last baseline"),
    "predict": (cmd_predict, "write predicted scans as KITTI .bin files"),
    "info": (cmd_info, "parameter and FLOP report"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="CPU threads; 1 is bit-deterministic")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="rangeseq", description="LiDAR range-image sequence prediction")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("train", "eval", "predict"):
            p.add_argument("--checkpoint", help="predictor checkpoint (.rctf)")
        if name in ("train", "eval"):
            p.add_argument("--segmenter", help="frozen segmenter checkpoint (.rctf)")
        if name in ("eval", "predict"):
            p.add_argument("--split", choices=SPLITS, default="test")
    return parser


def seed_overrides(seed: int) -> dict:
    return {"model": {"seed": seed}, "train": {"seed": seed}, "seg": {"seed": seed},
            "data": {"synthetic": {"seed": seed}}}


def run(argv: Optional[list] = None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        overrides: dict = seed_overrides(args.seed) if args.seed is not None else {}
        if args.out:
            overrides["output_dir"] = args.out
        cfg = cfgmod.load_config(args.config, environ=environ, overrides=overrides)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            configure_threads(args.threads)
        out = Path(cfg["output_dir"])
        cfgmod.write_snapshot(cfg, out)
        return COMMANDS[args.command][0](cfg, args, out)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, SegmenterTrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
