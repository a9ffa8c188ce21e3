"""Command-line pipeline: dataset synthesis, fine-tuning, SVM training, detection, fusion, evaluation."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench, synth
from .classifier import detect_multiscale, train_svm
from .convnet import TrainHyper, TrainLog, format_specs, init_params, min_patch_size, parse_specs, toy_specs
from .finetune import MODES, FusionWeights, SamplingPlan, finetune_net, fuse, sample_patches, search_fusion_weights
from .formats import (
    ensure_dir,
    load_params,
    load_svm,
    read_config,
    read_edge_map,
    save_params,
    save_svm,
    write_edge_map,
)
from .pyramid import PyramidConfig, extract_pixel_features

log = logging.getLogger("pixcontour")

CONFIG_ENV = "PIXCONTOUR_CONFIG"
MODEL_NAMES = ("base",) + MODES


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    dataset_root: str = "data/synth"
    output_dir: str = "runs/default"
    seed: int = 0
    # network and features
    net_spec: str = format_specs(toy_specs())
    scales: str = "1.0,2.0"
    gutter: int = -1  # -1: derived from the network
    layers: str = "1,2,3"
    neighbor_k: int = 1
    # SVM
    svm_lambda: float = 1e-4
    svm_epochs: int = 10
    # fine-tuning
    base_lr: float = 0.001
    softmax_lr_multiplier: float = 10.0
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 32
    cost_route: str = "sampling"  # sampling | loss | both
    # synthetic data
    n_images: int = 30
    image_size: int = 64
    split: str = "20,5,5"
    # evaluation and fusion
    num_thresholds: int = 25
    models: str = "base,plain,positive,negative"
    nms: bool = True

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        cfg = cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cfg, key)
            try:
                if isinstance(default, bool):
                    value = str(raw).strip().lower() in ("1", "true", "yes", "on")
                else:
                    value = type(default)(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.cost_route not in ("sampling", "loss", "both"):
            raise ConfigError(f"cost_route must be sampling, loss or both, got {self.cost_route!r}")
        try:
            self.specs()
            self.pyramid()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def specs(self):
        return parse_specs(self.net_spec)

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(
            scales=tuple(float(s) for s in self.scales.split(",")),
            gutter=None if self.gutter < 0 else self.gutter,
            selected_layers=tuple(int(s) for s in self.layers.split(",")),
            neighbor_k=self.neighbor_k,
        )

    def hyper(self) -> TrainHyper:
        return TrainHyper(self.base_lr, self.softmax_lr_multiplier, self.momentum, 1.0, 1.0,
                          self.epochs, self.batch_size, self.seed)

    def model_list(self) -> list:
        return [m.strip() for m in self.models.split(",") if m.strip()]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def weights_path(self, model: str) -> Path:
        return self.out / "models" / f"{model}.cscn"

    def svm_path(self, model: str) -> Path:
        return self.out / "models" / f"{model}.svm.cscn"

    def edges_dir(self, model: str) -> Path:
        return self.out / "edges" / model


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    values = {}
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(read_config(path))
    values.update(overrides or {})
    return PipelineConfig.from_mapping(values)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_split(config: PipelineConfig, split: str):
    root = _require(Path(config.dataset_root), "dataset root")
    _require(root / f"{split}.txt", f"{split} manifest")
    return synth.load_records(root, split)


# -- commands -----------------------------------------------------------------------


def cmd_dataset_synth(config: PipelineConfig) -> Path:
    split = tuple(int(s) for s in config.split.split(","))
    root = synth.write_dataset(config.dataset_root, config.n_images, config.image_size, config.seed, split)
    log.info("wrote %d images to %s", config.n_images, root)
    return root


def base_params(config: PipelineConfig):
    """The starting weights, initialised from the seed on first use."""
    path = config.weights_path("base")
    if not path.exists():
        ensure_dir(path.parent)
        save_params(path, init_params(config.specs(), seed=config.seed))
        log.info("initialised base weights at %s", path)
    return load_params(path)


def cmd_finetune(config: PipelineConfig, mode: str) -> Path:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    specs = config.specs()
    records = _load_split(config, "train")
    params = base_params(config)
    plan_mode = mode if config.cost_route in ("sampling", "both") else "plain"
    loss_mode = mode if config.cost_route in ("loss", "both") else "plain"
    plan = SamplingPlan.for_mode(plan_mode, config.seed)
    patches = sample_patches(records, plan, min_patch_size(specs))
    log.info("fine-tuning %s: %d patches (%d edge / %d non-edge per image), loss weights from %s",
             mode, len(patches), plan.n_pos, plan.n_neg, loss_mode)
    train_log = TrainLog()
    params = finetune_net(specs, params, patches, config.hyper(), loss_mode, train_log)
    path = config.weights_path(mode)
    save_params(path, params)
    (path.parent / f"{mode}.losses.txt").write_text(
        "".join(f"{i + 1} {v:.8f}\n" for i, v in enumerate(train_log.epoch_losses)))
    return path


def cmd_svm_train(config: PipelineConfig, model: str) -> Path:
    specs = config.specs()
    params = load_params(_require(config.weights_path(model), f"weights for model {model!r}"))
    records = _load_split(config, "train")
    patches = sample_patches(records, SamplingPlan.for_mode("plain", config.seed), min_patch_size(specs))
    pyr = config.pyramid()
    feats, labels = [], []
    for k, rec in enumerate(records):
        sel = np.flatnonzero(patches.image_index == k)
        if not len(sel):
            continue
        fmap = extract_pixel_features(rec.image, specs, params, pyr, scale=1.0)
        feats.append(fmap.features[:, patches.rows[sel], patches.cols[sel]].T)
        labels.append(np.where(patches.labels[sel] == 1, 1.0, -1.0))
    svm = train_svm(np.concatenate(feats), np.concatenate(labels), config.svm_lambda, config.svm_epochs, config.seed)
    log.info("svm %s: %d samples, dim %d, objective %.4f", model, sum(map(len, labels)), svm.dim, svm.history[-1])
    path = config.svm_path(model)
    save_svm(path, svm)
    return path


def cmd_detect(config: PipelineConfig, model: str, splits=("val", "test")) -> list:
    specs = config.specs()
    params = load_params(_require(config.weights_path(model), f"weights for model {model!r}"))
    svm = load_svm(_require(config.svm_path(model), f"SVM for model {model!r}"))
    out_dir = ensure_dir(config.edges_dir(model))
    pyr = config.pyramid()
    written = []
    for split in splits:
        for rec in _load_split(config, split):
            edge = detect_multiscale(rec.image, specs, params, svm, pyr)
            path = out_dir / f"{rec.id}.pgm"
            write_edge_map(path, edge)
            written.append(path)
    log.info("detect %s: wrote %d edge maps to %s", model, len(written), out_dir)
    return written


def _read_maps(edge_dir: Path, ids) -> list:
    missing = [i for i in ids if not (edge_dir / f"{i}.pgm").exists()]
    if missing:
        raise ConfigError(f"{edge_dir}: missing edge maps for {', '.join(missing)}")
    return [read_edge_map(edge_dir / f"{i}.pgm") for i in ids]


def _ground_truth(config: PipelineConfig, ids) -> list:
    gts = []
    missing = []
    for i in ids:
        try:
            gts.append(synth.load_annotations(config.dataset_root, i))
        except FileNotFoundError:
            missing.append(i)
    if missing:
        raise ConfigError(f"missing ground truth for {', '.join(missing)}")
    return gts


def cmd_fuse(config: PipelineConfig, model_dirs=None) -> FusionWeights:
    dirs = [Path(d) for d in model_dirs] if model_dirs else [config.edges_dir(m) for m in config.model_list()]
    if not dirs:
        raise ConfigError("fusion needs at least one model directory")
    root = Path(config.dataset_root)
    val_ids = synth.read_split(root, "val")
    test_ids = synth.read_split(root, "test")
    names = [sorted(p.stem for p in d.glob("*.pgm")) for d in dirs]
    if any(n != names[0] for n in names):
        raise ValueError("model directories hold different image sets")
    val_maps = [_read_maps(d, val_ids) for d in dirs]
    weights = search_fusion_weights(val_maps, _ground_truth(config, val_ids), config.num_thresholds,
                                    thin=config.nms)
    out_dir = ensure_dir(config.edges_dir("fused"))
    for ident in val_ids + test_ids:
        maps = [read_edge_map(d / f"{ident}.pgm") for d in dirs]
        write_edge_map(out_dir / f"{ident}.pgm", fuse(maps, weights))
    report = config.out / "fusion_report.csv"
    with open(report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([d.name for d in dirs] + ["validation_ods"])
        for w, ods in weights.candidates:
            writer.writerow([f"{v:.6f}" for v in w] + [f"{ods:.6f}"])
    for d, w in zip(dirs, weights.coefficients):
        print(f"{d.name}: {w:.4f}")
    print(f"validation ODS = {weights.validation_ods:.3f}")
    return weights


def evaluate_maps(config: PipelineConfig, edge_dir: Path, split: str = "test"):
    ids = synth.read_split(_require(Path(config.dataset_root), "dataset root"), split)
    gts = _ground_truth(config, ids)
    maps = _read_maps(_require(Path(edge_dir), "edge-map directory"), ids)
    if config.nms:
        maps = [bench.nms_thin(m) for m in maps]
    return bench.evaluate_dataset(maps, gts, config.num_thresholds)


def cmd_eval(config: PipelineConfig, edge_dir, split: str = "test", out_dir=None) -> bench.EvalSummary:
    edge_dir = Path(edge_dir)
    summary = evaluate_maps(config, edge_dir, split)
    log.info("eval %s on %s", edge_dir, split)
    out = ensure_dir(out_dir or config.out / "eval" / f"{edge_dir.name}-{split}")
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=1))
    bench.export_pr_curve(summary, out / "pr_curve")
    print(f"ODS = {summary.ods_f:.3f}  OIS = {summary.ois_f:.3f}  AP = {summary.ap:.3f}")
    return summary


def cmd_pr(summary_path, destination) -> tuple:
    summary = bench.EvalSummary.from_dict(json.loads(Path(summary_path).read_text()))
    paths = bench.export_pr_curve(summary, destination)
    for p in sorted(summary.curve, key=lambda p: p.threshold):
        print(f"{p.threshold:.3f} P={p.precision:.3f} R={p.recall:.3f} F={p.f:.3f}")
    return paths


def cmd_pipeline(config: PipelineConfig) -> dict:
    """synth -> fine-tune x3 -> SVM per model -> detect -> fuse -> eval."""
    cmd_dataset_synth(config)
    for mode in MODES:
        cmd_finetune(config, mode)
    results = {}
    for model in config.model_list():
        cmd_svm_train(config, model)
        cmd_detect(config, model)
    weights = cmd_fuse(config)
    for model in config.model_list() + ["fused"]:
        for split in ("val", "test"):
            results[(model, split)] = cmd_eval(config, config.edges_dir(model), split)
    results["fusion"] = weights
    return results


# -- argument parsing ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset-root")
    common.add_argument("--output-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pixcontour", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset tools").add_subparsers(dest="action", required=True)
    s = ds.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--n-images", type=int)

    ft = sub.add_parser("finetune", help="fine-tuning").add_subparsers(dest="action", required=True)
    s = ft.add_parser("run", parents=[common], help="fine-tune from the base weights")
    s.add_argument("--mode", choices=MODES, default="plain")

    sv = sub.add_parser("svm", help="edge classifier").add_subparsers(dest="action", required=True)
    s = sv.add_parser("train", parents=[common], help="train the SVM on one model's features")
    s.add_argument("--model", choices=MODEL_NAMES, default="base")

    s = sub.add_parser("detect", parents=[common], help="write edge maps for val and test images")
    s.add_argument("--model", choices=MODEL_NAMES, default="base")
    s.add_argument("--splits", default="val,test")

    s = sub.add_parser("fuse", parents=[common], help="search fusion weights on val and fuse edge maps")
    s.add_argument("dirs", nargs="*", help="per-model edge-map directories (default: configured models)")

    s = sub.add_parser("eval", parents=[common], help="ODS/OIS/AP of an edge-map directory")
    s.add_argument("edges", help="edge-map directory")
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.add_argument("--no-nms", action="store_true", help="maps are already thin")

    s = sub.add_parser("pr", parents=[common], help="export a PR curve from an evaluation summary")
    s.add_argument("summary", help="summary.json written by eval")
    s.add_argument("destination", help="output path stem for .csv and .svg")

    sub.add_parser("pipeline", parents=[common], help="run every stage on the synthetic dataset")
    return p


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in ("seed", "dataset_root", "output_dir", "n_images"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_nms", False):
        values["nms"] = "false"
    return values


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, _overrides(args))
        cmd = args.command
        if cmd == "dataset":
            cmd_dataset_synth(config)
        elif cmd == "finetune":
            cmd_finetune(config, args.mode)
        elif cmd == "svm":
            cmd_svm_train(config, args.model)
        elif cmd == "detect":
            cmd_detect(config, args.model, tuple(s for s in args.splits.split(",") if s))
        elif cmd == "fuse":
            cmd_fuse(config, args.dirs)
        elif cmd == "eval":
            cmd_eval(config, args.edges, args.split, args.out)
        elif cmd == "pr":
            cmd_pr(args.summary, args.destination)
        elif cmd == "pipeline":
            cmd_pipeline(config)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pixcontour: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
