"""Command-line orchestration: subcommand dispatch, config resolution,
checkpoint IO, run logging, and seed management.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import engine, harness, introspect, radprep, rawio
from .adapters import finetune, probe as probe_mod
from .adapters.vit_adapter import ViTAdapter
from .augment import _resize
from .backbone import VisionTransformer, load_checkpoint
from .config import resolve_config, write_snapshot
from .errors import CheckpointError, ConfigError, DentSSLError, InvalidInputError, ManifestError, NumericError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

LOG_FORMAT = "%(asctime)s.%(msecs)03d %(levelname)s %(name)s %(message)s"
LOG_DATEFMT = "%Y-%m-%dT%H:%M:%S"


def setup_run_logging(out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
    for handler in (logging.StreamHandler(sys.stderr), logging.FileHandler(out_dir / "run.log")):
        handler.setFormatter(formatter)
        root.addHandler(handler)


def load_backbone_any(path: str | Path) -> VisionTransformer:
    """Load a backbone from either a plain backbone checkpoint or a training
    checkpoint (in which case the EMA teacher backbone is used)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    fmt = payload.get("format") if isinstance(payload, dict) else None
    if fmt == engine.TRAIN_CHECKPOINT_FORMAT:
        state, _ = engine.load_train_checkpoint(path)
        return state.teacher.backbone
    return load_checkpoint(path)[0]


def _load_path_value_file(path: Path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise ManifestError(f"{path} line {lineno}: expected 'path<TAB>value'")
            pairs.append((fields[0], fields[1]))
    return pairs


@dataclasses.dataclass
class TaskData:
    name: str
    kind: str  # classify | segment2d | segment3d
    images: np.ndarray
    labels: np.ndarray | None
    masks: np.ndarray | None
    classes: int


def load_task(task_file: str | Path) -> TaskData:
    """Task descriptor: YAML with name, kind, labels (path<TAB>label lines)
    or masks manifest, class count, and an optional input_size."""
    task_file = Path(task_file)
    if not task_file.is_file():
        raise ConfigError(f"task file not found: {task_file}")
    spec = yaml.safe_load(task_file.read_text())
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"task file {task_file} must define at least 'kind'")
    kind = spec["kind"]
    if kind not in ("classify", "segment2d", "segment3d"):
        raise ConfigError(f"unknown task kind {kind!r}")
    base = task_file.parent
    input_size = spec.get("input_size")

    def load_grid(rel: str) -> np.ndarray:
        arr = rawio.load_tensor(base / rel if not Path(rel).is_absolute() else rel).astype(np.float32)
        if input_size is not None:
            arr = _resize(arr, (int(input_size),) * arr.ndim)
        return arr

    labels = masks = None
    if kind == "classify":
        pairs = _load_path_value_file(base / spec["labels"])
        images = np.stack([load_grid(p) for p, _ in pairs])
        labels = np.array([int(v) for _, v in pairs], dtype=np.int64)
    else:
        pairs = _load_path_value_file(base / spec["masks"])
        images = np.stack([load_grid(p) for p, _ in pairs])
        loaded_masks = []
        for _, mask_rel in pairs:
            m = rawio.load_tensor(base / mask_rel if not Path(mask_rel).is_absolute() else mask_rel)
            loaded_masks.append(m.astype(np.int64))
        masks = np.stack(loaded_masks)
    return TaskData(
        name=spec.get("name", task_file.stem),
        kind=kind,
        images=images,
        labels=labels,
        masks=masks,
        classes=int(spec.get("classes", 2)),
    )


def _embed_task_images(backbone: VisionTransformer, images: np.ndarray, layers: int = 1) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)
    return probe_mod.image_embedding(backbone, x, layers=layers).numpy()


def cmd_prep(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    write_snapshot(
        {"manifest": args.manifest, "out": args.out, "slices_per_plane": args.slices_per_plane, "seed": args.seed},
        out_dir,
    )
    records = rawio.ingest_manifest(args.manifest)
    base = Path(args.manifest).parent
    out_records = []
    n_dropped = 0
    for i, rec in enumerate(records):
        src = Path(rec.path)
        arr = rawio.load_tensor(src if src.is_absolute() else base / src)
        if rec.kind == rawio.KIND_IMAGE2D:
            img = radprep.RadImage(pixels=arr.astype(np.float32), source_id=rec.path)
            img = radprep.crop_foreground(radprep.normalize_image(img))
            report = radprep.quality_filter(img)
            if not report.passed:
                logger.warning("dropping low-quality image %s (snr=%.3f entropy=%.3f)", rec.path, report.snr, report.entropy)
                n_dropped += 1
                continue
            name = f"img_{i:05d}.rt"
            rawio.save_tensor(out_dir / name, img.pixels)
            out_records.append(rawio.ManifestRecord(name, rawio.KIND_IMAGE2D, rec.modality, img.pixels.shape, rec.split_tag))
        else:
            vol = radprep.VolumeGrid(voxels=arr.astype(np.float32), source_id=rec.path)
            vol = radprep.crop_foreground(radprep.normalize_volume(vol))
            name = f"vol_{i:05d}.rt"
            rawio.save_tensor(out_dir / name, vol.voxels)
            out_records.append(rawio.ManifestRecord(name, rawio.KIND_VOLUME3D, rec.modality, vol.voxels.shape, rec.split_tag))
            for j, sl in enumerate(radprep.extract_slices(vol, args.slices_per_plane, rng_seed=args.seed + i)):
                sl = radprep.normalize_image(sl)
                sl_name = f"vol_{i:05d}_slice_{j:02d}.rt"
                rawio.save_tensor(out_dir / sl_name, sl.pixels)
                out_records.append(
                    rawio.ManifestRecord(sl_name, rawio.KIND_IMAGE2D, radprep.ImageModality.SLICE.value, sl.pixels.shape, rec.split_tag)
                )
    rawio.write_manifest(out_records, out_dir / "manifest.tsv")
    logger.info("prep: wrote %d records (%d dropped) to %s", len(out_records), n_dropped, out_dir)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    defaults = dataclasses.asdict(engine.preset(args.preset))
    values = resolve_config(defaults, args.config, args.set)
    for key in ("masking_ratio", "learning_rate"):
        values[key] = tuple(values[key])
    cfg = engine.PretrainConfig(**values)
    write_snapshot(dataclasses.asdict(cfg), out_dir)
    final = engine.pretrain(args.manifest, cfg, out_dir, resume=args.resume)
    logger.info("pretrain finished: %s", final)
    return EXIT_OK


def cmd_probe(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    write_snapshot({"ckpt": args.ckpt, "task": args.task, "layers": args.layers, "seed": args.seed}, out_dir)
    backbone = load_backbone_any(args.ckpt)
    task = load_task(args.task)
    if task.kind != "classify":
        raise ConfigError("probe requires a classification task")
    features = _embed_task_images(backbone, task.images, layers=args.layers)
    plans = harness.make_splits(features.shape[0])
    accs = []
    for plan in plans:
        result = probe_mod.linear_probe(
            features[plan.train], task.labels[plan.train], seed=args.seed,
            test_embeddings=features[plan.test], test_labels=task.labels[plan.test],
        )
        accs.append(result.test_accuracy)
        logger.info("split %d: best C=%.3g test acc=%.4f", plan.seed, result.best_c, result.test_accuracy)
    mean, std = harness.aggregate(accs)
    report = {"task": task.name, "metric": "ACC", "per_split": accs, "mean": mean, "std": std}
    (out_dir / "probe_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info("probe: ACC %.4f +/- %.4f", mean, std)
    return EXIT_OK


def cmd_segment(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    write_snapshot(
        {"ckpt": args.ckpt, "task": args.task, "head": args.head, "epochs": args.epochs, "seed": args.seed}, out_dir
    )
    backbone = load_backbone_any(args.ckpt)
    task = load_task(args.task)
    if task.kind not in ("segment2d", "segment3d"):
        raise ConfigError("segment requires a segmentation task")
    mode = "linear2d" if args.head == "linear" else "unetr3d"
    head = finetune.make_seg_head(backbone, task.classes + 1, mode)
    fit = finetune.finetune_segmentation(
        backbone, task.images, task.masks, head, mode=mode, classes=task.classes,
        epochs=args.epochs, seed=args.seed,
    )
    report = {"task": task.name, "head": args.head, "best_val_mdice": fit.best_val_dice, "epochs": args.epochs}
    (out_dir / "segment_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info("segment: best val mDice %.4f", fit.best_val_dice)
    return EXIT_OK


def cmd_adapt(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    write_snapshot(
        {"ckpt": args.ckpt, "task": args.task, "mode": args.mode, "iterations": args.iterations, "seed": args.seed},
        out_dir,
    )
    backbone = load_backbone_any(args.ckpt)
    task = load_task(args.task)
    if args.mode == "classify":
        if task.kind != "classify":
            raise ConfigError("adapt --mode classify requires a classification task")
        fit = finetune.finetune_adapter_classifier(
            backbone, task.images, task.labels, iterations=args.iterations, seed=args.seed
        )
        report = {
            "task": task.name,
            "best_lr": fit.lr,
            "best_layers": fit.layers,
            "val_accuracy": fit.val_accuracy,
            "grid_cells": len(fit.grid_scores),
        }
    else:
        if task.kind not in ("segment2d", "segment3d"):
            raise ConfigError("adapt --mode segment requires a segmentation task")
        mode = "linear2d" if task.kind == "segment2d" else "unetr3d"
        adapter = ViTAdapter(backbone)
        head = finetune.make_seg_head(backbone, task.classes + 1, mode)
        fit = finetune.finetune_segmentation(
            backbone, task.images, task.masks, head, mode=mode, classes=task.classes,
            epochs=args.iterations, seed=args.seed, adapter=adapter,
        )
        report = {"task": task.name, "best_val_mdice": fit.best_val_dice}
    (out_dir / "adapt_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    defaults = {
        "tasks": [],
        "split_seeds": list(harness.DEFAULT_SPLIT_SEEDS),
        "train_ratio": harness.DEFAULT_TRAIN_RATIO,
        "fewshot": False,
        "fewshot_levels": list(harness.FEWSHOT_LEVELS),
        "resamples_per_level": harness.RESAMPLES_PER_LEVEL,
        "probe_c_count": 45,
    }
    values = resolve_config(defaults, args.config, args.set)
    write_snapshot(values, out_dir)
    tasks = [harness.TaskSpec(**t) if isinstance(t, dict) else t for t in values["tasks"]]
    cfg = harness.BenchmarkConfig(
        tasks=tasks,
        split_seeds=tuple(values["split_seeds"]),
        train_ratio=values["train_ratio"],
        fewshot=values["fewshot"],
        fewshot_levels=tuple(values["fewshot_levels"]),
        resamples_per_level=values["resamples_per_level"],
        probe_c_count=values["probe_c_count"],
        base_dir=str(Path(args.config).parent) if args.config else ".",
    )
    report = harness.run_benchmark(cfg, out_dir)
    logger.info("eval: report at %s", report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    out_dir = Path(args.out)
    setup_run_logging(out_dir)
    write_snapshot({"ckpt": args.ckpt, "input": args.input, "what": args.what, "k": args.k, "seed": args.seed}, out_dir)
    backbone = load_backbone_any(args.ckpt)
    arr = rawio.load_tensor(args.input).astype(np.float32)
    x = torch.from_numpy(arr)[None, None]
    if args.what == "attn":
        maps = introspect.cls_attention(backbone, x)
        np.save(out_dir / "attention_maps.npy", maps.per_head)
        np.save(out_dir / "attention_merged.npy", maps.merged)
        if arr.ndim == 2:
            for h in range(min(introspect.ATTENTION_HEADS_SHOWN, maps.per_head.shape[0])):
                introspect.render_attention_overlay(arr, maps.per_head[h], out_dir / f"attn_head{h}.png")
            introspect.render_attention_overlay(arr, maps.merged, out_dir / "attn_merged.png")
    elif args.what == "kmeans":
        labels = introspect.cluster_map(backbone, x, k=args.k, seed=args.seed)[0]
        np.save(out_dir / "kmeans_labels.npy", labels)
    else:  # export
        dataset = [(Path(args.input).stem, args.label, arr)]
        introspect.export_embeddings(backbone, dataset, out_dir / "embeddings.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dentssl", description="Dental radiograph SSL toolkit")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("prep", help="standardize a raw manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slices-per-plane", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("pretrain", help="run self-distillation pre-training")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--preset", default="2d_b", help="2d_b|2d_l|2d_g|3d_b|3d_l|3d_g")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probing on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=1, choices=(1, 4))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("segment", help="train a segmentation head on frozen features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head", choices=("linear", "unetr"), default="linear")
    p.add_argument("--epochs", type=int, default=finetune.SEG_EPOCHS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("adapt", help="fit a downstream adapter")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("classify", "segment"), default="classify")
    p.add_argument("--iterations", type=int, default=finetune.ADAPTER_ITERATIONS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="run the benchmark protocol")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="attention / k-means / embedding export")
    p.add_argument("what", choices=("attn", "kmeans", "export"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="raw tensor container")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--label", default="")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("usage error: %s", exc)
        return EXIT_USAGE
    except (InvalidInputError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except DentSSLError as exc:
        logger.error("error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
