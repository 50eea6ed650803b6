"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, from_dict, load_config, to_dict
from .data import (
    DataError,
    PointCloud,
    ShapeDataset,
    format_xyz,
    load_manifest,
    resample_all,
    synthetic_classification_set,
    synthetic_partseg_set,
    write_dataset,
)
from .downstream import (
    ClassificationModel,
    ClassificationTrainer,
    PartSegTrainer,
    classification_report,
    confusion_matrix,
    pca_rgb,
    predict_classes,
    run_fewshot_episode,
    sample_fewshot_episode,
)
from .geometry import tokenize
from .numerics import no_grad, strict_mode
from .numerics.errors import NumericError, ParameterError, ShapeError
from .pretraining import PointEncoder, Pretrainer, generate_mask, mask_coverage

LOG_HEADER = "step\tepoch\tlr\ttau\tloss"
FINETUNE_LOG_HEADER = "epoch\tlr\tloss\tfrozen\ttest_metric"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -----------------------------------------------------------------------------
def _load_run_config(args) -> tuple[RunConfig, Path]:
    if args.config is None:
        cfg, base = RunConfig(), Path.cwd()
    else:
        cfg, base = load_config(args.config), Path(args.config).resolve().parent
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "strict", False):
        cfg.strict = True
    return cfg, base


def _manifest_path(cfg: RunConfig, base: Path) -> Path:
    if not cfg.data.manifest:
        raise ConfigError("data.manifest: no dataset manifest configured")
    p = Path(cfg.data.manifest)
    return p if p.is_absolute() else base / p


def _dataset(cfg: RunConfig, base: Path, split: str | None) -> ShapeDataset:
    ds = ShapeDataset.from_manifest(load_manifest(_manifest_path(cfg, base)), split)
    if len(ds) == 0:
        raise DataError(f"{_manifest_path(cfg, base)}: no samples in split {split!r}")
    return ds


def _resampled(ds: ShapeDataset, num_points: int, seed: int, tag: int, epoch: int | None = None):
    key = [seed, tag] if epoch is None else [seed, tag, epoch]
    return resample_all(ds, num_points, np.random.default_rng(key))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def format_log_line(step: int, epoch: int, lr: float, tau: float, loss: float) -> str:
    return f"{step}\t{epoch}\t{lr:.6e}\t{tau:.8f}\t{loss:.8f}"


def _open_log(path: Path, header: str, append: bool):
    fresh = not (append and path.exists())
    fh = path.open("w" if fresh else "a")
    if fresh:
        fh.write(header + "\n")
    return fh


# -- pretraining ---------------------------------------------------------------------------
def pretrainer_tensors(trainer: Pretrainer) -> dict[str, np.ndarray]:
    out = dict(trainer.model.state_dict())
    out.update({f"teacher.{k}": v for k, v in trainer.teacher.model.state_dict().items()})
    state = trainer.optimizer.state
    for name in trainer.optimizer.params:
        if name in state.m:
            out[f"optim.m.{name}"] = state.m[name]
            out[f"optim.v.{name}"] = state.v[name]
    return out


def pretrainer_metadata(trainer: Pretrainer, cfg: RunConfig, epoch: int) -> dict:
    return {
        "kind": "pretrain",
        "mode": trainer.cfg.mode,
        "config": to_dict(cfg),
        "step": trainer.step,
        "epoch": epoch,
        "optimizer_t": trainer.optimizer.state.t,
        "rng": {"trainer": trainer.rng.bit_generator.state},
    }


def restore_pretrainer(trainer: Pretrainer, tensors: dict[str, np.ndarray], meta: dict) -> None:
    try:
        trainer.model.load_state_dict({k: v for k, v in tensors.items()
                                       if not k.startswith(("teacher.", "optim."))})
        trainer.teacher.model.load_state_dict(ckpt.prefixed(tensors, "teacher."))
    except (ShapeError, KeyError) as exc:
        raise ckpt.CheckpointError(f"checkpoint does not match the configured model: {exc}") from None
    state = trainer.optimizer.state
    state.m = {n: ckpt.prefixed(tensors, "optim.m.")[n].copy() for n in ckpt.prefixed(tensors, "optim.m.")}
    state.v = {n: ckpt.prefixed(tensors, "optim.v.")[n].copy() for n in ckpt.prefixed(tensors, "optim.v.")}
    state.t = int(meta["optimizer_t"])
    trainer.rng.bit_generator.state = meta["rng"]["trainer"]
    trainer.step = int(meta["step"])


def _make_pretrainer(cfg: RunConfig, steps_per_epoch: int) -> Pretrainer:
    return Pretrainer(cfg.model, cfg.pretrain, steps_per_epoch, cfg.seed, cfg.data.num_centers, cfg.data.group_size)


def cmd_pretrain(args) -> int:
    cfg, base = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = _dataset(cfg, base, "train")
    bs = cfg.pretrain.batch_size
    steps_per_epoch = -(-len(train) // bs)
    trainer = _make_pretrainer(cfg, steps_per_epoch)
    start_epoch = 0
    if args.checkpoint:
        tensors, meta = ckpt.load_checkpoint(args.checkpoint)
        if meta.get("kind") != "pretrain" or meta.get("mode") != cfg.pretrain.mode:
            raise ckpt.CheckpointError(f"{args.checkpoint}: not a {cfg.pretrain.mode} pretraining checkpoint")
        restore_pretrainer(trainer, tensors, meta)
        start_epoch = int(meta["epoch"])
    epochs = cfg.pretrain.epochs if args.epochs is None else min(args.epochs, cfg.pretrain.epochs)
    cached = None if cfg.data.resample_per_epoch else _resampled(train, cfg.data.num_points, cfg.seed, 4)[0]
    with _open_log(out / "pretrain_log.tsv", LOG_HEADER, append=bool(args.checkpoint)) as log:
        def write(step, epoch, res):
            log.write(format_log_line(step, epoch, res.lr, res.tau, res.loss) + "\n")

        for epoch in range(start_epoch, epochs):
            points = cached if cached is not None else _resampled(train, cfg.data.num_points, cfg.seed, 4, epoch)[0]
            try:
                trainer.train_epoch(points, write)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            log.flush()
            done = epoch + 1
            if done % cfg.pretrain.save_every == 0 or done == epochs:
                meta = pretrainer_metadata(trainer, cfg, done)
                tensors = pretrainer_tensors(trainer)
                ckpt.save_checkpoint(out / f"pretrain_epoch{done:04d}.p2vc", tensors, meta)
                ckpt.save_checkpoint(out / "pretrain_last.p2vc", tensors, meta)
    print(f"pretraining finished at step {trainer.step}; checkpoint in {out}")
    return 0


# -- fine-tuning ---------------------------------------------------------------------------
def _encoder_weights(tensors: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], str]:
    """Encoder weights from a pretraining or fine-tuning checkpoint."""
    for prefix in ("student.", "encoder."):
        found = ckpt.prefixed(tensors, prefix)
        if found:
            return found, prefix
    raise ckpt.CheckpointError("checkpoint holds no encoder weights")


def _load_encoder(cfg: RunConfig, path: str | None, seed_tag: int = 0) -> tuple[PointEncoder, dict]:
    encoder = PointEncoder(cfg.model, np.random.default_rng([cfg.seed, seed_tag]))
    info: dict = {"pretrained": path is not None}
    if path:
        tensors, meta = ckpt.load_checkpoint(path)
        weights, _ = _encoder_weights(tensors)
        try:
            encoder.load_state_dict(weights)
        except (ShapeError, KeyError) as exc:
            raise ckpt.CheckpointError(f"{path}: encoder does not match the configured model: {exc}") from None
        info["source_mode"] = meta.get("mode")
        info["decoder_in_checkpoint"] = any(k.startswith("decoder.") for k in tensors)
    return encoder, info


def cmd_finetune(args) -> int:
    cfg, base = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoder, info = _load_encoder(cfg, args.checkpoint)
    train, test = _dataset(cfg, base, "train"), _dataset(cfg, base, "test")
    metrics: dict = {"task": args.task, **info}
    if args.task == "partseg":
        if not train.categories or any(c.labels is None for c in train.clouds + test.clouds):
            raise DataError("partseg fine-tuning needs per-point part labels for every sample")
        pc = cfg.partseg
        xtr, ptr = _resampled(train, pc.num_points, cfg.seed, 6)
        xte, pte = _resampled(test, pc.num_points, cfg.seed, 7)
        ptr, pte = np.stack(ptr), np.stack(pte)
        categories = {**train.categories, **test.categories}
        trainer = PartSegTrainer(encoder, max(len(train.classes), 1), categories, pc, -(-len(train) // pc.batch_size),
                                 info["pretrained"], cfg.seed)
        epochs = pc.epochs if args.epochs is None else args.epochs
        with _open_log(out / "finetune_log.tsv", FINETUNE_LOG_HEADER, append=False) as log:
            for _ in range(epochs):
                rec = trainer.train_epoch(xtr, ptr, train.labels)
                scores = trainer.evaluate(xte, pte, test.labels)
                log.write(f"{rec.epoch}\t{rec.lr:.6e}\t{rec.loss:.8f}\t{int(rec.frozen)}\t{scores['accuracy']:.6f}\n")
        metrics.update(trainer.evaluate(xte, pte, test.labels))
        model = trainer.model
    else:
        fc = cfg.finetune
        xtr, _ = _resampled(train, cfg.data.num_points, cfg.seed, 6)
        xte, _ = _resampled(test, cfg.data.num_points, cfg.seed, 7)
        num_classes = len(train.classes)
        trainer = ClassificationTrainer(encoder, num_classes, fc, -(-len(train) // fc.batch_size),
                                        info["pretrained"], cfg.seed, cfg.data.num_centers, cfg.data.group_size)
        metrics["initial_test_accuracy"] = trainer.accuracy(xte, test.labels)
        epochs = fc.epochs if args.epochs is None else args.epochs
        with _open_log(out / "finetune_log.tsv", FINETUNE_LOG_HEADER, append=False) as log:
            for epoch in range(epochs):
                if cfg.data.resample_per_epoch and epoch > 0:
                    xtr, _ = _resampled(train, cfg.data.num_points, cfg.seed, 6, epoch)
                rec = trainer.train_epoch(xtr, train.labels)
                acc = trainer.accuracy(xte, test.labels)
                log.write(f"{rec.epoch}\t{rec.lr:.6e}\t{rec.loss:.8f}\t{int(rec.frozen)}\t{acc:.6f}\n")
        report = classification_report(trainer.predict(xte), test.labels, num_classes, train.classes)
        metrics.update(report)
        model = trainer.model
    meta = {"kind": args.task, "config": to_dict(cfg), "num_classes": len(train.classes),
            "classes": list(train.classes), "epoch": trainer.epoch, "step": trainer.step}
    ckpt.save_checkpoint(out / "finetune_last.p2vc", model.state_dict(), meta)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: v for k, v in metrics.items() if not isinstance(v, (dict, list))}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (a fine-tuned classification checkpoint)")
    tensors, meta = ckpt.load_checkpoint(args.checkpoint)
    if meta.get("kind") != "cls":
        raise ckpt.CheckpointError(f"{args.checkpoint}: not a classification checkpoint")
    cfg, base = _load_run_config(args)
    if args.config is None:
        cfg = from_dict(RunConfig, meta["config"])
    test = _dataset(cfg, base, "test")
    num_classes = int(meta["num_classes"])
    model = ClassificationModel(PointEncoder(cfg.model, np.random.default_rng(0)), num_classes,
                                np.random.default_rng(0), cfg.finetune.head_dims, cfg.finetune.head_dropout)
    try:
        model.load_state_dict(tensors)
    except (ShapeError, KeyError) as exc:
        raise ckpt.CheckpointError(f"{args.checkpoint}: {exc}") from None
    xte, _ = _resampled(test, cfg.data.num_points, cfg.seed, 7)
    preds = predict_classes(model, xte, cfg.data.num_centers, cfg.data.group_size, cfg.finetune.augment)
    report = classification_report(preds, test.labels, num_classes, meta.get("classes"))
    cm = confusion_matrix(preds, test.labels, num_classes)
    report["confusion_row_normalized"] = cm.row_normalized.tolist()
    report["confusion_column_normalized"] = cm.column_normalized.tolist()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_metrics.json", report)
    print(f"overall accuracy {report['overall_accuracy']:.4f}")
    return 0


def cmd_fewshot(args) -> int:
    cfg, base = _load_run_config(args)
    ds = _dataset(cfg, base, None)
    points, _ = _resampled(ds, cfg.data.num_points, cfg.seed, 8)
    way = args.way if args.way is not None else cfg.fewshot.way
    shot = args.shot if args.shot is not None else cfg.fewshot.shot
    runs = args.runs if args.runs is not None else cfg.fewshot.runs
    if args.epochs is not None:
        cfg.finetune.epochs = args.epochs
    # validate the checkpoint once up front
    _load_encoder(cfg, args.checkpoint)
    accs = []
    for run in range(runs):
        episode = sample_fewshot_episode(ds.labels, way, shot, np.random.default_rng([cfg.seed, 5, run]),
                                         cfg.fewshot.query, ds.classes)
        acc = run_fewshot_episode(lambda: _load_encoder(cfg, args.checkpoint)[0], points, episode, cfg.finetune,
                                  args.checkpoint is not None, cfg.seed + run, cfg.data.num_centers,
                                  cfg.data.group_size)
        accs.append(acc)
    report = {"way": way, "shot": shot, "runs": runs, "accuracies": accs,
              "mean": float(np.mean(accs)), "std": float(np.std(accs))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "fewshot.json", report)
    print(f"{way}-way {shot}-shot accuracy {100 * report['mean']:.2f} ± {100 * report['std']:.2f} over {runs} runs")
    return 0


# -- analysis ------------------------------------------------------------------------------
def _analysis_clouds(cfg: RunConfig, base: Path, count: int) -> list[PointCloud]:
    if cfg.data.manifest:
        ds = _dataset(cfg, base, "test")
        clouds = ds.clouds[:count]
    else:
        per_class = -(-count // 5)
        clouds = synthetic_classification_set(per_class, cfg.data.source_points, seed=cfg.seed).clouds
        order = np.random.default_rng([cfg.seed, 9]).permutation(len(clouds))[:count]
        clouds = [clouds[i] for i in sorted(order)]
    return clouds


def cmd_analyze_mask(args) -> int:
    cfg, base = _load_run_config(args)
    samples = args.samples if args.samples is not None else cfg.analysis.samples
    clouds = _analysis_clouds(cfg, base, samples)
    points, _ = resample_all(ShapeDataset(clouds, np.zeros(len(clouds), dtype=np.int64)), cfg.data.num_points,
                             np.random.default_rng([cfg.seed, 10]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for strategy in cfg.analysis.strategies:
        for ratio in cfg.analysis.ratios:
            rng = np.random.default_rng([cfg.seed, 11])
            ps = tokenize(points, cfg.data.num_centers, cfg.data.group_size, rng=rng)
            layout = generate_mask(ps.centers, strategy, ratio, rng)
            cov = mask_coverage(ps.group_indices, layout.mask, points.shape[1])
            fr = {k: float(v.mean()) for k, v in cov.fractions().items()}
            rows.append({"strategy": strategy, "ratio": ratio, "num_masked": layout.num_masked, **fr})
            if cfg.analysis.export:
                for i in range(len(points)):
                    path = out / f"mask_{strategy}_{ratio:.2f}_{i:03d}.xyz"
                    path.write_text("# x y z tag (0 uncovered, 1 visible only, 2 masked only, 3 both)\n"
                                    + format_xyz(points[i], cov.tags[i]))
    keys = ["strategy", "ratio", "num_masked", "masked_only", "visible_only", "both", "uncovered"]
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) and k != "ratio" else str(r[k]) for k in keys))
    (out / "mask_report.tsv").write_text("\n".join(lines) + "\n")
    _write_json(out / "mask_report.json", rows)
    print("\n".join(lines))
    return 0


def cmd_export_pca(args) -> int:
    cfg, base = _load_run_config(args)
    encoder, _ = _load_encoder(cfg, args.checkpoint)
    samples = args.samples if args.samples is not None else cfg.analysis.samples
    clouds = _analysis_clouds(cfg, base, samples)
    points, _ = resample_all(ShapeDataset(clouds, np.zeros(len(clouds), dtype=np.int64)), cfg.data.num_points,
                             np.random.default_rng([cfg.seed, 10]))
    ps = tokenize(points, cfg.data.num_centers, cfg.data.group_size, start=0)
    dtype = encoder.pos_encoder.fc1.weight.dtype
    encoder.eval()
    with no_grad():
        feats = encoder.encoder.norm(encoder(ps.patches.astype(dtype), ps.centers.astype(dtype))[-1]).data
    colors = pca_rgb(list(feats))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (c, rgb) in enumerate(zip(ps.centers, colors)):
        (out / f"pca_{i:03d}.xyz").write_text(format_xyz(c, extra=rgb))
    print(f"wrote {len(colors)} colored token files to {out}")
    return 0


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.kind == "partseg":
        train = synthetic_partseg_set(args.train, args.points or 2048, seed=args.seed or 0, noise=args.noise)
        test = synthetic_partseg_set(args.test, args.points or 2048, seed=(args.seed or 0) + 1, noise=args.noise)
    else:
        train = synthetic_classification_set(args.train, args.points or 8192, seed=args.seed or 0, noise=args.noise)
        test = synthetic_classification_set(args.test, args.points or 8192, seed=(args.seed or 0) + 1,
                                            noise=args.noise)
    path = write_dataset(out, train, test)
    print(f"wrote {len(train)} train and {len(test)} test shapes; manifest {path}")
    return 0


# -- entry point -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="point2vec", description="Self-supervised point cloud pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, checkpoint=True):
        p.add_argument("--config", help="JSON run configuration ('//' comments allowed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--strict", action="store_true", help="single-threaded bit-exact mode")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint to load")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    common(p)
    p.add_argument("--epochs", type=int, help="stop after this many epochs (schedule unchanged)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="classification or part-segmentation fine-tuning")
    common(p)
    p.add_argument("--task", choices=("cls", "partseg"), default="cls")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned classifier")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="m-way n-shot episodes")
    common(p)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int, help="fine-tuning epochs per episode")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("analyze-mask", help="coverage of points by masked and visible patches")
    common(p, checkpoint=False)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_analyze_mask)

    p = sub.add_parser("export-pca", help="PCA colors of token features")
    common(p)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_export_pca)

    p = sub.add_parser("gen-data", help="write a synthetic dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("cls", "partseg"), default="cls")
    p.add_argument("--train", type=int, default=200, help="training shapes (per class for cls)")
    p.add_argument("--test", type=int, default=50, help="test shapes (per class for cls)")
    p.add_argument("--points", type=int, help="points per shape")
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
        strict = getattr(args, "strict", False)
        if not strict and getattr(args, "config", None):
            strict = load_config(args.config).strict
        with strict_mode() if strict else contextlib.nullcontext():
            return args.func(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
