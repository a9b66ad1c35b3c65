"""Training and evaluation loops.

Every source of randomness derives from (seed, stream, epoch[, sample
index]) through numpy SeedSequences, so a run is a pure function of (seed,
config, manifest): logs reproduce bit for bit and resuming from a checkpoint
continues exactly where the uninterrupted run would be.

Log lines are ``epoch\tlr\tloss_total\tloss_out1..loss_final\twall_s``; the
wall-clock column is the only non-deterministic field.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as loss_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (DatasetManifest, DatasetStats, Sample, augment, compute_stats,
                   load_sample, normalize, resize_sample)
from .errors import ConfigError, DataError, NumericError
from .metrics import ConfusionMatrix, SegmentationMetrics, metrics, predict_labels
from .model import PyramidOutputs, RedNet
from .optim import SGD, lr_at_epoch
from .tensor import Tensor

# rng stream tags, kept distinct per purpose
_STREAM_SHUFFLE = 1
_STREAM_AUGMENT = 2

_LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_out1", "loss_out2",
                "loss_out3", "loss_out4", "loss_final", "wall_s")


@dataclass
class TrainResult:
    epochs_run: int
    stopped_early: bool
    history: list[tuple] = field(default_factory=list)  # deterministic log rows
    log_path: Path | None = None
    best_path: Path | None = None
    final_path: Path | None = None
    best_loss: float = math.inf


def _prepare_sample(record, run: RunConfig, stats: DatasetStats, epoch: int,
                    index: int) -> Sample:
    s = load_sample(record)
    s = resize_sample(s, run.height, run.width)
    if run.augment:
        rng = np.random.default_rng([run.seed, _STREAM_AUGMENT, epoch, index])
        s = augment(s, rng, run.aug_config())
    return normalize(s, stats)


def _stack_batch(samples: list[Sample], dtype=np.float32):
    rgb = Tensor(np.stack([s.rgb for s in samples]).astype(dtype))
    depth = Tensor(np.stack([s.depth for s in samples]).astype(dtype))
    labels = np.stack([s.labels for s in samples])
    return rgb, depth, labels


def _format_row(row: tuple) -> str:
    epoch, lr, *losses, wall = row
    nums = "\t".join(f"{v:.17g}" for v in (lr, *losses))
    return f"{epoch}\t{nums}\t{wall:.3f}"


def _nan_dump(path: Path, model: RedNet, epoch: int, batch_no: int,
              terms: tuple, total: float) -> None:
    with open(path, "w") as fh:
        fh.write(f"non-finite loss at epoch {epoch}, batch {batch_no}\n")
        fh.write(f"total={total!r} terms={terms!r}\n")
        for name, p in model.named_params().items():
            fh.write(
                f"{name}\tmax|theta|={np.abs(p.data).max():.6g}"
                f"\tmax|grad|={np.abs(p.grad).max():.6g}\n"
            )


def train(run: RunConfig, manifest: DatasetManifest, out_dir,
          resume: str | Path | None = None) -> TrainResult:
    """Run the epoch loop, writing the log, class histogram, resolved config,
    and periodic/best/final checkpoints into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.write(out_dir / "config.txt")
    if manifest.num_classes != run.num_classes:
        raise ConfigError(
            f"manifest has {manifest.num_classes} classes, config says {run.num_classes}"
        )
    if len(manifest) == 0:
        raise DataError("manifest is empty")

    counts = loss_mod.count_label_pixels(
        (load_sample(r).labels for r in manifest.records), run.num_classes)
    loss_mod.save_class_counts(out_dir / "class_counts.txt", counts)
    weights = loss_mod.median_frequency_weights(counts)

    model = RedNet(run.network_config(), seed=run.seed)
    opt = SGD(list(model.params()), lr=run.base_lr, momentum=run.momentum,
              weight_decay=run.weight_decay)

    start_epoch = 0
    best = math.inf
    stale = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != run.to_dict():
            raise ConfigError("checkpoint config does not match the run config")
        model.load_state(ckpt.params, ckpt.buffers)
        opt.load_velocity(ckpt.velocity)
        stats = ckpt.stats
        start_epoch = ckpt.epoch + 1
        best = float(ckpt.extra.get("best_loss", "inf"))
        stale = int(ckpt.extra.get("stale_epochs", "0"))
    else:
        stats = compute_stats(manifest)
    with open(out_dir / "stats.txt", "w") as fh:
        for k, v in stats.to_dict().items():
            fh.write(f"{k} = {v}\n")

    val_manifest = DatasetManifest.read(run.val_manifest) if run.val_manifest else None

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            config=run.to_dict(), epoch=epoch, seed=run.seed,
            params={n: p.data for n, p in model.named_params().items()},
            buffers=model.named_buffers(),
            velocity=opt.velocity, stats=stats,
            extra={"best_loss": repr(best), "stale_epochs": str(stale)},
        )

    side_weight = 1.0 if run.pyramid else 0.0
    log_path = out_dir / "train_log.tsv"
    result = TrainResult(epochs_run=start_epoch, stopped_early=False, log_path=log_path)
    log = open(log_path, "a" if resume is not None else "w")
    try:
        for epoch in range(start_epoch, run.epochs):
            t0 = time.perf_counter()
            lr = lr_at_epoch(run.base_lr, epoch, run.lr_decay, run.lr_decay_every)
            opt.lr = lr
            order = np.random.default_rng([run.seed, _STREAM_SHUFFLE, epoch]).permutation(len(manifest))
            sums = np.zeros(6)
            batches = 0
            for b0 in range(0, len(order), run.batch_size):
                idx = order[b0 : b0 + run.batch_size]
                samples = [_prepare_sample(manifest.records[i], run, stats, epoch, int(i))
                           for i in idx]
                rgb, depth, labels = _stack_batch(samples)
                if not np.any(labels != loss_mod.IGNORE_INDEX):
                    print(f"warning: epoch {epoch} batch {batches}: all pixels ignored, skipping")
                    continue
                targets = loss_mod.build_pyramid_targets(labels, (run.height, run.width))
                outs = model.forward(rgb, depth, "train")
                total, terms, grads = loss_mod.pyramid_loss(outs, targets, weights,
                                                            side_weight=side_weight)
                if not math.isfinite(total):
                    _nan_dump(out_dir / "nan_dump.txt", model, epoch, batches, terms, total)
                    raise NumericError(
                        f"non-finite loss {total!r} at epoch {epoch}; "
                        f"diagnostics in {out_dir / 'nan_dump.txt'}"
                    )
                model.zero_grad()
                model.backward(grads)
                opt.step()
                sums += (total, *terms)
                batches += 1
            if batches == 0:
                print(f"warning: epoch {epoch} had no scorable batches")
                continue
            means = sums / batches
            row = (epoch, lr, *means, time.perf_counter() - t0)
            result.history.append(row)
            log.write(_format_row(row) + "\n")
            log.flush()
            result.epochs_run = epoch + 1

            monitored = means[0]
            if val_manifest is not None:
                monitored = evaluate_loss(model, val_manifest, run, stats, weights,
                                          side_weight)
            improved = monitored < best * (1.0 - run.early_stop_rel) or not math.isfinite(best)
            if improved:
                best = monitored
                stale = 0
                save_checkpoint(out_dir / "ckpt_best.rckp", snapshot(epoch))
                result.best_path = out_dir / "ckpt_best.rckp"
                result.best_loss = best
            else:
                stale += 1
            if run.checkpoint_every > 0 and (epoch + 1) % run.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_epoch_{epoch:04d}.rckp", snapshot(epoch))
            if stale >= run.early_stop_patience:
                result.stopped_early = True
                break
    finally:
        log.close()
    final_epoch = result.epochs_run - 1
    if final_epoch >= 0:
        save_checkpoint(out_dir / "ckpt_final.rckp", snapshot(final_epoch))
        result.final_path = out_dir / "ckpt_final.rckp"
    return result


def model_from_checkpoint(path) -> tuple[RedNet, RunConfig, DatasetStats | None]:
    """Rebuild a model (eval-ready) from a checkpoint file."""
    ckpt = load_checkpoint(path)
    run = RunConfig.from_dict(ckpt.config)
    model = RedNet(run.network_config(), seed=ckpt.seed)
    model.load_state(ckpt.params, ckpt.buffers)
    return model, run, ckpt.stats


def _eval_batches(manifest: DatasetManifest, run: RunConfig, stats: DatasetStats):
    for b0 in range(0, len(manifest), run.batch_size):
        records = manifest.records[b0 : b0 + run.batch_size]
        samples = [normalize(resize_sample(load_sample(r), run.height, run.width), stats)
                   for r in records]
        yield _stack_batch(samples)


def evaluate_loss(model: RedNet, manifest: DatasetManifest, run: RunConfig,
                  stats: DatasetStats, weights, side_weight: float = 1.0) -> float:
    total = 0.0
    n = 0
    for rgb, depth, labels in _eval_batches(manifest, run, stats):
        targets = loss_mod.build_pyramid_targets(labels, (run.height, run.width))
        outs = model.forward(rgb, depth, "eval")
        t, _, _ = loss_mod.pyramid_loss(outs, targets, weights, side_weight=side_weight)
        total += t
        n += 1
    return total / max(n, 1)


@dataclass
class EvalReport:
    """Per-output confusion matrices and metrics, final output last."""

    names: tuple[str, ...]
    matrices: dict[str, ConfusionMatrix]
    summaries: dict[str, SegmentationMetrics]

    def table(self) -> str:
        lines = [f"{'output':>8} {'pixel':>8} {'mean':>8} {'miou':>8}"]
        for name in self.names:
            m = self.summaries[name]
            lines.append(f"{name:>8} {m.pixel_acc:8.4f} {m.mean_acc:8.4f} {m.miou:8.4f}")
        return "\n".join(lines)


def evaluate(model: RedNet, manifest: DatasetManifest, run: RunConfig,
             stats: DatasetStats) -> EvalReport:
    """Score every output scale against nearest-downsampled ground truth."""
    names = ("out1", "out2", "out3", "out4", "final")
    cms = {n: ConfusionMatrix(run.num_classes) for n in names}
    for rgb, depth, labels in _eval_batches(manifest, run, stats):
        targets = loss_mod.build_pyramid_targets(labels, (run.height, run.width))
        outs = model.forward(rgb, depth, "eval")
        for name, out, tgt in zip(names, outs.as_tuple(), targets.as_tuple()):
            cms[name].accumulate(predict_labels(out), tgt)
    summaries = {n: metrics(cm) for n, cm in cms.items()}
    return EvalReport(names, cms, summaries)
