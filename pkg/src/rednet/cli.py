"""Command-line entry point.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 5
gradient check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import RunConfig, parse_overrides
from .data import (DatasetManifest, compute_stats, load_sample, read_pgm16,
                   read_ppm, resize_sample, normalize, synth_generate, write_pgm8,
                   Sample, ManifestRecord)
from .errors import ConfigError, DataError, NumericError
from .loss import count_label_pixels, save_class_counts
from .metrics import predict_labels, report
from .tensor import Tensor, rten_write
from .trainer import evaluate, model_from_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rednet",
                                     description="RGB-D residual encoder-decoder segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    p.add_argument("--manifest", help="shortcut for --set manifest=PATH")
    p.add_argument("--pyramid", choices=("on", "off"),
                   help="enable/disable pyramid side losses")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for per-output reports")

    p = sub.add_parser("infer", help="segment one rgb/depth pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("scope", nargs="?", default="all",
                   choices=("all", "ops", "units", "model"))
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stats", help="dataset mean/std and class histogram")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for stats.txt and class_counts.txt")
    return parser


def _write_provenance(out_dir: Path, name: str, items: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def _cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.manifest is not None:
        overrides["manifest"] = args.manifest
    if args.pyramid is not None:
        overrides["pyramid"] = "true" if args.pyramid == "on" else "false"
    if args.config:
        run = RunConfig.from_file(args.config, overrides)
    else:
        run = RunConfig.from_dict(overrides)
    if not run.manifest:
        raise ConfigError("no manifest given (config key 'manifest' or --manifest)")
    manifest = DatasetManifest.read(run.manifest)
    manifest.validate()
    result = train(run, manifest, args.out, resume=args.resume)
    print(f"trained {result.epochs_run} epochs"
          + (" (early stop)" if result.stopped_early else ""))
    if result.history:
        print(f"final loss {result.history[-1][2]:.6g}, best {result.best_loss:.6g}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, run, stats = model_from_checkpoint(args.checkpoint)
    if stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no dataset statistics")
    manifest = DatasetManifest.read(args.manifest)
    manifest.validate()
    rep = evaluate(model, manifest, run, stats)
    print(rep.table())
    if args.out:
        out = Path(args.out)
        _write_provenance(out, "eval_config.txt",
                          {"checkpoint": args.checkpoint, "manifest": args.manifest})
        with open(out / "summary.txt", "w") as fh:
            fh.write(rep.table() + "\n")
        for name in rep.names:
            with open(out / f"report_{name}.txt", "w") as fh:
                fh.write(report(rep.matrices[name], title=f"output {name}") + "\n")
            rten_write(out / f"confusion_{name}.rten",
                       rep.matrices[name].counts[None, None].astype(np.int32))
    return EXIT_OK


def _cmd_infer(args) -> int:
    model, run, stats = model_from_checkpoint(args.checkpoint)
    if stats is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no dataset statistics")
    rgb = read_ppm(args.rgb)
    depth = read_pgm16(args.depth)
    if rgb.shape[1:] != depth.shape[1:]:
        raise DataError(
            f"rgb {rgb.shape[1:]} and depth {depth.shape[1:]} sizes disagree"
        )
    sample = Sample(rgb, depth, np.zeros(rgb.shape[1:], dtype=np.int32))
    sample = normalize(resize_sample(sample, run.height, run.width), stats)
    outs = model.forward(Tensor(sample.rgb[None]), Tensor(sample.depth[None]), "eval")
    out = Path(args.out)
    _write_provenance(out, "infer_config.txt",
                      {"checkpoint": args.checkpoint, "rgb": args.rgb, "depth": args.depth})
    for name, scores in zip(("out1", "out2", "out3", "out4", "final"), outs.as_tuple()):
        rten_write(out / f"scores_{name}.rten", scores.data)
        write_pgm8(out / f"pred_{name}.pgm", predict_labels(scores)[0])
    print(f"wrote score maps and argmax visualizations to {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    table, ok = gradcheck.main_table(args.scope, args.seeds)
    print(table)
    return EXIT_OK if ok else EXIT_GRADCHECK


def _cmd_synth(args) -> int:
    manifest = synth_generate(args.samples, args.height, args.width, args.classes,
                              args.seed, args.out)
    _write_provenance(Path(args.out), "synth_config.txt", {
        "samples": args.samples, "height": args.height, "width": args.width,
        "classes": args.classes, "seed": args.seed,
    })
    print(f"wrote {len(manifest)} samples and {Path(args.out) / 'manifest.tsv'}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    manifest.validate()
    stats = compute_stats(manifest)
    counts = count_label_pixels(
        (load_sample(r).labels for r in manifest.records), manifest.num_classes)
    for k, v in stats.to_dict().items():
        print(f"{k} = {v}")
    if stats.degenerate:
        print(f"# degenerate channels (std < 1e-12, guarded to 1): {','.join(stats.degenerate)}")
    for i, c in enumerate(counts, start=1):
        print(f"class {i}: {int(c)} pixels")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "stats.txt", "w") as fh:
            for k, v in stats.to_dict().items():
                fh.write(f"{k} = {v}\n")
        save_class_counts(out / "class_counts.txt", counts)
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
