"""Command-line entry point.

Rows on stdout are tab-delimited; diagnostics go to stderr. Exit status is
0 on success, 1 for invalid input or a failed check, 2 for I/O problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, gen_synthetic, resize_bilinear, resize_nearest, split_dataset
from .formats import FormatError, read_image, write_pnm
from .gradcheck import gradcheck_suite
from .losses import LossWeights
from .model import ModelConfig, PromptSet, build_model, count_params, forward
from .tensor import Tensor, no_grad
from .training import (
    TrainConfig,
    build_loaders,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    fit,
    format_row,
    init_state,
    load_samples,
)

log = logging.getLogger("ultraupconvnet")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
SPLITS = ("train", "val", "test")
PRESETS = {"full": ModelConfig.full, "toy": ModelConfig.toy}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def emit(*fields_) -> None:
    print(format_row(*fields_))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def load_config(path: str | Path, no_prompts: bool = False) -> tuple[ModelConfig, TrainConfig]:
    """Split one flat JSON object into model, training and loss-weight settings.

    An optional ``"preset"`` of ``full`` or ``toy`` supplies the model defaults.
    """
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    preset = doc.pop("preset", "full")
    if preset not in PRESETS:
        raise ValueError(f"{path}: preset must be one of {sorted(PRESETS)}")
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)} - {"loss_weights"}
    weight_keys = {f.name for f in fields(LossWeights)}
    unknown = sorted(set(doc) - model_keys - train_keys - weight_keys)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    model_kw = {k: v for k, v in doc.items() if k in model_keys}
    if no_prompts:
        model_kw["prompts_enabled"] = False
    train_kw = {k: v for k, v in doc.items() if k in train_keys}
    weights = LossWeights(**{k: v for k, v in doc.items() if k in weight_keys})
    return PRESETS[preset](**model_kw), TrainConfig(loss_weights=weights, **train_kw)


def parse_prompts(text: str) -> PromptSet:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"--prompts needs four comma-separated indices, got {text!r}")
    try:
        return PromptSet(*(int(p) for p in parts))
    except ValueError as exc:
        raise ValueError(f"--prompts indices must be integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    manifest, _ = gen_synthetic(args.out, args.n_seg, args.n_cls, args.size, args.seed)
    emit("samples", len(manifest))
    emit("manifest", Path(args.out) / "manifest.json")
    return EXIT_OK


def _split(manifest: DatasetManifest, seed: int) -> dict[str, DatasetManifest]:
    return dict(zip(SPLITS, split_dataset(manifest, seed=seed)))


def cmd_train(args) -> int:
    model_config, train_config = load_config(args.config, args.no_prompts)
    if args.epochs is not None:
        train_config = TrainConfig.from_dict({**train_config.to_dict(), "epochs": args.epochs})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(args.data)
    splits = _split(manifest, train_config.seed)
    (out / "split.json").write_text(
        json.dumps({k: [s.id for s in m.samples] for k, m in splits.items()}, indent=2, sort_keys=True) + "\n"
    )
    state = init_state(model_config, train_config)
    train_samples = load_samples(splits["train"], model_config)
    val_samples = load_samples(splits["val"], model_config)
    seg, cls = build_loaders(train_samples, train_config)
    log.info("training on %d samples (%d seg, %d cls)", len(train_samples), len(seg.samples), len(cls.samples))
    metrics = out / "metrics.tsv"
    metrics.write_text("")
    reports = fit(state, seg, cls, eval_loaders=build_loaders(val_samples, train_config, train=False),
                  metrics_log=metrics)
    checkpoint_save(state, out / "model.ckpt")
    for report in reports[-1:]:
        for row in report.rows():
            emit(*row)
    emit("checkpoint", out / "model.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = checkpoint_load(args.checkpoint)
    manifest = DatasetManifest.load(args.data)
    subset = manifest if args.split == "all" else _split(manifest, state.train_config.seed)[args.split]
    samples = load_samples(subset, state.model_config)
    for loader in build_loaders(samples, state.train_config, train=False):
        if loader.samples:
            for row in evaluate(state, loader):
                emit(args.split, row.task, row.metric, row.value, row.count)
    return EXIT_OK


def cmd_predict(args) -> int:
    state = checkpoint_load(args.checkpoint)
    config = state.model_config
    if args.prompts is None:
        log.warning("no --prompts given; using 0,0,0,0")
        prompts = PromptSet()
    else:
        prompts = parse_prompts(args.prompts)
    prompts.validate(config.prompt_cardinalities)
    image = read_image(args.image)
    h, w = image.shape[-2:]
    if image.shape[0] != config.in_channels:
        if image.shape[0] != 1:
            raise ValueError(f"{args.image}: {image.shape[0]} channels, model expects {config.in_channels}")
        image = np.repeat(image, config.in_channels, axis=0)
    if h != w:
        raise ValueError(f"{args.image}: predict expects a square image, got {h}x{w}")
    batch = Tensor(resize_bilinear(image, config.input_size)[None])
    with no_grad():
        seg_logits = forward(state.params, config, batch, prompts, "seg")
        logits2, logits4 = forward(state.params, config, batch, prompts, "cls")
    labels = resize_nearest(np.argmax(seg_logits.data[0], axis=0), h)
    write_pnm(args.out, labels.astype(np.uint8), maxval=max(1, config.seg_classes - 1))
    emit("mask", args.out, int((labels > 0).sum()))
    emit("cls2", int(np.argmax(logits2.data[0])))
    emit("cls4", int(np.argmax(logits4.data[0])))
    return EXIT_OK


def cmd_count_params(args) -> int:
    model_config, _ = load_config(args.config, args.no_prompts)
    total, groups = count_params(build_model(model_config))
    emit("total", total)
    for name, n in groups.items():
        emit(name, n)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.scale, seed=args.seed)
    ok = True
    for group, (err, tol) in results.items():
        passed = err < tol
        ok &= passed
        emit(group, err, tol, "PASS" if passed else "FAIL")
    return EXIT_OK if ok else EXIT_INVALID


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ultraupconvnet", description="Prompted multi-task ultrasound network (numpy).")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-seg", type=int, required=True)
    p.add_argument("--n-cls", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the 70%% split of a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-prompts", action="store_true")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompts", help="nature,position,task,type indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", help="print parameter counts for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--no-prompts", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scale", choices=("toy",), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, json.JSONDecodeError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
