"""AdamW, the two-loop multi-task epoch, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .data import AugmentConfig, DatasetManifest, Sample, apply_augment, load_sample, sample_augment_params, sample_rng
from .formats import FormatError, pack_tensor, unpack_tensor
from .losses import LossWeights, accuracy, cls_loss, dice_score, final_loss, seg_loss
from .model import CLS_WAYS, ModelConfig, ModelParams, PromptSet, build_model, forward, param_shapes
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UUCKPT01"
CHECKPOINT_VERSION = 1
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size_seg: int = 8
    batch_size_cls: int = 8
    loss_weights: LossWeights = LossWeights()
    seed: int = 0
    eval_every: int = 0  # 0 evaluates only after the last epoch
    checkpoint_dir: str | None = None
    augment: bool = True
    flip_p: float = 0.5
    max_rotation_deg: float = 20.0
    crop_fraction: float = 0.875
    grad_clip: float | None = None  # global L2 norm; None disables
    lr_schedule: str = "constant"

    def __post_init__(self):
        if isinstance(self.loss_weights, Mapping):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        problems = []
        if not self.learning_rate > 0:
            problems.append(f"learning_rate={self.learning_rate} must be > 0")
        if self.batch_size_seg < 1 or self.batch_size_cls < 1:
            problems.append("batch sizes must be >= 1")
        if self.epochs < 0 or self.eval_every < 0:
            problems.append("epochs and eval_every must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            problems.append("AdamW needs betas in [0, 1), eps > 0 and weight_decay >= 0")
        if not 0 < self.crop_fraction <= 1 or not 0 <= self.flip_p <= 1 or self.max_rotation_deg < 0:
            problems.append("augmentation needs crop_fraction in (0, 1], flip_p in [0, 1], max_rotation_deg >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append("grad_clip must be positive when set")
        if self.lr_schedule not in LR_SCHEDULES:
            problems.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    @property
    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.flip_p, self.max_rotation_deg, self.crop_fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {unknown}")
        return cls(**dict(d))


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine" and config.epochs > 0:
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(epoch, config.epochs) / config.epochs))
    return config.learning_rate


@dataclass
class TrainState:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    param_steps: dict[str, int]
    global_step: int = 0
    task_steps: dict[str, int] = field(default_factory=lambda: {"seg": 0, "cls": 0})
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    params = build_model(model_config, train_config.seed)
    return TrainState(
        model_config=model_config,
        train_config=train_config,
        params=params,
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        param_steps={k: 0 for k in params},
        rng=np.random.default_rng([train_config.seed, 0x5EED]),
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def clip_grad_norm(grads: Mapping[str, np.ndarray | None], max_norm: float) -> dict[str, np.ndarray | None]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / (total + 1e-12)
    return {k: None if g is None else g * scale for k, g in grads.items()}


def adamw_step(
    state: TrainState,
    grads: Mapping[str, np.ndarray | None],
    config: TrainConfig,
    lr: float | None = None,
) -> TrainState:
    """One decoupled-weight-decay Adam update, in place.

    Parameters whose gradient is ``None`` took no part in the loss and are
    left untouched, moments and step count included.
    """
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        if g is None:
            continue
        p = state.params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        t = state.param_steps[name] + 1
        state.param_steps[name] = t
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p.data)
    state.global_step += 1
    return state


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray  # [N, C, S, S]
    masks: np.ndarray | None  # [N, S, S]
    labels: np.ndarray | None
    ways: np.ndarray | None
    prompts: list[PromptSet]


class BatchLoader:
    """In-memory samples for one task, batched in a seeded order."""

    def __init__(
        self,
        samples: Sequence[Sample],
        batch_size: int,
        task: str,
        shuffle: bool = True,
        augment: AugmentConfig | None = None,
        seed: int = 0,
    ):
        if task not in ("seg", "cls"):
            raise ValueError(f"loader task must be seg or cls, got {task!r}")
        need = "mask" if task == "seg" else "label"
        for s in samples:
            if getattr(s, need) is None:
                raise ValueError(f"sample {s.id} has no {need} for a {task} loader")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.task = task
        self.shuffle = shuffle
        self.augment = augment
        self.seed = seed

    def __len__(self) -> int:
        return math.ceil(len(self.samples) / self.batch_size)

    def batches(self, rng: np.random.Generator | None = None, epoch: int = 0) -> Iterator[Batch]:
        n = len(self.samples)
        order = rng.permutation(n) if (self.shuffle and rng is not None) else np.arange(n)
        for start in range(0, n, self.batch_size):
            chosen = [self.samples[i] for i in order[start : start + self.batch_size]]
            yield self._collate(chosen, epoch)

    def _collate(self, chosen: list[Sample], epoch: int) -> Batch:
        images, masks = [], []
        for s in chosen:
            img, mask = s.image, s.mask if self.task == "seg" else None
            if self.augment is not None:
                params = sample_augment_params(sample_rng(self.seed, s.id, epoch), img.shape[-1], self.augment)
                img, mask = apply_augment(img, mask, params)
            images.append(img)
            masks.append(mask)
        seg = self.task == "seg"
        return Batch(
            ids=[s.id for s in chosen],
            images=np.stack(images),
            masks=np.stack(masks) if seg else None,
            labels=None if seg else np.array([s.label for s in chosen], dtype=np.int64),
            ways=None if seg else np.array([s.way for s in chosen], dtype=np.int64),
            prompts=[s.prompts for s in chosen],
        )


def load_samples(manifest: DatasetManifest, model_config: ModelConfig) -> list[Sample]:
    return [
        load_sample(rec, model_config.input_size, manifest.root, model_config.seg_classes, model_config.in_channels)
        for rec in manifest.samples
    ]


def build_loaders(
    samples: Sequence[Sample], config: TrainConfig, train: bool = True
) -> tuple[BatchLoader, BatchLoader]:
    """Seg and cls loaders; samples annotated for both tasks feed both."""
    seg = [s for s in samples if s.mask is not None]
    cls = [s for s in samples if s.label is not None]
    aug = config.augment_config if train else None
    return (
        BatchLoader(seg, config.batch_size_seg, "seg", shuffle=train, augment=aug, seed=config.seed),
        BatchLoader(cls, config.batch_size_cls, "cls", shuffle=train, augment=aug, seed=config.seed),
    )


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EpochReport:
    epoch: int
    seg_loss: float | None
    cls_loss: float | None
    seg_batches: int
    cls_batches: int

    def rows(self) -> list[tuple[int, str, str, float]]:
        out = []
        if self.seg_loss is not None:
            out.append((self.epoch, "seg", "loss", self.seg_loss))
        if self.cls_loss is not None:
            out.append((self.epoch, "cls", "loss", self.cls_loss))
        return out


def batch_task_loss(params: ModelParams, model_config: ModelConfig, batch: Batch, task: str, weights: LossWeights):
    """Unweighted task loss for one batch (graph kept for backward)."""
    image = Tensor(batch.images)
    if task == "seg":
        logits = forward(params, model_config, image, batch.prompts, "seg")
        return seg_loss(logits, batch.masks, weights)
    logits2, logits4 = forward(params, model_config, image, batch.prompts, "cls")
    return cls_loss(logits2, logits4, batch.labels, batch.ways)


def _train_batch(state: TrainState, batch: Batch, task: str, lr: float) -> float:
    cfg = state.train_config
    task_l = batch_task_loss(state.params, state.model_config, batch, task, cfg.loss_weights)
    if task == "seg":
        total = final_loss("seg", seg_l=task_l, weights=cfg.loss_weights)
    else:
        total = final_loss("cls", cls_l=task_l, weights=cfg.loss_weights)
    backward(total)
    grads = {k: p.grad for k, p in state.params.items()}
    if cfg.grad_clip is not None:
        grads = clip_grad_norm(grads, cfg.grad_clip)
    adamw_step(state, grads, cfg, lr)
    state.task_steps[task] += 1
    for p in state.params.values():
        p.zero_grad()
    return task_l.item()


def train_epoch(
    state: TrainState,
    seg_loader: BatchLoader | None,
    cls_loader: BatchLoader | None,
    config: TrainConfig | None = None,
) -> tuple[TrainState, EpochReport]:
    """Every seg batch, then every cls batch; one optimizer step per batch."""
    if config is not None:
        state.train_config = config
    seg_n = len(seg_loader.samples) if seg_loader is not None else 0
    cls_n = len(cls_loader.samples) if cls_loader is not None else 0
    if seg_n == 0 and cls_n == 0:
        raise ValueError("train_epoch: both loaders are empty")
    lr = learning_rate_at(state.train_config, state.epoch)
    results = {}
    for task, loader, n in (("seg", seg_loader, seg_n), ("cls", cls_loader, cls_n)):
        losses = []
        if n:
            for batch in loader.batches(state.rng, state.epoch):
                losses.append(_train_batch(state, batch, task, lr))
        results[task] = losses
    state.epoch += 1
    report = EpochReport(
        epoch=state.epoch,
        seg_loss=float(np.mean(results["seg"])) if results["seg"] else None,
        cls_loss=float(np.mean(results["cls"])) if results["cls"] else None,
        seg_batches=len(results["seg"]),
        cls_batches=len(results["cls"]),
    )
    return state, report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    task: str
    metric: str
    value: float
    count: int


def predict_labels(params: ModelParams, model_config: ModelConfig, batch: Batch, task: str) -> np.ndarray:
    with no_grad():
        out = forward(params, model_config, Tensor(batch.images), batch.prompts, task)
    if task == "seg":
        return np.argmax(out.data, axis=1)
    logits2, logits4 = out
    return np.where(batch.ways == 2, np.argmax(logits2.data, axis=1), np.argmax(logits4.data, axis=1))


def evaluate(state: TrainState, loader: BatchLoader, task: str | None = None) -> list[MetricRow]:
    """Mean per-sample foreground Dice (seg) or accuracy per way (cls)."""
    task = task or loader.task
    if len(loader.samples) == 0:
        raise ValueError("evaluate: empty loader")
    if task == "seg":
        scores = []
        for batch in loader.batches():
            pred = predict_labels(state.params, state.model_config, batch, "seg")
            scores.extend(dice_score(p > 0, t > 0, 1) for p, t in zip(pred, batch.masks))
        return [MetricRow("seg", "dice", float(np.mean(scores)), len(scores))]
    preds, labels, ways = [], [], []
    for batch in loader.batches():
        preds.append(predict_labels(state.params, state.model_config, batch, "cls"))
        labels.append(batch.labels)
        ways.append(batch.ways)
    preds, labels, ways = np.concatenate(preds), np.concatenate(labels), np.concatenate(ways)
    rows = [MetricRow("cls", "accuracy", accuracy(preds, labels), len(labels))]
    for way in CLS_WAYS:
        sel = ways == way
        if sel.any():
            rows.append(MetricRow("cls", f"accuracy_{way}way", accuracy(preds[sel], labels[sel]), int(sel.sum())))
    return rows


def mean_task_losses(state: TrainState, seg_loader: BatchLoader, cls_loader: BatchLoader) -> dict[str, float]:
    """Sample-weighted mean unweighted task losses without updating anything."""
    out = {}
    w = state.train_config.loss_weights
    with no_grad():
        for task, loader in (("seg", seg_loader), ("cls", cls_loader)):
            total, count = 0.0, 0
            for batch in loader.batches():
                n = len(batch.ids)
                total += batch_task_loss(state.params, state.model_config, batch, task, w).item() * n
                count += n
            if count:
                out[task] = total / count
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: Mapping) -> np.random.Generator:
    name = state.get("bit_generator")
    bitgen_cls = getattr(np.random, str(name), None)
    if bitgen_cls is None:
        raise FormatError(f"unknown bit generator {name!r}")
    bitgen = bitgen_cls()
    bitgen.state = dict(state)
    return np.random.Generator(bitgen)


def checkpoint_bytes(state: TrainState) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "task_steps": state.task_steps,
        "param_steps": state.param_steps,
        "rng": _rng_state_to_json(state.rng),
        "names": list(state.params),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(head)), head]
    for name in state.params:
        parts += [pack_tensor(state.params[name].data), pack_tensor(state.m[name]), pack_tensor(state.v[name])]
    return b"".join(parts)


def checkpoint_save(state: TrainState, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)


def checkpoint_load(path: str | os.PathLike) -> TrainState:
    src = str(path)
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{src}: not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise FormatError(f"{src}: truncated checkpoint header")
    (head_len,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < 16 + head_len:
        raise FormatError(f"{src}: truncated checkpoint header")
    try:
        header = json.loads(buf[16 : 16 + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{src}: corrupt checkpoint header ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{src}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}")
    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    expected = param_shapes(model_config)
    names = header["names"]
    if names != list(expected):
        raise FormatError(f"{src}: parameter names disagree with the stored model config")

    pos = 16 + head_len
    params, m, v = {}, {}, {}
    for name in names:
        arrays = []
        for _ in range(3):
            arr, pos = unpack_tensor(buf, pos, src)
            if arr.shape != expected[name]:
                raise FormatError(f"{src}: {name} has shape {arr.shape}, config implies {expected[name]}")
            arrays.append(arr.astype(np.float64))
        params[name] = Tensor(arrays[0], requires_grad=True, name=name)
        m[name], v[name] = arrays[1], arrays[2]
    if pos != len(buf):
        raise FormatError(f"{src}: {len(buf) - pos} trailing bytes")
    return TrainState(
        model_config=model_config,
        train_config=train_config,
        params=params,
        m=m,
        v=v,
        param_steps={k: int(x) for k, x in header["param_steps"].items()},
        global_step=int(header["global_step"]),
        task_steps={k: int(x) for k, x in header["task_steps"].items()},
        epoch=int(header["epoch"]),
        rng=_rng_from_json(header["rng"]),
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def format_row(*fields_) -> str:
    return "\t".join(repr(f) if isinstance(f, float) else str(f) for f in fields_)


def fit(
    state: TrainState,
    seg_loader: BatchLoader,
    cls_loader: BatchLoader,
    until_epoch: int | None = None,
    eval_loaders: tuple[BatchLoader, BatchLoader] | None = None,
    metrics_log: str | os.PathLike | None = None,
) -> list[EpochReport]:
    """Train from ``state.epoch`` up to ``until_epoch`` (default: config epochs)."""
    cfg = state.train_config
    until = cfg.epochs if until_epoch is None else until_epoch
    log_file = open(metrics_log, "a") if metrics_log is not None else None
    reports = []
    try:
        while state.epoch < until:
            state, report = train_epoch(state, seg_loader, cls_loader)
            reports.append(report)
            rows = [format_row(*r) for r in report.rows()]
            last = state.epoch == until
            if eval_loaders is not None and (last or (cfg.eval_every and state.epoch % cfg.eval_every == 0)):
                for loader in eval_loaders:
                    if len(loader.samples):
                        rows += [format_row(state.epoch, r.task, r.metric, r.value) for r in evaluate(state, loader)]
            for row in rows:
                log.info(row)
                if log_file is not None:
                    log_file.write(row + "\n")
            if log_file is not None:
                log_file.flush()
            if cfg.checkpoint_dir is not None:
                checkpoint_save(state, Path(cfg.checkpoint_dir) / "last.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    return reports
