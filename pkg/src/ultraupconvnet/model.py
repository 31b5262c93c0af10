"""Encoder, prompt embedding, UPerNet decoder and classification heads.

The network is expressed as pure functions over a flat, ordered mapping of
named parameters (``ModelParams``). Names are dotted paths whose first
component is the parameter group: ``encoder``, ``prompt``, ``decoder`` or
``heads``.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor, concat

ModelParams = dict[str, Tensor]

PROMPT_KEYS = ("nature", "position", "task", "type")
DEFAULT_CARDINALITIES = {"nature": 2, "position": 7, "task": 2, "type": 2}
PARAM_GROUPS = ("encoder", "prompt", "decoder", "heads")
CLS_WAYS = (2, 4)
TASKS = ("seg", "cls")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    input_size: int = 224
    stage_depths: tuple[int, ...] = (3, 3, 9, 3)
    stage_dims: tuple[int, ...] = (96, 192, 384, 768)
    decoder_channels: int = 512
    # None means "same as decoder_channels"
    ppm_channels: int | None = None
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    seg_classes: int = 2
    prompt_cardinalities: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_CARDINALITIES))
    prompts_enabled: bool = True
    drop_path: float = 0.0
    layer_scale_init: float = 1e-6
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("stage_depths", "stage_dims", "ppm_bins"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "prompt_cardinalities", {k: int(v) for k, v in self.prompt_cardinalities.items()})
        problems = self.violations()
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        if self.input_size < 32 or self.input_size % 32:
            out.append(f"input_size={self.input_size} must be a positive multiple of 32")
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4:
            out.append("stage_depths and stage_dims must have 4 entries")
        if any(d < 1 for d in self.stage_depths):
            out.append("stage_depths must be >= 1")
        if any(b <= a for a, b in zip(self.stage_dims, self.stage_dims[1:])) or min(self.stage_dims, default=0) < 1:
            out.append(f"stage_dims {list(self.stage_dims)} must be positive and strictly increasing")
        if self.decoder_channels < 1:
            out.append("decoder_channels must be >= 1")
        if self.ppm_channels is not None and self.ppm_channels < 1:
            out.append("ppm_channels must be >= 1")
        if not self.ppm_bins or any(b < 1 for b in self.ppm_bins):
            out.append("ppm_bins must be non-empty positive sizes")
        if self.seg_classes < 2:
            out.append("seg_classes must be >= 2")
        if set(self.prompt_cardinalities) != set(PROMPT_KEYS):
            out.append(f"prompt_cardinalities keys must be {list(PROMPT_KEYS)}")
        elif any(v < 1 for v in self.prompt_cardinalities.values()):
            out.append("prompt cardinalities must be >= 1")
        if self.drop_path != 0.0:
            out.append("drop_path is not supported; it must be 0.0")
        if self.norm_eps <= 0:
            out.append("norm_eps must be positive")
        return out

    @property
    def prompt_dim(self) -> int:
        return sum(self.prompt_cardinalities[k] for k in PROMPT_KEYS)

    @property
    def ppm_width(self) -> int:
        return self.decoder_channels if self.ppm_channels is None else self.ppm_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("stage_depths", "stage_dims", "ppm_bins"):
            d[name] = list(d[name])
        d["prompt_cardinalities"] = {k: self.prompt_cardinalities[k] for k in PROMPT_KEYS}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**dict(d))

    @classmethod
    def full(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        base = dict(input_size=64, stage_depths=(1, 1, 1, 1), stage_dims=(8, 16, 32, 64), decoder_channels=32)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class PromptSet:
    nature_idx: int = 0
    position_idx: int = 0
    task_idx: int = 0
    type_idx: int = 0

    def indices(self) -> tuple[int, int, int, int]:
        return (self.nature_idx, self.position_idx, self.task_idx, self.type_idx)

    def validate(self, cardinalities: Mapping[str, int]) -> None:
        for key, idx in zip(PROMPT_KEYS, self.indices()):
            if not 0 <= idx < cardinalities[key]:
                raise ValueError(f"prompt {key} index {idx} outside [0, {cardinalities[key]})")

    def one_hot(self, cardinalities: Mapping[str, int] = DEFAULT_CARDINALITIES) -> np.ndarray:
        self.validate(cardinalities)
        parts = []
        for key, idx in zip(PROMPT_KEYS, self.indices()):
            v = np.zeros(cardinalities[key], dtype=DTYPE)
            v[idx] = 1.0
            parts.append(v)
        return np.concatenate(parts)

    @classmethod
    def from_mapping(cls, d: Mapping[str, int]) -> PromptSet:
        return cls(*(int(d.get(k, 0)) for k in PROMPT_KEYS))

    def to_mapping(self) -> dict[str, int]:
        return dict(zip(PROMPT_KEYS, self.indices()))


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes implied by ``config``."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(prefix, cout, cin, k):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k)
        shapes[f"{prefix}.bias"] = (cout,)

    def norm(prefix, c):
        shapes[f"{prefix}.weight"] = (c,)
        shapes[f"{prefix}.bias"] = (c,)

    def dense(prefix, dout, din):
        shapes[f"{prefix}.weight"] = (dout, din)
        shapes[f"{prefix}.bias"] = (dout,)

    dims = config.stage_dims
    conv("encoder.stem.conv", dims[0], config.in_channels, 4)
    norm("encoder.stem.norm", dims[0])
    for i, (depth, dim) in enumerate(zip(config.stage_depths, dims)):
        if i > 0:
            norm(f"encoder.downsample{i}.norm", dims[i - 1])
            conv(f"encoder.downsample{i}.conv", dim, dims[i - 1], 2)
        for j in range(depth):
            p = f"encoder.stage{i}.block{j}"
            conv(f"{p}.dwconv", dim, 1, 7)
            norm(f"{p}.norm", dim)
            dense(f"{p}.pwconv1", 4 * dim, dim)
            dense(f"{p}.pwconv2", dim, 4 * dim)
            shapes[f"{p}.gamma"] = (dim,)
        norm(f"encoder.out_norm{i}", dim)

    if config.prompts_enabled:
        for i, dim in enumerate(dims):
            dense(f"prompt.fc{i}", dim, config.prompt_dim)

    c, pw = config.decoder_channels, config.ppm_width
    for k in range(len(config.ppm_bins)):
        conv(f"decoder.ppm{k}.conv", pw, dims[3], 1)
        norm(f"decoder.ppm{k}.norm", pw)
    conv("decoder.bottleneck.conv", c, dims[3] + len(config.ppm_bins) * pw, 3)
    norm("decoder.bottleneck.norm", c)
    for i in range(3):
        conv(f"decoder.lateral{i}.conv", c, dims[i], 1)
        norm(f"decoder.lateral{i}.norm", c)
    for i in range(3):
        conv(f"decoder.fpn{i}.conv", c, c, 3)
        norm(f"decoder.fpn{i}.norm", c)
    conv("decoder.fuse.conv", c, 4 * c, 3)
    norm("decoder.fuse.norm", c)
    conv("decoder.classifier", config.seg_classes, c, 1)

    norm("heads.norm", dims[3])
    for way in CLS_WAYS:
        dense(f"heads.cls{way}", way, dims[3])
    return shapes


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams keep every tensor independent of which others exist
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    params: ModelParams = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        is_norm = name.split(".")[-2].startswith(("norm", "out_norm"))
        if leaf == "gamma":
            data = np.full(shape, config.layer_scale_init, dtype=DTYPE)
        elif leaf == "bias":
            data = np.zeros(shape, dtype=DTYPE)
        elif is_norm:
            data = np.ones(shape, dtype=DTYPE)
        else:
            data = trunc_normal(_param_rng(seed, name), shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params: Mapping[str, Tensor]) -> tuple[int, dict[str, int]]:
    """Total parameter count and a per-group breakdown."""
    groups = {g: 0 for g in PARAM_GROUPS}
    for name, p in params.items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + int(np.prod(p.shape, dtype=np.int64))
    return sum(groups.values()), groups


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _conv(params, prefix, x, stride=1, padding=0, groups=1):
    return F.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride, padding, groups)


def _norm_cf(params, prefix, x, eps):
    return F.layer_norm_channels_first(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], eps)


def _conv_norm_act(params, prefix, x, kernel, eps):
    y = _conv(params, f"{prefix}.conv", x, padding=kernel // 2)
    return F.gelu(_norm_cf(params, f"{prefix}.norm", y, eps))


def convnext_block(params, prefix: str, x: Tensor, eps: float) -> Tensor:
    dim = x.shape[1]
    y = _conv(params, f"{prefix}.dwconv", x, padding=3, groups=dim)
    y = y.permute(0, 2, 3, 1)
    y = F.layer_norm(y, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], eps)
    y = F.linear(y, params[f"{prefix}.pwconv1.weight"], params[f"{prefix}.pwconv1.bias"])
    y = F.gelu(y)
    y = F.linear(y, params[f"{prefix}.pwconv2.weight"], params[f"{prefix}.pwconv2.bias"])
    y = y * params[f"{prefix}.gamma"]
    return x + y.permute(0, 3, 1, 2)


def forward_encoder(params: ModelParams, config: ModelConfig, image: Tensor) -> list[Tensor]:
    """Four feature maps at strides 4, 8, 16 and 32."""
    s = config.input_size
    expected = (config.in_channels, s, s)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ValueError(f"image shape {image.shape} does not match [N, {config.in_channels}, {s}, {s}]")
    eps = config.norm_eps
    x = _conv(params, "encoder.stem.conv", image, stride=4)
    x = _norm_cf(params, "encoder.stem.norm", x, eps)
    feats = []
    for i, depth in enumerate(config.stage_depths):
        if i > 0:
            x = _norm_cf(params, f"encoder.downsample{i}.norm", x, eps)
            x = _conv(params, f"encoder.downsample{i}.conv", x, stride=2)
        for j in range(depth):
            x = convnext_block(params, f"encoder.stage{i}.block{j}", x, eps)
        feats.append(_norm_cf(params, f"encoder.out_norm{i}", x, eps))
    return feats


def prompt_matrix(prompts: PromptSet | Sequence[PromptSet], config: ModelConfig, n: int) -> np.ndarray:
    """Stack per-sample one-hot prompt vectors into an ``[n, prompt_dim]`` array."""
    if isinstance(prompts, PromptSet):
        prompts = [prompts] * n
    if len(prompts) != n:
        raise ValueError(f"got {len(prompts)} prompt sets for a batch of {n}")
    return np.stack([p.one_hot(config.prompt_cardinalities) for p in prompts])


def embed_prompts(
    params: ModelParams,
    config: ModelConfig,
    prompts: PromptSet | Sequence[PromptSet] | None,
    features: Sequence[Tensor],
) -> list[Tensor]:
    """Add a projected prompt offset to every channel of each scale."""
    if not config.prompts_enabled:
        return list(features)
    if prompts is None:
        raise ValueError("prompts are enabled but no PromptSet was given")
    onehot = Tensor(prompt_matrix(prompts, config, features[0].shape[0]))
    out = []
    for i, feat in enumerate(features):
        offset = F.linear(onehot, params[f"prompt.fc{i}.weight"], params[f"prompt.fc{i}.bias"])
        out.append(F.broadcast_add_channels(feat, offset))
    return out


def forward_seg_decoder(params: ModelParams, config: ModelConfig, features: Sequence[Tensor]) -> Tensor:
    """UPerNet: pyramid pooling on the deepest map, FPN fusion, per-pixel logits."""
    eps = config.norm_eps
    top = features[3]
    th, tw = top.shape[2:]
    pyramid = [top]
    for k, b in enumerate(config.ppm_bins):
        # bins larger than the map degenerate to the map size
        pooled = F.pool_avg2d(top, min(b, th), min(b, tw))
        branch = _conv_norm_act(params, f"decoder.ppm{k}", pooled, 1, eps)
        pyramid.append(F.upsample_bilinear(branch, th, tw))
    levels = [_conv_norm_act(params, f"decoder.lateral{i}", features[i], 1, eps) for i in range(3)]
    levels.append(_conv_norm_act(params, "decoder.bottleneck", concat(pyramid, axis=1), 3, eps))

    for i in (2, 1, 0):
        h, w = levels[i].shape[2:]
        levels[i] = levels[i] + F.upsample_bilinear(levels[i + 1], h, w)
    outs = [_conv_norm_act(params, f"decoder.fpn{i}", levels[i], 3, eps) for i in range(3)]
    outs.append(levels[3])

    h0, w0 = outs[0].shape[2:]
    fused = concat([F.upsample_bilinear(o, h0, w0) for o in outs], axis=1)
    fused = _conv_norm_act(params, "decoder.fuse", fused, 3, eps)
    logits = _conv(params, "decoder.classifier", fused)
    return F.upsample_bilinear(logits, config.input_size, config.input_size)


def forward_cls_heads(
    params: ModelParams, config: ModelConfig, features: Sequence[Tensor]
) -> tuple[Tensor, Tensor]:
    """Both heads run on every call; the loss picks which one counts."""
    pooled = F.global_avg_pool(features[3])
    pooled = F.layer_norm(pooled, params["heads.norm.weight"], params["heads.norm.bias"], config.norm_eps)
    logits2 = F.linear(pooled, params["heads.cls2.weight"], params["heads.cls2.bias"])
    logits4 = F.linear(pooled, params["heads.cls4.weight"], params["heads.cls4.bias"])
    return logits2, logits4


def forward(
    params: ModelParams,
    config: ModelConfig,
    image: Tensor,
    prompts: PromptSet | Sequence[PromptSet] | None,
    task: str,
):
    if task not in TASKS:
        raise ValueError(f"unknown task flag {task!r}; expected one of {TASKS}")
    feats = embed_prompts(params, config, prompts, forward_encoder(params, config, image))
    if task == "seg":
        return forward_seg_decoder(params, config, feats)
    return forward_cls_heads(params, config, feats)
