"""Dataset manifests, sample loading, splitting, augmentation and synthetic data."""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .formats import read_image, read_mask, write_pnm
from .functional import bilinear_matrix
from .model import DEFAULT_CARDINALITIES, PROMPT_KEYS, PromptSet

MANIFEST_VERSION = "ultraupconvnet-manifest/1"
MANIFEST_NAME = "manifest.json"
TASK_KINDS = ("seg", "cls", "both")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    mask_path: str | None = None
    label: int | None = None
    way: int | None = None
    prompts: PromptSet = PromptSet()
    task: str = "seg"

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"sample {self.id}: task must be one of {TASK_KINDS}, got {self.task!r}")
        if self.task in ("seg", "both") and not self.mask_path:
            raise ValueError(f"sample {self.id}: task {self.task} requires a mask_path")
        if self.task in ("cls", "both"):
            if self.label is None or self.way not in (2, 4):
                raise ValueError(f"sample {self.id}: classification needs a label and way in (2, 4)")
            if not 0 <= self.label < self.way:
                raise ValueError(f"sample {self.id}: label {self.label} not below way {self.way}")

    @property
    def has_seg(self) -> bool:
        return self.task in ("seg", "both")

    @property
    def has_cls(self) -> bool:
        return self.task in ("cls", "both")

    def to_dict(self) -> dict:
        d = {"id": self.id, "image_path": self.image_path, "task": self.task, "prompts": self.prompts.to_mapping()}
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        if self.label is not None:
            d["label"] = self.label
            d["way"] = self.way
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> SampleRecord:
        return cls(
            id=str(d["id"]),
            image_path=str(d["image_path"]),
            mask_path=d.get("mask_path"),
            label=None if d.get("label") is None else int(d["label"]),
            way=None if d.get("way") is None else int(d["way"]),
            prompts=PromptSet.from_mapping(d.get("prompts", {})),
            task=d.get("task", "seg"),
        )


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    image_size: int
    prompt_cardinalities: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CARDINALITIES))
    version: str = MANIFEST_VERSION
    # directory that relative sample paths resolve against; not serialized
    root: Path = Path(".")

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids: {dupes[:5]}")
        for s in self.samples:
            s.prompts.validate(self.prompt_cardinalities)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, samples: Sequence[SampleRecord]) -> DatasetManifest:
        return replace(self, samples=list(samples))

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "image_size": self.image_size,
            "prompt_cardinalities": {k: self.prompt_cardinalities[k] for k in PROMPT_KEYS},
            "samples": [s.to_dict() for s in self.samples],
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: manifest is not valid JSON ({exc})") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        manifest = cls(
            samples=[SampleRecord.from_dict(s) for s in doc["samples"]],
            image_size=int(doc["image_size"]),
            prompt_cardinalities={k: int(v) for k, v in doc["prompt_cardinalities"].items()},
            root=path.parent,
        )
        if check_files:
            for s in manifest.samples:
                for rel in (s.image_path, s.mask_path):
                    if rel is not None and not manifest.resolve(rel).is_file():
                        raise FileNotFoundError(f"{path}: sample {s.id} references missing file {rel}")
        return manifest


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize a ``[C, H, W]`` array to ``[C, size, size]`` (half-pixel centres)."""
    h, w = image.shape[-2:]
    if (h, w) == (size, size):
        return image
    return bilinear_matrix(h, size) @ image @ bilinear_matrix(w, size).T


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape[-2:]
    if (h, w) == (size, size):
        return mask
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[..., rows[:, None], cols[None, :]]


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [C, S, S] float64 in [0, 1]
    mask: np.ndarray | None  # [S, S] int64
    label: int | None
    way: int | None
    prompts: PromptSet
    task: str


def load_sample(
    record: SampleRecord,
    target_size: int,
    root: str | os.PathLike = ".",
    seg_classes: int = 2,
    channels: int | None = None,
) -> Sample:
    """Read, resize and validate one sample.

    ``channels`` replicates a single-channel image to that many channels.
    """
    root = Path(root)
    image_file = root / record.image_path
    image = read_image(image_file)
    if channels is not None and image.shape[0] != channels:
        if image.shape[0] != 1:
            raise ValueError(f"{image_file}: has {image.shape[0]} channels, model expects {channels}")
        image = np.repeat(image, channels, axis=0)
    native_hw = image.shape[-2:]
    image = resize_bilinear(image, target_size)
    mask = None
    if record.mask_path is not None:
        mask_file = root / record.mask_path
        mask = read_mask(mask_file)
        if mask.shape != native_hw:
            raise ValueError(f"{mask_file}: mask shape {mask.shape} differs from image shape {native_hw}")
        if mask.min(initial=0) < 0 or mask.max(initial=0) >= seg_classes:
            raise ValueError(f"{mask_file}: mask class {int(mask.max())} not below seg_classes={seg_classes}")
        mask = resize_nearest(mask, target_size)
    return Sample(record.id, image, mask, record.label, record.way, record.prompts, record.task)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_sizes(n: int, ratios: Sequence[int] = (7, 1, 2)) -> tuple[int, ...]:
    """Sizes from floor cuts at the cumulative ratio fractions; the remainder lands last."""
    total = sum(ratios)
    cuts = [0] + [n * c // total for c in np.cumsum(ratios)[:-1]] + [n]
    return tuple(b - a for a, b in zip(cuts, cuts[1:]))


def split_dataset(
    manifest: DatasetManifest, ratios: Sequence[int] = (7, 1, 2), seed: int = 0
) -> tuple[DatasetManifest, ...]:
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    if n < 10:
        raise ValueError(f"split needs at least 10 samples, manifest has {n}")
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in split_sizes(n, ratios):
        parts.append(manifest.subset([manifest.samples[i] for i in order[start : start + size]]))
        start += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    max_rotation_deg: float = 20.0
    crop_fraction: float = 0.875


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle_deg: float
    crop_top: int
    crop_left: int
    crop_size: int


def sample_augment_params(rng: np.random.Generator, size: int, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    flip = bool(rng.random() < cfg.flip_p)
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    crop = max(1, int(round(cfg.crop_fraction * size)))
    top = int(rng.integers(0, size - crop + 1))
    left = int(rng.integers(0, size - crop + 1))
    return AugmentParams(flip, angle, top, left, crop)


def apply_augment(
    image: np.ndarray, mask: np.ndarray | None, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray | None]:
    """Flip, rotate about the centre (zero fill), crop and resize back.

    Images resample bilinearly and masks by nearest neighbour, under the same
    geometric transform.
    """
    size = image.shape[-1]
    if image.shape[-2] != size or (mask is not None and mask.shape != image.shape[-2:]):
        raise ValueError("augment expects square images with a matching mask")
    if params.flip:
        image = image[..., ::-1]
        mask = None if mask is None else mask[..., ::-1]
    if params.angle_deg != 0.0:
        image = ndimage.rotate(image, params.angle_deg, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)
        if mask is not None:
            mask = ndimage.rotate(mask, params.angle_deg, axes=(-1, -2), reshape=False, order=0, mode="constant", cval=0)
    t, l, c = params.crop_top, params.crop_left, params.crop_size
    if c != size:
        image = resize_bilinear(image[..., t : t + c, l : l + c], size)
        mask = None if mask is None else resize_nearest(mask[t : t + c, l : l + c], size)
    image = np.ascontiguousarray(image)
    return image, (None if mask is None else np.ascontiguousarray(mask))


def augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> tuple[np.ndarray, np.ndarray | None]:
    return apply_augment(image, mask, sample_augment_params(rng, image.shape[-1], cfg))


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample stream, independent of batch order or scheduling."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


# ---------------------------------------------------------------------------
# Synthetic ultrasound-like data
# ---------------------------------------------------------------------------


def ellipse_mask(size: int, cy: float, cx: float, a: float, b: float, phi: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    yy, xx = np.mgrid[:size, :size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def quadrant_of(cy: float, cx: float, size: int) -> int:
    """0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return 2 * int(cy >= size / 2) + int(cx >= size / 2)


@dataclass(frozen=True)
class LesionSpec:
    cy: float
    cx: float
    a: float
    b: float
    phi: float


def _speckle_image(rng: np.random.Generator, size: int, lesion: LesionSpec | None) -> tuple[np.ndarray, np.ndarray]:
    yy = (np.arange(size)[:, None] + 0.5) / size
    background = 0.45 + 0.15 * (1.0 - yy)  # depth attenuation
    speckle = rng.rayleigh(scale=0.8, size=(size, size))
    img = background * speckle
    inside = np.zeros((size, size), dtype=bool)
    if lesion is not None:
        inside = ellipse_mask(size, lesion.cy, lesion.cx, lesion.a, lesion.b, lesion.phi)
        # offset + weak speckle: a pure rescale of the background would be
        # invisible after a per-pixel channel norm of a linear stem
        fill = 0.08 + 0.05 * rng.rayleigh(scale=0.8, size=(size, size))
        img = np.where(inside, fill, img)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, inside


def _random_lesion(rng: np.random.Generator, size: int, quadrant: int | None = None) -> LesionSpec:
    if quadrant is None:
        a, b = rng.uniform(size / 8, size / 4, size=2)
        margin = max(a, b) + 2
        cy, cx = rng.uniform(margin, size - margin, size=2)
    else:
        a, b = rng.uniform(size / 12, size / 7, size=2)
        lo, hi = 0.15 * size + max(a, b) / 2, 0.35 * size
        cy, cx = rng.uniform(lo, max(lo, hi), size=2)
        if quadrant >= 2:
            cy = size - cy
        if quadrant % 2 == 1:
            cx = size - cx
    return LesionSpec(float(cy), float(cx), float(a), float(b), float(rng.uniform(0, math.pi)))


def gen_synthetic(
    out_dir: str | os.PathLike,
    n_seg: int,
    n_cls: int,
    size: int = 64,
    seed: int = 0,
) -> tuple[DatasetManifest, dict[str, LesionSpec | None]]:
    """Write a synthetic dataset of PGM images/masks plus ``manifest.json``.

    Segmentation samples hold one dark elliptical lesion in speckle noise.
    Classification samples alternate between 2-way (label = lesion present)
    and 4-way (label = quadrant of the lesion centre). Returns the manifest
    and the lesion geometry used for every sample.
    """
    if size < 32 or size % 32:
        raise ValueError(f"synthetic image size {size} must be a positive multiple of 32")
    if n_seg < 0 or n_cls < 0 or n_seg + n_cls == 0:
        raise ValueError("need a positive number of samples")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    records: list[SampleRecord] = []
    lesions: dict[str, LesionSpec | None] = {}
    for i in range(n_seg):
        sid = f"seg_{i:04d}"
        rng = sample_rng(seed, sid)
        lesion = _random_lesion(rng, size)
        pixels, inside = _speckle_image(rng, size, lesion)
        write_pnm(out / "images" / f"{sid}.pgm", pixels)
        write_pnm(out / "masks" / f"{sid}.pgm", inside.astype(np.uint8))
        prompts = PromptSet(nature_idx=i % 2, position_idx=i % 7, task_idx=0, type_idx=0)
        records.append(SampleRecord(sid, f"images/{sid}.pgm", f"masks/{sid}.pgm", prompts=prompts, task="seg"))
        lesions[sid] = lesion

    for i in range(n_cls):
        sid = f"cls_{i:04d}"
        rng = sample_rng(seed, sid)
        if i % 2 == 0:
            way, label = 2, (i // 2) % 2
            lesion = _random_lesion(rng, size) if label == 1 else None
        else:
            way, label = 4, (i // 2) % 4
            lesion = _random_lesion(rng, size, quadrant=label)
        pixels, _ = _speckle_image(rng, size, lesion)
        write_pnm(out / "images" / f"{sid}.pgm", pixels)
        prompts = PromptSet(nature_idx=i % 2, position_idx=i % 7, task_idx=1, type_idx=int(way == 4))
        records.append(SampleRecord(sid, f"images/{sid}.pgm", label=label, way=way, prompts=prompts, task="cls"))
        lesions[sid] = lesion

    manifest = DatasetManifest(records, image_size=size, root=out)
    manifest.save(out / MANIFEST_NAME)
    return manifest, lesions
