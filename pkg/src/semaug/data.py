"""Dataset manifests, synthetic long-tailed data, balanced sampling, epoch schedules."""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    id: str
    label: int
    path: Optional[str] = None
    image: Optional[np.ndarray] = None  # (C, H, W) float32 in [-1, 1]

    def __post_init__(self):
        if self.path is None and self.image is None:
            raise ManifestError(f"sample {self.id}: needs a path or an inline image")


@dataclass(frozen=True)
class SamplingMode:
    """Per-epoch sampling behaviour for classifier training."""

    original_only: bool
    augment_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.augment_ratio <= 1.0:
            raise ValueError(f"augment_ratio must be in [0, 1], got {self.augment_ratio}")


ORIGINAL_ONLY = SamplingMode(original_only=True)


def class_balanced(augment_ratio: float) -> SamplingMode:
    return SamplingMode(original_only=False, augment_ratio=augment_ratio)


@dataclass
class DatasetManifest:
    samples: list[LabeledSample]
    class_count: int
    image_shape: tuple[int, int, int]
    class_names: Optional[list[str]] = None
    root: Optional[str] = None  # base dir for relative image paths
    histogram: list[int] = field(init=False)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        hist = [0] * self.class_count
        for s in self.samples:
            if not 0 <= s.label < self.class_count:
                raise ManifestError(f"sample {s.id}: label {s.label} out of range [0, {self.class_count})")
            hist[s.label] += 1
        self.histogram = hist
        self._by_id = {s.id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise ManifestError("duplicate sample ids in manifest")

    def __len__(self):
        return len(self.samples)

    def get(self, sample_id: str) -> LabeledSample:
        return self._by_id[sample_id]

    def class_indices(self, label: int) -> list[int]:
        if not hasattr(self, "_pools"):
            pools: dict[int, list[int]] = {c: [] for c in range(self.class_count)}
            for i, s in enumerate(self.samples):
                pools[s.label].append(i)
            self._pools = pools
        return self._pools[label]


def load_image(sample: LabeledSample, manifest: DatasetManifest) -> np.ndarray:
    """Return the sample's image as float32 (C, H, W) in [-1, 1]."""
    if sample.image is not None:
        return sample.image
    path = sample.path
    if manifest.root is not None and not os.path.isabs(path):
        path = os.path.join(manifest.root, path)
    with Image.open(path) as im:
        im = im.convert("RGB" if manifest.image_shape[0] == 3 else "L")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape != manifest.image_shape:
        raise ManifestError(
            f"sample {sample.id}: image shape {arr.shape} != declared {manifest.image_shape}"
        )
    return arr / 127.5 - 1.0


def load_images(manifest: DatasetManifest, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    idx = range(len(manifest)) if indices is None else indices
    return np.stack([load_image(manifest.samples[i], manifest) for i in idx])


def load_manifest(path: str) -> DatasetManifest:
    """Load a JSONL manifest: header line with class_count/image_shape, then one sample per line."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest file not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    samples = []
    header = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e})") from e
            if header is None:
                if "class_count" not in obj or "image_shape" not in obj:
                    raise ManifestError(f"{path}:1: header must declare class_count and image_shape")
                header = obj
                continue
            if "label" not in obj or "path" not in obj:
                raise ManifestError(f"{path}:{lineno}: sample line needs 'path' and 'label'")
            label = int(obj["label"])
            if not 0 <= label < header["class_count"]:
                raise ManifestError(
                    f"{path}:{lineno}: label out of range: {label} not in [0, {header['class_count']})"
                )
            img_path = obj["path"]
            abs_path = img_path if os.path.isabs(img_path) else os.path.join(root, img_path)
            if not os.path.exists(abs_path):
                raise ManifestError(f"{path}:{lineno}: image file not found: {img_path}")
            samples.append(LabeledSample(id=obj.get("id", f"s{lineno - 2:05d}"), label=label, path=img_path))
    if header is None:
        raise ManifestError(f"{path}: empty manifest (missing header line)")
    return DatasetManifest(
        samples=samples,
        class_count=int(header["class_count"]),
        image_shape=tuple(header["image_shape"]),
        class_names=header.get("class_names"),
        root=root,
    )


def save_manifest(manifest: DatasetManifest, out_dir: str, image_dir: str = "images") -> str:
    """Write PNGs plus a JSONL manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, image_dir), exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as f:
        header = {"class_count": manifest.class_count, "image_shape": list(manifest.image_shape)}
        if manifest.class_names:
            header["class_names"] = manifest.class_names
        f.write(json.dumps(header) + "\n")
        for s in manifest.samples:
            rel = s.path
            if rel is None:
                rel = os.path.join(image_dir, f"{s.id}.png")
                save_png(s.image, os.path.join(out_dir, rel))
            f.write(json.dumps({"id": s.id, "path": rel, "label": s.label}) + "\n")
    return manifest_path


def save_png(image: np.ndarray, path: str) -> None:
    """Save a (C, H, W) [-1, 1] image as PNG."""
    arr = np.clip((image + 1.0) * 127.5, 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _render_glyph(label: int, class_count: int, image_shape, rng: np.random.Generator) -> np.ndarray:
    """One sample of the class-specific oriented colored bar with nuisance jitter."""
    c, h, w = image_shape
    base_angle = math.pi * label / class_count
    base_hue = label / class_count

    angle = base_angle + rng.uniform(-0.3, 0.3)
    cx = rng.uniform(-0.35, 0.35)
    cy = rng.uniform(-0.35, 0.35)
    hue = (base_hue + rng.uniform(-0.06, 0.06)) % 1.0
    brightness = rng.uniform(0.5, 1.4)
    half_len = 0.55 * rng.uniform(0.7, 1.3)
    half_wid = 0.16 * rng.uniform(0.7, 1.3)

    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    u = math.cos(angle) * (xs - cx) + math.sin(angle) * (ys - cy)
    v = -math.sin(angle) * (xs - cx) + math.cos(angle) * (ys - cy)
    intensity = np.exp(-((u / half_len) ** 2 + (v / half_wid) ** 2))

    rgb = np.array(colorsys.hsv_to_rgb(hue, 0.9, 1.0), dtype=np.float32)
    img = intensity[None] * rgb[:c, None, None] * brightness
    img = img + rng.normal(scale=0.05, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)


def longtail_counts(class_count: int, head_count: int, tail_count: int, decay: float) -> list[int]:
    if not (0.0 < decay <= 1.0):
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if not head_count >= tail_count >= 1:
        raise ValueError(f"need head_count >= tail_count >= 1, got {head_count}, {tail_count}")
    return [max(tail_count, int(round(head_count * decay**c))) for c in range(class_count)]


def make_longtail_synthetic(
    class_count: int,
    head_count: int,
    tail_count: int,
    decay: float,
    image_shape=(3, 32, 32),
    seed: int = 0,
) -> DatasetManifest:
    """Synthetic long-tailed dataset: class c has round(head * decay^c) samples (floored at tail)."""
    counts = longtail_counts(class_count, head_count, tail_count, decay)
    rng = np.random.default_rng(seed)
    samples = []
    idx = 0
    for label, n in enumerate(counts):
        for _ in range(n):
            img = _render_glyph(label, class_count, image_shape, rng)
            samples.append(LabeledSample(id=f"s{idx:05d}", label=label, image=img))
            idx += 1
    return DatasetManifest(samples=samples, class_count=class_count, image_shape=tuple(image_shape))


def balanced_batch(
    manifest: DatasetManifest,
    batch_size: int,
    rng: np.random.Generator,
    trainable_classes: Optional[Sequence[int]] = None,
) -> list[str]:
    """Draw batch_size sample ids: uniform over classes, then uniform within class, with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    classes = list(trainable_classes) if trainable_classes is not None else list(range(manifest.class_count))
    empty = [c for c in classes if manifest.histogram[c] == 0]
    if empty:
        raise ValueError(f"classes {empty} have no samples; exclude them or synthesize data first")
    pools = {c: manifest.class_indices(c) for c in classes}
    ids = []
    for _ in range(batch_size):
        c = classes[rng.integers(len(classes))]
        pool = pools[c]
        ids.append(manifest.samples[pool[rng.integers(len(pool))]].id)
    return ids


def epoch_mode(epoch: int, total_epochs: int, original_only_tail: int, augment_ratio: float) -> SamplingMode:
    """ClassBalanced with augmentation except for the last `original_only_tail` epochs."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} not in [0, {total_epochs})")
    if not 0 <= original_only_tail <= total_epochs:
        raise ValueError(f"original_only_tail {original_only_tail} not in [0, {total_epochs}]")
    if epoch >= total_epochs - original_only_tail:
        return ORIGINAL_ONLY
    return class_balanced(augment_ratio)
