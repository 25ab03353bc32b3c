"""Per-class latent statistics and covariance-directed semantic augmentation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .data import DatasetManifest, LabeledSample, SamplingMode, load_image, save_png
from .vaegan import TrainedVaeGan

VAR_FLOOR = 1e-8


@dataclass
class ClassStats:
    """Per-class count, mean, and diagonal covariance of encoder means."""

    counts: np.ndarray      # (C,) int
    mean: np.ndarray        # (C, d)
    sigma2: np.ndarray      # (C, d), >= 0 elementwise
    fallback_used: np.ndarray  # (C,) bool; pooled variance substituted for n_c < 2

    @property
    def class_count(self) -> int:
        return len(self.counts)

    def save(self, path: str) -> None:
        payload = [
            {
                "class": c,
                "n": int(self.counts[c]),
                "mean": self.mean[c].tolist(),
                "sigma2": self.sigma2[c].tolist(),
                "fallback_used": bool(self.fallback_used[c]),
            }
            for c in range(self.class_count)
        ]
        with open(path, "w") as f:
            json.dump(payload, f, indent=1)

    @classmethod
    def load(cls, path: str) -> "ClassStats":
        with open(path) as f:
            payload = json.load(f)
        payload.sort(key=lambda e: e["class"])
        return cls(
            counts=np.array([e["n"] for e in payload], dtype=np.int64),
            mean=np.array([e["mean"] for e in payload]),
            sigma2=np.array([e["sigma2"] for e in payload]),
            fallback_used=np.array([e["fallback_used"] for e in payload], dtype=bool),
        )


def compute_class_stats(mus: np.ndarray, labels: Sequence[int], class_count: int) -> ClassStats:
    """Per-class mean and unbiased diagonal variance of encoder means.

    Classes with fewer than 2 samples get the pooled global diagonal variance
    (the tail classes that most need augmentation have the least data to
    estimate their own spread).
    """
    mus = np.asarray(mus, dtype=np.float64)
    labels = np.asarray(labels)
    if len(mus) == 0:
        raise ValueError("no encoder means given")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(f"labels outside [0, {class_count})")
    d = mus.shape[1]
    pooled = mus.var(axis=0, ddof=1) if len(mus) >= 2 else np.zeros(d)

    counts = np.zeros(class_count, dtype=np.int64)
    mean = np.zeros((class_count, d))
    sigma2 = np.zeros((class_count, d))
    fallback = np.zeros(class_count, dtype=bool)
    for c in range(class_count):
        rows = mus[labels == c]
        counts[c] = len(rows)
        if len(rows) >= 1:
            mean[c] = rows.mean(axis=0)
        if len(rows) >= 2:
            sigma2[c] = rows.var(axis=0, ddof=1)
        else:
            sigma2[c] = pooled
            fallback[c] = True
    return ClassStats(counts=counts, mean=mean, sigma2=sigma2, fallback_used=fallback)


def augment_latent(mu: np.ndarray, sigma2_c: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    """z' = mu + sqrt(s * sigma2_c) * r with r ~ N(0, I), i.e. z' ~ N(mu, s * diag(sigma2_c))."""
    if s < 0:
        raise ValueError(f"augmentation strength must be >= 0, got {s}")
    mu = np.asarray(mu)
    sigma2_c = np.maximum(np.asarray(sigma2_c), 0.0)
    if mu.shape != sigma2_c.shape:
        raise ValueError(f"dimension mismatch: mu {mu.shape} vs sigma2 {sigma2_c.shape}")
    r = rng.standard_normal(mu.shape)
    return mu + np.sqrt(s * sigma2_c) * r


@dataclass
class AugmentPlan:
    strength: float = 1.0
    augment_ratio: float = 0.5
    targets: Optional[list[int]] = None  # None -> raise every class to the max count
    seed: int = 0

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        if not 0.0 <= self.augment_ratio <= 1.0:
            raise ValueError("augment_ratio must be in [0, 1]")

    def resolve_targets(self, manifest: DatasetManifest) -> list[int]:
        if self.targets is None:
            return [max(manifest.histogram)] * manifest.class_count
        if len(self.targets) != manifest.class_count:
            raise ValueError("targets length must equal class_count")
        for c, (t, n) in enumerate(zip(self.targets, manifest.histogram)):
            if t < n:
                raise ValueError(f"class {c}: target {t} below current count {n}")
        return list(self.targets)


@dataclass(frozen=True)
class GeneratedSample:
    id: str
    label: int
    source_id: str
    latent: Optional[np.ndarray]  # None when reloaded from disk
    image: np.ndarray  # (C, H, W) in [-1, 1]


@dataclass
class AugmentedDataset:
    manifest: DatasetManifest
    generated: list[GeneratedSample]
    strength: float
    seed: int
    by_class: dict[int, list[int]] = field(init=False)

    def __post_init__(self):
        by_class: dict[int, list[int]] = {c: [] for c in range(self.manifest.class_count)}
        for i, g in enumerate(self.generated):
            if g.label != self.manifest.get(g.source_id).label:
                raise ValueError(f"generated sample {g.id}: label differs from its source")
            by_class[g.label].append(i)
        self.by_class = by_class

    def combined_histogram(self) -> list[int]:
        hist = list(self.manifest.histogram)
        for g in self.generated:
            hist[g.label] += 1
        return hist


def synthesize_balanced(
    manifest: DatasetManifest,
    model: TrainedVaeGan,
    stats: ClassStats,
    plan: AugmentPlan,
    decode_batch: int = 64,
) -> AugmentedDataset:
    """Top every class up to its plan target with decoded augmented latents.

    Each generated sample draws its own RNG stream from (seed, class, index) so
    results do not depend on scheduling order.
    """
    targets = plan.resolve_targets(manifest)
    generated: list[GeneratedSample] = []
    for c in range(manifest.class_count):
        need = targets[c] - manifest.histogram[c]
        if need == 0:
            continue
        pool = manifest.class_indices(c)
        if not pool:
            raise ValueError(f"class {c}: target {targets[c]} but no source samples to augment")
        images = np.stack([load_image(manifest.samples[i], manifest) for i in pool])
        mus, _ = model.encode_np(images)

        latents, sources = [], []
        for i in range(need):
            rng = np.random.default_rng(np.random.SeedSequence([plan.seed, c, i]))
            k = int(rng.integers(len(pool)))
            z_prime = augment_latent(mus[k], stats.sigma2[c], plan.strength, rng)
            latents.append(z_prime)
            sources.append(manifest.samples[pool[k]].id)
        decoded = model.decode_np(np.stack(latents), batch_size=decode_batch)
        for i, (z_prime, src, img) in enumerate(zip(latents, sources, decoded)):
            generated.append(
                GeneratedSample(
                    id=f"g{c:02d}_{i:05d}", label=c, source_id=src,
                    latent=z_prime, image=img,
                )
            )
    ds = AugmentedDataset(manifest=manifest, generated=generated, strength=plan.strength, seed=plan.seed)
    assert ds.combined_histogram() == targets
    return ds


def save_augmented(augmented: AugmentedDataset, out_dir: str, image_dir: str = "generated") -> str:
    """Materialize generated PNGs plus a JSONL manifest (original schema + provenance fields)."""
    os.makedirs(os.path.join(out_dir, image_dir), exist_ok=True)
    m = augmented.manifest
    path = os.path.join(out_dir, "augmented.jsonl")
    with open(path, "w") as f:
        header = {
            "class_count": m.class_count,
            "image_shape": list(m.image_shape),
            "strength": augmented.strength,
            "seed": augmented.seed,
        }
        f.write(json.dumps(header) + "\n")
        for g in augmented.generated:
            rel = os.path.join(image_dir, f"{g.id}.png")
            save_png(g.image, os.path.join(out_dir, rel))
            f.write(
                json.dumps(
                    {
                        "id": g.id,
                        "path": rel,
                        "label": g.label,
                        "source_id": g.source_id,
                        "generated": True,
                        "strength": augmented.strength,
                    }
                )
                + "\n"
            )
    return path


def load_augmented(path: str, manifest: DatasetManifest) -> AugmentedDataset:
    """Read back a materialized augmented dataset (images from disk, latents not stored)."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    header, entries = lines[0], lines[1:]
    generated = []
    for e in entries:
        img_sample = LabeledSample(id=e["id"], label=e["label"], path=os.path.join(root, e["path"]))
        img = load_image(img_sample, manifest)
        generated.append(
            GeneratedSample(id=e["id"], label=e["label"], source_id=e["source_id"], latent=None, image=img)
        )
    return AugmentedDataset(
        manifest=manifest, generated=generated,
        strength=header.get("strength", 1.0), seed=header.get("seed", 0),
    )


Sample = Union[LabeledSample, GeneratedSample]


def augmented_view(
    manifest: DatasetManifest,
    augmented: Optional[AugmentedDataset],
    mode: SamplingMode,
    rng: np.random.Generator,
) -> Iterator[Sample]:
    """Endless class-balanced sample stream mixing originals and generated samples.

    ClassBalanced mode: pick a class uniformly, then with probability
    augment_ratio serve one of its generated samples (falling back to an
    original when the class has none), else an original. OriginalOnly mode
    serves class-balanced originals.
    """
    classes = [c for c in range(manifest.class_count) if manifest.histogram[c] > 0]
    if not classes:
        raise ValueError("no nonempty classes")
    pools = {c: manifest.class_indices(c) for c in classes}
    while True:
        c = classes[rng.integers(len(classes))]
        use_generated = (
            not mode.original_only
            and augmented is not None
            and augmented.by_class.get(c)
            and rng.random() < mode.augment_ratio
        )
        if use_generated:
            pool = augmented.by_class[c]
            yield augmented.generated[pool[rng.integers(len(pool))]]
        else:
            pool = pools[c]
            yield manifest.samples[pool[rng.integers(len(pool))]]


def sample_image(sample: Sample, manifest: DatasetManifest) -> np.ndarray:
    if isinstance(sample, GeneratedSample):
        return sample.image
    return load_image(sample, manifest)
