"""Classifier training on original / resampled / augmented data, and evaluation (total precision, mAP)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import augment as aug
from .data import DatasetManifest, balanced_batch, epoch_mode, load_image, load_images
from .vaegan import ResBlock, TrainingDiverged

STRATEGIES = ("none", "balanced", "ours")


@dataclass
class ClassifierConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    width: int = 16
    strategy: str = "none"
    augment_ratio: float = 0.5
    original_only_tail: int = 5
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # None -> ceil(len(train) / batch_size)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


class SmallResNet(nn.Module):
    """Compact residual conv classifier (the built-in stand-in architecture)."""

    def __init__(self, class_count: int, image_shape=(3, 32, 32), width: int = 16):
        super().__init__()
        c, h, _ = image_shape
        self.stem = nn.Conv2d(c, width, 3, 1, 1)
        self.block1 = ResBlock(width, width * 2, down=True)
        self.block2 = ResBlock(width * 2, width * 4, down=True)
        self.head = nn.Linear(width * 4, class_count)
        self.image_shape = tuple(image_shape)
        self.class_count = class_count

    def forward(self, x):
        h = F.relu(self.stem(x))
        h = self.block2(self.block1(h))
        return self.head(h.mean(dim=(2, 3)))


# A stream factory maps (epoch, rng) to an iterator of (image, label) pairs.
StreamFactory = Callable[[int, np.random.Generator], Iterator[tuple[np.ndarray, int]]]


def make_train_source(
    manifest: DatasetManifest,
    config: ClassifierConfig,
    augmented: Optional[aug.AugmentedDataset] = None,
) -> StreamFactory:
    """Build the per-epoch sample stream for a training strategy.

    none:     plain uniform draws over the original (imbalanced) set.
    balanced: class-balanced draws over originals every epoch.
    ours:     class-balanced originals + generated samples at augment_ratio,
              switching to originals only for the last original_only_tail epochs.
    """
    if config.strategy == "ours" and augmented is None:
        raise ValueError("strategy 'ours' needs an AugmentedDataset")

    def factory(epoch: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, int]]:
        if config.strategy == "none":
            n = len(manifest)
            while True:
                s = manifest.samples[rng.integers(n)]
                yield load_image(s, manifest), s.label
        elif config.strategy == "balanced":
            while True:
                sid = balanced_batch(manifest, 1, rng)[0]
                s = manifest.get(sid)
                yield load_image(s, manifest), s.label
        else:
            tail = min(config.original_only_tail, config.epochs)
            mode = epoch_mode(epoch, config.epochs, tail, config.augment_ratio)
            for s in aug.augmented_view(manifest, augmented, mode, rng):
                yield aug.sample_image(s, manifest), s.label

    return factory


def train_classifier(
    train_source: StreamFactory,
    config: ClassifierConfig,
    class_count: int,
    image_shape,
    train_size: int,
    val_data: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[SmallResNet, list[dict]]:
    """Cross-entropy training over the stream; returns the final model and a per-epoch log."""
    torch.manual_seed(config.seed)
    model = SmallResNet(class_count, image_shape, config.width)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps = config.steps_per_epoch or max(1, math.ceil(train_size / config.batch_size))

    log = []
    for epoch in range(config.epochs):
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        stream = train_source(epoch, rng)
        epoch_loss = 0.0
        for _ in range(steps):
            pairs = [next(stream) for _ in range(config.batch_size)]
            x = torch.from_numpy(np.stack([p[0] for p in pairs]))
            y = torch.tensor([p[1] for p in pairs], dtype=torch.long)
            loss = F.cross_entropy(model(x), y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        entry = {"epoch": epoch, "train_loss": epoch_loss / steps}
        if val_data is not None:
            scores = predict_scores(model, torch.from_numpy(val_data[0]))
            entry["val_accuracy"] = float((scores.argmax(1).numpy() == val_data[1]).mean())
        log.append(entry)
    return model, log


@torch.no_grad()
def predict_scores(model: SmallResNet, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """B x C post-softmax probabilities."""
    if tuple(x.shape[1:]) != model.image_shape:
        raise ValueError(f"input shape {tuple(x.shape[1:])} != {model.image_shape}")
    model.eval()
    outs = [F.softmax(model(x[i : i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(outs)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based AP with step-wise summation and stable tie-breaking by input order."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    cum_tp = np.cumsum(hits)
    precision = cum_tp / np.arange(1, len(scores) + 1)
    # recall increments only where a positive is retrieved; each step adds P_k / n_pos
    return float(precision[hits].sum() / n_pos)


@dataclass
class EvalReport:
    per_class_ap: list[Optional[float]]  # None for classes with no test positives
    mean_ap: float
    total_precision: float
    confusion: np.ndarray  # (C, C) counts, rows = true class
    metadata: dict = field(default_factory=dict)

    def per_class_recall(self) -> list[float]:
        totals = self.confusion.sum(axis=1)
        return [
            float(self.confusion[c, c] / totals[c]) if totals[c] > 0 else float("nan")
            for c in range(len(totals))
        ]


@torch.no_grad()
def evaluate(model: SmallResNet, test_manifest: DatasetManifest, metadata: Optional[dict] = None) -> EvalReport:
    if len(test_manifest) == 0:
        raise ValueError("empty test set")
    x = torch.from_numpy(load_images(test_manifest))
    labels = np.array([s.label for s in test_manifest.samples])
    scores = predict_scores(model, x).numpy()
    return report_from_scores(scores, labels, test_manifest.class_count, metadata)


def report_from_scores(
    scores: np.ndarray, labels: np.ndarray, class_count: int, metadata: Optional[dict] = None
) -> EvalReport:
    preds = scores.argmax(axis=1)
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    total_precision = float(np.trace(confusion) / confusion.sum())

    aps: list[Optional[float]] = []
    for c in range(class_count):
        positives = labels == c
        if positives.sum() == 0:
            aps.append(None)
            continue
        aps.append(average_precision(scores[:, c], positives))
    present = [a for a in aps if a is not None]
    meta = dict(metadata or {})
    meta.setdefault("ap_definition", "one-vs-rest rank-based step-wise AP over softmax scores")
    if any(a is None for a in aps):
        meta["classes_without_positives"] = [c for c, a in enumerate(aps) if a is None]
    return EvalReport(
        per_class_ap=aps,
        mean_ap=float(np.mean(present)),
        total_precision=total_precision,
        confusion=confusion,
        metadata=meta,
    )


@dataclass
class ComparisonRow:
    classifier: str
    strategy: str
    total_precision_mean: float
    total_precision_min: float
    total_precision_max: float
    map_mean: float
    map_min: float
    map_max: float


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    runs: list[EvalReport]

    def to_markdown(self) -> str:
        lines = [
            "| classifier | augmentation | Total Precision | mAP |",
            "|---|---|---|---|",
        ]
        for r in self.rows:
            lines.append(
                f"| {r.classifier} | {r.strategy} | {r.total_precision_mean:.4f} | {r.map_mean:.4f} |"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["classifier", "augmentation", "seed", "total_precision", "mAP"])
            for report in self.runs:
                m = report.metadata
                writer.writerow(
                    [m["classifier"], m["strategy"], m["seed"],
                     f"{report.total_precision:.6f}", f"{report.mean_ap:.6f}"]
                )


def run_strategy_comparison(
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    base_config: ClassifierConfig,
    seeds: Iterable[int],
    augmented: Optional[aug.AugmentedDataset] = None,
    strategies: Iterable[str] = STRATEGIES,
    classifier_name: str = "small-resnet",
    progress: Optional[Callable[[str, int, EvalReport], None]] = None,
) -> ComparisonResult:
    """One (train + evaluate) per strategy and seed; Table-layout summary rows."""
    rows, runs = [], []
    for strategy in strategies:
        per_seed_tp, per_seed_map = [], []
        for seed in seeds:
            cfg = ClassifierConfig(**{**base_config.__dict__, "strategy": strategy, "seed": seed})
            source = make_train_source(train_manifest, cfg, augmented if strategy == "ours" else None)
            model, _ = train_classifier(
                source, cfg, train_manifest.class_count, train_manifest.image_shape, len(train_manifest)
            )
            report = evaluate(
                model, test_manifest,
                metadata={"classifier": classifier_name, "strategy": strategy, "seed": seed},
            )
            per_seed_tp.append(report.total_precision)
            per_seed_map.append(report.mean_ap)
            runs.append(report)
            if progress is not None:
                progress(strategy, seed, report)
        rows.append(
            ComparisonRow(
                classifier=classifier_name,
                strategy=strategy,
                total_precision_mean=float(np.mean(per_seed_tp)),
                total_precision_min=float(np.min(per_seed_tp)),
                total_precision_max=float(np.max(per_seed_tp)),
                map_mean=float(np.mean(per_seed_map)),
                map_min=float(np.min(per_seed_map)),
                map_max=float(np.max(per_seed_map)),
            )
        )
    return ComparisonResult(rows=rows, runs=runs)
