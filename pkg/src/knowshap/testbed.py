"""Desk-scale datasets and experiment plumbing for knowledge attribution.

The synthetic task is a Gaussian-mixture classification problem laid out so
that nested subset knowledge has something to contribute: two class pairs sit
far apart, one pair is nearly merged, and only a handful of labels exist.
Knowledge truth bits for unlabeled samples come from their hidden labels and
are then optionally corrupted; the labels themselves are dropped before the
trainer ever sees the dataset.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .coalitions import Coalition, enumerate_all
from .semantics import KnowledgeSpec, corrupt_truth_bits
from .shapley import McConfig
from .trainer import Dataset, TrainConfig, train


class DigitFormatError(ValueError):
    """Digit file violates the 4-byte big-endian header format."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture task: per-class means, shared sigma, split sizes."""

    n_classes: int
    dim: int
    means: tuple[tuple[float, ...], ...]
    sigma: float
    n_labeled: int
    n_unlabeled: int
    n_test: int
    seed: int

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if min(self.n_labeled, self.n_unlabeled, self.n_test) < 1:
            raise ValueError("all split sizes must be >= 1")
        if len(self.means) != self.n_classes or any(len(m) != self.dim for m in self.means):
            raise ValueError("means must be n_classes rows of dim entries")
        if self.n_labeled % self.n_classes != 0:
            raise ValueError("n_labeled must be divisible by n_classes (balanced split)")

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "dim": self.dim,
            "means": [list(m) for m in self.means],
            "sigma": self.sigma,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_test": self.n_test,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticSpec":
        return cls(
            n_classes=int(payload["n_classes"]),
            dim=int(payload["dim"]),
            means=tuple(tuple(float(x) for x in row) for row in payload["means"]),
            sigma=float(payload["sigma"]),
            n_labeled=int(payload["n_labeled"]),
            n_unlabeled=int(payload["n_unlabeled"]),
            n_test=int(payload["n_test"]),
            seed=int(payload["seed"]),
        )


def default_synthetic_spec(seed: int = 7) -> SyntheticSpec:
    """Four classes in eight dimensions; classes 2 and 3 nearly overlap.

    Axis 0 splits {0,1} from {2,3} widely, axis 1 splits 0 from 1, and axis 2
    barely splits 2 from 3, so "is it class 3 or not" is exactly the
    information a good constraint can add.
    """
    means = (
        (3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        (3.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        (-3.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0),
        (-3.0, 0.0, -0.8, 0.0, 0.0, 0.0, 0.0, 0.0),
    )
    return SyntheticSpec(
        n_classes=4,
        dim=8,
        means=means,
        sigma=1.0,
        n_labeled=40,
        n_unlabeled=1500,
        n_test=2000,
        seed=seed,
    )


def default_knowledge_set() -> tuple[KnowledgeSpec, ...]:
    """One-hot plus two nested subset constraints, mirroring a coarse-to-fine
    hierarchy of label information."""
    return (
        KnowledgeSpec(player=0, name="one_hot", family="one_hot", weight=0.1),
        KnowledgeSpec(player=1, name="class_in_01", family="subset", subset=frozenset({0, 1}), weight=0.1),
        KnowledgeSpec(player=2, name="class_in_012", family="subset", subset=frozenset({0, 1, 2}), weight=0.1),
    )


def _balanced_classes(count: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(count) % n_classes
    return labels[rng.permutation(count)]


def generate_blobs(spec: SyntheticSpec) -> Dataset:
    """Deterministic mixture draw with disjoint, class-balanced splits."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB10B]))
    means = np.asarray(spec.means, dtype=np.float64)

    def draw(labels: np.ndarray) -> np.ndarray:
        return means[labels] + spec.sigma * rng.standard_normal((len(labels), spec.dim))

    y_lab = np.repeat(np.arange(spec.n_classes), spec.n_labeled // spec.n_classes)
    y_lab = y_lab[rng.permutation(spec.n_labeled)]
    x_lab = draw(y_lab)
    y_unl = _balanced_classes(spec.n_unlabeled, spec.n_classes, rng)
    x_unl = draw(y_unl)
    y_test = _balanced_classes(spec.n_test, spec.n_classes, rng)
    x_test = draw(y_test)
    return Dataset(
        x_labeled=x_lab,
        y_labeled=y_lab,
        x_unlabeled=x_unl,
        x_test=x_test,
        y_test=y_test,
        n_classes=spec.n_classes,
        y_unlabeled_true=y_unl,
    )


def attach_knowledge_truth(dataset: Dataset, knowledge: Sequence[KnowledgeSpec]) -> Dataset:
    """Derive per-sample truth bits from the hidden labels, then corrupt them.

    Consumes the hidden unlabeled labels: the returned dataset carries the
    knowledge specs and bits but no ground truth for the unlabeled split.
    """
    if dataset.y_unlabeled_true is None:
        raise ValueError("dataset has no hidden unlabeled labels to derive bits from")
    y_true = np.asarray(dataset.y_unlabeled_true)
    if len(y_true) and (y_true.min() < 0 or y_true.max() >= dataset.n_classes):
        raise ValueError("hidden unlabeled label outside the label space")
    knowledge = tuple(knowledge)
    for i, spec in enumerate(knowledge):
        if spec.player != i:
            raise ValueError("knowledge specs must be listed in player order")
    truth_bits: dict[int, np.ndarray] = {}
    for spec in knowledge:
        if spec.family != "subset":
            continue
        if max(spec.subset) >= dataset.n_classes:
            raise ValueError(f"knowledge {spec.name!r} refers to labels outside the space")
        bits = np.isin(y_true, sorted(spec.subset))
        bits, _ = corrupt_truth_bits(bits, spec.corruption_rate, spec.seed)
        truth_bits[spec.player] = bits
    return Dataset(
        x_labeled=dataset.x_labeled,
        y_labeled=dataset.y_labeled,
        x_unlabeled=dataset.x_unlabeled,
        x_test=dataset.x_test,
        y_test=dataset.y_test,
        n_classes=dataset.n_classes,
        knowledge=knowledge,
        truth_bits=truth_bits,
        y_unlabeled_true=None,
    )


@dataclass(frozen=True)
class DigitFilesSpec:
    """File-backed digit task: standard big-endian image/label files."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    n_labeled: int
    n_unlabeled: int
    n_test: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "train_images": self.train_images,
            "train_labels": self.train_labels,
            "test_images": self.test_images,
            "test_labels": self.test_labels,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_test": self.n_test,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DigitFilesSpec":
        return cls(
            train_images=str(payload["train_images"]),
            train_labels=str(payload["train_labels"]),
            test_images=str(payload["test_images"]),
            test_labels=str(payload["test_labels"]),
            n_labeled=int(payload["n_labeled"]),
            n_unlabeled=int(payload["n_unlabeled"]),
            n_test=int(payload["n_test"]),
            seed=int(payload["seed"]),
        )


IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


def load_digit_files(image_path: str | Path, label_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one image/label file pair into (features in [0,1], labels).

    Validates the magic numbers, dimension headers, and payload sizes; pixel
    bytes are scaled by 1/255 and images flattened row-major.
    """
    image_bytes = Path(image_path).read_bytes()
    label_bytes = Path(label_path).read_bytes()
    if len(image_bytes) < 16:
        raise DigitFormatError(f"{image_path}: truncated header")
    magic, n_images, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != IMAGE_MAGIC:
        raise DigitFormatError(f"{image_path}: bad magic {magic} (expected {IMAGE_MAGIC})")
    expected = 16 + n_images * rows * cols
    if len(image_bytes) != expected:
        raise DigitFormatError(f"{image_path}: payload is {len(image_bytes)} bytes, expected {expected}")
    if len(label_bytes) < 8:
        raise DigitFormatError(f"{label_path}: truncated header")
    lmagic, n_labels = struct.unpack(">II", label_bytes[:8])
    if lmagic != LABEL_MAGIC:
        raise DigitFormatError(f"{label_path}: bad magic {lmagic} (expected {LABEL_MAGIC})")
    if len(label_bytes) != 8 + n_labels:
        raise DigitFormatError(f"{label_path}: payload is {len(label_bytes)} bytes, expected {8 + n_labels}")
    if n_images != n_labels:
        raise DigitFormatError(f"image/label count mismatch: {n_images} vs {n_labels}")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16)
    x = pixels.reshape(n_images, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return x, y


def build_digit_dataset(spec: DigitFilesSpec, n_classes: int = 10) -> Dataset:
    """Balanced labeled subset plus disjoint unlabeled pool from the train
    files; test split subsets the test files. All selection is seeded."""
    x_train, y_train = load_digit_files(spec.train_images, spec.train_labels)
    x_test, y_test = load_digit_files(spec.test_images, spec.test_labels)
    if spec.n_labeled % n_classes != 0:
        raise ValueError("n_labeled must be divisible by the class count")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD161]))
    order = rng.permutation(len(y_train))
    per_class = spec.n_labeled // n_classes
    labeled_idx: list[int] = []
    taken = {c: 0 for c in range(n_classes)}
    for idx in order:
        c = int(y_train[idx])
        if c < n_classes and taken[c] < per_class:
            taken[c] += 1
            labeled_idx.append(int(idx))
        if len(labeled_idx) == spec.n_labeled:
            break
    if len(labeled_idx) != spec.n_labeled:
        raise ValueError("not enough samples to build a balanced labeled split")
    labeled_set = set(labeled_idx)
    unlabeled_idx = [int(i) for i in order if int(i) not in labeled_set][: spec.n_unlabeled]
    if len(unlabeled_idx) != spec.n_unlabeled:
        raise ValueError("not enough samples for the unlabeled split")
    test_order = rng.permutation(len(y_test))[: spec.n_test]
    if len(test_order) != spec.n_test:
        raise ValueError("not enough samples for the test split")
    labeled_idx = np.asarray(labeled_idx)
    unlabeled_idx = np.asarray(unlabeled_idx)
    return Dataset(
        x_labeled=x_train[labeled_idx],
        y_labeled=y_train[labeled_idx],
        x_unlabeled=x_train[unlabeled_idx],
        x_test=x_test[test_order],
        y_test=y_test[test_order],
        n_classes=n_classes,
        y_unlabeled_true=y_train[unlabeled_idx],
    )


@dataclass(frozen=True)
class ExperimentSpec:
    """A full attribution experiment: data, knowledge, training, method."""

    dataset: SyntheticSpec | DigitFilesSpec
    knowledge: tuple[KnowledgeSpec, ...]
    train: TrainConfig
    method: str = "exact"
    mc: McConfig | None = None
    repetition_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.knowledge:
            raise ValueError("need at least one knowledge item")
        names = [s.name for s in self.knowledge]
        if len(set(names)) != len(names):
            raise ValueError("knowledge names must be unique")
        if self.method not in ("exact", "permutation", "monte_carlo"):
            raise ValueError(f"unknown attribution method {self.method!r}")
        if self.method == "monte_carlo" and self.mc is None:
            raise ValueError("monte_carlo method needs an mc config")
        if not self.repetition_seeds:
            raise ValueError("need at least one repetition seed")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def n_players(self) -> int:
        return len(self.knowledge)


class CoalitionEvaluator:
    """Mean test accuracy per coalition, averaged over repetition seeds.

    The improvement game is V(S) = mean_r acc(S, r) - mean_r acc(empty, r),
    which pins V(empty) to exactly 0. Every (coalition, seed) training run is
    cached; runs are independent, so priming the cache may use threads
    without changing any result.
    """

    def __init__(
        self,
        dataset: Dataset,
        train_config: TrainConfig,
        repetition_seeds: Sequence[int],
    ):
        if not dataset.knowledge:
            raise ValueError("dataset has no attached knowledge")
        self._dataset = dataset
        self._config = train_config
        self._seeds = tuple(repetition_seeds)
        self._accuracy: dict[tuple[int, int], float] = {}
        self.n_players = len(dataset.knowledge)

    def _run(self, mask: int, seed: int) -> float:
        key = (mask, seed)
        if key not in self._accuracy:
            coalition = Coalition(self.n_players, mask)
            config = replace(self._config, seed=seed)
            _, metrics = train(self._dataset, coalition, config)
            self._accuracy[key] = metrics.test_accuracy
        return self._accuracy[key]

    def prime(self, coalitions: Sequence[Coalition], workers: int = 1) -> None:
        """Fill the cache for the given coalitions, optionally in parallel."""
        jobs = [
            (c.mask, seed)
            for c in coalitions
            for seed in self._seeds
            if (c.mask, seed) not in self._accuracy
        ]
        if workers <= 1 or len(jobs) <= 1:
            for mask, seed in jobs:
                self._run(mask, seed)
            return
        results: dict[tuple[int, int], float] = {}

        def job(key: tuple[int, int]) -> None:
            coalition = Coalition(self.n_players, key[0])
            config = replace(self._config, seed=key[1])
            _, metrics = train(self._dataset, coalition, config)
            results[key] = metrics.test_accuracy

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, jobs))
        self._accuracy.update(results)

    def mean_accuracy(self, coalition: Coalition) -> float:
        accs = [self._run(coalition.mask, seed) for seed in self._seeds]
        return float(np.mean(accs))

    def value(self, coalition: Coalition) -> float:
        """Improvement over the no-knowledge baseline; exactly 0 for empty."""
        if coalition.mask == 0:
            return 0.0
        base = self.mean_accuracy(Coalition.empty(self.n_players))
        return self.mean_accuracy(coalition) - base

    @property
    def runs_performed(self) -> int:
        return len(self._accuracy)


def build_value_function(
    experiment: ExperimentSpec, dataset: Dataset
) -> tuple[Callable[[Coalition], float], CoalitionEvaluator]:
    """The coalition improvement game for an experiment, plus its evaluator."""
    evaluator = CoalitionEvaluator(dataset, experiment.train, experiment.repetition_seeds)
    return evaluator.value, evaluator


def build_dataset(experiment: ExperimentSpec) -> Dataset:
    """Materialize the experiment's dataset with knowledge truth attached."""
    if isinstance(experiment.dataset, SyntheticSpec):
        raw = generate_blobs(experiment.dataset)
    else:
        raw = build_digit_dataset(experiment.dataset)
    return attach_knowledge_truth(raw, experiment.knowledge)


def evaluate_all_coalitions(
    experiment: ExperimentSpec, dataset: Dataset
) -> tuple[CoalitionEvaluator, dict[Coalition, float]]:
    """Mean accuracy for every coalition (the Table-1-shaped summary)."""
    evaluator = CoalitionEvaluator(dataset, experiment.train, experiment.repetition_seeds)
    coalitions = list(enumerate_all(experiment.n_players))
    evaluator.prime(coalitions, workers=experiment.workers)
    return evaluator, {c: evaluator.mean_accuracy(c) for c in coalitions}
