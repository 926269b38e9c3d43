"""FER-2013 ingestion, class statistics, and the deterministic split.

The CSV distribution has one header row followed by
``emotion,pixels,Usage`` rows where ``pixels`` holds 2304 space-separated
integers (a 48x48 grayscale face).  Label indices follow the dataset's
own encoding (0=angry ... 6=neutral).  The official test partitions
(PublicTest / PrivateTest) are never resampled; only the Training
partition is divided into train and validation subsets.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import keyed_rng

IMAGE_SIDE = 48
PIXELS_PER_IMAGE = IMAGE_SIDE * IMAGE_SIDE
USAGES = ("Training", "PublicTest", "PrivateTest")
DEFAULT_TRAIN_FRACTION = 0.875


class EmotionLabel(enum.IntEnum):
    """The seven FER-2013 classes in the CSV's own index order."""

    angry = 0
    disgust = 1
    fear = 2
    happy = 3
    sad = 4
    surprise = 5
    neutral = 6


EMOTION_NAMES = tuple(label.name for label in EmotionLabel)
NUM_CLASSES = len(EmotionLabel)


class MalformedRowError(ValueError):
    """A data row whose pixel field is not exactly 2304 values in [0, 255]."""

    def __init__(self, row_number: int, message: str) -> None:
        super().__init__(f"row {row_number}: {message}")
        self.row_number = row_number


class LabelRangeError(ValueError):
    """An emotion index outside 0..6."""

    def __init__(self, row_number: int, value: str) -> None:
        super().__init__(f"row {row_number}: emotion {value!r} outside 0..6")
        self.row_number = row_number


class PartitionError(ValueError):
    """A Usage string that is not one of the official partitions."""

    def __init__(self, row_number: int, value: str) -> None:
        super().__init__(f"row {row_number}: unknown usage {value!r}")
        self.row_number = row_number


class UnsplittableClassError(ValueError):
    """A class with fewer than two samples cannot be stratified."""


@dataclass(frozen=True)
class Sample:
    """One labeled 48x48 grayscale image and its official partition."""

    pixels: np.ndarray  # (48, 48) uint8
    label: int
    usage: str

    def pixel_bytes(self) -> bytes:
        return self.pixels.tobytes()


def parse_fer_csv(text: str | io.TextIOBase) -> list[Sample]:
    """Parse the FER-2013 CSV into samples, preserving file order.

    Raises MalformedRowError, LabelRangeError, or PartitionError with the
    offending 1-based data row number (header excluded).
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        next(reader)  # header
    except StopIteration:
        return []

    samples: list[Sample] = []
    for row_number, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 3:
            raise MalformedRowError(row_number, f"expected 3 fields, got {len(row)}")
        emotion_str, pixels_str, usage = row

        try:
            label = int(emotion_str)
        except ValueError:
            raise LabelRangeError(row_number, emotion_str) from None
        if not 0 <= label < NUM_CLASSES:
            raise LabelRangeError(row_number, emotion_str)

        if usage not in USAGES:
            raise PartitionError(row_number, usage)

        try:
            values = np.array(pixels_str.split(), dtype=np.int32)
        except ValueError:
            raise MalformedRowError(row_number, "non-integer pixel value") from None
        if values.size != PIXELS_PER_IMAGE:
            raise MalformedRowError(
                row_number, f"expected {PIXELS_PER_IMAGE} pixels, got {values.size}"
            )
        if values.min() < 0 or values.max() > 255:
            raise MalformedRowError(row_number, "pixel value outside [0, 255]")

        pixels = values.astype(np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE)
        pixels.setflags(write=False)
        samples.append(Sample(pixels=pixels, label=label, usage=usage))
    return samples


def parse_fer_csv_file(path: str | Path) -> list[Sample]:
    with open(path, "r", newline="") as fh:
        return parse_fer_csv(fh)


def class_counts(samples: Iterable[Sample], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Tally samples per label index; counts always sum to len(samples)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample in samples:
        counts[sample.label] += 1
    return counts


def by_usage(samples: Sequence[Sample], usage: str) -> list[Sample]:
    if usage not in USAGES:
        raise PartitionError(0, usage)
    return [s for s in samples if s.usage == usage]


@dataclass(frozen=True)
class SplitManifest:
    """Deterministic record of the train/validation/test index assignment.

    ``train_indices`` and ``val_indices`` index into the Training
    partition in file order; ``test_indices`` index into the selected
    official test partition, unchanged.
    """

    seed: int
    train_fraction: float
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    test_partition: str = "PrivateTest"
    digest: str = field(default="", compare=False)

    def canonical_text(self) -> str:
        return (
            f"seed={self.seed}\n"
            f"train_fraction={self.train_fraction!r}\n"
            f"test_partition={self.test_partition}\n"
            f"train={','.join(map(str, self.train_indices))}\n"
            f"val={','.join(map(str, self.val_indices))}\n"
            f"test={','.join(map(str, self.test_indices))}\n"
        )

    def compute_digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def _fisher_yates(indices: list[int], rng: np.random.Generator) -> list[int]:
    # Explicit Fisher-Yates so the shuffle is pinned to the keyed stream.
    shuffled = list(indices)
    for i in range(len(shuffled) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        shuffled[i], shuffled[j] = shuffled[j], shuffled[i]
    return shuffled


def stratified_split(
    samples: Sequence[Sample],
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
    seed: int = 42,
    *,
    test_count: int = 0,
    test_partition: str = "PrivateTest",
) -> SplitManifest:
    """Split the Training partition per class: floor(fraction*n_c) to train.

    Each class's index list is shuffled by a Fisher-Yates keyed on
    (seed, class index) so no class's assignment can perturb another's.
    ``test_count``/``test_partition`` record the untouched official test
    rows in the manifest.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")

    per_class: dict[int, list[int]] = {}
    for idx, sample in enumerate(samples):
        per_class.setdefault(sample.label, []).append(idx)

    train_indices: list[int] = []
    val_indices: list[int] = []
    for label in sorted(per_class):
        class_indices = per_class[label]
        if len(class_indices) < 2:
            raise UnsplittableClassError(
                f"class {label} has {len(class_indices)} sample(s); need at least 2"
            )
        shuffled = _fisher_yates(class_indices, keyed_rng(seed, label))
        n_train = int(np.floor(train_fraction * len(class_indices)))
        train_indices.extend(shuffled[:n_train])
        val_indices.extend(shuffled[n_train:])

    train_indices.sort()
    val_indices.sort()
    manifest = SplitManifest(
        seed=seed,
        train_fraction=train_fraction,
        train_indices=tuple(train_indices),
        val_indices=tuple(val_indices),
        test_indices=tuple(range(test_count)),
        test_partition=test_partition,
    )
    return replace(manifest, digest=manifest.compute_digest())


def save_manifest(manifest: SplitManifest, path: str | Path) -> None:
    payload = {
        "seed": manifest.seed,
        "train_fraction": manifest.train_fraction,
        "test_partition": manifest.test_partition,
        "train_indices": list(manifest.train_indices),
        "val_indices": list(manifest.val_indices),
        "test_indices": list(manifest.test_indices),
        "digest": manifest.digest,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path: str | Path) -> SplitManifest:
    payload = json.loads(Path(path).read_text())
    manifest = SplitManifest(
        seed=int(payload["seed"]),
        train_fraction=float(payload["train_fraction"]),
        train_indices=tuple(payload["train_indices"]),
        val_indices=tuple(payload["val_indices"]),
        test_indices=tuple(payload["test_indices"]),
        test_partition=payload["test_partition"],
        digest=payload["digest"],
    )
    if manifest.compute_digest() != manifest.digest:
        raise ValueError(f"manifest digest mismatch in {path}")
    return manifest
