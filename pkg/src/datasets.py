"""Benign image sources: deterministic synthetic blobs and CIFAR-10 binaries."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import ConfigurationError, FormatError

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10000
TEMPLATE_GRID = 4


@dataclass
class LabeledImages:
    """Images in ``[0, 1]`` with shape ``(N, C, H, W)`` and integer labels.

    ``ids`` are stable image identifiers inside the source pool; they are
    what dataset manifests use to prove train/test disjointness.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: Optional[np.ndarray] = None
    name: str = "images"

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ConfigurationError("images, labels and ids must have the same length")

    def __len__(self) -> int:
        return int(len(self.labels))

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, index: Sequence[int], name: Optional[str] = None) -> "LabeledImages":
        index = np.asarray(index, dtype=np.int64)
        return LabeledImages(
            self.images[index], self.labels[index], self.num_classes, self.ids[index], name or self.name
        )


@dataclass
class DatasetSplits:
    train: LabeledImages
    validation: LabeledImages


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    image_size: int = 16
    channels: int = 3
    template_seed: int = 0
    noise_std: float = 0.1
    samples_per_class: int = 200
    sample_seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ConfigurationError("Synthetic data needs at least 2 classes")
        if self.noise_std < 0:
            raise ConfigurationError(f"Noise standard deviation must be >= 0, got {self.noise_std}")
        if self.image_size < 1 or self.channels < 1 or self.samples_per_class < 1:
            raise ConfigurationError("image_size, channels and samples_per_class must be positive")


def synthetic_templates(spec: SyntheticSpec) -> np.ndarray:
    """Blocky class templates: a 4x4 random colour grid upsampled to the image size."""

    rng = np.random.default_rng(spec.template_seed)
    grid = rng.uniform(0.0, 1.0, size=(spec.classes, spec.channels, TEMPLATE_GRID, TEMPLATE_GRID))
    cells = (np.arange(spec.image_size) * TEMPLATE_GRID) // spec.image_size
    return grid[:, :, cells][:, :, :, cells].astype(np.float32)


def synth_dataset(spec: SyntheticSpec, stream: int = 0) -> LabeledImages:
    """Sample ``clamp(template_k + N(0, sigma^2))`` for every class.

    ``stream`` selects an independent sample stream over the same templates
    (0 feeds victim training, 1 the attack pool).
    """

    templates = synthetic_templates(spec)
    rng = np.random.default_rng([spec.sample_seed, stream])
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for k in range(spec.classes):
        noise = rng.standard_normal((spec.samples_per_class,) + templates.shape[1:]) * spec.noise_std
        images.append(np.clip(templates[k][None] + noise, 0.0, 1.0).astype(np.float32))
        labels.append(np.full(spec.samples_per_class, k, dtype=np.int64))
    ids = np.arange(spec.classes * spec.samples_per_class, dtype=np.int64) + stream * 10**9
    result = LabeledImages(
        np.concatenate(images), np.concatenate(labels), spec.classes, ids, name=f"synthetic-{stream}"
    )
    logger.debug("Synthetic dataset stream {}: {} images of shape {}", stream, len(result), result.input_shape)
    return result


def nearest_template_accuracy(data: LabeledImages, templates: np.ndarray) -> float:
    """Accuracy of the nearest-template (squared distance) classifier."""

    flat = data.images.reshape(len(data), -1)
    tmpl = templates.reshape(len(templates), -1)
    dist = (flat ** 2).sum(1)[:, None] - 2 * flat @ tmpl.T + (tmpl ** 2).sum(1)[None, :]
    return float((dist.argmin(axis=1) == data.labels).mean())


# === CIFAR-10 (version binaire) ===

def read_cifar_batch(path: Union[str, Path], name: Optional[str] = None) -> LabeledImages:
    """Parse one CIFAR-10 binary file: 1 label byte + 3072 pixel bytes per record.

    Raises:
        FormatError: file size not a multiple of the record size, or a label
            outside [0, 9]; the error carries the byte offset.
    """

    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read CIFAR-10 file {path}: {exc}") from exc
    if len(raw) % CIFAR_RECORD_BYTES:
        complete = len(raw) // CIFAR_RECORD_BYTES
        raise FormatError(
            f"{path.name}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}",
            offset=complete * CIFAR_RECORD_BYTES,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path.name}: label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD_BYTES)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledImages(images, labels, 10, name=name or path.stem)


def ingest_cifar10(path: Union[str, Path]) -> Dict[str, LabeledImages]:
    """Load the five training batches and the test batch from a directory.

    Returns ``{"train": 50000 images, "test": 10000 images}``.
    """

    root = Path(path)
    if root.is_dir() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts: List[LabeledImages] = []
    for filename in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        file = root / filename
        if not file.is_file():
            raise FormatError(f"Missing CIFAR-10 file {file}")
        batch = read_cifar_batch(file)
        if len(batch) != CIFAR_RECORDS_PER_FILE:
            raise FormatError(
                f"{filename}: expected {CIFAR_RECORDS_PER_FILE} records, found {len(batch)}",
                offset=len(batch) * CIFAR_RECORD_BYTES,
            )
        parts.append(batch)
    train = LabeledImages(
        np.concatenate([p.images for p in parts[:-1]]),
        np.concatenate([p.labels for p in parts[:-1]]),
        10,
        name="cifar10-train",
    )
    test = LabeledImages(
        parts[-1].images, parts[-1].labels, 10,
        np.arange(len(parts[-1]), dtype=np.int64) + len(train), name="cifar10-test",
    )
    logger.info("CIFAR-10 loaded: {} train / {} test images", len(train), len(test))
    return {"train": train, "test": test}


# === DÉCOUPAGE STRATIFIÉ ===

def stratified_indices(labels: np.ndarray, ratio: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Class-stratified disjoint split.

    Each class contributes ``floor(ratio * n_c)`` images to the first part;
    the remaining slots up to ``round(ratio * N)`` go to the classes with the
    largest fractional remainders (lowest class id first on ties).
    """

    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"Split ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigurationError("Cannot split an empty dataset")
    classes, counts = np.unique(labels, return_counts=True)
    exact = ratio * counts
    take = np.floor(exact).astype(np.int64)
    missing = int(round(ratio * labels.size)) - int(take.sum())
    if missing > 0:
        order = np.lexsort((classes, -(exact - take)))
        take[order[:missing]] += 1
    rng = np.random.default_rng(seed)
    first: List[np.ndarray] = []
    second: List[np.ndarray] = []
    for cls, n_take in zip(classes, take):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        first.append(members[:n_take])
        second.append(members[n_take:])
    a, b = np.sort(np.concatenate(first)), np.sort(np.concatenate(second))
    if a.size == 0 or b.size == 0:
        raise ConfigurationError(f"Split ratio {ratio} leaves one side empty for {labels.size} images")
    return a, b


def train_validation_split(data: LabeledImages, ratio: float, seed: int) -> DatasetSplits:
    train_idx, val_idx = stratified_indices(data.labels, ratio, seed)
    return DatasetSplits(data.subset(train_idx, f"{data.name}-train"), data.subset(val_idx, f"{data.name}-val"))
