"""Datasets: synthetic generation, institutional heterogeneity, splitting and ingestion."""
import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from fedretina.config import (
    INPUT_SHAPE,
    NUM_CLASSES,
    PIXEL_NOISE_SIGMA,
    TEST_FRACTION,
    VALIDATION_FRACTION,
)
from fedretina.errors import (
    ConfigError,
    EmptyDatasetError,
    ImbalanceError,
    IngestionError,
    StratificationError,
    UsageError,
)
from fedretina.image_utils import (
    AugmentPolicy,
    DegradeSpec,
    GaussianFilterSpec,
    augment_traced,
    gaussian_filter,
    jpeg_roundtrip,
    resize_bilinear,
)

logger = logging.getLogger(__name__)

PROVENANCES = ("synthetic", "ingested", "derived")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    source: Optional[int] = None  # index of the item this one was derived from

    def __post_init__(self):
        if not 0 <= int(self.label) < NUM_CLASSES:
            raise UsageError(f"label {self.label} outside 0..{NUM_CLASSES - 1}")
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3:
            raise UsageError(f"pixels must be (H, W, C), got shape {pixels.shape}")
        object.__setattr__(self, "pixels", np.clip(pixels, 0.0, 1.0).astype(np.float32, copy=False))
        object.__setattr__(self, "label", int(self.label))


class Dataset:
    """Ordered, immutable collection of labelled images backed by one pixel array."""

    def __init__(self, pixels: np.ndarray, labels: Sequence[int], name: str,
                 provenance: str = "synthetic", sources: Optional[Sequence[int]] = None):
        if provenance not in PROVENANCES:
            raise UsageError(f"unknown provenance {provenance!r}")
        pixels = np.asarray(pixels, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if pixels.ndim != 4 or pixels.shape[0] != labels.shape[0]:
            raise UsageError(f"pixels {pixels.shape} and labels {labels.shape} do not line up")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise UsageError(f"labels must be in 0..{NUM_CLASSES - 1}")
        sources = np.full(len(labels), -1, dtype=np.int64) if sources is None else np.asarray(sources, dtype=np.int64)
        for array in (pixels, labels, sources):
            array.flags.writeable = False
        self.pixels = pixels
        self.labels = labels
        self.sources = sources
        self.name = name
        self.provenance = provenance

    @classmethod
    def from_items(cls, items: Sequence[LabeledImage], name: str, provenance: str = "derived") -> "Dataset":
        if not items:
            raise EmptyDatasetError(f"dataset {name!r} has no items")
        return cls(
            np.stack([item.pixels for item in items]),
            [item.label for item in items],
            name,
            provenance,
            [-1 if item.source is None else item.source for item in items],
        )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> LabeledImage:
        source = int(self.sources[index])
        return LabeledImage(self.pixels[index], int(self.labels[index]), None if source < 0 else source)

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def items(self) -> List[LabeledImage]:
        return list(self)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.pixels.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def subset(self, indices: Sequence[int], name: Optional[str] = None,
               provenance: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.pixels[indices], self.labels[indices], name or self.name,
                       provenance or self.provenance, self.sources[indices])

    def __repr__(self) -> str:
        return f"Dataset({self.name!r}, n={len(self)}, counts={self.class_counts().tolist()})"


def concat_datasets(datasets: Sequence[Dataset], name: str) -> Dataset:
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        raise EmptyDatasetError(f"dataset {name!r} has no items")
    return Dataset(np.concatenate([d.pixels for d in datasets]),
                   np.concatenate([d.labels for d in datasets]), name, "derived")


# ---------------------------------------------------------------- generation

@dataclass(frozen=True)
class SyntheticStyle:
    """Acquisition characteristics of one simulated institution."""
    disc_tint: Tuple[float, float, float] = (0.80, 0.40, 0.20)
    illumination: float = 1.0
    vignette: float = 0.0


def _stamp_polyline(mask: np.ndarray, points: np.ndarray) -> None:
    size = mask.shape[0]
    for (r0, c0), (r1, c1) in zip(points, points[1:]):
        steps = int(max(abs(r1 - r0), abs(c1 - c0)) * size) * 2 + 2
        for t in np.linspace(0.0, 1.0, steps):
            r = int(round((r0 + (r1 - r0) * t) * (size - 1)))
            c = int(round((c0 + (c1 - c0) * t) * (size - 1)))
            if 0 <= r < size and 0 <= c < size:
                mask[r, c] = True


def render_fundus(size: int, grade: int, rng: np.random.Generator,
                  style: SyntheticStyle = SyntheticStyle()) -> np.ndarray:
    """One fundus-like image with exactly `grade` bright lesion blobs."""
    rows, cols = np.mgrid[0:size, 0:size] / (size - 1)
    cy, cx = 0.5 + rng.uniform(-0.03, 0.03, size=2)
    radius = 0.42 + rng.uniform(-0.02, 0.02)
    dist = np.sqrt((rows - cy) ** 2 + (cols - cx) ** 2) / radius

    background = 0.03
    edge = np.clip((1.0 - dist) * radius * size / 1.5, 0.0, 1.0)[..., None]
    shading = (0.85 - 0.25 * np.clip(dist, 0, 1) ** 2) * style.illumination
    shading = shading * (1.0 - style.vignette * np.clip(dist, 0, 1) ** 2)
    disc = np.asarray(style.disc_tint) * shading[..., None]
    image = background + (disc - background) * edge

    # optic disc
    angle = rng.uniform(0, 2 * np.pi)
    oy, ox = cy + 0.45 * radius * np.sin(angle), cx + 0.45 * radius * np.cos(angle)
    optic = 0.6 * np.exp(-((rows - oy) ** 2 + (cols - ox) ** 2) / (2 * 0.06 ** 2))[..., None]
    image = image * (1 - optic) + np.array([0.90, 0.80, 0.55]) * optic

    # vessels: short random walks leaving the optic disc
    vessels = np.zeros((size, size), dtype=bool)
    for _ in range(3):
        heading = rng.uniform(0, 2 * np.pi)
        points = [(oy, ox)]
        for _ in range(6):
            heading += rng.normal(0, 0.5)
            step = rng.uniform(0.05, 0.09)
            points.append((points[-1][0] + step * np.sin(heading), points[-1][1] + step * np.cos(heading)))
        _stamp_polyline(vessels, np.asarray(points))
    vessels &= dist[...] < 1.0
    image[vessels] = image[vessels] * 0.45 + np.array([0.35, 0.08, 0.05]) * 0.55

    # lesions, kept apart so each blob stays distinct
    scale = size / 64.0
    centres: List[Tuple[float, float]] = []
    for _ in range(grade):
        sigma = rng.uniform(1.6, 2.4) * scale / (size - 1)
        for _attempt in range(50):
            r = 0.70 * radius * np.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + r * np.sin(theta), cx + r * np.cos(theta)
            if all((ly - py) ** 2 + (lx - px) ** 2 > (6 * scale / size) ** 2 for py, px in centres):
                break
        centres.append((ly, lx))
        amplitude = rng.uniform(0.85, 1.0)
        blob = amplitude * np.exp(-((rows - ly) ** 2 + (cols - lx) ** 2) / (2 * sigma ** 2))[..., None]
        image = image * (1 - blob) + np.array([1.0, 0.97, 0.80]) * blob

    image = image + rng.normal(0.0, PIXEL_NOISE_SIGMA, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_synthetic(per_class_counts: Sequence[int], image_size: int, seed: int,
                       style: SyntheticStyle = SyntheticStyle(), name: str = "synthetic") -> Dataset:
    """Deterministic fundus-like dataset; severity grade k is encoded as k lesion blobs."""
    counts = [int(c) for c in per_class_counts]
    if len(counts) != NUM_CLASSES or min(counts) < 0:
        raise ConfigError(f"need {NUM_CLASSES} non-negative per-class counts, got {per_class_counts}")
    if image_size < 32:
        raise ConfigError(f"image_size must be >= 32, got {image_size}")
    if sum(counts) == 0:
        raise EmptyDatasetError("all per-class counts are zero")
    labels = np.repeat(np.arange(NUM_CLASSES), counts)
    labels = np.random.default_rng([seed, 0]).permutation(labels)
    pixels = np.empty((len(labels), image_size, image_size, 3), dtype=np.float32)
    for i, grade in enumerate(labels):
        pixels[i] = render_fundus(image_size, int(grade), np.random.default_rng([seed, 1, i]), style)
    logger.info("generated %s: %d images, counts %s", name, len(labels), counts)
    return Dataset(pixels, labels, name, "synthetic")


def counts_for_size(total: int, mix: Sequence[float]) -> List[int]:
    """Split `total` items over classes in proportion to `mix` (largest remainder)."""
    return [int(c) for c in _apportion(total, np.asarray(mix, dtype=np.float64))]


# ---------------------------------------------------------------- transforms

def augment(image: LabeledImage, policy: AugmentPolicy, rng: np.random.Generator) -> LabeledImage:
    pixels, _ = augment_traced(image.pixels, policy, rng)
    return LabeledImage(pixels, image.label, image.source)


def degrade_quality(image: LabeledImage, spec: DegradeSpec, rng: np.random.Generator) -> LabeledImage:
    """JPEG-style quality loss at a quality drawn uniformly from [quality_min, quality_max]."""
    quality = int(rng.integers(spec.quality_min, spec.quality_max + 1))
    return LabeledImage(jpeg_roundtrip(image.pixels, quality), image.label, image.source)


def degrade_dataset(dataset: Dataset, spec: DegradeSpec, seed: int) -> Dataset:
    spec.validate()
    rng = np.random.default_rng([seed, 0xD6])
    pixels = np.stack([degrade_quality(item, spec, rng).pixels for item in dataset])
    logger.info("degraded %s at quality %s", dataset.name, spec)
    return Dataset(pixels, dataset.labels, dataset.name, "derived", dataset.sources)


def filter_dataset(dataset: Dataset, spec: GaussianFilterSpec) -> Dataset:
    if not spec.enabled:
        return dataset
    pixels = np.stack([gaussian_filter(p, spec.sigma, spec.kernel_size) for p in dataset.pixels])
    return Dataset(pixels, dataset.labels, dataset.name, "derived", dataset.sources)


def oversample_balance(dataset: Dataset, policy: AugmentPolicy, seed: int) -> Dataset:
    """Top up every class to the largest class count with augmented copies.

    Originals keep their positions at the front; each added item records the
    index of the original it was augmented from.
    """
    policy.validate()
    counts = dataset.class_counts()
    missing = [c for c in range(NUM_CLASSES) if counts[c] == 0]
    if missing:
        raise ImbalanceError(f"{dataset.name}: classes {missing} have no samples to oversample")
    target = int(counts.max())
    if np.all(counts == target):
        return dataset
    rng = np.random.default_rng([seed, 0x0B])
    new_pixels, new_labels, new_sources = [], [], []
    for c in range(NUM_CLASSES):
        members = np.flatnonzero(dataset.labels == c)
        for pick in rng.integers(0, len(members), size=target - counts[c]):
            source = int(members[pick])
            pixels, _ = augment_traced(dataset.pixels[source], policy, rng)
            new_pixels.append(pixels)
            new_labels.append(c)
            new_sources.append(source)
    logger.info("oversampled %s: %d -> %d items", dataset.name, len(dataset), len(dataset) + len(new_labels))
    return Dataset(
        np.concatenate([dataset.pixels, np.stack(new_pixels)]),
        np.concatenate([dataset.labels, new_labels]),
        dataset.name,
        "derived",
        np.concatenate([np.full(len(dataset), -1), new_sources]),
    )


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = TEST_FRACTION
    validation_fraction_of_remainder: float = VALIDATION_FRACTION
    seed: int = 0

    def validate(self) -> "SplitSpec":
        for name in ("test_fraction", "validation_fraction_of_remainder"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {value}")
        return self


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of `total` over `weights`; ties go to the lower index."""
    if total <= 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    quotas = total * weights / weights.sum()
    shares = np.floor(quotas).astype(np.int64)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - shares[i]), i))
    for i in order[: total - int(shares.sum())]:
        shares[i] += 1
    return shares


def _stratified_indices(dataset: Dataset, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    groups = {}
    for c in range(NUM_CLASSES):
        members = np.flatnonzero(dataset.labels == c)
        if len(members):
            groups[c] = rng.permutation(members)
    return groups


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Stratified train/validation/test partition.

    Each class gives round(test_fraction * n_c) items to test. The validation
    total is round(validation_fraction * remainder), shared out over classes
    in proportion to what each has left.
    """
    spec.validate()
    if len(dataset) < 10:
        raise StratificationError(f"{dataset.name}: need at least 10 items to split, got {len(dataset)}")
    groups = _stratified_indices(dataset, np.random.default_rng([spec.seed, 0x5B]))
    small = {c: len(m) for c, m in groups.items() if len(m) < 2}
    if small:
        raise StratificationError(f"{dataset.name}: classes too small to stratify: {small}")
    classes = sorted(groups)
    test_counts = {c: _round_half_up(spec.test_fraction * len(groups[c])) for c in classes}
    left = np.array([len(groups[c]) - test_counts[c] for c in classes], dtype=np.float64)
    val_total = _round_half_up(spec.validation_fraction_of_remainder * left.sum())
    val_counts = dict(zip(classes, _apportion(val_total, left)))

    parts: Dict[str, List[int]] = {"train": [], "validation": [], "test": []}
    for c in classes:
        members = groups[c]
        t, v = test_counts[c], int(val_counts[c])
        parts["test"].extend(members[:t])
        parts["validation"].extend(members[t:t + v])
        parts["train"].extend(members[t + v:])
    train, validation, test = (
        dataset.subset(sorted(parts[key]), f"{dataset.name}/{key}") for key in ("train", "validation", "test")
    )
    return train, validation, test


def kfold(dataset: Dataset, k: int, seed: int) -> List[Tuple[Dataset, Dataset]]:
    """Stratified k-fold: each item lands in exactly one validation fold."""
    if k < 2:
        raise UsageError(f"k must be >= 2, got {k}")
    if len(dataset) < k:
        raise StratificationError(f"{dataset.name}: {len(dataset)} items cannot fill {k} folds")
    groups = _stratified_indices(dataset, np.random.default_rng([seed, 0xF0]))
    smallest = min(len(m) for m in groups.values())
    if k > smallest:
        raise StratificationError(f"{dataset.name}: k={k} exceeds the smallest class count {smallest}")
    fold_of = np.empty(len(dataset), dtype=np.int64)
    cursor = 0
    for c in sorted(groups):
        members = groups[c]
        fold_of[members] = (cursor + np.arange(len(members))) % k
        cursor += len(members)
    folds = []
    for fold in range(k):
        folds.append((
            dataset.subset(np.flatnonzero(fold_of != fold), f"{dataset.name}/fold{fold}/train"),
            dataset.subset(np.flatnonzero(fold_of == fold), f"{dataset.name}/fold{fold}/validation"),
        ))
    return folds


# ---------------------------------------------------------------- institutions

@dataclass(frozen=True)
class InstitutionData:
    name: str
    train: Dataset
    validation: Dataset
    test: Dataset


def prepare_institution(raw: Dataset, seed: int, degrade: Optional[DegradeSpec] = None,
                        split_spec: Optional[SplitSpec] = None,
                        filter_spec: GaussianFilterSpec = GaussianFilterSpec(enabled=True),
                        policy: AugmentPolicy = AugmentPolicy(), balance: bool = True) -> InstitutionData:
    """Degrade (optional), split, Gaussian-filter every split, then balance the training split."""
    data = degrade_dataset(raw, degrade, seed) if degrade is not None else raw
    split_spec = split_spec or SplitSpec(seed=seed)
    train, validation, test = (filter_dataset(part, filter_spec) for part in split(data, split_spec))
    if balance:
        train = oversample_balance(train, policy, seed)
    return InstitutionData(raw.name, train, validation, test)


# ---------------------------------------------------------------- file formats

FIMG_MAGIC = b"FIMG"
_WHITESPACE = b" \t\n\r\x0b\x0c"


def read_ppm(path) -> np.ndarray:
    """Binary P6 PPM (8- or 16-bit) to float pixels in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise IngestionError(f"unparsable PPM header in {path}: header ends early")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise IngestionError(f"unparsable PPM header in {path}: magic {tokens[0]!r} is not P6")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as exc:
        raise IngestionError(f"unparsable PPM header in {path}: {exc}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise IngestionError(f"unparsable PPM header in {path}: {width}x{height} maxval {maxval}")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise IngestionError(f"unparsable PPM header in {path}: missing separator before data")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * 3 * dtype.itemsize
    body = data[pos:pos + expected]
    if len(body) != expected:
        raise IngestionError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width, 3)
    return np.clip(pixels.astype(np.float32) / maxval, 0.0, 1.0)


def write_ppm(path, pixels: np.ndarray) -> None:
    height, width = pixels.shape[:2]
    raw = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (width, height) + raw.tobytes())


def read_fimg(path) -> np.ndarray:
    """Raw tensor format: b'FIMG', u32 height, width, channels, then float32 LE pixels."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FIMG_MAGIC:
        raise IngestionError(f"{path}: not a FIMG file")
    height, width, channels = struct.unpack_from("<III", data, 4)
    expected = 16 + height * width * channels * 4
    if len(data) != expected or channels not in (1, 3):
        raise IngestionError(f"{path}: {len(data)} bytes for {height}x{width}x{channels} (expected {expected})")
    pixels = np.frombuffer(data, dtype="<f4", offset=16).reshape(height, width, channels)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return np.clip(pixels.astype(np.float32), 0.0, 1.0)


def write_fimg(path, pixels: np.ndarray) -> None:
    height, width, channels = pixels.shape
    Path(path).write_bytes(FIMG_MAGIC + struct.pack("<III", height, width, channels)
                           + np.ascontiguousarray(pixels, dtype="<f4").tobytes())


_READERS = {".ppm": read_ppm, ".fimg": read_fimg}


def ingest(dir_path, labels_file=None, image_size: int = INPUT_SHAPE[0], name: Optional[str] = None) -> Dataset:
    """Load `labels.csv` (filename,label) and the images it lists, resized to image_size."""
    root = Path(dir_path)
    manifest = Path(labels_file) if labels_file else root / "labels.csv"
    try:
        with open(manifest, newline="") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {manifest}: {exc}") from exc
    has_header = bool(rows) and [cell.strip().lower() for cell in rows[0]] == ["filename", "label"]
    body = rows[1:] if has_header else rows
    pixels, labels = [], []
    for line_no, row in enumerate(body, start=2 if has_header else 1):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise IngestionError(f"expected 'filename,label', got {row}", line_no)
        filename, label_text = row[0].strip(), row[1].strip()
        try:
            label = int(label_text)
        except ValueError:
            raise IngestionError(f"label {label_text!r} is not an integer", line_no) from None
        if not 0 <= label < NUM_CLASSES:
            raise IngestionError(f"label {label} outside 0..{NUM_CLASSES - 1}", line_no)
        path = root / "images" / filename
        if not path.exists():
            path = root / filename
        if not path.exists():
            raise IngestionError(f"missing file {filename}", line_no)
        reader = _READERS.get(path.suffix.lower())
        if reader is None:
            raise IngestionError(f"unsupported image type {path.suffix!r}", line_no)
        try:
            image = reader(path)
        except IngestionError as exc:
            raise IngestionError(str(exc), line_no) from exc
        pixels.append(resize_bilinear(image, image_size, image_size))
        labels.append(label)
    if not labels:
        raise EmptyDatasetError(f"manifest {manifest} lists no images")
    dataset = Dataset(np.stack(pixels), labels, name or root.name, "ingested")
    logger.info("ingested %s: %d images", dataset.name, len(dataset))
    return dataset


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write images/NNNNN.ppm plus labels.csv; ordering is preserved."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for i in range(len(dataset)):
            filename = f"{i:05d}.ppm"
            write_ppm(out / "images" / filename, dataset.pixels[i])
            writer.writerow([filename, int(dataset.labels[i])])
    return out
