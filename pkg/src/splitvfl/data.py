"""Tabular and image ingestion, normalization, patient splits, batching, synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from splitvfl.errors import DataError

LABELS = {"Nondemented": 0, "Demented": 1, "Converted": 2}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
MISSING = {"", "na", "n/a", "nan", "null", "none", "?"}


@dataclass(frozen=True)
class TabularDataset:
    ids: list[str]
    features: np.ndarray  # [N x F] float32
    labels: np.ndarray | None  # [N] int64
    feature_names: list[str]
    dropped: int = 0

    def __post_init__(self):
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError(f"features shape {self.features.shape} does not match {n} ids")
        if self.labels is not None and self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} does not match {n} ids")
        if self.features.shape[1] != len(self.feature_names):
            raise DataError("feature_names length does not match feature columns")
        if len(set(self.ids)) != n:
            raise DataError("duplicate sample ids")

    def __len__(self):
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    def select(self, ids: Sequence[str]) -> "TabularDataset":
        """Rows for ``ids`` in the given order."""
        pos = self.index()
        try:
            rows = np.array([pos[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]!r}") from None
        return TabularDataset(list(ids), self.features[rows], None if self.labels is None else self.labels[rows],
                              self.feature_names)


@dataclass(frozen=True)
class ImageDataset:
    ids: list[str]
    images: np.ndarray  # [N x C x H x W] float32 in [0, 1]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(self.ids):
            raise DataError(f"images shape {self.images.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate sample ids")
        if self.images.size and not (self.images.min() >= 0.0 and self.images.max() <= 1.0):
            raise DataError("image pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.ids)

    def select(self, ids: Sequence[str]) -> "ImageDataset":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        try:
            rows = np.array([pos[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]!r}") from None
        return ImageDataset(list(ids), self.images[rows])


# ------------------------------------------------------------ tabular ---

def parse_label(value: str, row: int) -> int:
    v = value.strip()
    if v in LABELS:
        return LABELS[v]
    if v.isdigit():
        return int(v)
    raise DataError(f"row {row}: unknown label {value!r}")


def load_tabular_csv(path, id_column: str, label_column: str | None = None,
                     exclude: Sequence[str] = ()) -> TabularDataset:
    """Read a header-led CSV; rows with any missing value are dropped and counted.

    Every column other than the id, the label and ``exclude`` is a numeric
    feature.  Row numbers in errors are 1-based file lines.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header required") from None
        if id_column not in header:
            raise DataError(f"{path}: id column {id_column!r} not in header {header}")
        if label_column is not None and label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        skip = {id_column, label_column, *exclude}
        feat_cols = [i for i, h in enumerate(header) if h not in skip]
        id_col = header.index(id_column)
        label_col = header.index(label_column) if label_column is not None else None

        ids, rows, labels, dropped = [], [], [], 0
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
            used = [id_col, *feat_cols] + ([label_col] if label_col is not None else [])
            if any(rec[i].strip().lower() in MISSING for i in used):
                dropped += 1
                continue
            try:
                rows.append([float(rec[i]) for i in feat_cols])
            except ValueError:
                bad = next(header[i] for i in feat_cols if not _is_float(rec[i]))
                raise DataError(f"{path}:{line_no}: non-numeric value in column {bad!r}") from None
            ids.append(rec[id_col].strip())
            if label_col is not None:
                labels.append(parse_label(rec[label_col], line_no))

    features = np.array(rows, dtype=np.float32).reshape(len(rows), len(feat_cols))
    label_arr = np.array(labels, dtype=np.int64) if label_col is not None else None
    seen = set()
    for sid in ids:
        if sid in seen:
            raise DataError(f"{path}: duplicate id {sid!r}")
        seen.add(sid)
    return TabularDataset(ids, features, label_arr, [header[i] for i in feat_cols], dropped)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_tabular_csv(path, ds: TabularDataset, id_column: str = "id", label_column: str = "Group") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, *ds.feature_names] + ([label_column] if ds.labels is not None else []))
        for i, sid in enumerate(ds.ids):
            row = [sid, *(repr(float(v)) for v in ds.features[i])]
            if ds.labels is not None:
                lab = int(ds.labels[i])
                row.append(LABEL_NAMES.get(lab, str(lab)))
            w.writerow(row)


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray


def fit_minmax(train: TabularDataset) -> NormalizationStats:
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty training split")
    x = train.features.astype(np.float64)
    return NormalizationStats(x.min(axis=0), x.max(axis=0))


def apply_minmax(stats: NormalizationStats, ds: TabularDataset) -> TabularDataset:
    """``(x - min) / (max - min)``; constant features map to 0; no clamping."""
    span = stats.maximum - stats.minimum
    const = span == 0
    x = (ds.features.astype(np.float64) - stats.minimum) / np.where(const, 1.0, span)
    x[:, const] = 0.0
    return replace(ds, features=x.astype(np.float32))


# ------------------------------------------------------------- images ---

def read_gray(path) -> np.ndarray:
    """8-bit grayscale PGM (P5) or PNG as a uint8 [H x W] array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            mode = im.mode
            pixels = np.array(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from None
    if mode != "L":
        raise DataError(f"{path}: expected 8-bit grayscale, got mode {mode}")
    return pixels.astype(np.uint8, copy=False)


def write_gray(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def read_manifest(path) -> list[tuple[str, str]]:
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0]] == ["id", "path"]:
        rows = rows[1:]
    out = []
    for n, r in enumerate(rows, start=1):
        if len(r) != 2:
            raise DataError(f"{path}: manifest entry {n} must have 2 columns")
        out.append((r[0].strip(), r[1].strip()))
    return out


def load_images(directory, manifest, image_shape: tuple[int, int, int] | None = None) -> ImageDataset:
    """Load grayscale images listed in a two-column ``id,path`` manifest, scaled by 1/255."""
    directory = Path(directory)
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    ids, arrays = [], []
    for sid, rel in entries:
        path = directory / rel
        if not path.is_file():
            raise DataError(f"{path}: image file not found")
        px = read_gray(path)
        if image_shape is not None and px.shape != tuple(image_shape[1:]):
            raise DataError(f"{path}: image is {px.shape[0]}x{px.shape[1]}, expected "
                            f"{image_shape[1]}x{image_shape[2]}")
        ids.append(sid)
        arrays.append(px)
    if arrays:
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise DataError(f"images have differing sizes {sorted(shapes)}")
        stack = np.stack(arrays)[:, None, :, :]
    else:
        h, w = (image_shape[1], image_shape[2]) if image_shape else (0, 0)
        stack = np.zeros((0, 1, h, w), dtype=np.uint8)
    return ImageDataset(ids, stack.astype(np.float32) / np.float32(255.0))


# ------------------------------------------------------------ splitting ---

@dataclass(frozen=True)
class SplitSpec:
    patients: list[str]
    train: int
    val: int = 0
    test: int = 0


def patient_key(separator: str = "_") -> Callable[[str], str]:
    """Patient part of a sample id: everything before the last ``separator``.

    ``OAS2_0001_MR1`` -> ``OAS2_0001``; ids without the separator are their own patient.
    """
    if not separator:
        return lambda sid: sid
    return lambda sid: sid.rsplit(separator, 1)[0]


def patients_in_order(ids: Sequence[str], key: Callable[[str], str] = patient_key()) -> list[str]:
    return list(dict.fromkeys(key(i) for i in ids))


def split_by_patient(ids: Sequence[str], spec: SplitSpec,
                     key: Callable[[str], str] = patient_key()) -> tuple[list[str], list[str], list[str]]:
    """Assign patients to train/val/test by contiguous prefix; samples follow their patient.

    Patients past ``train + val + test`` are left out.  Output keeps the
    order of ``ids``.
    """
    counts = (spec.train, spec.val, spec.test)
    if min(counts) < 0:
        raise DataError(f"split counts must be non-negative, got {counts}")
    if sum(counts) > len(spec.patients):
        raise DataError(f"split counts {counts} exceed the {len(spec.patients)} available patients")
    if len(set(spec.patients)) != len(spec.patients):
        raise DataError("duplicate patient ids in split spec")
    part = {}
    bounds = np.cumsum(counts)
    for i, pid in enumerate(spec.patients[:bounds[-1]]):
        part[pid] = int(np.searchsorted(bounds, i, side="right"))
    out: tuple[list[str], list[str], list[str]] = ([], [], [])
    listed = set(spec.patients)
    for sid in ids:
        pid = key(sid)
        if pid not in listed:
            raise DataError(f"sample {sid!r} belongs to unlisted patient {pid!r}")
        if pid in part:
            out[part[pid]].append(sid)
    return out


def batch_iter(n: int, batch_size: int, epoch: int, base_seed: int) -> list[np.ndarray]:
    """Shuffled index batches over ``range(n)``; seed ``base_seed + epoch``; last batch may be short."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(base_seed + epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def sequential_batches(n: int, batch_size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


# ------------------------------------------------------------ synthetic ---

# Per-class Gaussian means of the 12 synthetic tabular features (unit variance).
# Class 1 shifts features 0-3, class 2 shifts features 4-7, 8-11 are noise.
TABULAR_MEANS = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
])
# Disc radius as a fraction of the image side, and disc brightness, per class.
DISC_RADIUS = np.array([0.16, 0.26, 0.36])
DISC_INTENSITY = np.array([0.55, 0.65, 0.75])
RADIUS_JITTER = 0.045
NOISE_AMPLITUDE = 0.2


def _class_table(table: np.ndarray, classes: int, width: int) -> np.ndarray:
    if table.shape[0] >= classes and table.shape[1] >= width:
        return table[:classes, :width]
    # non-default shapes get fixed pseudo-random means, independent of the data seed
    return np.random.default_rng(12345).normal(0.0, 0.6, size=(classes, width))


def _per_class(values: np.ndarray, classes: int) -> np.ndarray:
    if classes <= len(values):
        return values[:classes]
    return np.linspace(values[0], values[-1], classes)


def synth_generate(seed: int, n_per_class: int, image_size: int = 32, tabular_dim: int = 12,
                   classes: int = 3) -> tuple[TabularDataset, ImageDataset]:
    """Seeded, exactly class-balanced multimodal stand-in dataset.

    Sample ``i`` has class ``i % classes`` and id ``P{i:04d}``.  Tabular
    features are Gaussian around :data:`TABULAR_MEANS`, then min-max scaled
    over the generated pool.  Each image is a centred disc whose radius and
    brightness depend on the class, plus uniform noise, quantised to 8 bits.
    """
    if image_size < 16:
        raise DataError(f"image_size must be >= 16, got {image_size}")
    if n_per_class < 0 or classes < 2 or tabular_dim < 1:
        raise DataError("invalid synthetic dataset dimensions")
    rng = np.random.default_rng(seed)
    n = n_per_class * classes
    cls = np.arange(n) % classes
    ids = [f"P{i:04d}" for i in range(n)]

    means = _class_table(TABULAR_MEANS, classes, tabular_dim)
    x = means[cls] + rng.standard_normal((n, tabular_dim))
    if n:
        lo, hi = x.min(axis=0), x.max(axis=0)
        x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    tab = TabularDataset(ids, x.astype(np.float32), cls.astype(np.int64),
                         [f"f{j:02d}" for j in range(tabular_dim)])

    radius = _per_class(DISC_RADIUS, classes)[cls] + RADIUS_JITTER * rng.standard_normal(n)
    intensity = _per_class(DISC_INTENSITY, classes)[cls]
    centre = (image_size - 1) / 2.0
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    dist = np.hypot(yy - centre, xx - centre)[None]
    disc = dist <= (radius * image_size)[:, None, None]
    img = disc * intensity[:, None, None]
    img = img + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    images = ImageDataset(list(ids), pixels[:, None].astype(np.float32) / np.float32(255.0))
    return tab, images


def disc_statistic(images: np.ndarray) -> np.ndarray:
    """Mean brightness per image: a proxy for disc area used by sanity checks."""
    return images.reshape(images.shape[0], -1).mean(axis=1)

