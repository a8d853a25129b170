"""Synthetic 2-D generators, face-image ingestion, preprocessing and batching."""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

__all__ = [
    "AGE_BINS",
    "Dataset",
    "DataError",
    "GENDER_CLASSES",
    "LabelSchema",
    "RACE_CLASSES",
    "Sample",
    "batches",
    "disk_label",
    "annulus_label",
    "gen_disk_square",
    "gen_gaussian",
    "gen_gaussian_mixture",
    "gen_mesh_grid",
    "harmonize_race",
    "load_csv_labels",
    "load_image_dir",
    "preprocess",
    "read_raster",
    "write_raw",
]

Role = Literal["train", "test", "outlier_exposure"]

GENDER_CLASSES = ("Male", "Female")
RACE_CLASSES = ("White", "Black", "Asian", "Indian", "Other")
AGE_BINS = ("0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "more than 70")

_FAIRFACE_RACE = {
    "White": "White",
    "Black": "Black",
    "Indian": "Indian",
    "Middle Eastern": "White",
    "East Asian": "Asian",
    "Southeast Asian": "Asian",
    "Latino_Hispanic": "Other",
}

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".raw")
FILENAME_RE = re.compile(r"^(?P<age>\d+)_(?P<gender>[01])_(?P<race>[0-4])_(?P<free>[^/]*)\.(?:png|jpg|jpeg|raw)$", re.I)


class DataError(ValueError):
    pass


@dataclass
class Sample:
    identifier: str
    input: np.ndarray
    label: int | None = None
    role: Role = "train"


@dataclass
class Dataset:
    samples: list[Sample]
    name: str = ""
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([s.input for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        if any(s.label is None for s in self.samples):
            raise DataError(f"dataset {self.name!r} has unlabeled samples")
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def has_labels(self) -> bool:
        return all(s.label is not None for s in self.samples)

    def with_role(self, role: Role) -> "Dataset":
        return Dataset([replace(s, role=role) for s in self.samples], self.name, list(self.skipped))

    def subset(self, identifiers: Sequence[str]) -> "Dataset":
        index = {s.identifier: s for s in self.samples}
        return Dataset([index[i] for i in identifiers], self.name)

    def class_counts(self, num_classes: int) -> list[int]:
        return np.bincount(self.labels, minlength=num_classes).tolist()

    def write_skip_report(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{i}\t{r}\n" for i, r in self.skipped), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic 2-D data
# ---------------------------------------------------------------------------


def disk_label(points: np.ndarray, radius_sq: float = 4.0) -> np.ndarray:
    """1 inside the closed disk ``x1^2 + x2^2 <= radius_sq``, else 0."""
    points = np.asarray(points, dtype=np.float64)
    return (np.sum(points**2, axis=-1) <= radius_sq).astype(np.int64)


def annulus_label(points: np.ndarray, r_min_sq: float = 2.0, r_max_sq: float = 5.0) -> np.ndarray:
    r2 = np.sum(np.asarray(points, dtype=np.float64) ** 2, axis=-1)
    return ((r2 >= r_min_sq) & (r2 <= r_max_sq)).astype(np.int64)


def _labeler(rule: str, radius_sq=4.0, r_min_sq=2.0, r_max_sq=5.0):
    if rule == "disk":
        return lambda pts: disk_label(pts, radius_sq)
    if rule == "annulus":
        return lambda pts: annulus_label(pts, r_min_sq, r_max_sq)
    raise DataError(f"unknown label rule {rule!r}")


def _points_dataset(points: np.ndarray, labels, name: str, role: Role, prefix: str) -> Dataset:
    width = len(str(max(len(points) - 1, 0)))
    samples = [
        Sample(f"{prefix}{i:0{width}d}", points[i].copy(), None if labels is None else int(labels[i]), role)
        for i in range(len(points))
    ]
    return Dataset(samples, name)


def gen_disk_square(count: int, seed: int, half_width: float = 1.5, radius_sq: float = 4.0, role: Role = "train") -> Dataset:
    """Uniform points on ``[-half_width, half_width]^2`` labeled by the disk rule."""
    if count <= 0:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-half_width, half_width, size=(count, 2))
    return _points_dataset(pts, disk_label(pts, radius_sq), "disk_square", role, "ds")


def mesh_points(bounds: tuple[float, float] = (-6.0, 6.0), points_per_axis: int = 101) -> np.ndarray:
    lo, hi = bounds
    if points_per_axis < 2:
        raise DataError("points_per_axis must be at least 2")
    if not hi > lo:
        raise DataError(f"degenerate bounds {bounds}")
    axis = np.linspace(lo, hi, points_per_axis)
    x1, x2 = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([x1.ravel(), x2.ravel()])


def gen_mesh_grid(bounds=(-6.0, 6.0), points_per_axis: int = 101, rule: str = "disk", role: Role = "test", **rule_args) -> Dataset:
    """Full Cartesian grid including both endpoints, with ground-truth labels."""
    pts = mesh_points(tuple(bounds), points_per_axis)
    return _points_dataset(pts, _labeler(rule, **rule_args)(pts), "mesh_grid", role, "g")


def _check_cov(cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape == (1, 1):
        cov = np.eye(2) * cov[0, 0]
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise DataError(f"covariance must be a symmetric 2x2 matrix, got {cov.tolist()}")
    if np.any(np.linalg.eigvalsh(cov) < -1e-12):
        raise DataError(f"covariance is not positive semi-definite: {cov.tolist()}")
    return cov


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    # eigen-factorisation tolerates the zero-variance case, unlike Cholesky
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0, None))


def _gaussian_draw(rng: np.random.Generator, mean, cov, count: int) -> np.ndarray:
    return np.asarray(mean, dtype=np.float64) + rng.standard_normal((count, 2)) @ _cov_factor(cov).T


def gen_gaussian(count: int, seed: int, mean=(0.0, 0.0), cov=1.0, rule: str = "disk", role: Role = "train", **rule_args) -> Dataset:
    if count <= 0:
        raise DataError("count must be positive")
    cov = _check_cov(cov)
    pts = _gaussian_draw(np.random.default_rng(seed), mean, cov, count)
    return _points_dataset(pts, _labeler(rule, **rule_args)(pts), "gaussian", role, "n")


def gen_gaussian_mixture(
    count: int,
    seed: int,
    means=((-3.0, 0.0), (3.0, 0.0)),
    covs=(1.0, 1.0),
    weights=(0.5, 0.5),
    rule: str = "disk",
    role: Role = "test",
    **rule_args,
) -> Dataset:
    """Component picked per point from ``weights``, then a Gaussian draw from it."""
    if count <= 0:
        raise DataError("count must be positive")
    weights = np.asarray(weights, dtype=np.float64)
    if len(means) != len(weights) or len(covs) != len(weights):
        raise DataError("means, covs and weights must have one entry per component")
    if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-12):
        raise DataError(f"mixture weights must be non-negative and sum to 1, got {weights.tolist()}")
    covs = [_check_cov(c) for c in covs]
    rng = np.random.default_rng(seed)
    # normals first so a degenerate mixture reproduces gen_gaussian's stream
    normals = rng.standard_normal((count, 2))
    comp = rng.choice(len(weights), size=count, p=weights)
    pts = np.empty((count, 2))
    for k, (mean, cov) in enumerate(zip(means, covs)):
        sel = comp == k
        pts[sel] = np.asarray(mean, dtype=np.float64) + normals[sel] @ _cov_factor(cov).T
    return _points_dataset(pts, _labeler(rule, **rule_args)(pts), "gaussian_mixture", role, "m")


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSchema:
    attribute: Literal["gender", "race", "age"] = "gender"

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.attribute == "gender":
            return GENDER_CLASSES
        if self.attribute == "race":
            return RACE_CLASSES
        return AGE_BINS

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def from_filename(self, name: str) -> int:
        m = FILENAME_RE.match(name)
        if not m:
            raise DataError("filename does not match <age>_<gender>_<race>_<free>.<ext>")
        if self.attribute == "age":
            return age_bin(int(m["age"]))
        return int(m[self.attribute])

    def from_csv(self, row: dict) -> int:
        value = row[self.attribute].strip()
        if self.attribute == "gender":
            if value in ("0", "1"):
                return int(value)
            return _index(GENDER_CLASSES, value, "gender")
        if self.attribute == "race":
            if value.isdigit():
                return int(value)
            return _index(RACE_CLASSES, harmonize_race(value), "race")
        if value.isdigit():
            return age_bin(int(value))
        return _index(AGE_BINS, value, "age")


def _index(names, value, what) -> int:
    try:
        return names.index(value)
    except ValueError:
        raise DataError(f"unknown {what} value {value!r}; expected one of {list(names)}") from None


def age_bin(age: int) -> int:
    for i, b in enumerate(AGE_BINS[:-1]):
        hi = int(b.split("-")[1])
        if age <= hi:
            return i
    return len(AGE_BINS) - 1


def harmonize_race(label: str) -> str:
    """Map a 7-way FairFace race label onto the 5-way UTKFace set."""
    if label in RACE_CLASSES and label not in _FAIRFACE_RACE:
        return label
    try:
        return _FAIRFACE_RACE[label]
    except KeyError:
        raise DataError(f"unknown race label {label!r}") from None


def write_raw(path: str | Path, image: np.ndarray) -> None:
    """Raw raster: u32 LE width, u32 LE height, then H*W*3 RGB bytes."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"raw rasters are HxWx3 RGB, got {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + image.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG/raw file into an HxWx3 uint8 array."""
    path = Path(path)
    if path.suffix.lower() == ".raw":
        buf = path.read_bytes()
        if len(buf) < 8:
            raise DataError("raw raster header truncated")
        w, h = struct.unpack_from("<II", buf)
        if len(buf) != 8 + w * h * 3:
            raise DataError(f"raw raster payload is {len(buf) - 8} bytes, expected {w * h * 3}")
        return np.frombuffer(buf, dtype=np.uint8, offset=8).reshape(h, w, 3).copy()
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            if img.mode not in ("RGB", "RGBA", "L", "P"):
                raise DataError(f"unsupported image mode {img.mode}")
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image: {exc}") from exc


def _resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of an HxWxC float array."""
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image

    def coords(n_in):
        x = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw_image, size: int = 32) -> np.ndarray:
    """HxWx3 uint8 raster -> (3, size, size) float64 in [-1, 1]."""
    img = np.asarray(raw_image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an HxWx3 RGB raster, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DataError("empty raster")
    resized = _resize_bilinear(img.astype(np.float64), size)
    return ((resized / 255.0 - 0.5) / 0.5).transpose(2, 0, 1).copy()


def _load_file(path: Path, size: int) -> np.ndarray:
    return preprocess(read_raster(path), size)


def load_image_dir(path: str | Path, schema: LabelSchema = LabelSchema(), role: Role = "train", size: int = 32, labeled: bool = True) -> Dataset:
    """One sample per decodable image whose filename parses; others go to ``skipped``."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    samples, skipped = [], []
    for file in sorted(p for p in root.iterdir() if p.is_file()):
        name = file.name
        if file.suffix.lower() not in IMAGE_SUFFIXES:
            skipped.append((name, "unsupported extension"))
            continue
        label = None
        if labeled:
            try:
                label = schema.from_filename(name)
            except DataError as exc:
                skipped.append((name, str(exc)))
                continue
        try:
            x = _load_file(file, size)
        except DataError as exc:
            skipped.append((name, str(exc)))
            continue
        samples.append(Sample(name, x, label, role))
    if not samples:
        raise DataError(f"no usable images in {root}")
    return Dataset(samples, root.name, skipped)


def load_csv_labels(image_dir: str | Path, csv_path: str | Path, schema: LabelSchema = LabelSchema(), role: Role = "train", size: int = 32) -> Dataset:
    """Join ``file,age,gender,race`` rows to images under ``image_dir``."""
    root = Path(image_dir)
    rows: dict[str, dict] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"file", "age", "gender", "race"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise DataError(f"{csv_path}: line 1: header must contain {sorted(required)}, got {reader.fieldnames}")
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise DataError(f"{csv_path}: line {line}: wrong number of fields")
            rel = row["file"].strip()
            if rel in rows:
                raise DataError(f"{csv_path}: line {line}: duplicate row for {rel!r}")
            try:
                row["_label"] = schema.from_csv(row)
            except DataError as exc:
                raise DataError(f"{csv_path}: line {line}: {exc}") from None
            rows[rel] = row
    samples, skipped = [], []
    for rel in sorted(rows):
        file = root / rel
        if not file.is_file():
            skipped.append((rel, "missing file"))
            continue
        try:
            x = _load_file(file, size)
        except DataError as exc:
            skipped.append((rel, str(exc)))
            continue
        samples.append(Sample(rel, x, rows[rel]["_label"], role))
    if not samples:
        raise DataError(f"no usable images listed in {csv_path}")
    return Dataset(samples, root.name, skipped)


def batches(dataset: Dataset | Sequence, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Index batches from a shuffle keyed on ``(seed, epoch)``; last batch may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be at least 1")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size].tolist() for i in range(0, n, batch_size)]
