"""Pixel and activation histograms, KL divergence, and KL-based outlier mining."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_EPSILON",
    "DistShiftError",
    "FeatureHistogram",
    "OutlierScoreTable",
    "PixelHistogram",
    "activation_histogram",
    "activation_histograms",
    "dataset_pixel_histogram",
    "image_pixel_histogram",
    "kl_divergence",
    "rank_outliers",
    "read_manifest",
    "select_top_fraction",
    "to_intensities",
    "write_manifest",
]

DEFAULT_EPSILON = 1e-8
N_BINS = 256


class DistShiftError(ValueError):
    pass


@dataclass(frozen=True)
class PixelHistogram:
    bins: np.ndarray
    count: int
    smoothing_epsilon: float = DEFAULT_EPSILON

    def mean_intensity(self) -> float:
        return float(np.dot(self.bins, np.arange(N_BINS)))


@dataclass(frozen=True)
class FeatureHistogram:
    edges: np.ndarray
    bins: np.ndarray
    layer: str
    value_range: tuple[float, float]


def _normalize(counts: np.ndarray, eps: float) -> np.ndarray:
    smoothed = counts.astype(np.float64) + eps
    return smoothed / smoothed.sum()


def to_intensities(image) -> np.ndarray:
    """Integer 0..255 intensities from a uint8 raster or a [-1, 1] normalized tensor."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.dtype == np.uint8:
        return arr.astype(np.int64).ravel()
    arr = arr.astype(np.float64)
    if arr.size and (arr.min() < -1.0 - 1e-9 or arr.max() > 1.0 + 1e-9):
        raise DistShiftError("float images must be normalized to [-1, 1]; pass uint8 rasters otherwise")
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.int64).ravel()


def _pixel_counts(image) -> np.ndarray:
    values = to_intensities(image)
    if values.size == 0:
        raise DistShiftError("image has no pixels")
    return np.bincount(values, minlength=N_BINS)


def image_pixel_histogram(image, eps: float = DEFAULT_EPSILON) -> PixelHistogram:
    counts = _pixel_counts(image)
    return PixelHistogram(_normalize(counts, eps), int(counts.sum()), eps)


def dataset_pixel_histogram(images: Iterable, eps: float = DEFAULT_EPSILON) -> PixelHistogram:
    """Intensity histogram pooled over every channel of every image."""
    total = np.zeros(N_BINS, dtype=np.int64)
    n = 0
    for image in images:
        total += _pixel_counts(getattr(image, "input", image))
        n += 1
    if n == 0:
        raise DistShiftError("cannot build a histogram of an empty dataset")
    return PixelHistogram(_normalize(total, eps), int(total.sum()), eps)


def kl_divergence(p, q) -> float:
    """``sum P * ln(P / Q)``; bins where P is 0 contribute nothing."""
    p = np.asarray(getattr(p, "bins", p), dtype=np.float64)
    q = np.asarray(getattr(q, "bins", q), dtype=np.float64)
    if p.shape != q.shape:
        raise DistShiftError(f"histograms have different bin counts: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise DistShiftError("Q has an empty bin where P has mass; smooth Q first")
    d = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    # rounding can leave a tiny negative value for P == Q
    return max(d, 0.0)


@dataclass
class OutlierScoreTable:
    entries: list[tuple[str, float]]
    reference: str = "dataset"

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def identifiers(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]


def rank_outliers(
    images: Mapping[str, object] | Sequence,
    reference: PixelHistogram,
    reference_name: str = "dataset",
    eps: float | None = None,
) -> OutlierScoreTable:
    """Score every image by KL(image histogram || reference), highest first.

    ``images`` is a mapping identifier -> image, or a sequence of samples with
    ``identifier`` and ``input`` attributes.  Ties keep ascending identifier order.
    """
    if isinstance(images, Mapping):
        items = list(images.items())
    else:
        items = [(s.identifier, s.input) for s in images]
    if not items:
        raise DistShiftError("cannot rank an empty dataset")
    eps = reference.smoothing_epsilon if eps is None else eps
    scored = [(ident, kl_divergence(image_pixel_histogram(img, eps), reference)) for ident, img in items]
    scored.sort(key=lambda e: (-e[1], e[0]))
    return OutlierScoreTable(scored, reference_name)


def select_top_fraction(table: OutlierScoreTable, fraction: float = 0.2) -> list[str]:
    """The ``ceil(fraction * N)`` highest-scoring identifiers, in table order."""
    if not (0 < fraction <= 1):
        raise DistShiftError(f"fraction must lie in (0, 1], got {fraction}")
    # guard against 0.2 * 10 evaluating to 2.0000000000000004
    k = math.ceil(round(fraction * len(table), 9))
    return table.identifiers[:k]


def write_manifest(path: str | Path, table: OutlierScoreTable, selected: Sequence[str], fraction: float) -> None:
    score = dict(table.entries)
    lines = [f"# reference={table.reference}\tfraction={fraction}"]
    lines += [f"{ident}\t{score[ident]:.12g}" for ident in selected]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[tuple[str, float]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        ident, score = line.split("\t")
        out.append((ident, float(score)))
    return out


def _activations(model, dataset, layer: str, batch_size: int = 64) -> np.ndarray:
    from .models import extract_activations

    inputs = np.stack([np.asarray(getattr(s, "input", s)) for s in dataset])
    chunks = [
        extract_activations(model, inputs[i : i + batch_size], layer).ravel()
        for i in range(0, len(inputs), batch_size)
    ]
    return np.concatenate(chunks)


def _feature_histogram(values: np.ndarray, lo: float, hi: float, bin_count: int, layer: str, eps: float) -> FeatureHistogram:
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bin_count + 1)
    counts, _ = np.histogram(values, bins=edges)
    return FeatureHistogram(edges, _normalize(counts, eps), layer, (float(values.min()), float(values.max())))


def activation_histogram(
    model, dataset, layer: str, bin_count: int = N_BINS, value_range: tuple[float, float] | None = None,
    eps: float = DEFAULT_EPSILON,
) -> FeatureHistogram:
    """Histogram of every activation value of ``layer`` over ``dataset``."""
    if layer not in model.layer_names:
        raise DistShiftError(f"unknown layer {layer!r}; valid layers: {', '.join(model.layer_names)}")
    values = _activations(model, dataset, layer)
    lo, hi = value_range or (float(values.min()), float(values.max()))
    return _feature_histogram(values, lo, hi, bin_count, layer, eps)


def activation_histograms(
    model, dataset_a, dataset_b, layer: str, bin_count: int = N_BINS, eps: float = DEFAULT_EPSILON,
) -> tuple[FeatureHistogram, FeatureHistogram]:
    """Histograms of two datasets on shared edges spanning their joint range."""
    if layer not in model.layer_names:
        raise DistShiftError(f"unknown layer {layer!r}; valid layers: {', '.join(model.layer_names)}")
    va = _activations(model, dataset_a, layer)
    vb = _activations(model, dataset_b, layer)
    lo = float(min(va.min(), vb.min()))
    hi = float(max(va.max(), vb.max()))
    return (
        _feature_histogram(va, lo, hi, bin_count, layer, eps),
        _feature_histogram(vb, lo, hi, bin_count, layer, eps),
    )
