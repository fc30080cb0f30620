"""Volume containers, synthetic phantoms, class statistics, label downsampling.

Conventions: image arrays are [M, D, H, W] float64 (M = modalities), label
arrays are [D, H, W] integer class IDs in exclusive mode or [R, D, H, W]
binary foreground grids in multi-label mode (class r is grid r-1; background
is the complement of the union). `spacing` is mm per voxel along (D, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeMismatchError
from .rng import Stream


def jsonable_float(x: float):
    """JSON-safe float: non-finite values become the strings 'nan'/'inf'/'-inf'."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class ImageVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"image data must be [M, D, H, W], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def modalities(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]


@dataclass
class LabelVolume:
    """Segmentation labels in exclusive or multi-label mode.

    num_classes counts the background, so exclusive IDs live in
    [0, num_classes) and multi-label mode has num_classes - 1 grids.
    """

    data: np.ndarray
    num_classes: int
    multi_label: bool = False
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.multi_label:
            self.data = np.asarray(self.data)
            if self.data.ndim != 4:
                raise ShapeMismatchError(
                    f"multi-label data must be [R, D, H, W], got {self.data.shape}"
                )
            if not np.isin(self.data, (0, 1)).all():
                raise ValueError("multi-label grids must contain only 0 and 1")
            if self.data.shape[0] != self.num_classes - 1:
                raise ShapeMismatchError(
                    f"{self.data.shape[0]} grids inconsistent with num_classes={self.num_classes}"
                )
            self.data = self.data.astype(np.uint8)
        else:
            self.data = np.asarray(self.data)
            if self.data.ndim != 3:
                raise ShapeMismatchError(
                    f"exclusive label data must be [D, H, W], got {self.data.shape}"
                )
            if self.data.size and self.data.min() < 0:
                raise ValueError("exclusive labels must be non-negative class IDs")
            if self.data.size and self.data.max() >= self.num_classes:
                raise ValueError(
                    f"label id {int(self.data.max())} >= num_classes {self.num_classes}"
                )
            self.data = self.data.astype(np.int64)

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:] if self.multi_label else self.data.shape

    @classmethod
    def exclusive(cls, data, num_classes: "int | None" = None, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data)
        if num_classes is None:
            num_classes = int(data.max()) + 1 if data.size else 1
        return cls(data, num_classes, multi_label=False, spacing=spacing)

    @classmethod
    def multi(cls, grids, spacing=(1.0, 1.0, 1.0)):
        grids = np.asarray(grids)
        return cls(grids, grids.shape[0] + 1, multi_label=True, spacing=spacing)


# -- synthetic phantoms --

_SHAPE_KINDS = ("sphere", "ellipsoid", "shell")
_SHELL_INNER = 0.6  # inner radius as a fraction of the outer radius


@dataclass
class PhantomClassSpec:
    target_fraction: float
    shape_kind: str = "sphere"

    def __post_init__(self):
        if self.shape_kind not in _SHAPE_KINDS:
            raise ValueError(f"shape_kind must be one of {_SHAPE_KINDS}, got {self.shape_kind!r}")
        self.target_fraction = float(self.target_fraction)
        if not 0.0 <= self.target_fraction < 1.0:
            raise ValueError(f"target_fraction must be in [0, 1), got {self.target_fraction}")


def generate_phantom(
    seed: int,
    shape: tuple,
    class_specs: list,
    noise_sigma: float = 0.05,
    modalities: int = 1,
):
    """One deterministic synthetic case: (ImageVolume, LabelVolume).

    Each foreground class is a random sphere / ellipsoid / shell sized so its
    voxel count hits the class's target fraction of the volume; classes are
    placed in listed order and later classes overwrite earlier ones. Per-class
    intensity means are spread over [0.2, 0.9] with a small seeded jitter, and
    i.i.d. Gaussian noise of the given sigma is added per modality. Identical
    arguments give bit-identical outputs.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 8:
        raise GeometryError(f"phantom shape must be 3 dims of at least 8, got {shape}")
    specs = [s if isinstance(s, PhantomClassSpec) else PhantomClassSpec(**s) for s in class_specs]
    if sum(s.target_fraction for s in specs) >= 1.0:
        raise ValueError("class target fractions must sum to < 1")
    if modalities < 1:
        raise ValueError(f"modalities must be >= 1, got {modalities}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = Stream(seed, "phantom")
    d_, h_, w_ = shape
    voxels = d_ * h_ * w_
    labels = np.zeros(shape, dtype=np.int64)
    zz, yy, xx = np.indices(shape, dtype=np.float64)

    for class_id, spec in enumerate(specs, start=1):
        if spec.target_fraction == 0.0:
            continue
        target_voxels = spec.target_fraction * voxels
        base_radius = (3.0 * target_voxels / (4.0 * math.pi)) ** (1.0 / 3.0)
        if spec.shape_kind == "sphere":
            radii = (base_radius,) * 3
        elif spec.shape_kind == "ellipsoid":
            a = rng.uniform(0.7, 1.4)
            b = rng.uniform(0.7, 1.4)
            radii = (base_radius * a, base_radius * b, base_radius / (a * b))
        else:  # shell: hollow sphere, volume = (4/3) pi r^3 (1 - inner^3)
            outer = (
                3.0 * target_voxels / (4.0 * math.pi * (1.0 - _SHELL_INNER**3))
            ) ** (1.0 / 3.0)
            radii = (outer,) * 3
        margins = [math.ceil(r) for r in radii]
        for axis, (dim, margin) in enumerate(zip(shape, margins)):
            if dim - 2 * margin < 1:
                raise GeometryError(
                    f"class {class_id} ({spec.shape_kind}, fraction "
                    f"{spec.target_fraction}) does not fit along axis {axis} of {shape}"
                )
        center = [m + rng.integer(dim - 2 * m) for dim, m in zip(shape, margins)]
        dist2 = (
            ((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2
        )
        inside = dist2 <= 1.0
        if spec.shape_kind == "shell":
            inside &= dist2 > _SHELL_INNER**2
        labels[inside] = class_id

    num_classes = len(specs) + 1
    means = np.zeros((num_classes, modalities))
    for class_id in range(num_classes):
        for m in range(modalities):
            base = 0.2 + 0.7 * (class_id / max(num_classes - 1, 1))
            means[class_id, m] = base + rng.uniform(-0.03, 0.03)
    image = np.zeros((modalities,) + shape)
    for m in range(modalities):
        image[m] = means[labels, m] + noise_sigma * rng.normal(shape)

    return (
        ImageVolume(image),
        LabelVolume(labels, num_classes=num_classes),
    )


# -- class statistics --


@dataclass
class ClassStats:
    """Per-class voxel counts over one or more label volumes.

    In multi-label mode a voxel covered by several classes counts once per
    class; the background count is the voxels covered by none.
    """

    counts: np.ndarray
    total_voxels: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.total_voxels = int(self.total_voxels)

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / float(self.total_voxels)

    @property
    def background_fraction(self) -> float:
        return float(self.counts[0]) / float(self.total_voxels)

    @property
    def imbalance_ratio(self) -> float:
        """Largest-to-smallest foreground count ratio; inf when a foreground
        class is empty, NaN when there are no foreground classes."""
        fg = self.counts[1:]
        if fg.size == 0:
            return float("nan")
        if (fg == 0).any():
            return float("inf")
        return float(fg.max()) / float(fg.min())


def class_stats(labels: LabelVolume) -> ClassStats:
    if labels.multi_label:
        if labels.data.shape[0]:
            covered = labels.data.max(axis=0)
        else:
            covered = np.zeros(labels.shape, dtype=np.uint8)
        background = int((covered == 0).sum())
        counts = np.concatenate([[background], labels.data.sum(axis=(1, 2, 3))])
    else:
        counts = np.bincount(labels.data.reshape(-1), minlength=labels.num_classes)
    total = int(np.prod(labels.shape, dtype=np.int64))
    return ClassStats(counts, total)


def merge_stats(parts: list) -> ClassStats:
    if not parts:
        raise ValueError("merge_stats needs at least one ClassStats")
    k = parts[0].num_classes
    for p in parts[1:]:
        if p.num_classes != k:
            raise ShapeMismatchError(
                f"cannot merge stats with {p.num_classes} and {k} classes"
            )
    return ClassStats(
        np.sum([p.counts for p in parts], axis=0),
        sum(p.total_voxels for p in parts),
    )


def stats_to_csv(stats: ClassStats) -> str:
    lines = ["class_id,voxels,fraction"]
    for class_id in range(stats.num_classes):
        lines.append(
            f"{class_id},{int(stats.counts[class_id])},{stats.fractions[class_id]:.10g}"
        )
    return "\n".join(lines) + "\n"


def stats_to_json(stats: ClassStats) -> dict:
    return {
        "num_classes": stats.num_classes,
        "total_voxels": stats.total_voxels,
        "counts": [int(c) for c in stats.counts],
        "fractions": [jsonable_float(f) for f in stats.fractions],
        "background_fraction": jsonable_float(stats.background_fraction),
        "imbalance_ratio": jsonable_float(stats.imbalance_ratio),
    }


# -- label downsampling --


def downsample_labels(labels: LabelVolume, target_shape: tuple) -> LabelVolume:
    """Downsample labels to target_shape (each dim <= its source dim).

    Exclusive labels take the source voxel at each target cell's center, so no
    new class ID can appear. Multi-label grids OR-pool over the covered source
    block, so a single foreground voxel survives any downsampling.
    """
    target_shape = tuple(int(t) for t in target_shape)
    src_shape = labels.shape
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise GeometryError(f"target shape must be 3 positive dims, got {target_shape}")
    for t, s in zip(target_shape, src_shape):
        if t > s:
            raise GeometryError(f"target {target_shape} exceeds source {src_shape}")
    spacing = tuple(
        sp * s / t for sp, s, t in zip(labels.spacing, src_shape, target_shape)
    )
    if labels.multi_label:
        pooled = labels.data
        for axis in range(3):
            s, t = src_shape[axis], target_shape[axis]
            bounds = (np.arange(t) * s) // t
            pooled = np.maximum.reduceat(pooled, bounds, axis=axis + 1)
        return LabelVolume(pooled, labels.num_classes, multi_label=True, spacing=spacing)
    centers = [
        ((np.arange(t) * 2 + 1) * s) // (2 * t)
        for t, s in zip(target_shape, src_shape)
    ]
    picked = labels.data[np.ix_(*centers)]
    return LabelVolume(picked, labels.num_classes, multi_label=False, spacing=spacing)
