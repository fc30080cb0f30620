"""Per-stage weighting masks for region-aware feature distillation.

Three mask families, all derived from labels or teacher features at one
encoder stage's resolution:

- region masks: one binary grid per class (background is class 0),
- a scale grid that weights each voxel by 1/(size of its class region), so
  small structures contribute as much total loss as large ones,
- activation masks that re-weight voxels and channels by temperature-softmax
  of mean absolute feature activity, normalized to mean 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError, TemperatureError, UncoveredVoxelError
from .tensor import Tensor, absolute, as_tensor, reduce_mean, softmax_temperature
from .volumes import ImageVolume, LabelVolume


@dataclass
class RegionMaskSet:
    """Binary class-region grids, shape [R+1, D, H, W]; grid 0 is background."""

    grids: np.ndarray
    exclusive: bool

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=np.float64)
        if self.grids.ndim != 4:
            raise ShapeMismatchError(f"region grids must be 4D, got {self.grids.shape}")
        bad = (self.grids != 0.0) & (self.grids != 1.0)
        if bad.any():
            raise ValueError("region grids must be binary")
        if self.exclusive and not (self.grids.sum(axis=0) == 1.0).all():
            raise ValueError("exclusive region grids must sum to 1 at every voxel")

    @property
    def num_regions(self) -> int:
        return self.grids.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.grids.shape[1:]


@dataclass
class ScaleMask:
    """Per-voxel weights 1/N_r of the assigned class, plus the class sizes."""

    grid: np.ndarray
    assigned: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.assigned = np.asarray(self.assigned, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.grid.shape != self.assigned.shape:
            raise ShapeMismatchError(
                f"scale grid {self.grid.shape} vs assignment {self.assigned.shape}"
            )


@dataclass
class ActivationMasks:
    """Spatial and channel re-weightings of a feature map.

    V_spatial has mean 1 over voxels, V_channel mean 1 over channels. Held as
    tensors: built from a student feature map they stay differentiable, built
    from a detached teacher map they are constants.
    """

    V_spatial: Tensor
    V_channel: Tensor
    A_spatial: Tensor
    A_channel: Tensor
    temperature: float


@dataclass
class MaskBundle:
    """Everything one stage's region-distillation loss needs."""

    regions: RegionMaskSet
    scale: ScaleMask
    activations: ActivationMasks


def build_region_masks(labels: LabelVolume) -> RegionMaskSet:
    """One binary grid per class; background is the complement of foreground."""
    if labels.multi_label:
        fg = labels.data.astype(np.float64)
        bg = 1.0 - fg.max(axis=0, keepdims=True)
        return RegionMaskSet(np.concatenate([bg, fg], axis=0), exclusive=False)
    ids = np.arange(labels.num_classes).reshape(-1, 1, 1, 1)
    grids = (labels.data[None] == ids).astype(np.float64)
    return RegionMaskSet(grids, exclusive=True)


def build_scale_mask(regions: RegionMaskSet) -> ScaleMask:
    """Assign each voxel to its smallest covering class and weight it 1/N_r.

    Overlaps go to the class with the fewest voxels (largest weight); exact
    ties go to the lowest class index. Empty classes never win.
    """
    counts = regions.grids.sum(axis=(1, 2, 3))
    covered = regions.grids.max(axis=0) > 0.0
    if not covered.all():
        where = tuple(int(i) for i in np.argwhere(~covered)[0])
        raise UncoveredVoxelError(f"voxel {where} is covered by no class region")
    # cost = N_r where class r covers the voxel, else +inf; argmin keeps the
    # first (lowest) index on ties
    cost = np.where(regions.grids > 0.0, counts.reshape(-1, 1, 1, 1), np.inf)
    assigned = cost.argmin(axis=0)
    grid = 1.0 / counts[assigned]
    return ScaleMask(grid, assigned, counts.astype(np.int64))


def build_activation_masks(features, temperature: float) -> ActivationMasks:
    """Softmax-sharpened voxel and channel weights from a [C, D, H, W] map.

    The voxel softmax runs jointly over all of D*H*W. Both outputs are scaled
    back to mean 1 so they re-weight rather than re-scale a loss.
    """
    f = as_tensor(features)
    if f.data.ndim != 4:
        raise ShapeMismatchError(f"features must be [C, D, H, W], got {f.data.shape}")
    if not temperature > 0.0:
        raise TemperatureError(f"temperature must be > 0, got {temperature}")
    c = f.data.shape[0]
    voxels = int(np.prod(f.data.shape[1:]))
    a_spatial = reduce_mean(absolute(f), axes=0)
    a_channel = reduce_mean(absolute(f), axes=(1, 2, 3))
    v_spatial = softmax_temperature(a_spatial, temperature=temperature) * float(voxels)
    v_channel = softmax_temperature(a_channel, temperature=temperature) * float(c)
    return ActivationMasks(v_spatial, v_channel, a_spatial, a_channel, temperature)


def build_stage_masks(labels: LabelVolume, teacher_features, temperature: float) -> MaskBundle:
    """Bundle region, scale, and activation masks for one encoder stage.

    Labels must already live at the stage's spatial resolution. Teacher
    features are detached first: the bundle never carries gradients.
    """
    f = as_tensor(teacher_features)
    if f.data.ndim != 4:
        raise ShapeMismatchError(f"teacher features must be [C, D, H, W], got {f.data.shape}")
    if tuple(f.data.shape[1:]) != tuple(labels.shape):
        raise ShapeMismatchError(
            f"labels {tuple(labels.shape)} vs feature spatial dims {tuple(f.data.shape[1:])}"
        )
    regions = build_region_masks(labels)
    scale = build_scale_mask(regions)
    activations = build_activation_masks(f.detach(), temperature)
    return MaskBundle(regions, scale, activations)


def dump_mask(path, grid, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write any [D, H, W] mask grid as a float volume for visual inspection."""
    from .nifti import write_nifti1

    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 3:
        raise ShapeMismatchError(f"mask grid must be 3D, got {data.shape}")
    write_nifti1(path, ImageVolume(data, spacing=spacing))
