"""Distillation and task losses.

The distillation side has three ingredients per encoder stage:

- a region-weighted squared feature error, where each voxel's contribution is
  scaled by 1/(voxels in its class region) and sharpened by teacher activation
  masks, so small structures are not drowned out by background,
- an L1 consistency term between teacher and student activation masks,
- a contextual alignment term that compares both feature maps after a shared
  global-context block (attention-pooled channel summary re-injected through a
  bottleneck).

Student features pass through a per-stage 1x1x1 adapter wherever their channel
count differs from the teacher's. Teacher features are always detached; only
student, adapter, and context-block parameters receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError, TemperatureError
from .masks import ActivationMasks, MaskBundle, build_activation_masks
from .rng import Stream
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    conv3d,
    group_norm,
    log_softmax,
    reduce_sum,
    relu,
    reshape,
    softmax_temperature,
    square,
)
from .volumes import LabelVolume


@dataclass
class DistillConfig:
    """Weights, temperature, stage selection, and ablation toggles."""

    temperature: float = 0.5
    gamma: float = 1.0
    lam: float = 1.0
    stages: tuple = (0, 1, 2, 3)
    ca_stages: tuple = None  # None: same stages as the region terms
    sard_fg: bool = True
    sard_bg: bool = True
    mask_align: bool = True
    msca: bool = True
    split_region_sum: bool = False  # debug: explicit per-region sum

    def __post_init__(self):
        if not self.temperature > 0.0:
            raise TemperatureError(f"temperature must be > 0, got {self.temperature}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}", path="gamma")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}", path="lam")
        self.stages = tuple(int(s) for s in self.stages)
        self.ca_stages = self.stages if self.ca_stages is None else tuple(
            int(s) for s in self.ca_stages
        )
        if (self.sard_fg or self.sard_bg or self.mask_align) and not self.stages:
            raise ConfigError("region/consistency terms enabled with no stages", path="stages")
        if self.msca and not self.ca_stages:
            raise ConfigError("context alignment enabled with no stages", path="ca_stages")


@dataclass
class AdapterParams:
    """1x1x1 projection from student channels to teacher channels."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, student_channels: int, teacher_channels: int, stream: Stream):
        bound = 1.0 / np.sqrt(student_channels)
        w = stream.uniform(-bound, bound, (teacher_channels, student_channels, 1, 1, 1))
        b = np.zeros(teacher_channels)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    def parameters(self) -> list:
        return [("weight", self.weight), ("bias", self.bias)]

    def apply(self, features: Tensor) -> Tensor:
        f = as_tensor(features)
        out = conv3d(reshape(f, (1,) + tuple(f.data.shape)), self.weight, self.bias)
        return reshape(out, tuple(out.data.shape[1:]))


def project_student(features, adapter, teacher_channels: int) -> Tensor:
    """Adapter projection, or identity when channel counts already match."""
    f = as_tensor(features)
    if adapter is None:
        if f.data.shape[0] != teacher_channels:
            raise ShapeMismatchError(
                f"student has {f.data.shape[0]} channels, teacher {teacher_channels}, "
                f"and no adapter was provided"
            )
        return f
    return adapter.apply(f)


@dataclass
class GCBlockParams:
    """Global-context block: key conv, bottleneck convs, bottleneck norm."""

    w_key: Tensor
    b_key: Tensor
    w_v1: Tensor
    b_v1: Tensor
    w_v2: Tensor
    b_v2: Tensor
    gn_gain: Tensor
    gn_bias: Tensor
    channels: int = field(default=0)

    @classmethod
    def init(cls, channels: int, stream: Stream, ratio: int = 4):
        hidden = max(1, channels // ratio)
        bound = 1.0 / np.sqrt(channels)

        def t(arr):
            return Tensor(arr, requires_grad=True)

        return cls(
            w_key=t(stream.uniform(-bound, bound, (1, channels, 1, 1, 1))),
            b_key=t(np.zeros(1)),
            w_v1=t(stream.uniform(-bound, bound, (hidden, channels, 1, 1, 1))),
            b_v1=t(np.zeros(hidden)),
            # zero-init: the block starts as an exact identity
            w_v2=t(np.zeros((channels, hidden, 1, 1, 1))),
            b_v2=t(np.zeros(channels)),
            gn_gain=t(np.ones(hidden)),
            gn_bias=t(np.zeros(hidden)),
            channels=channels,
        )

    def parameters(self) -> list:
        return [
            ("w_key", self.w_key),
            ("b_key", self.b_key),
            ("w_v1", self.w_v1),
            ("b_v1", self.b_v1),
            ("w_v2", self.w_v2),
            ("b_v2", self.b_v2),
            ("gn_gain", self.gn_gain),
            ("gn_bias", self.gn_bias),
        ]


def gc_block(features, params: GCBlockParams) -> Tensor:
    """Residual global-context refinement of a [C, D, H, W] map.

    A 1-channel key conv scores every voxel; softmax over all voxels pools the
    map into one channel vector; the vector passes through a normalized ReLU
    bottleneck and is added back at every voxel.
    """
    f = as_tensor(features)
    if f.data.ndim != 4:
        raise ShapeMismatchError(f"features must be [C, D, H, W], got {f.data.shape}")
    c = f.data.shape[0]
    if c != params.w_key.data.shape[1]:
        raise ShapeMismatchError(
            f"features have {c} channels, context block expects {params.w_key.data.shape[1]}"
        )
    x = reshape(f, (1,) + tuple(f.data.shape))
    logits = conv3d(x, params.w_key, params.b_key)
    attn = softmax_temperature(logits, axes=(2, 3, 4))
    context = reduce_sum(x * attn, axes=(2, 3, 4), keepdims=True)
    hid = conv3d(context, params.w_v1, params.b_v1)
    hid = relu(group_norm(hid, 1, params.gn_gain, params.gn_bias))
    delta = conv3d(hid, params.w_v2, params.b_v2)
    return f + reshape(delta, (c, 1, 1, 1))


def _check_feature_pair(f_t: Tensor, f_s_adapted: Tensor) -> None:
    if f_t.data.shape != f_s_adapted.data.shape:
        raise ShapeMismatchError(
            f"teacher {f_t.data.shape} vs adapted student {f_s_adapted.data.shape}"
        )


def loss_feat(teacher_features, student_features, adapter) -> Tensor:
    """Unweighted squared feature error; the uniform baseline."""
    f_t = as_tensor(teacher_features).detach()
    f_s = project_student(student_features, adapter, f_t.data.shape[0])
    _check_feature_pair(f_t, f_s)
    return reduce_sum(square(f_t - f_s))


def loss_ac(masks_teacher: ActivationMasks, masks_student: ActivationMasks, gamma: float) -> Tensor:
    """L1 agreement between teacher and student activation masks."""
    vs_t, vs_s = masks_teacher.V_spatial, masks_student.V_spatial
    vc_t, vc_s = masks_teacher.V_channel, masks_student.V_channel
    if vs_t.data.shape != vs_s.data.shape or vc_t.data.shape != vc_s.data.shape:
        raise ShapeMismatchError(
            f"teacher masks {vs_t.data.shape}/{vc_t.data.shape} vs "
            f"student masks {vs_s.data.shape}/{vc_s.data.shape}"
        )
    total = reduce_sum(absolute(vs_t.detach() - vs_s)) + reduce_sum(
        absolute(vc_t.detach() - vc_s)
    )
    return total * float(gamma)


def _sard_voxel_weight(bundle: MaskBundle, include_fg: bool, include_bg: bool) -> np.ndarray:
    """Scale-mask grid restricted to the toggled region categories."""
    keep = np.zeros(bundle.scale.grid.shape, dtype=bool)
    if include_bg:
        keep |= bundle.scale.assigned == 0
    if include_fg:
        keep |= bundle.scale.assigned >= 1
    return np.where(keep, bundle.scale.grid, 0.0)


def loss_sard(
    teacher_features,
    student_features,
    adapter,
    bundle: MaskBundle,
    include_fg: bool = True,
    include_bg: bool = True,
    split_region_sum: bool = False,
) -> Tensor:
    """Region-rebalanced, activation-weighted squared feature error.

    Every voxel contributes through the class it is assigned to, weighted by
    1/(class size) and by the teacher's spatial and channel masks. The default
    path folds the region sum into one precomputed grid; split_region_sum
    keeps the explicit per-region sum (slower, used to check the partition).
    """
    f_t = as_tensor(teacher_features).detach()
    f_s = project_student(student_features, adapter, f_t.data.shape[0])
    _check_feature_pair(f_t, f_s)
    if tuple(f_t.data.shape[1:]) != bundle.regions.spatial_shape:
        raise ShapeMismatchError(
            f"features {f_t.data.shape} vs masks {bundle.regions.spatial_shape}"
        )
    c = f_t.data.shape[0]
    v_spatial = bundle.activations.V_spatial.detach()
    v_channel = reshape(bundle.activations.V_channel.detach(), (c, 1, 1, 1))
    diff2 = square(f_t - f_s) * v_spatial * v_channel
    if not split_region_sum:
        return reduce_sum(diff2 * Tensor(_sard_voxel_weight(bundle, include_fg, include_bg)))
    total = as_tensor(0.0)
    for r in range(bundle.regions.num_regions):
        if (r == 0 and not include_bg) or (r >= 1 and not include_fg):
            continue
        if bundle.scale.counts[r] == 0:
            continue
        indicator = (bundle.scale.assigned == r).astype(np.float64)
        total = total + reduce_sum(diff2 * Tensor(indicator / float(bundle.scale.counts[r])))
    return total


def loss_ms_sard(stage_features, adapters, bundles, config: DistillConfig) -> Tensor:
    """Region and mask-consistency terms summed over the selected stages.

    stage_features is a per-stage list of (teacher, student) feature pairs;
    adapters and bundles are parallel lists (adapter None where channel
    counts already match).
    """
    total = as_tensor(0.0)
    if not (config.sard_fg or config.sard_bg or config.mask_align):
        return total
    if not config.stages:
        raise ConfigError("region/consistency terms enabled with no stages", path="stages")
    for stage in config.stages:
        f_t, f_s = stage_features[stage]
        adapter, bundle = adapters[stage], bundles[stage]
        if config.sard_fg or config.sard_bg:
            total = total + loss_sard(
                f_t,
                f_s,
                adapter,
                bundle,
                include_fg=config.sard_fg,
                include_bg=config.sard_bg,
                split_region_sum=config.split_region_sum,
            )
        if config.mask_align:
            projected = project_student(f_s, adapter, as_tensor(f_t).data.shape[0])
            masks_student = build_activation_masks(projected, config.temperature)
            total = total + loss_ac(bundle.activations, masks_student, config.gamma)
    return total


def loss_ms_ca(stage_features, adapters, gc_params, config: DistillConfig) -> Tensor:
    """Squared error between context-refined teacher and student features.

    One context block per stage is shared by both paths, so the loss is
    exactly zero when the adapted student matches the teacher.
    """
    total = as_tensor(0.0)
    if not config.msca:
        return total
    if not config.ca_stages:
        raise ConfigError("context alignment enabled with no stages", path="ca_stages")
    for stage in config.ca_stages:
        f_t, f_s = stage_features[stage]
        f_t = as_tensor(f_t).detach()
        params = gc_params[stage]
        if params is None:
            raise ConfigError(f"no context-block parameters for stage {stage}", path="ca_stages")
        projected = project_student(f_s, adapters[stage], f_t.data.shape[0])
        _check_feature_pair(f_t, projected)
        total = total + reduce_sum(square(gc_block(f_t, params) - gc_block(projected, params)))
    return total * float(config.lam)


def loss_task(logits, labels: LabelVolume, eps: float = 1e-5) -> Tensor:
    """Soft Dice over foreground classes plus voxel-mean cross-entropy."""
    z = as_tensor(logits)
    if z.data.ndim != 4:
        raise ShapeMismatchError(f"logits must be [K, D, H, W], got {z.data.shape}")
    k = z.data.shape[0]
    if labels.multi_label:
        raise ValueError("task loss needs exclusive labels")
    if k != labels.num_classes:
        raise ShapeMismatchError(
            f"logits have {k} classes, labels have {labels.num_classes}"
        )
    if k < 2:
        raise ShapeMismatchError("task loss needs at least one foreground class")
    if tuple(z.data.shape[1:]) != tuple(labels.shape):
        raise ShapeMismatchError(
            f"logits spatial {z.data.shape[1:]} vs labels {tuple(labels.shape)}"
        )
    onehot = (labels.data[None] == np.arange(k).reshape(-1, 1, 1, 1)).astype(np.float64)
    probs = softmax_temperature(z, axes=0)
    dice_sum = as_tensor(0.0)
    for r in range(1, k):
        select = np.zeros((k, 1, 1, 1))
        select[r] = 1.0  # zero out every other channel, then reduce
        p_r = probs * Tensor(select)
        inter = reduce_sum(p_r * Tensor(onehot[r]))
        dice_sum = dice_sum + (inter * 2.0 + eps) / (
            reduce_sum(p_r) + float(onehot[r].sum()) + eps
        )
    dice_loss = 1.0 - dice_sum * (1.0 / (k - 1))
    voxels = int(np.prod(labels.shape))
    ce = reduce_sum(log_softmax(z, axes=0) * Tensor(onehot)) * (-1.0 / voxels)
    return dice_loss + ce


def loss_total(task, ms_sard, ms_ca) -> Tensor:
    """Plain sum of the three objectives."""
    return as_tensor(task) + as_tensor(ms_sard) + as_tensor(ms_ca)
