"""Configurable 3D encoder-decoder segmentation networks.

One plan describes both teacher and student: the student is the same plan with
a width factor t that shrinks every stage to max(c_min, floor(channels / 2^t)).
Depth, strides, skip connections, and input resolution never change, so
teacher and student stage features live on the same spatial grids.

Encoder stages expose post-block feature taps for distillation. All learnable
parameters live in one ordered name -> tensor map so optimizers, checkpoints,
and hashes agree on a single canonical order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DivisibilityError, PlanError, ShapeMismatchError
from .rng import Stream
from .tensor import Tensor, concat, conv3d, group_norm, relu, upsample_conv


def _norm_groups(channels: int) -> int:
    """Largest divisor of `channels` that is at most 8."""
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class NetworkPlan:
    """Static architecture description; parameter shapes follow from it alone."""

    channels: tuple = (8, 16)
    width_factor: int = 0
    c_min: int = 4
    residual_encoder: bool = True
    input_modalities: int = 1
    num_classes: int = 2
    convs_per_stage: int = 2
    strides: tuple = None  # stage 0 must be 1; defaults to (1, 2, 2, ...)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        strides = (
            (1,) + (2,) * (len(self.channels) - 1) if self.strides is None else self.strides
        )
        object.__setattr__(self, "strides", tuple(int(s) for s in strides))
        if not self.channels:
            raise PlanError("plan needs at least one stage")
        if any(c < 1 for c in self.channels):
            raise PlanError(f"channels must be positive, got {self.channels}")
        if len(self.strides) != len(self.channels):
            raise PlanError(
                f"{len(self.channels)} stages but {len(self.strides)} strides"
            )
        if self.strides[0] != 1:
            raise PlanError(f"stage 0 never downsamples, got stride {self.strides[0]}")
        if any(s < 1 for s in self.strides):
            raise PlanError(f"strides must be >= 1, got {self.strides}")
        if self.width_factor not in (0, 1, 2, 3):
            raise PlanError(f"width factor must be in 0..3, got {self.width_factor}")
        if self.c_min < 1:
            raise PlanError(f"c_min must be >= 1, got {self.c_min}")
        if self.input_modalities < 1:
            raise PlanError(f"input_modalities must be >= 1, got {self.input_modalities}")
        if self.num_classes < 1:
            raise PlanError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.convs_per_stage < 1:
            raise PlanError(f"convs_per_stage must be >= 1, got {self.convs_per_stage}")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_channels(self) -> tuple:
        """Effective widths after the 2^-t shrink with the c_min floor."""
        scale = 2.0 ** (-self.width_factor)
        return tuple(max(self.c_min, int(np.floor(c * scale))) for c in self.channels)

    def stride_product(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "width_factor": self.width_factor,
            "c_min": self.c_min,
            "residual_encoder": self.residual_encoder,
            "input_modalities": self.input_modalities,
            "num_classes": self.num_classes,
            "convs_per_stage": self.convs_per_stage,
            "strides": list(self.strides),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "NetworkPlan":
        return cls(
            channels=tuple(blob["channels"]),
            width_factor=blob["width_factor"],
            c_min=blob["c_min"],
            residual_encoder=blob["residual_encoder"],
            input_modalities=blob["input_modalities"],
            num_classes=blob["num_classes"],
            convs_per_stage=blob["convs_per_stage"],
            strides=tuple(blob["strides"]),
        )


def derive_student_plan(teacher_plan: NetworkPlan, width_factor: int, c_min=None) -> NetworkPlan:
    """Same plan, narrower: only the width factor (and optionally c_min) change."""
    if width_factor not in (0, 1, 2, 3):
        raise PlanError(f"width factor must be in 0..3, got {width_factor}")
    kwargs = {"width_factor": width_factor}
    if c_min is not None:
        kwargs["c_min"] = c_min
    return replace(teacher_plan, **kwargs)


@dataclass
class NetworkState:
    """A plan plus its parameters, in canonical construction order."""

    plan: NetworkPlan
    params: dict
    mode: str = "train"

    def parameters(self) -> list:
        return list(self.params.items())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def _layer_specs(plan: NetworkPlan):
    """Yield (name, kind, c_in, c_out) for every learnable layer in order.

    kind is one of conv3 (3x3x3), conv1 (1x1x1), up (3x3x3 after nearest
    upsample), gn (gain+bias pair). Blocks emit conv3 + gn; encoder residual
    projections emit conv1 only where channels change.
    """
    ch = plan.stage_channels()
    for l in range(plan.num_stages):
        if l > 0:
            yield f"enc{l}.down", "conv3", ch[l - 1], ch[l]
        c_in = plan.input_modalities if l == 0 else ch[l]
        for m in range(plan.convs_per_stage):
            yield f"enc{l}.block{m}", "conv3", c_in, ch[l]
            yield f"enc{l}.block{m}", "gn", ch[l], ch[l]
            if plan.residual_encoder and c_in != ch[l]:
                yield f"enc{l}.res{m}", "conv1", c_in, ch[l]
            c_in = ch[l]
    for l in range(plan.num_stages - 2, -1, -1):
        yield f"dec{l}.up", "up", ch[l + 1], ch[l]
        c_in = 2 * ch[l]
        for m in range(plan.convs_per_stage):
            yield f"dec{l}.block{m}", "conv3", c_in, ch[l]
            yield f"dec{l}.block{m}", "gn", ch[l], ch[l]
            c_in = ch[l]
    yield "head", "conv1", ch[0], plan.num_classes


def build_network(plan: NetworkPlan, seed: int) -> NetworkState:
    """Fresh parameters: fan-in-scaled uniform weights, zero biases, unit norms."""
    stream = Stream(seed, "params")
    params: dict = {}
    for name, kind, c_in, c_out in _layer_specs(plan):
        if kind == "gn":
            params[f"{name}.gain"] = Tensor(np.ones(c_out), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
            continue
        k = 1 if kind == "conv1" else 3
        bound = 1.0 / np.sqrt(c_in * k**3)
        w = stream.uniform(-bound, bound, (c_out, c_in, k, k, k))
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
    return NetworkState(plan=plan, params=params, mode="train")


def _block(h, params, prefix: str, channels: int, residual: bool):
    y = conv3d(h, params[f"{prefix}.w"], params[f"{prefix}.b"], padding=1)
    y = group_norm(y, _norm_groups(channels), params[f"{prefix}.gain"], params[f"{prefix}.beta"])
    y = relu(y)
    if residual:
        res_name = prefix.replace("block", "res")
        if f"{res_name}.w" in params:
            y = y + conv3d(h, params[f"{res_name}.w"], params[f"{res_name}.b"])
        else:
            y = y + h
    return y


def forward_with_taps(state: NetworkState, x) -> tuple:
    """(logits, per-encoder-stage features) for a [N, M, D, H, W] batch.

    Taps are the stage outputs after all blocks, before the next stage's
    downsampling conv; they are the exact tensors the distillation losses
    consume, so gradients reach the encoder through them.
    """
    plan = state.plan
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 5:
        raise ShapeMismatchError(f"input must be [N, M, D, H, W], got {x.data.shape}")
    if x.data.shape[1] != plan.input_modalities:
        raise ShapeMismatchError(
            f"input has {x.data.shape[1]} modalities, plan expects {plan.input_modalities}"
        )
    total = plan.stride_product()
    for dim in x.data.shape[2:]:
        if dim % total != 0:
            raise DivisibilityError(
                f"spatial dim {dim} not divisible by total stride {total}"
            )
    ch = plan.stage_channels()
    p = state.params
    taps = []
    h = x
    for l in range(plan.num_stages):
        if l > 0:
            h = conv3d(h, p[f"enc{l}.down.w"], p[f"enc{l}.down.b"], stride=plan.strides[l], padding=1)
        for m in range(plan.convs_per_stage):
            h = _block(h, p, f"enc{l}.block{m}", ch[l], plan.residual_encoder)
        taps.append(h)
    for l in range(plan.num_stages - 2, -1, -1):
        h = upsample_conv(h, plan.strides[l + 1], p[f"dec{l}.up.w"], p[f"dec{l}.up.b"], padding=1)
        h = concat([h, taps[l]], axis=1)
        for m in range(plan.convs_per_stage):
            h = _block(h, p, f"dec{l}.block{m}", ch[l], residual=False)
    logits = conv3d(h, p["head.w"], p["head.b"])
    return logits, taps


def forward_logits(state: NetworkState, x) -> Tensor:
    return forward_with_taps(state, x)[0]


def count_params_flops(plan: NetworkPlan, input_shape) -> dict:
    """Analytic parameter and FLOP counts for one sample of `input_shape`.

    Conv FLOPs are 2 x (output channels) x (input channels) x kernel volume x
    output voxels; normalization and activations count as elementwise work.
    """
    spatial = tuple(int(d) for d in input_shape)
    if len(spatial) != 3:
        raise PlanError(f"input_shape must be (D, H, W), got {input_shape}")
    total = plan.stride_product()
    for dim in spatial:
        if dim % total != 0:
            raise DivisibilityError(f"spatial dim {dim} not divisible by total stride {total}")

    def voxels_at(stage: int) -> int:
        out = 1
        for dim in spatial:
            for s in plan.strides[: stage + 1]:
                dim //= s
            out *= dim
        return out

    params = 0
    flops = 0
    stage_of = {}
    for l in range(plan.num_stages):
        stage_of[f"enc{l}"] = l
        stage_of[f"dec{l}"] = l
    for name, kind, c_in, c_out in _layer_specs(plan):
        stage = stage_of[name.split(".")[0]] if "." in name else 0
        nv = voxels_at(stage)
        if kind == "gn":
            params += 2 * c_out
            flops += 8 * c_out * nv  # mean, var, normalize, affine passes
            flops += c_out * nv  # relu that follows every normed block
            continue
        k = 1 if kind == "conv1" else 3
        params += c_out * c_in * k**3 + c_out
        flops += 2 * c_out * c_in * k**3 * nv
        if kind == "up":
            flops += c_in * nv  # nearest-neighbor copy at the target resolution
    return {"params": params, "flops": flops}


def param_hash(state: NetworkState) -> str:
    """SHA-256 over all parameter bytes in canonical order."""
    digest = hashlib.sha256()
    for name, p in state.parameters():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def export_infer(state: NetworkState) -> NetworkState:
    """Frozen copy with only the plan-derivable parameters: what ships."""
    params = {name: Tensor(p.data.copy()) for name, p in state.parameters()}
    return NetworkState(plan=state.plan, params=params, mode="infer")


def save_checkpoint(base_path, state: NetworkState, step: int = 0, rng_state=None,
                    extras=None) -> None:
    """Write {base}.json (manifest) and {base}.bin (little-endian float64 blobs).

    extras carries training-only tensors (adapters, context blocks) as a flat
    name -> Tensor map; infer-mode states must not pass any.
    """
    base = str(base_path)
    extras = extras or {}
    if state.mode == "infer" and extras:
        raise ValueError("infer-mode checkpoints carry no training-only parameters")
    names, blobs = [], []
    for name, p in state.parameters():
        names.append({"name": name, "shape": list(p.data.shape)})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    extra_names = []
    for name in sorted(extras):
        p = extras[name]
        extra_names.append({"name": name, "shape": list(p.data.shape)})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    manifest = {
        "plan": state.plan.to_dict(),
        "mode": state.mode,
        "step": int(step),
        "rng": rng_state,
        "params": names,
        "extra_params": extra_names,
    }
    with open(base + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(base + ".bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(base_path) -> tuple:
    """(NetworkState, extras dict, manifest dict) from save_checkpoint output."""
    base = str(base_path)
    with open(base + ".json") as fh:
        manifest = json.load(fh)
    plan = NetworkPlan.from_dict(manifest["plan"])
    raw = open(base + ".bin", "rb").read()
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        return arr.astype(np.float64)

    trainable = manifest["mode"] == "train"
    params = {}
    for entry in manifest["params"]:
        params[entry["name"]] = Tensor(take(entry["shape"]), requires_grad=trainable)
    extras = {}
    for entry in manifest["extra_params"]:
        extras[entry["name"]] = Tensor(take(entry["shape"]), requires_grad=trainable)
    if offset != len(raw):
        raise ValueError(
            f"checkpoint blob has {len(raw)} bytes, manifest accounts for {offset}"
        )
    state = NetworkState(plan=plan, params=params, mode=manifest["mode"])
    expected = [name for name, _, _, _ in _expected_param_names(plan)]
    if [e["name"] for e in manifest["params"]] != expected:
        raise ValueError("checkpoint parameter list does not match its plan")
    return state, extras, manifest


def _expected_param_names(plan: NetworkPlan):
    for name, kind, c_in, c_out in _layer_specs(plan):
        if kind == "gn":
            yield f"{name}.gain", kind, c_in, c_out
            yield f"{name}.beta", kind, c_in, c_out
        else:
            yield f"{name}.w", kind, c_in, c_out
            yield f"{name}.b", kind, c_in, c_out
