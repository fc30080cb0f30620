"""Deterministic training loops for teachers and distilled students.

One fit loop drives everything: SGD with Nesterov momentum and polynomial
learning-rate decay, per-batch losses averaged over a per-sample loop (group
norm keeps per-sample statistics, so this matches batched math bitwise), a
seeded 80/20 train/validation split, and best-validation checkpoint retention.

Distillation adds per-stage mask bundles (rebuilt every batch from cached
teacher features and downsampled labels), adapters where student widths
differ, and shared global-context blocks. With every distillation toggle off
the loop reduces to plain task training, bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DivergenceError, PlanError
from .losses import (
    AdapterParams,
    DistillConfig,
    GCBlockParams,
    loss_ms_ca,
    loss_ms_sard,
    loss_task,
    loss_total,
)
from .masks import build_stage_masks
from .metrics import evaluate
from .models import (
    NetworkPlan,
    NetworkState,
    build_network,
    forward_with_taps,
    param_hash,
    save_checkpoint,
)
from .rng import Stream
from .tensor import Tensor, as_tensor, reshape
from .volumes import downsample_labels


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults are small-volume scale."""

    epochs: int = 10
    batch_size: int = 2
    lr0: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 0.0
    poly_power: float = 0.9
    seed: int = 0
    patch_size: tuple = None  # None trains on whole volumes
    checkpoint_every: int = 0  # epochs between periodic saves; 0 disables
    clip_norm: float = None  # global gradient-norm cap; None disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", path="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", path="batch_size")
        if not self.lr0 >= 0.0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}", path="lr0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}", path="momentum")
        if self.weight_decay < 0.0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}", path="weight_decay"
            )
        if self.poly_power < 0.0:
            raise ConfigError(
                f"poly_power must be >= 0, got {self.poly_power}", path="poly_power"
            )
        if self.checkpoint_every < 0:
            raise ConfigError(
                f"checkpoint_every must be >= 0, got {self.checkpoint_every}",
                path="checkpoint_every",
            )
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ConfigError(
                f"clip_norm must be > 0 or None, got {self.clip_norm}", path="clip_norm"
            )
        if self.patch_size is not None:
            self.patch_size = tuple(int(d) for d in self.patch_size)


@dataclass
class TrainResult:
    """Best-validation state plus the full step history."""

    state: NetworkState
    history: list
    best_epoch: int
    best_score: float
    final_state: NetworkState
    extras: dict = field(default_factory=dict)
    seconds: float = 0.0


def split_dataset(num_cases: int, seed: int) -> tuple:
    """Seeded 80/20 split; datasets too small to split validate on themselves."""
    order = Stream(seed, "order").shuffle(range(num_cases))
    num_val = num_cases // 5 if num_cases >= 2 else 0
    num_val = max(1, num_val) if num_cases >= 2 else 0
    val = sorted(order[:num_val])
    train = sorted(order[num_val:])
    return (train, val if val else list(train))


class _SGD:
    """Nesterov momentum with polynomial learning-rate decay.

    update: v <- mu v + g; w <- w - lr (g + mu v), with weight decay folded
    into g. An optional global-norm clip rescales the raw gradients first
    (before weight decay), as nnU-Net style trainers do. Gradients are
    consumed (cleared) by each step.
    """

    def __init__(self, params: list, config: TrainConfig, total_steps: int):
        self.params = params
        self.config = config
        self.total_steps = max(1, total_steps)
        self.velocity = [np.zeros_like(p.data) for _, p in params]

    def lr_at(self, step: int) -> float:
        frac = min(step, self.total_steps) / self.total_steps
        return self.config.lr0 * (1.0 - frac) ** self.config.poly_power

    def step(self, step_index: int) -> float:
        lr = self.lr_at(step_index)
        wd = self.config.weight_decay
        mu = self.config.momentum
        clip = self.config.clip_norm
        if clip is not None:
            sq = sum(
                float(np.sum(p.grad * p.grad)) for _, p in self.params if p.grad is not None
            )
            norm = np.sqrt(sq)
            if norm > clip:
                scale = clip / norm
                for _, p in self.params:
                    if p.grad is not None:
                        p.grad = p.grad * scale
        for i, (_, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if wd:
                g = g + wd * p.data
            self.velocity[i] = mu * self.velocity[i] + g
            p.data -= lr * (g + mu * self.velocity[i])
            p.grad = None
        return lr


def metrics_csv(history: list) -> str:
    lines = ["step,lr,loss_task,loss_ms_sard,loss_ms_ca,loss_total"]
    for row in history:
        lines.append(
            f"{row['step']},{row['lr']:.10g},{row['loss_task']:.10g},"
            f"{row['loss_ms_sard']:.10g},{row['loss_ms_ca']:.10g},{row['loss_total']:.10g}"
        )
    return "\n".join(lines) + "\n"


def _check_patch(config: TrainConfig, data, plan: NetworkPlan) -> None:
    shape = tuple(data[0][0].shape)
    if config.patch_size is not None and config.patch_size != shape:
        raise ConfigError(
            f"patch_size {config.patch_size} must match the volume shape {shape}; "
            f"sub-volume sampling is not supported",
            path="patch_size",
        )
    total = plan.stride_product()
    for dim in shape:
        if dim % total != 0:
            raise ConfigError(
                f"volume dim {dim} not divisible by total stride {total}", path="patch_size"
            )


@dataclass
class _DistillState:
    """Training-only pieces living alongside the student."""

    teacher: NetworkState
    config: DistillConfig
    adapters: dict  # stage -> AdapterParams or None
    gc_params: dict  # stage -> GCBlockParams
    teacher_taps: dict  # case index -> list of [C, D, H, W] arrays
    label_cache: dict  # (case index, stage) -> LabelVolume at tap resolution

    def extra_params(self) -> list:
        out = []
        for stage in sorted(self.adapters):
            adapter = self.adapters[stage]
            if adapter is not None:
                for name, p in adapter.parameters():
                    out.append((f"adapter{stage}.{name}", p))
        for stage in sorted(self.gc_params):
            for name, p in self.gc_params[stage].parameters():
                out.append((f"gc{stage}.{name}", p))
        return out


def _prepare_distill(
    teacher: NetworkState, student_plan: NetworkPlan, cfg: DistillConfig, data, seed: int
) -> _DistillState:
    t_plan = teacher.plan
    if student_plan.channels != t_plan.channels or student_plan.strides != t_plan.strides:
        raise PlanError("student plan must share the teacher's stages and strides")
    active = cfg.sard_fg or cfg.sard_bg or cfg.mask_align
    stages = tuple(sorted(set(cfg.stages if active else ()) | set(cfg.ca_stages if cfg.msca else ())))
    for stage in stages:
        if not 0 <= stage < t_plan.num_stages:
            raise ConfigError(f"stage {stage} outside 0..{t_plan.num_stages - 1}", path="stages")
    teacher.set_trainable(False)
    t_ch, s_ch = t_plan.stage_channels(), student_plan.stage_channels()
    stream = Stream(seed, "distill")
    adapters = {}
    for stage in stages:
        adapters[stage] = (
            None
            if s_ch[stage] == t_ch[stage]
            else AdapterParams.init(s_ch[stage], t_ch[stage], stream)
        )
    gc_params = {}
    if cfg.msca:
        for stage in sorted(set(cfg.ca_stages)):
            gc_params[stage] = GCBlockParams.init(t_ch[stage], stream)
    teacher_taps = {}
    for i, (image, _) in enumerate(data):
        _, taps = forward_with_taps(teacher, image.data[None])
        teacher_taps[i] = [taps[s].data[0] for s in range(t_plan.num_stages)]
    label_cache = {}
    for i, (_, labels) in enumerate(data):
        for stage in stages:
            target = teacher_taps[i][stage].shape[1:]
            label_cache[(i, stage)] = downsample_labels(labels, target)
    return _DistillState(teacher, cfg, adapters, gc_params, teacher_taps, label_cache)


def _sample_losses(student: NetworkState, image, labels, case_index: int, distill):
    """(task, ms_sard, ms_ca) tensors for one training sample."""
    logits, taps = forward_with_taps(student, image.data[None])
    task = loss_task(reshape(logits, tuple(logits.data.shape[1:])), labels)
    if distill is None:
        return task, as_tensor(0.0), as_tensor(0.0)
    cfg = distill.config
    pairs, adapters, bundles, gc_list = [], [], [], []
    for stage in range(student.plan.num_stages):
        f_t = Tensor(distill.teacher_taps[case_index][stage])
        f_s = reshape(taps[stage], tuple(taps[stage].data.shape[1:]))
        pairs.append((f_t, f_s))
        adapters.append(distill.adapters.get(stage))
        gc_list.append(distill.gc_params.get(stage))
        needs_bundle = stage in cfg.stages and (cfg.sard_fg or cfg.sard_bg or cfg.mask_align)
        bundles.append(
            build_stage_masks(
                distill.label_cache[(case_index, stage)], f_t, cfg.temperature
            )
            if needs_bundle
            else None
        )
    ms_sard = loss_ms_sard(pairs, adapters, bundles, cfg)
    ms_ca = loss_ms_ca(pairs, adapters, gc_list, cfg)
    return task, ms_sard, ms_ca


def _fit(student: NetworkState, data, config: TrainConfig, distill=None, out_dir=None,
         log_name: str = "metrics") -> TrainResult:
    started = time.perf_counter()
    _check_patch(config, data, student.plan)
    train_idx, val_idx = split_dataset(len(data), config.seed)
    order_stream = Stream(config.seed, "order")
    order_stream.shuffle(range(len(data)))  # replay the split draw, then epoch orders
    steps_per_epoch = (len(train_idx) + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs

    trainables = list(student.parameters())
    if distill is not None:
        trainables = trainables + distill.extra_params()
    optimizer = _SGD(trainables, config, total_steps)

    history = []
    best_score, best_epoch, best_params = -np.inf, -1, None
    step = 0
    for epoch in range(config.epochs):
        epoch_order = order_stream.shuffle(train_idx)
        for start in range(0, len(epoch_order), config.batch_size):
            batch = epoch_order[start : start + config.batch_size]
            terms = {"task": as_tensor(0.0), "sard": as_tensor(0.0), "ca": as_tensor(0.0)}
            for case_index in batch:
                image, labels = data[case_index]
                try:
                    task, ms_sard, ms_ca = _sample_losses(
                        student, image, labels, case_index, distill
                    )
                except DegenerateInputError as exc:
                    # finite data plus non-finite activations means the
                    # parameters blew up on an earlier step
                    raise DivergenceError(
                        f"non-finite activations at step {step}: {exc}", step=step
                    ) from exc
                terms["task"] = terms["task"] + task
                terms["sard"] = terms["sard"] + ms_sard
                terms["ca"] = terms["ca"] + ms_ca
            inv = 1.0 / len(batch)
            task_v = terms["task"] * inv
            sard_v = terms["sard"] * inv
            ca_v = terms["ca"] * inv
            total = loss_total(task_v, sard_v, ca_v)
            if not np.isfinite(total.item()):
                raise DivergenceError(
                    f"non-finite loss {total.item()} at step {step}", step=step
                )
            total.backward()
            lr = optimizer.step(step)
            history.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss_task": task_v.item(),
                    "loss_ms_sard": sard_v.item(),
                    "loss_ms_ca": ca_v.item(),
                    "loss_total": total.item(),
                }
            )
            step += 1
        val_cases = [data[i] for i in val_idx]
        score = evaluate(student, val_cases, with_hd95=False).mdice
        if np.isfinite(score) and score > best_score:
            best_score, best_epoch = float(score), epoch
            best_params = {name: p.data.copy() for name, p in student.parameters()}
        if out_dir is not None and config.checkpoint_every and (
            epoch + 1
        ) % config.checkpoint_every == 0:
            save_checkpoint(
                f"{out_dir}/ckpt_epoch{epoch + 1}",
                student,
                step=step,
                extras=dict(distill.extra_params()) if distill is not None else None,
            )

    final_state = NetworkState(
        plan=student.plan,
        params={name: Tensor(p.data.copy(), requires_grad=True) for name, p in student.parameters()},
        mode="train",
    )
    if best_params is not None:
        for name, p in student.parameters():
            p.data = best_params[name]
    result = TrainResult(
        state=student,
        history=history,
        best_epoch=best_epoch,
        best_score=best_score,
        final_state=final_state,
        extras=dict(distill.extra_params()) if distill is not None else {},
        seconds=time.perf_counter() - started,
    )
    if out_dir is not None:
        with open(f"{out_dir}/{log_name}.csv", "w") as fh:
            fh.write(metrics_csv(history))
    return result


def train_network(data, plan: NetworkPlan, config: TrainConfig, out_dir=None,
                  log_name: str = "metrics") -> TrainResult:
    """Plain task training of any plan; the no-distillation reference loop."""
    if not data:
        raise ConfigError("dataset is empty", path="data")
    student = build_network(plan, config.seed)
    return _fit(student, data, config, distill=None, out_dir=out_dir, log_name=log_name)


def train_teacher(data, plan: NetworkPlan, config: TrainConfig, out_dir=None) -> TrainResult:
    """Task training at full width (the plan must not be width-reduced)."""
    if plan.width_factor != 0:
        raise PlanError(f"teacher plans train at full width, got t={plan.width_factor}")
    return train_network(data, plan, config, out_dir=out_dir)


def distill_student(data, teacher: NetworkState, student_plan: NetworkPlan,
                    distill_config: DistillConfig, config: TrainConfig, out_dir=None,
                    log_name: str = "metrics") -> TrainResult:
    """Train a narrow student against a frozen teacher.

    The teacher never changes; adapters and context blocks train jointly with
    the student and are reported in TrainResult.extras, never in the student's
    own parameter list.
    """
    if not data:
        raise ConfigError("dataset is empty", path="data")
    hash_before = param_hash(teacher)
    active = (
        distill_config.sard_fg
        or distill_config.sard_bg
        or distill_config.mask_align
        or distill_config.msca
    )
    distill = (
        _prepare_distill(teacher, student_plan, distill_config, data, config.seed)
        if active
        else None
    )
    student = build_network(student_plan, config.seed)
    result = _fit(student, data, config, distill=distill, out_dir=out_dir, log_name=log_name)
    if param_hash(teacher) != hash_before:
        raise RuntimeError("teacher parameters changed during distillation")
    return result


def config_hash(distill_config: DistillConfig) -> str:
    import hashlib
    import json

    blob = json.dumps(
        {
            "temperature": distill_config.temperature,
            "gamma": distill_config.gamma,
            "lam": distill_config.lam,
            "stages": list(distill_config.stages),
            "ca_stages": list(distill_config.ca_stages),
            "sard_fg": distill_config.sard_fg,
            "sard_bg": distill_config.sard_bg,
            "mask_align": distill_config.mask_align,
            "msca": distill_config.msca,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_ablation(data, teacher: NetworkState, student_plan: NetworkPlan,
                 matrix: list, train_config: TrainConfig, out_dir=None) -> tuple:
    """Train one student per config plus a no-distillation baseline.

    Returns (csv string, row dicts). Every run shares the seed and data, so
    rows differ only through their distillation config.
    """
    baseline = train_network(data, student_plan, train_config)
    _, val_idx = split_dataset(len(data), train_config.seed)
    val_cases = [data[i] for i in val_idx]
    base_report = evaluate(baseline.state, val_cases, with_hd95=False)
    rows = []
    for cfg in matrix:
        started = time.perf_counter()
        result = distill_student(data, teacher, student_plan, cfg, train_config)
        report = evaluate(result.state, val_cases, with_hd95=False)
        rows.append(
            {
                "config": config_hash(cfg),
                "mdice": report.mdice,
                "dice": report.dice_mean,
                "delta_vs_no_kd": report.mdice - base_report.mdice,
                "seconds": time.perf_counter() - started,
            }
        )
    num_classes = student_plan.num_classes
    header = "config,mdice," + ",".join(f"dice_{k}" for k in range(num_classes)) + ",delta_vs_no_kd,seconds"
    lines = [header]
    for row in rows:
        dice_cols = ",".join(
            "nan" if np.isnan(v) else f"{v:.10g}" for v in row["dice"]
        )
        lines.append(
            f"{row['config']},{row['mdice']:.10g},{dice_cols},"
            f"{row['delta_vs_no_kd']:.10g},{row['seconds']:.3f}"
        )
    csv = "\n".join(lines) + "\n"
    if out_dir is not None:
        with open(f"{out_dir}/ablation.csv", "w") as fh:
            fh.write(csv)
    return csv, rows
