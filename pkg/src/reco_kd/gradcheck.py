"""Self-contained gradient verification on a toy distillation problem.

Builds the smallest end-to-end setup that exercises every differentiable
path (task loss, region and mask-consistency terms, context alignment,
adapters, context-block parameters) and compares backward-pass gradients
against central finite differences, coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np

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
from .models import NetworkPlan, build_network, derive_student_plan, forward_with_taps
from .rng import Stream
from .tensor import Tensor, reshape
from .volumes import ImageVolume, LabelVolume, downsample_labels


def rel_err(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def build_toy_problem(seed: int = 0) -> dict:
    """A frozen teacher, trainable student, adapters, context blocks, and one
    labeled 4^3 three-class volume, ready for loss evaluation."""
    stream = Stream(seed, "gradcheck")
    teacher_plan = NetworkPlan(
        channels=(2, 4), width_factor=0, c_min=2, input_modalities=1, num_classes=3
    )
    student_plan = derive_student_plan(teacher_plan, 1)  # (2, 4) -> (2, 2)
    shape = (4, 4, 4)
    image = ImageVolume(stream.random((1,) + shape))
    raw = (stream.random(shape) * 3).astype(np.int64)
    raw.flat[:3] = (0, 1, 2)  # every class present
    labels = LabelVolume(raw, num_classes=3)
    config = DistillConfig(temperature=0.5, stages=(0, 1), ca_stages=(0, 1))

    teacher = build_network(teacher_plan, seed)
    teacher.set_trainable(False)
    student = build_network(student_plan, seed + 1)
    _, t_taps = forward_with_taps(teacher, image.data[None])
    t_tap_data = [t.data[0] for t in t_taps]

    t_ch, s_ch = teacher_plan.stage_channels(), student_plan.stage_channels()
    adapters, gc_params, bundles = [], [], []
    for stage in range(teacher_plan.num_stages):
        adapters.append(
            None
            if s_ch[stage] == t_ch[stage]
            else AdapterParams.init(s_ch[stage], t_ch[stage], stream)
        )
        gc_params.append(GCBlockParams.init(t_ch[stage], stream))
        stage_labels = downsample_labels(labels, t_tap_data[stage].shape[1:])
        bundles.append(build_stage_masks(stage_labels, t_tap_data[stage], config.temperature))
    # zero-initialized tensors sit at gradient saddle points; jitter them
    for stage, gc in enumerate(gc_params):
        for name, p in gc.parameters():
            if not p.data.any():
                p.data = p.data + stream.uniform(-0.1, 0.1, p.data.shape)
    trainables = list(student.parameters())
    for stage, adapter in enumerate(adapters):
        if adapter is not None:
            trainables += [(f"adapter{stage}.{n}", p) for n, p in adapter.parameters()]
    for stage, gc in enumerate(gc_params):
        trainables += [(f"gc{stage}.{n}", p) for n, p in gc.parameters()]
    return {
        "image": image,
        "labels": labels,
        "student": student,
        "adapters": adapters,
        "gc_params": gc_params,
        "bundles": bundles,
        "teacher_taps": t_tap_data,
        "config": config,
        "trainables": trainables,
    }


def problem_loss(problem: dict) -> Tensor:
    """Total loss with a fresh graph over the problem's current parameters."""
    logits, taps = forward_with_taps(problem["student"], problem["image"].data[None])
    task = loss_task(reshape(logits, tuple(logits.data.shape[1:])), problem["labels"])
    pairs = [
        (Tensor(problem["teacher_taps"][stage]), reshape(t, tuple(t.data.shape[1:])))
        for stage, t in enumerate(taps)
    ]
    sard = loss_ms_sard(pairs, problem["adapters"], problem["bundles"], problem["config"])
    ca = loss_ms_ca(pairs, problem["adapters"], problem["gc_params"], problem["config"])
    return loss_total(task, sard, ca)


def run_gradient_check(
    seed: int = 0,
    coords_per_param: int = 4,
    tolerance: float = 1e-4,
    h: float = 1e-5,
) -> dict:
    """Backward vs central differences on sampled coordinates of every trainable.

    Returns worst offender, coordinate count, and pass verdict; deterministic
    per seed.
    """
    problem = build_toy_problem(seed)
    loss = problem_loss(problem)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in problem["trainables"]}
    for _, p in problem["trainables"]:
        p.grad = None

    picker = Stream(seed, "gradcheck-coords")
    worst = {"name": "", "index": (), "rel_err": 0.0, "analytic": 0.0, "numeric": 0.0}
    checked = 0
    for name, p in problem["trainables"]:
        flat_size = p.data.size
        count = min(coords_per_param, flat_size)
        taken = set()
        while len(taken) < count:
            taken.add(picker.integer(flat_size))
        for flat in sorted(taken):
            index = np.unravel_index(flat, p.data.shape)
            orig = p.data[index]
            p.data[index] = orig + h
            fp = problem_loss(problem).item()
            p.data[index] = orig - h
            fm = problem_loss(problem).item()
            p.data[index] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name][index])
            err = rel_err(a, numeric)
            checked += 1
            if err > worst["rel_err"]:
                worst = {
                    "name": name,
                    "index": tuple(int(i) for i in index),
                    "rel_err": err,
                    "analytic": a,
                    "numeric": numeric,
                }
    return {
        "checked": checked,
        "tolerance": tolerance,
        "worst": worst,
        "passed": worst["rel_err"] < tolerance,
    }
