"""Distillation loss terms against loop oracles and finite differences."""

import math

import numpy as np
import pytest

from reco_kd.errors import ConfigError, ShapeMismatchError, TemperatureError
from reco_kd.losses import (
    AdapterParams,
    DistillConfig,
    GCBlockParams,
    gc_block,
    loss_ac,
    loss_feat,
    loss_ms_ca,
    loss_ms_sard,
    loss_sard,
    loss_task,
    loss_total,
)
from reco_kd.masks import build_activation_masks, build_stage_masks
from reco_kd.rng import Stream
from reco_kd.tensor import Tensor
from reco_kd.volumes import LabelVolume

from oracles import (
    loop_gc_block,
    loop_l2sq,
    loop_loss_ac,
    loop_loss_feat,
    loop_loss_sard,
    loop_loss_task,
    max_rel_err,
    numeric_grad,
)


def _random_labels(stream, shape, num_classes):
    return LabelVolume((stream.random(shape) * num_classes).astype(np.int64), num_classes)


# -- config --


def test_distill_config_defaults_and_validation():
    cfg = DistillConfig()
    assert cfg.temperature == 0.5 and cfg.gamma == 1.0 and cfg.lam == 1.0
    assert cfg.ca_stages == cfg.stages
    with pytest.raises(TemperatureError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        DistillConfig(gamma=-0.1)
    with pytest.raises(ConfigError):
        DistillConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        DistillConfig(stages=())
    with pytest.raises(ConfigError):
        DistillConfig(stages=(0,), ca_stages=(), msca=True)
    # all terms off: empty stages are fine
    DistillConfig(stages=(), sard_fg=False, sard_bg=False, mask_align=False, msca=False)


# -- adapters --


def test_adapter_projects_channels_and_identity_requires_match():
    stream = Stream(31, "loss-test")
    adapter = AdapterParams.init(2, 3, stream)
    f = Tensor(stream.normal((2, 2, 2, 2)))
    out = adapter.apply(f)
    assert out.data.shape == (3, 2, 2, 2)
    from reco_kd.losses import project_student

    with pytest.raises(ShapeMismatchError):
        project_student(f, None, 3)
    assert project_student(f, None, 2) is f


# -- uniform feature loss --


def test_loss_feat_zero_at_identity_and_single_term():
    f = Tensor(np.ones((1, 1, 1, 1)) * 2.0)
    assert loss_feat(f, f, None).item() == 0.0
    z = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    out = loss_feat(f, z, None)
    assert out.item() == 4.0
    out.backward()
    assert z.grad[0, 0, 0, 0] == pytest.approx(-4.0)


def test_loss_feat_matches_loop_oracle_and_grads():
    stream = Stream(32, "loss-test")
    f_t = stream.normal((2, 2, 2, 2))
    f_s = stream.normal((3, 2, 2, 2))
    adapter = AdapterParams.init(3, 2, stream)

    x = Tensor(f_s, requires_grad=True)
    out = loss_feat(Tensor(f_t), x, adapter)
    projected = adapter.apply(Tensor(f_s))
    assert out.item() == pytest.approx(loop_loss_feat(f_t, projected.data), abs=1e-12)

    out.backward()

    def value():
        return loss_feat(Tensor(f_t), Tensor(f_s), adapter).item()

    assert max_rel_err(x.grad, numeric_grad(value, f_s)) <= 1e-4
    assert max_rel_err(adapter.weight.grad, numeric_grad(value, adapter.weight.data)) <= 1e-4
    assert max_rel_err(adapter.bias.grad, numeric_grad(value, adapter.bias.data)) <= 1e-4


def test_loss_feat_teacher_gets_no_gradient():
    t = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    s = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
    loss_feat(t, s, None).backward()
    assert t.grad is None
    assert s.grad is not None


# -- activation consistency --


def test_loss_ac_zero_cases_and_hand_value():
    f = Tensor(Stream(33, "loss-test").normal((2, 2, 2, 2)))
    masks = build_activation_masks(f, 0.5)
    assert loss_ac(masks, masks, 1.0).item() == 0.0
    assert loss_ac(masks, masks, 0.0).item() == 0.0

    # V_spatial [1.5, 0.5] vs [1, 1], V_channel equal: L1 distance 1.0
    class Stub:
        pass

    a, b = Stub(), Stub()
    a.V_spatial = Tensor(np.array([[[1.5, 0.5]]]))
    b.V_spatial = Tensor(np.array([[[1.0, 1.0]]]))
    a.V_channel = Tensor(np.array([1.0]))
    b.V_channel = Tensor(np.array([1.0]))
    assert loss_ac(a, b, 2.0).item() == pytest.approx(2.0)


def test_loss_ac_matches_loop_oracle_and_grads_student_only():
    stream = Stream(34, "loss-test")
    f_t = stream.normal((2, 2, 2, 2))
    f_s = stream.normal((2, 2, 2, 2))
    t_in = Tensor(f_t, requires_grad=True)
    s_in = Tensor(f_s, requires_grad=True)
    masks_t = build_activation_masks(t_in, 0.5)
    masks_s = build_activation_masks(s_in, 0.5)
    out = loss_ac(masks_t, masks_s, 0.7)
    expected = loop_loss_ac(
        masks_t.V_spatial.data, masks_t.V_channel.data,
        masks_s.V_spatial.data, masks_s.V_channel.data, 0.7,
    )
    assert out.item() == pytest.approx(expected, abs=1e-12)
    out.backward()
    assert t_in.grad is None  # teacher branch detached inside the loss
    assert s_in.grad is not None

    def value():
        m_t = build_activation_masks(Tensor(f_t), 0.5)
        m_s = build_activation_masks(Tensor(f_s), 0.5)
        return loss_ac(m_t, m_s, 0.7).item()

    assert max_rel_err(s_in.grad, numeric_grad(value, f_s)) <= 1e-4


# -- region distillation --


def _sard_setup(seed, shape=(2, 4, 4, 4), num_classes=3, student_channels=None):
    stream = Stream(seed, "loss-test")
    f_t = stream.normal(shape)
    sc = shape[0] if student_channels is None else student_channels
    f_s = stream.normal((sc,) + shape[1:])
    labels = _random_labels(stream, shape[1:], num_classes)
    bundle = build_stage_masks(labels, Tensor(f_t), 0.5)
    adapter = None if sc == shape[0] else AdapterParams.init(sc, shape[0], stream)
    return f_t, f_s, labels, bundle, adapter


def test_loss_sard_zero_at_agreement():
    f_t, _, _, bundle, _ = _sard_setup(35)
    assert loss_sard(Tensor(f_t), Tensor(f_t.copy()), None, bundle).item() == 0.0


def test_loss_sard_constant_teacher_single_class_hand_value():
    # constant teacher: V terms are all 1; one class: scale is 1/8 everywhere
    f_t = np.full((1, 2, 2, 2), 3.0)
    f_s = np.zeros((1, 2, 2, 2))
    labels = LabelVolume(np.zeros((2, 2, 2), dtype=int), 1)
    bundle = build_stage_masks(labels, Tensor(f_t), 0.5)
    out = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle)
    assert out.item() == pytest.approx(9.0, abs=1e-10)  # 8 voxels * (1/8) * 3^2


def test_loss_sard_matches_loop_oracle_exclusive():
    for seed in (36, 37, 38):
        f_t, f_s, labels, bundle, adapter = _sard_setup(seed, student_channels=3)
        out = loss_sard(Tensor(f_t), Tensor(f_s), adapter, bundle)
        projected = adapter.apply(Tensor(f_s)).data
        expected = loop_loss_sard(
            f_t, projected, bundle.regions.grids, bundle.scale.assigned,
            bundle.scale.counts, bundle.activations.V_spatial.data,
            bundle.activations.V_channel.data, True, True,
        )
        assert out.item() == pytest.approx(expected, abs=1e-10)


def test_loss_sard_matches_loop_oracle_multi_label():
    stream = Stream(39, "loss-test")
    grids = (stream.random((2, 4, 4, 4)) < 0.3).astype(np.int64)
    labels = LabelVolume.multi(grids)
    f_t = stream.normal((2, 4, 4, 4))
    f_s = stream.normal((2, 4, 4, 4))
    bundle = build_stage_masks(labels, Tensor(f_t), 0.5)
    for fg, bg in ((True, True), (True, False), (False, True)):
        out = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle, include_fg=fg, include_bg=bg)
        expected = loop_loss_sard(
            f_t, f_s, bundle.regions.grids, bundle.scale.assigned, bundle.scale.counts,
            bundle.activations.V_spatial.data, bundle.activations.V_channel.data, fg, bg,
        )
        assert out.item() == pytest.approx(expected, abs=1e-10)


def test_loss_sard_split_and_collapsed_paths_agree():
    f_t, f_s, _, bundle, _ = _sard_setup(40)
    fast = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle)
    split = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle, split_region_sum=True)
    assert fast.item() == pytest.approx(split.item(), abs=1e-10)


def test_loss_sard_fg_bg_partition():
    f_t, f_s, _, bundle, _ = _sard_setup(41)
    full = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle).item()
    fg = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle, include_bg=False).item()
    bg = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle, include_fg=False).item()
    assert fg + bg == pytest.approx(full, abs=1e-10)


def test_loss_sard_gradients():
    f_t, f_s, _, bundle, adapter = _sard_setup(42, shape=(2, 3, 3, 3), student_channels=3)
    x = Tensor(f_s, requires_grad=True)
    out = loss_sard(Tensor(f_t), x, adapter, bundle)
    out.backward()

    def value():
        return loss_sard(Tensor(f_t), Tensor(f_s), adapter, bundle).item()

    assert max_rel_err(x.grad, numeric_grad(value, f_s)) <= 1e-4
    assert max_rel_err(adapter.weight.grad, numeric_grad(value, adapter.weight.data)) <= 1e-4


def test_loss_sard_shape_errors():
    f_t, f_s, labels, bundle, _ = _sard_setup(43)
    with pytest.raises(ShapeMismatchError):
        loss_sard(Tensor(f_t), Tensor(f_s[:, :2]), None, bundle)
    with pytest.raises(ShapeMismatchError):
        loss_sard(Tensor(f_t[:, :2, :, :]), Tensor(f_s[:, :2, :, :]), None, bundle)


# -- stage sum --


def test_loss_ms_sard_toggles():
    f_t, f_s, _, bundle, _ = _sard_setup(44)
    pairs = [(Tensor(f_t), Tensor(f_s))]
    adapters, bundles = [None], [bundle]

    off = DistillConfig(stages=(), sard_fg=False, sard_bg=False, mask_align=False, msca=False)
    assert loss_ms_sard(pairs, adapters, bundles, off).item() == 0.0

    cfg = DistillConfig(stages=(0,), msca=False)
    combined = loss_ms_sard(pairs, adapters, bundles, cfg)
    sard = loss_sard(Tensor(f_t), Tensor(f_s), None, bundle)
    masks_s = build_activation_masks(Tensor(f_s), cfg.temperature)
    ac = loss_ac(bundle.activations, masks_s, cfg.gamma)
    assert combined.item() == pytest.approx(sard.item() + ac.item(), abs=1e-12)

    fg_only = DistillConfig(stages=(0,), sard_bg=False, mask_align=False, msca=False)
    bg_only = DistillConfig(stages=(0,), sard_fg=False, mask_align=False, msca=False)
    both = DistillConfig(stages=(0,), mask_align=False, msca=False)
    assert loss_ms_sard(pairs, adapters, bundles, fg_only).item() + loss_ms_sard(
        pairs, adapters, bundles, bg_only
    ).item() == pytest.approx(loss_ms_sard(pairs, adapters, bundles, both).item(), abs=1e-10)

    align_only = DistillConfig(stages=(0,), sard_fg=False, sard_bg=False, msca=False)
    assert loss_ms_sard(pairs, adapters, bundles, align_only).item() == pytest.approx(
        ac.item(), abs=1e-12
    )


def test_loss_ms_sard_sums_selected_stages():
    a = _sard_setup(45, shape=(2, 3, 3, 3))
    b = _sard_setup(46, shape=(3, 2, 2, 2))
    pairs = [(Tensor(a[0]), Tensor(a[1])), (Tensor(b[0]), Tensor(b[1]))]
    adapters = [None, None]
    bundles = [a[3], b[3]]
    cfg = DistillConfig(stages=(0, 1), msca=False, mask_align=False)
    total = loss_ms_sard(pairs, adapters, bundles, cfg)
    s0 = loss_sard(pairs[0][0], pairs[0][1], None, bundles[0])
    s1 = loss_sard(pairs[1][0], pairs[1][1], None, bundles[1])
    assert total.item() == pytest.approx(s0.item() + s1.item(), abs=1e-12)
    only1 = DistillConfig(stages=(1,), msca=False, mask_align=False)
    assert loss_ms_sard(pairs, adapters, bundles, only1).item() == pytest.approx(
        s1.item(), abs=1e-12
    )


# -- global-context block --


def test_gc_block_is_identity_at_init():
    stream = Stream(47, "loss-test")
    params = GCBlockParams.init(4, stream)
    f = stream.normal((4, 2, 2, 2))
    out = gc_block(Tensor(f), params)
    assert (out.data == f).all()


def test_gc_block_constant_features_pool_to_channel_vector():
    stream = Stream(48, "loss-test")
    params = GCBlockParams.init(3, stream)
    params.w_v2.data[:] = stream.normal(params.w_v2.data.shape)
    const = np.array([1.0, -2.0, 0.5]).reshape(3, 1, 1, 1)
    f = np.broadcast_to(const, (3, 2, 2, 2)).copy()
    out = gc_block(Tensor(f), params)
    # uniform attention pools the constant back; the residual delta is the
    # same at every voxel and per channel
    delta = out.data - f
    assert np.abs(delta - delta[:, :1, :1, :1]).max() <= 1e-12


def test_gc_block_matches_direct_summation_oracle():
    stream = Stream(49, "loss-test")
    for channels in (2, 4):
        params = GCBlockParams.init(channels, stream)
        params.w_v2.data[:] = stream.normal(params.w_v2.data.shape)
        params.b_v2.data[:] = stream.normal(params.b_v2.data.shape)
        params.gn_bias.data[:] = stream.normal(params.gn_bias.data.shape)
        f = stream.normal((channels, 2, 2, 2))
        out = gc_block(Tensor(f), params)
        expected = loop_gc_block(
            f, params.w_key.data, params.b_key.data, params.w_v1.data, params.b_v1.data,
            params.w_v2.data, params.b_v2.data, params.gn_gain.data, params.gn_bias.data,
        )
        assert np.abs(out.data - expected).max() <= 1e-10


def test_gc_block_channel_mismatch():
    params = GCBlockParams.init(4, Stream(50, "loss-test"))
    with pytest.raises(ShapeMismatchError):
        gc_block(Tensor(np.ones((3, 2, 2, 2))), params)


# -- contextual alignment --


def _ca_setup(seed, channels=2, student_channels=3):
    stream = Stream(seed, "loss-test")
    f_t = stream.normal((channels, 2, 2, 2))
    f_s = stream.normal((student_channels, 2, 2, 2))
    adapter = AdapterParams.init(student_channels, channels, stream)
    params = GCBlockParams.init(channels, stream)
    params.w_v2.data[:] = stream.normal(params.w_v2.data.shape)
    return f_t, f_s, adapter, params


def test_loss_ms_ca_zero_cases():
    f_t, _, _, params = _ca_setup(51)
    pairs = [(Tensor(f_t), Tensor(f_t.copy()))]
    cfg = DistillConfig(stages=(0,), sard_fg=False, sard_bg=False, mask_align=False)
    assert loss_ms_ca(pairs, [None], [params], cfg).item() == 0.0

    f_t2, f_s2, adapter, params2 = _ca_setup(52)
    pairs2 = [(Tensor(f_t2), Tensor(f_s2))]
    zero_lam = DistillConfig(stages=(0,), lam=0.0, sard_fg=False, sard_bg=False, mask_align=False)
    assert loss_ms_ca(pairs2, [adapter], [params2], zero_lam).item() == 0.0
    msca_off = DistillConfig(stages=(0,), msca=False)
    assert loss_ms_ca(pairs2, [adapter], [params2], msca_off).item() == 0.0


def test_loss_ms_ca_matches_loop_oracle():
    f_t, f_s, adapter, params = _ca_setup(53)
    cfg = DistillConfig(stages=(0,), lam=0.7, sard_fg=False, sard_bg=False, mask_align=False)
    out = loss_ms_ca([(Tensor(f_t), Tensor(f_s))], [adapter], [params], cfg)
    r_t = gc_block(Tensor(f_t), params).data
    r_s = gc_block(adapter.apply(Tensor(f_s)), params).data
    assert out.item() == pytest.approx(0.7 * loop_l2sq(r_t, r_s), abs=1e-10)


def test_loss_ms_ca_gradients_and_no_teacher_grad():
    f_t, f_s, adapter, params = _ca_setup(54)
    cfg = DistillConfig(stages=(0,), sard_fg=False, sard_bg=False, mask_align=False)
    t_in = Tensor(f_t, requires_grad=True)
    s_in = Tensor(f_s, requires_grad=True)
    out = loss_ms_ca([(t_in, s_in)], [adapter], [params], cfg)
    out.backward()
    assert t_in.grad is None

    def value():
        return loss_ms_ca([(Tensor(f_t), Tensor(f_s))], [adapter], [params], cfg).item()

    assert max_rel_err(s_in.grad, numeric_grad(value, f_s)) <= 1e-4
    for name, p in params.parameters():
        if p.grad is None:
            continue
        assert max_rel_err(p.grad, numeric_grad(value, p.data)) <= 1e-4, name
    assert max_rel_err(adapter.weight.grad, numeric_grad(value, adapter.weight.data)) <= 1e-4


def test_loss_ms_ca_missing_params_raises():
    f_t, f_s, adapter, _ = _ca_setup(55)
    cfg = DistillConfig(stages=(0,), sard_fg=False, sard_bg=False, mask_align=False)
    with pytest.raises(ConfigError):
        loss_ms_ca([(Tensor(f_t), Tensor(f_s))], [adapter], [None], cfg)


# -- task loss --


def test_loss_task_saturated_logits_vanish():
    labels = _random_labels(Stream(56, "loss-test"), (4, 4, 4), 2)
    logits = np.where(labels.data[None] == np.arange(2).reshape(-1, 1, 1, 1), 20.0, 0.0)
    assert loss_task(Tensor(logits), labels).item() < 1e-3


def test_loss_task_uniform_logits_closed_form():
    labels = np.zeros((4, 4, 4), dtype=int)
    labels[:2] = 1  # balanced: 32 background, 32 foreground
    out = loss_task(Tensor(np.zeros((2, 4, 4, 4))), LabelVolume(labels, 2))
    # CE is ln 2; the Dice term is 1 - (32 + eps)/(64 + eps)
    dice = 1.0 - (32.0 + 1e-5) / (64.0 + 1e-5)
    assert out.item() == pytest.approx(math.log(2.0) + dice, abs=1e-9)


def test_loss_task_matches_loop_oracle_and_grads():
    stream = Stream(57, "loss-test")
    labels = _random_labels(stream, (3, 3, 3), 2)
    logits = stream.normal((2, 3, 3, 3))
    x = Tensor(logits, requires_grad=True)
    out = loss_task(x, labels)
    assert out.item() == pytest.approx(loop_loss_task(logits, labels.data), abs=1e-10)
    out.backward()

    def value():
        return loss_task(Tensor(logits), labels).item()

    assert max_rel_err(x.grad, numeric_grad(value, logits)) <= 1e-4


def test_loss_task_validation():
    labels = LabelVolume(np.zeros((2, 2, 2), dtype=int), 2)
    with pytest.raises(ShapeMismatchError):
        loss_task(Tensor(np.zeros((3, 2, 2, 2))), labels)
    with pytest.raises(ShapeMismatchError):
        loss_task(Tensor(np.zeros((1, 2, 2, 2))), LabelVolume(np.zeros((2, 2, 2), dtype=int), 1))
    with pytest.raises(ValueError):
        loss_task(
            Tensor(np.zeros((2, 2, 2, 2))),
            LabelVolume.multi(np.zeros((1, 2, 2, 2), dtype=int)),
        )


# -- total --


def test_loss_total_sums_and_matches_task_when_off():
    assert loss_total(Tensor(1.0), Tensor(2.0), Tensor(3.0)).item() == 6.0
    f_t, f_s, _, bundle, _ = _sard_setup(58)
    labels = _random_labels(Stream(59, "loss-test"), (4, 4, 4), 2)
    logits = Stream(60, "loss-test").normal((2, 4, 4, 4))
    task = loss_task(Tensor(logits), labels)
    off = DistillConfig(stages=(), sard_fg=False, sard_bg=False, mask_align=False, msca=False)
    total = loss_total(
        task,
        loss_ms_sard([(Tensor(f_t), Tensor(f_s))], [None], [bundle], off),
        loss_ms_ca([(Tensor(f_t), Tensor(f_s))], [None], [None], off),
    )
    assert total.item() == pytest.approx(task.item(), abs=1e-15)


def test_loss_total_gradient_is_sum_of_term_gradients():
    stream = Stream(61, "loss-test")
    f_t = stream.normal((2, 2, 2, 2))
    f_s = stream.normal((2, 2, 2, 2))
    labels = _random_labels(stream, (2, 2, 2), 2)
    bundle = build_stage_masks(labels, Tensor(f_t), 0.5)
    params = GCBlockParams.init(2, stream)
    params.w_v2.data[:] = stream.normal(params.w_v2.data.shape)
    cfg = DistillConfig(stages=(0,))
    logits = stream.normal((2, 2, 2, 2))

    def run(student_data, backward):
        x = Tensor(student_data, requires_grad=True)
        pairs = [(Tensor(f_t), x)]
        total = loss_total(
            loss_task(Tensor(logits), labels),
            loss_ms_sard(pairs, [None], [bundle], cfg),
            loss_ms_ca(pairs, [None], [params], cfg),
        )
        if backward:
            total.backward()
        return total, x

    total, x = run(f_s, True)

    def value():
        return run(f_s, False)[0].item()

    assert max_rel_err(x.grad, numeric_grad(value, f_s)) <= 1e-4
