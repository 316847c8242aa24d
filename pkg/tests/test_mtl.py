import math

import numpy as np
import pytest

from tpmtl import autodiff as ad
from tpmtl import mtl
from tpmtl.mtl import (AdamState, AlphaSchedule, NonFiniteLossError, TrainConfig,
                       adam_step, alpha_at, build_model, downsample_label,
                       forward_main, forward_regularizer, load_checkpoint,
                       model_config_from_train, objective, save_checkpoint,
                       strip_regularizer, task_loss, train)
from tpmtl.renderer import Camera, RenderConfig
from tpmtl.scenes import generate_scene, make_pair, trace_labels
from tpmtl.taskfields import ConfigError, TaskSpec, default_tasks


def tiny_cfg(**kw):
    base = dict(k_classes=4, batch_size=1, total_iters=20, render_height=8,
                render_width=8, render_samples=4, render_sampling="midpoint",
                log_every=5, ckpt_every=0, out_dir="unused")
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(seed=0, **kw):
    return build_model(default_tasks(4), seed, encoder_channels=16,
                       plane_channels=8, **kw)


def scene_record(seed=0, size=16, paired=False):
    scene = generate_scene(np.random.default_rng(seed), k_classes=4)
    if paired:
        from tpmtl.renderer import RigidTransform
        return make_pair(scene, Camera.identity(),
                         RigidTransform(np.eye(3), [0.1, 0.0, 0.0]), size, size, "p")
    return trace_labels(scene, Camera.identity(), size, size, str(seed))


def images_of(recs):
    return ad.Tensor(np.stack([r.image.transpose(2, 0, 1) for r in recs]))


# -- schedule ---------------------------------------------------------------

def test_alpha_schedule_appendix_endpoints():
    sched = AlphaSchedule(alpha_max=4.0, ramp_iters=20_000, total_iters=40_000)
    assert alpha_at(sched, 0) == 0.0
    assert alpha_at(sched, 10_000) == 2.0
    assert alpha_at(sched, 20_000) == 4.0
    assert alpha_at(sched, 35_000) == 4.0


def test_alpha_default_ramp_is_half_total():
    sched = AlphaSchedule.for_run(2000)
    assert sched.ramp_iters == 1000
    assert alpha_at(sched, 500) == 2.0


def test_alpha_non_decreasing():
    sched = AlphaSchedule.for_run(100)
    vals = [alpha_at(sched, i) for i in range(0, 120, 7)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        alpha_at(sched, -1)


# -- losses -----------------------------------------------------------------

def test_depth_l1_zero_when_equal():
    spec = TaskSpec("depth", 1, "identity", "l1")
    pred = ad.Tensor(np.random.default_rng(0).standard_normal((10, 1)))
    assert task_loss(spec, pred, pred.data.copy()).item() == 0.0


def test_cross_entropy_uniform_logits():
    spec = TaskSpec("segmentation", 2, "softmax", "cross-entropy")
    pred = ad.Tensor(np.zeros((12, 2)))
    labels = np.random.default_rng(1).integers(0, 2, 12)
    assert task_loss(spec, pred, labels).item() == pytest.approx(math.log(2.0))


def test_binary_ce_pos_weight_closed_form():
    spec = TaskSpec("boundary", 1, "sigmoid", "binary-cross-entropy")
    pred = ad.Tensor(np.zeros((5, 1)))  # prob 0.5
    labels = np.ones(5)
    assert task_loss(spec, pred, labels).item() == pytest.approx(0.95 * math.log(2.0))


def test_normal_loss_normalizes_prediction():
    spec = TaskSpec("normal", 3, "l2-normalize", "l1-on-normalized")
    pred = ad.Tensor(np.array([[10.0, 0.0, 0.0]]))  # normalizes to (1,0,0)
    label = np.array([[1.0, 0.0, 0.0]])
    assert task_loss(spec, pred, label).item() == pytest.approx(0.0)


def test_all_ignored_pixels_zero_loss():
    spec = TaskSpec("segmentation", 3, "softmax", "cross-entropy")
    pred = ad.Tensor(np.random.default_rng(2).standard_normal((4, 3)))
    labels = np.full(4, 255)
    assert task_loss(spec, pred, labels).item() == 0.0


# -- label downsampling -------------------------------------------------------

def test_downsample_nearest_for_classes():
    spec = TaskSpec("segmentation", 4, "softmax", "cross-entropy")
    label = np.arange(16).reshape(4, 4) % 4
    out = downsample_label(spec, label, 2, 2)
    assert out.shape == (2, 2)
    np.testing.assert_array_equal(out, label[1::2, 1::2])


def test_downsample_mean_for_depth():
    spec = TaskSpec("depth", 1, "identity", "l1")
    label = np.arange(16, dtype=float).reshape(4, 4)
    out = downsample_label(spec, label, 2, 2)
    np.testing.assert_allclose(out[0, 0], label[:2, :2].mean())


def test_downsample_normal_renormalizes():
    spec = TaskSpec("normal", 3, "l2-normalize", "l1-on-normalized")
    label = np.zeros((4, 4, 3))
    label[..., 2] = 1.0
    label[0, 0] = [1.0, 0.0, 0.0]
    out = downsample_label(spec, label, 2, 2)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)


def test_downsample_requires_integer_factor():
    spec = TaskSpec("depth", 1, "identity", "l1")
    with pytest.raises(ConfigError):
        downsample_label(spec, np.zeros((10, 10)), 4, 4)


# -- model forward ------------------------------------------------------------

def test_forward_main_output_shapes():
    model = tiny_model().set_mode("eval")
    rec = scene_record()
    preds = forward_main(model, images_of([rec]))
    assert preds["segmentation"].shape == (1, 4, 16, 16)
    assert preds["depth"].shape == (1, 1, 16, 16)
    assert preds["normal"].shape == (1, 3, 16, 16)


def test_forward_main_zero_weights_give_bias():
    model = tiny_model().set_mode("eval")
    for name, p in model.named_parameters().items():
        if not name.endswith("gamma"):
            p.data[...] = 0.0
    model.heads["depth"].out.b.data[...] = 2.5
    preds = forward_main(model, images_of([scene_record()]))
    np.testing.assert_allclose(preds["depth"].data, 2.5)


def test_forward_main_eval_deterministic():
    model = tiny_model().set_mode("eval")
    imgs = images_of([scene_record()])
    a = forward_main(model, imgs)
    b = forward_main(model, imgs)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_forward_main_rejects_bad_spatial_size():
    model = tiny_model()
    with pytest.raises(ad.ShapeError):
        forward_main(model, ad.Tensor(np.zeros((1, 3, 30, 30))))


def test_forward_regularizer_shapes_and_eval_error():
    model = tiny_model().set_mode("train")
    rec = scene_record()
    cfg = RenderConfig(8, 8, 4)
    outs = forward_regularizer(model, images_of([rec]), Camera.identity(), cfg,
                               np.random.default_rng(0))
    assert len(outs) == 1
    assert outs[0].tasks["segmentation"].shape == (8, 8, 4)
    model.set_mode("eval")
    with pytest.raises(ConfigError):
        forward_regularizer(model, images_of([rec]), Camera.identity(), cfg,
                            np.random.default_rng(0))


def test_regularizer_gradients_reach_encoder():
    model = tiny_model().set_mode("train")
    rec = scene_record()
    cfg = RenderConfig(8, 8, 4)
    params = model.named_parameters()
    with ad.Tape():
        outs = forward_regularizer(model, images_of([rec]), Camera.identity(), cfg,
                                   np.random.default_rng(0))
        loss = ad.tensor_sum(outs[0].raw["depth"])
    for p in params.values():
        p.grad = None
    ad.backward(loss)
    enc_norm = np.linalg.norm(params["encoder.b1.w"].grad)
    assert enc_norm > 0.0


# -- objective ---------------------------------------------------------------

def test_objective_alpha_zero_is_plain_mtl():
    cfg = tiny_cfg()
    model = tiny_model().set_mode("train")
    rec = scene_record()
    rng = np.random.default_rng(0)
    parts = objective(model, [rec], 0, cfg.schedule(), cfg, rng)
    assert parts.alpha == 0.0
    assert parts.reg == {} and parts.crossview == {}
    expected = sum(parts.main.values())
    assert float(parts.total.data) == pytest.approx(expected, rel=1e-12)


def test_objective_decomposition_exact():
    cfg = tiny_cfg(total_iters=10, ramp_iters=2)
    model = tiny_model().set_mode("train")
    rec = scene_record()
    it = 5  # alpha = 4 here
    p1 = objective(model, [rec], it, cfg.schedule(), cfg, np.random.default_rng(7))
    model2 = tiny_model().set_mode("train")  # same seed -> same weights
    cfg0 = tiny_cfg(total_iters=10, ramp_iters=2, alpha_max=0.0)
    p0 = objective(model2, [rec], it, cfg0.schedule(), cfg0, np.random.default_rng(7))
    alpha = p1.alpha
    assert alpha == 4.0
    # objective(alpha) == objective(0) + alpha * reg_sum, bitwise
    assert float(p1.total.data) == float(p0.total.data) + alpha * p1.reg_total()


def test_gradient_isolation_alpha_zero():
    cfg = tiny_cfg(alpha_max=0.0)
    model = tiny_model().set_mode("train")
    rec = scene_record()
    params = model.named_parameters()
    with ad.Tape():
        parts = objective(model, [rec], 5, cfg.schedule(), cfg, np.random.default_rng(0))
    for p in params.values():
        p.grad = None
    ad.backward(parts.total)
    for name, p in params.items():
        if name.startswith("reg."):
            assert p.grad is None or not np.any(p.grad)


def test_encoder_gets_extra_gradient_with_alpha():
    rec = scene_record()

    def encoder_grad_norm(alpha_max):
        cfg = tiny_cfg(alpha_max=alpha_max, ramp_iters=1)
        model = tiny_model().set_mode("train")
        params = model.named_parameters()
        with ad.Tape():
            parts = objective(model, [rec], 5, cfg.schedule(), cfg,
                              np.random.default_rng(3))
        for p in params.values():
            p.grad = None
        ad.backward(parts.total)
        return sum(np.linalg.norm(p.grad) for n, p in params.items()
                   if n.startswith("encoder.") and p.grad is not None)

    assert encoder_grad_norm(4.0) > encoder_grad_norm(0.0)


def test_cross_view_identity_matches_reg_term():
    rec = scene_record(paired=False, size=16)
    from tpmtl.renderer import RigidTransform
    from tpmtl.scenes import PairedView
    rec.pair = PairedView(delta_v=RigidTransform.identity(), image=rec.image,
                          seg=rec.seg, depth=rec.depth, normal=rec.normal,
                          boundary=rec.boundary)
    cfg = tiny_cfg(cross_view=True, ramp_iters=1)
    model = tiny_model().set_mode("train")
    parts = objective(model, [rec], 5, cfg.schedule(), cfg, np.random.default_rng(0))
    for name in parts.reg:
        assert parts.crossview[name] == parts.reg[name]  # bit-identical
    # Eq. 3 total equals Eq. 2 total plus the duplicated term
    expected = (sum(parts.main.values())
                + parts.alpha * parts.reg_total()
                + parts.alpha * sum(parts.crossview.values()))
    assert float(parts.total.data) == pytest.approx(expected, rel=1e-14)


def test_cross_view_requires_pairs():
    cfg = tiny_cfg(cross_view=True, ramp_iters=1)
    model = tiny_model().set_mode("train")
    with pytest.raises(ConfigError):
        objective(model, [scene_record()], 5, cfg.schedule(), cfg,
                  np.random.default_rng(0))


def test_aux_heads_baseline_swaps_regularizer():
    cfg = tiny_cfg(aux_heads=True, ramp_iters=1)
    model = tiny_model(aux_heads=True).set_mode("train")
    rec = scene_record()
    parts = objective(model, [rec], 5, cfg.schedule(), cfg, np.random.default_rng(0))
    assert parts.reg  # aux losses fill the reg slot
    assert model.aux_heads is not None
    # aux heads share architecture but not weights with the main heads
    a = model.heads["depth"].out.w.data
    b = model.aux_heads["depth"].out.w.data
    assert a.shape == b.shape and not np.array_equal(a, b)


# -- adam ---------------------------------------------------------------------

def test_adam_zero_grad_no_move():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState([p])
    adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState([p])
    adam_step([p], [np.array([0.37])], state, lr=0.01)
    assert p.data[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_quadratic_bowl():
    p = ad.Tensor(np.array([3.0]), requires_grad=True)
    state = AdamState([p])
    for _ in range(500):
        adam_step([p], [2.0 * p.data], state, lr=0.1)
    assert abs(p.data[0]) < 1e-2


def test_adam_shape_mismatch():
    p = ad.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        adam_step([p], [np.zeros(4)], AdamState([p]), lr=0.1)


# -- strip / checkpoint --------------------------------------------------------

def test_strip_parameter_accounting():
    model = tiny_model()
    stripped = strip_regularizer(model)
    assert (model.parameter_count() - stripped.parameter_count()
            == model.regularizer_parameter_count())
    assert not stripped.has_regularizer and stripped.mode == "eval"


def test_strip_bit_identical_forward():
    model = tiny_model(seed=3).set_mode("eval")
    stripped = strip_regularizer(model)
    rng = np.random.default_rng(0)
    for _ in range(10):
        img = ad.Tensor(rng.random((1, 3, 16, 16)))
        a = forward_main(model, img)
        b = forward_main(stripped, img)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    model = tiny_model(seed=5)
    mc = model_config_from_train(cfg)
    mc.update(encoder_channels=16, plane_channels=8)
    save_checkpoint(model, tmp_path / "ck", 42, mc)
    loaded, index = load_checkpoint(tmp_path / "ck")
    assert index["iter"] == 42 and index["format"] == "tpmtl-v1"
    pa = model.named_parameters()
    pb = loaded.named_parameters()
    assert pa.keys() == pb.keys()
    for name in pa:
        np.testing.assert_array_equal(pa[name].data, pb[name].data)
    for name, buf in model.named_buffers().items():
        np.testing.assert_array_equal(buf, loaded.named_buffers()[name])


def test_stripped_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=6).set_mode("eval")
    stripped = strip_regularizer(model)
    mc = {"k_classes": 4, "encoder_channels": 16, "plane_channels": 8,
          "per_task_density": False, "aux_heads": False, "with_regularizer": False}
    save_checkpoint(stripped, tmp_path / "ck", 0, mc)
    loaded, _ = load_checkpoint(tmp_path / "ck")
    img = ad.Tensor(np.random.default_rng(1).random((1, 3, 16, 16)))
    a = forward_main(stripped, img)
    b = forward_main(loaded.set_mode("eval"), img)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


# -- training loop --------------------------------------------------------------

def test_train_loss_decreases_and_logs(tmp_path):
    cfg = tiny_cfg(total_iters=200, out_dir=str(tmp_path / "run"), lr=3e-3,
                   log_every=50, ckpt_every=100)
    rec = scene_record(seed=11)
    result = train(cfg, [rec])
    first = result.rows[0]
    last = result.rows[-1]
    total0 = sum(v for k, v in first.items() if k.endswith("_main_loss"))
    total1 = sum(v for k, v in last.items() if k.endswith("_main_loss"))
    assert total1 < total0
    assert result.checkpoint.exists() and result.log_path.exists()
    header = result.log_path.read_text().splitlines()[0]
    assert header.startswith("iter,alpha,")
    assert "segmentation_main_loss" in header
    assert (tmp_path / "run" / "ckpt_000100").exists()


def test_train_determinism_bit_identical(tmp_path):
    rec = scene_record(seed=12)
    blobs = []
    for run in range(2):
        cfg = tiny_cfg(total_iters=30, seed=9, out_dir=str(tmp_path / f"r{run}"))
        result = train(cfg, [rec])
        blobs.append((result.checkpoint / "data.bin").read_bytes())
    assert blobs[0] == blobs[1]


def test_train_aborts_on_non_finite(tmp_path):
    rec = scene_record(seed=13)
    rec.image = rec.image.copy()
    rec.image[0, 0, 0] = np.nan
    cfg = tiny_cfg(total_iters=5, out_dir=str(tmp_path / "run"))
    with pytest.raises(NonFiniteLossError) as exc:
        train(cfg, [rec])
    assert "image" in str(exc.value)
