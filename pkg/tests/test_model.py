import numpy as np
import pytest

from polarbev import numerics as nx
from polarbev.config import ConfigError
from polarbev.geometry import CameraIntrinsics, build_polar_grid, polar_to_cartesian
from polarbev.model import (BEVModel, Dynamics, Frontend, ModelConfig, SegmentationHead, dice_loss,
                            downsample_targets, dynamics_axial, load_checkpoint, load_model_config,
                            save_checkpoint, segment)
from polarbev.numerics import Tensor
from polarbev.synthdata import SceneSpec, generate_samples


def small_cfg(**kw):
    base = dict(image_height=32, image_width=32, channels=8, heads=2, ffn_mult=1, radial_bins=(4, 4),
                bev_z=8, bev_x=8, cell_size=1.0, precision="f64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def cam_for(cfg):
    return CameraIntrinsics(cfg.image_width, cfg.image_width, cfg.image_width / 2, cfg.image_height / 4)


def rand_image(cfg, *lead, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, lead + (3, cfg.image_height, cfg.image_width))


# -- config ---------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(image_height=60),
    dict(strides=(4, 12)),
    dict(radial_bins=(4,)),
    dict(attention_mode="hard"),
    dict(polar_encoding="radial"),
    dict(temporal_frames=0),
    dict(channels=10, heads=4),
])
def test_inconsistent_config(kw):
    with pytest.raises(ConfigError):
        small_cfg(**kw)


def test_config_keys():
    cfg = load_model_config({"attention.mode": "mono_up", "attention.mail_numerator": "stop_k",
                             "strides": "4, 8", "r_max": "none", "horizontal_context": "yes"})
    assert (cfg.attention_mode, cfg.mail_numerator, cfg.strides, cfg.r_max, cfg.horizontal_context) == \
        ("mono_up", "stop_k", (4, 8), None, True)
    with pytest.raises(ConfigError):
        load_model_config({"attention.kind": "soft"})
    with pytest.raises(ConfigError):
        load_model_config({"channels": "lots"})


# -- frontend ----------------------------------------------------------------------------

def test_frontend_shapes():
    cfg = ModelConfig()
    fe = Frontend(cfg, np.random.default_rng(0), np.float64)
    outs = fe(Tensor(rand_image(cfg, 1)))
    assert [o.shape for o in outs] == [(1, 32, 16, 16), (1, 32, 8, 8)]


def test_frontend_translation_shifts_features():
    cfg = small_cfg()
    fe = Frontend(cfg, np.random.default_rng(0), np.float64)
    img = rand_image(cfg, 1)
    shifted = np.zeros_like(img)
    shifted[..., 8:] = img[..., :-8]  # one coarse-stride unit
    a = fe(Tensor(img))[1].data
    b = fe(Tensor(shifted))[1].data
    # interior columns away from both borders and the receptive field of the zero fill
    np.testing.assert_allclose(b[..., 3:-1], a[..., 2:-2], atol=1e-12)


def test_frontend_grads():
    cfg = small_cfg(image_height=8, image_width=8, channels=4, heads=1)
    fe = Frontend(cfg, np.random.default_rng(1), np.float64)
    x = Tensor(rand_image(cfg, 1), requires_grad=True)
    w = [np.random.default_rng(k).normal(size=o.shape) for k, o in enumerate(fe(x))]
    loss = lambda: nx.add(*[nx.tsum(nx.mul(o, wk)) for o, wk in zip(fe(x), w)])  # noqa: E731
    assert nx.check_param_grads(loss, {"x": x, **dict(fe.named_parameters())}) <= 1e-4


# -- horizontal context ---------------------------------------------------------------------

def test_horizontal_context_disabled_is_passthrough():
    m = BEVModel(small_cfg())
    f = Tensor(np.random.default_rng(0).normal(size=(1, 8, 4, 4)))
    assert m.horizontal_axial_context(0, f) is f


def test_horizontal_context_single_column_is_value_projection():
    m = BEVModel(small_cfg(horizontal_context=True))
    f = np.random.default_rng(0).normal(size=(2, 8, 3, 1))
    out = m.horizontal_axial_context(0, Tensor(f)).data
    ax = m.hctx0
    x = f.transpose(0, 2, 3, 1)
    normed = ax.norm(Tensor(x)).data
    v = normed @ ax.attn.proj.wv.data
    ref = x + v @ ax.attn.out.weight.data + ax.attn.out.bias.data
    np.testing.assert_allclose(out, ref.transpose(0, 3, 1, 2), atol=1e-12)


# -- translation ------------------------------------------------------------------------------

def test_translation_output_shape_independent_of_aspect():
    for h, w in ((32, 32), (16, 48)):
        cfg = small_cfg(image_height=h, image_width=w)
        m = BEVModel(cfg)
        feats = m.frontend(Tensor(rand_image(cfg, 2)))
        bev, mask, _ = m.translate_image_to_bev(feats, cam_for(cfg))
        assert bev.shape == (2, 8, 8, 8) and mask.shape == (8, 8)


@pytest.mark.parametrize("mode", ["soft", "mono_down"])
def test_agnostic_column_reversal_reverses_rays(mode):
    cfg = small_cfg(polar_encoding="agnostic", attention_mode=mode)
    m = BEVModel(cfg)
    grid = cfg.polar_grids(cam_for(cfg))[0]
    f = np.random.default_rng(0).normal(size=(1, 8, 8, 8))
    a = m.translate_scale(0, Tensor(f), grid).data
    b = m.translate_scale(0, Tensor(f[..., ::-1].copy()), grid).data
    np.testing.assert_array_equal(b, a[:, :, ::-1])


def test_adaptive_encoding_breaks_column_symmetry():
    cfg = small_cfg(polar_encoding="both")
    m = BEVModel(cfg)
    grid = cfg.polar_grids(cam_for(cfg))[0]
    f = np.random.default_rng(0).normal(size=(1, 8, 8, 8))
    a = m.translate_scale(0, Tensor(f), grid).data
    b = m.translate_scale(0, Tensor(f[..., ::-1].copy()), grid).data
    assert not np.allclose(b, a[:, :, ::-1])


def test_single_ray_support():
    cfg = small_cfg()
    g = build_polar_grid(1, cam_for(cfg), 4, 1.0, 8.0)
    out, mask = polar_to_cartesian(np.ones((2, 1, 4)), g, cfg.bev)
    np.testing.assert_array_equal(out.data[:, mask == 0], 0.0)


# -- dynamics -------------------------------------------------------------------------------------

def test_dynamics_single_frame_passthrough():
    dyn = Dynamics(small_cfg(), np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).normal(size=(1, 8, 4, 4))
    assert dynamics_axial(dyn, Tensor(x)).data.tobytes() == x[0].tobytes()


def test_dynamics_fresh_module_keeps_final_frame():
    dyn = Dynamics(small_cfg(), np.random.default_rng(0), np.float64)
    x = np.random.default_rng(1).normal(size=(3, 8, 4, 4))
    np.testing.assert_array_equal(dynamics_axial(dyn, Tensor(x)).data, x[-1])


def test_dynamics_grads():
    cfg = small_cfg(channels=4, heads=2)
    dyn = Dynamics(cfg, np.random.default_rng(0), np.float64)
    # move off the zero init so every branch carries gradient
    rng = np.random.default_rng(3)
    for ax in (dyn.time, dyn.depth, dyn.lateral):
        ax.attn.out.weight.data[...] = rng.uniform(-0.5, 0.5, ax.attn.out.weight.shape)
        ax.attn.out.bias.data[...] = rng.uniform(-0.5, 0.5, ax.attn.out.bias.shape)
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 4, 4, 4)), requires_grad=True)
    w = np.random.default_rng(2).normal(size=(4, 4, 4))
    loss = lambda: nx.tsum(nx.mul(dynamics_axial(dyn, x), w))  # noqa: E731
    assert dynamics_axial(dyn, x).shape == (4, 4, 4)
    assert nx.check_param_grads(loss, {"x": x, **dict(dyn.named_parameters())}) <= 1e-4


# -- segmentation and loss -------------------------------------------------------------------------

def test_segment_scales():
    head = SegmentationHead(small_cfg(), np.random.default_rng(0), np.float64)
    outs = segment(head, Tensor(np.random.default_rng(1).normal(size=(8, 8, 8))))
    assert [o.shape for o in outs] == [(3, 8, 8), (3, 4, 4)]


def test_segment_constant_input_constant_interior():
    head = SegmentationHead(small_cfg(), np.random.default_rng(0), np.float64)
    outs = segment(head, Tensor(np.full((8, 32, 32), 0.3)))
    full = outs[0].data[:, 10:-10, 10:-10]
    np.testing.assert_allclose(full, full[:, :1, :1] * np.ones_like(full), atol=1e-12)


def test_segment_grads():
    cfg = small_cfg(channels=2, num_classes=2)
    head = SegmentationHead(cfg, np.random.default_rng(0), np.float64)
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 4, 4)), requires_grad=True)
    loss = lambda: nx.add(*[nx.tsum(nx.square(o)) for o in segment(head, x)])  # noqa: E731
    assert nx.check_param_grads(loss, {"x": x, **dict(head.named_parameters())}) <= 1e-4


@pytest.mark.parametrize("pred, ideal, inter, total", [
    ([1.0, 1.0, 0.0, 0.0], 0.0, 2.0, 4.0),
    ([0.0, 0.0, 1.0, 1.0], 1.0, 0.0, 4.0),
    ([0.5, 0.5, 0.5, 0.5], 0.5, 1.0, 4.0),
])
def test_dice_perfect_disjoint_and_half(pred, ideal, inter, total):
    y = np.array([[[1.0, 1.0, 0.0, 0.0]]])
    mask = np.ones((1, 4))
    got = dice_loss(Tensor(np.array([[pred]])), y, mask).data
    assert got == pytest.approx(1 - 2 * inter / (total + 1e-5), abs=1e-6)
    assert abs(got - ideal) < 1e-5


def test_dice_ignores_masked_cells():
    y = np.array([[[1.0, 0.0, 1.0, 0.0]]])
    p = np.array([[[1.0, 0.0, 0.2, 0.9]]])
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert dice_loss(Tensor(p), y, mask).data == pytest.approx(0.0, abs=1e-5)


def test_dice_grads():
    rng = np.random.default_rng(0)
    p = Tensor(rng.uniform(0.05, 0.95, (2, 3, 4, 4)), requires_grad=True)
    y = (rng.uniform(size=(2, 3, 4, 4)) > 0.5).astype(float)
    mask = (rng.uniform(size=(2, 4, 4)) > 0.2).astype(float)
    assert nx.check_param_grads(lambda: dice_loss(p, y, mask), {"p": p}) <= 1e-4


def test_half_scale_targets_pool_visible_cells_only():
    gt = np.zeros((1, 1, 4, 4))
    gt[0, 0, 0, 0] = 1
    gt[0, 0, 3, 3] = 1
    mask = np.ones((1, 4, 4))
    mask[0, 3, 3] = 0
    g, m = downsample_targets(gt, mask)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])
    np.testing.assert_array_equal(m[0], [[1, 1], [1, 1]])


# -- full model ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    cfg = small_cfg()
    spec = SceneSpec(image_height=32, image_width=32, fx=32, fy=32, cx=16, cy=8, bev_z=8, bev_x=8,
                     cell_size=1.0, z_range=(2.0, 8.0), pedestrian_z_range=(2.0, 6.0), cars=(1, 1),
                     pedestrians=(0, 2), supersample=1)
    samples = generate_samples(0, 3, spec, cfg.polar_grids(spec.camera))
    return cfg, spec, samples


def test_forward_probabilities_and_determinism(toy):
    cfg, spec, samples = toy
    imgs = np.stack([s.image for s in samples])
    a = BEVModel(cfg)(imgs, spec.camera)
    b = BEVModel(cfg)(imgs, spec.camera)
    assert [p.shape for p in a.probs] == [(3, 3, 8, 8), (3, 3, 4, 4)]
    for p, q in zip(a.probs, b.probs):
        assert ((p.data > 0) & (p.data < 1)).all()
        assert p.data.tobytes() == q.data.tobytes()


def test_frame_count_must_match(toy):
    cfg, spec, samples = toy
    with pytest.raises(ConfigError):
        BEVModel(cfg)(np.stack([s.frames for s in samples]).repeat(2, axis=1), spec.camera)


def analytic_uniform_dice(gt, mask):
    y = gt * mask[:, None]
    n = mask.sum()
    per_class = 2 * 0.5 * y.sum(axis=(0, 2, 3)) / (0.5 * n + y.sum(axis=(0, 2, 3)) + 1e-5)
    return 1 - per_class.mean()


def test_loss_at_uniform_prediction_matches_prior_analysis(toy):
    cfg, spec, samples = toy
    m = BEVModel(cfg)
    for conv in (m.head.out_full, m.head.out_half):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    gt = np.stack([s.gt for s in samples])
    vis = np.stack([s.visibility for s in samples])
    total, terms = m.loss(m(np.stack([s.image for s in samples]), spec.camera), gt, vis)
    g2, v2 = downsample_targets(gt, vis)
    assert terms[0].data == pytest.approx(analytic_uniform_dice(gt, vis), abs=1e-12)
    assert terms[1].data == pytest.approx(analytic_uniform_dice(g2, v2), abs=1e-12)
    # random initialisation stays close to the uniform-prediction value
    rand_total, _ = BEVModel(cfg).loss(BEVModel(cfg)(np.stack([s.image for s in samples]), spec.camera), gt, vis)
    assert abs(rand_total.data - total.data) < 0.15


def test_loss_is_sum_of_scales(toy):
    cfg, spec, samples = toy
    m = BEVModel(cfg)
    gt = np.stack([s.gt for s in samples])
    vis = np.stack([s.visibility for s in samples])
    out = m(np.stack([s.image for s in samples]), spec.camera)
    total, terms = m.loss(out, gt, vis)
    g2, v2 = downsample_targets(gt, vis)
    separate = dice_loss(out.probs[0], gt, vis).data + dice_loss(out.probs[1], g2, v2).data
    assert total.data == separate


def test_parameter_names(toy):
    names = [n for n, _ in BEVModel(toy[0]).named_parameters()]
    assert "enc0.0.attn.proj.wq" in names and "dec1.1.cross_attn.proj.wv" in names
    assert len(names) == len(set(names))


@pytest.mark.parametrize("mode", ["soft", "mono_up"])
def test_every_parameter_gets_finite_gradient(toy, mode):
    cfg, spec, samples = toy
    m = BEVModel(small_cfg(attention_mode=mode, horizontal_context=True))
    out = m(np.stack([s.image for s in samples]), spec.camera)
    loss, _ = m.loss(out, np.stack([s.gt for s in samples]), np.stack([s.visibility for s in samples]))
    nx.backward(loss)
    for name, p in m.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name


def test_checkpoint_roundtrip(tmp_path, toy):
    cfg, spec, samples = toy
    m = BEVModel(small_cfg(attention_mode="mono_down", seed=9))
    save_checkpoint(tmp_path / "m.bevt", m)
    raw = (tmp_path / "m.bevt").read_bytes()
    assert raw[:4] == b"BEVT"
    m2, values = load_checkpoint(tmp_path / "m.bevt")
    assert m2.cfg == m.cfg and values["attention.mode"] == "mono_down"
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    img = samples[0].image
    assert m(img, spec.camera).probs[0].data.tobytes() == m2(img, spec.camera).probs[0].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bevt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(nx.serialize.FormatError):
        load_checkpoint(tmp_path / "x.bevt")
