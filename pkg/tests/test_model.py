import numpy as np
import pytest

from pdwn.config import ArchConfig, ConfigError
from pdwn.model import PDWN, blend_frames
from pdwn.synth import make_dataset, render
from pdwn.tensor import ShapeError, Tensor, backward
from pdwn.train import l1_loss


# --- channel arithmetic ------------------------------------------------------

def test_published_head_widths():
    cfg = ArchConfig.paper()
    widths = {s: cfg.head_input_channels(s) for s in range(1, 7)}
    assert widths[6] == 473
    assert widths[5] == 647
    assert widths[4] == 523
    assert widths[3] == 391
    assert widths[1] == 231
    # the compositional value; the published table prints 295 for this scale
    assert widths[2] == 263
    assert cfg.blend_input_channels == 38
    assert cfg.context_input_channels == 41


def test_head_widths_compose_from_parts():
    cfg = ArchConfig.paper()
    for s in range(1, 6):
        expected = 2 * cfg.channels[s - 1] + 81 + 54 + cfg.estimator_widths[s]
        assert cfg.head_input_channels(s) == expected


def test_field_channels_per_variant():
    assert ArchConfig().field_channels == 54
    assert ArchConfig(modulation=False).field_channels == 36
    assert ArchConfig(warp="flow").field_channels == 4


def test_model_layers_have_the_computed_widths():
    cfg = ArchConfig()
    model = PDWN(cfg)
    for s in range(1, cfg.num_scales + 1):
        assert model.params[f"estimator.s{s}.0.weight"].shape[1] == cfg.head_input_channels(s)
    assert model.params["blend.head.0.weight"].shape[1] == cfg.blend_input_channels
    assert model.params["context.in.weight"].shape[1] == cfg.context_input_channels


def test_paper_config_builds():
    model = PDWN(ArchConfig.paper())
    assert model.params["estimator.s2.0.weight"].shape[1] == 263


# --- config --------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = ArchConfig(num_scales=4, channels=(4, 8, 16, 32), estimator_widths=(8, 8, 8, 8),
                     cost_radius=(1, 2, 3, 4), cost_mode="learnt", warp="flow", input_frames=4)
    assert ArchConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        ArchConfig(input_frames=3)
    with pytest.raises(ConfigError):
        ArchConfig(channels=(8, 16))
    with pytest.raises(ConfigError, match="unknown"):
        ArchConfig.from_text("num_scales = 3\nwidth = 9\n")


def test_init_scheme_round_trips_and_validates():
    cfg = ArchConfig(init="he")
    assert ArchConfig.from_text(cfg.to_text()).init == "he"
    with pytest.raises(ConfigError, match="init"):
        ArchConfig(init="xavier")


def test_he_init_keeps_coarse_features_alive():
    frame = _frames(1, size=32)[0]
    rms = {}
    for init in ("fan_in", "he"):
        levels = PDWN(ArchConfig(init=init)).encode_pyramid([frame])[0]
        rms[init] = [float(np.sqrt(np.mean(f.data ** 2))) for f in levels]
    assert rms["fan_in"][-1] < 0.5 * rms["fan_in"][0]  # shrinks with depth
    assert min(rms["he"]) > 0.3
    assert rms["he"][-1] > 5 * rms["fan_in"][-1]


def test_he_init_keeps_identity_behaviour():
    frame = _frames(1)[0]
    out, _ = PDWN(ArchConfig(init="he"))([frame, frame])
    np.testing.assert_array_equal(out.data, frame.data)


def test_replace_extends_per_scale_tuples():
    cfg = ArchConfig().replace(num_scales=4)
    assert cfg.channels == (8, 16, 32, 64)
    assert cfg.cost_radius == (3, 3, 3, 3)
    assert ArchConfig().replace(num_scales=2).channels == (8, 16)


# --- forward behaviour ---------------------------------------------------------

def _frames(n=2, b=1, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.random((b, 3, size, size)).astype(np.float32)) for _ in range(n)]


def test_untrained_model_returns_the_average_of_identical_inputs():
    frame = _frames(1)[0]
    out, diag = PDWN(ArchConfig())([frame, frame])
    np.testing.assert_array_equal(out.data, frame.data)
    np.testing.assert_array_equal(diag.alpha.data, 0.5)


def test_untrained_model_blends_evenly():
    f0, f2 = _frames(2)
    out, _ = PDWN(ArchConfig())([f0, f2])
    np.testing.assert_allclose(out.data, 0.5 * (f0.data + f2.data), atol=1e-6)


@pytest.mark.parametrize("changes", [
    {}, {"warp": "flow"}, {"cost_mode": "none"}, {"cost_mode": "learnt"}, {"coarse_to_fine": False},
    {"num_scales": 2}, {"num_scales": 4}, {"context_enhancement": False}, {"modulation": False},
    {"input_frames": 4}, {"blending": False},
])
def test_variants_run_forward_and_backward(changes):
    cfg = ArchConfig().replace(**changes)
    model = PDWN(cfg, seed=1)
    frames = _frames(cfg.input_frames, b=2)
    out, diag = model(frames)
    assert out.shape == (2, 3, 16, 16)
    assert diag.alpha.shape == (2, 1, 16, 16)
    assert len(diag.estimates) == (cfg.num_scales if cfg.coarse_to_fine else 1)
    backward(l1_loss(out, _frames(1, b=2, seed=5)[0]), model.params)
    assert all(p.grad is not None and np.isfinite(p.grad).all() for p in model.params)


def test_forward_is_deterministic_per_seed():
    frames = _frames()
    a, _ = PDWN(seed=3)(frames)
    b, _ = PDWN(seed=3)(frames)
    assert np.array_equal(a.data, b.data)
    assert PDWN(seed=3).params.names() == PDWN(seed=4).params.names()


def test_wrong_frame_count_is_a_config_error():
    with pytest.raises(ConfigError, match="input frames"):
        PDWN()(_frames(4))


def test_odd_sizes_keep_their_shape():
    out, _ = PDWN()([Tensor(np.zeros((1, 3, 18, 13), np.float32))] * 2)
    assert out.shape == (1, 3, 18, 13)


def test_mismatched_frames_are_rejected():
    with pytest.raises(ShapeError):
        PDWN()([Tensor(np.zeros((1, 3, 16, 16), np.float32)), Tensor(np.zeros((1, 3, 16, 12), np.float32))])


def test_four_input_model_warps_only_the_nearest_frames():
    model = PDWN(ArchConfig(input_frames=4))
    frames = _frames(4)
    out, _ = model(frames)
    np.testing.assert_allclose(out.data, 0.5 * (frames[1].data + frames[2].data), atol=1e-6)


def test_context_switch_changes_only_the_refinement():
    model = PDWN(seed=2)
    model.params["context.out.bias"].data[:] = 0.25
    frames = _frames()
    with_ctx, diag = model(frames)
    without, _ = model(frames, context=False)
    np.testing.assert_array_equal(without.data, diag.blended.data)
    np.testing.assert_allclose(with_ctx.data - without.data, 0.25, atol=1e-6)


def test_blend_frames_weights():
    a = Tensor(np.ones((1, 3, 2, 2), np.float32))
    b = Tensor(np.zeros((1, 3, 2, 2), np.float32))
    alpha = Tensor(np.full((1, 1, 2, 2), 0.3, np.float32))
    np.testing.assert_allclose(blend_frames(a, b, alpha).data, 0.3)


def test_desk_model_on_a_rendered_scene():
    s = render(make_dataset(1, "easy", seed=0)[0])
    out, diag = PDWN()([Tensor(f[None]) for f in s.frames])
    assert out.shape == (1, 3, 32, 32)
    assert [e.scale for e in diag.estimates] == [3, 2, 1]
    means = diag.mean_offsets()
    assert len(means) == 3 and means[-1][0].shape == (1, 2, 32, 32)
