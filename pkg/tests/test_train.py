import dataclasses

import numpy as np
import pytest

from conftest import TINY
from pdwn import synth
from pdwn.config import ConfigError
from pdwn.model import PDWN
from pdwn.tensor import Tensor, backward
from pdwn.train import (Divergence, TrainConfig, curve_to_csv, evaluate, evaluate_frame_average, l1_loss,
                        train)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture(scope="module")
def data():
    return synth.render_all(synth.make_dataset(6, "easy", seed=0))


def test_l1_known_values():
    a = t64(np.zeros((1, 1, 2, 2)))
    b = t64(np.array([1.0, -1.0, 2.0, 0.0]).reshape(1, 1, 2, 2))
    assert l1_loss(a, b).item() == pytest.approx(1.0)
    assert l1_loss(b, b).item() == 0.0


def test_l1_gradient_is_sign_over_count():
    a = t64(np.array([0.5, -0.5, 2.0, 0.0]).reshape(1, 1, 2, 2), grad=True)
    backward(l1_loss(a, t64(np.zeros((1, 1, 2, 2)))))
    np.testing.assert_allclose(a.grad.reshape(-1), [0.25, -0.25, 0.25, 0.0])


def test_zero_epochs_leaves_the_initialization(data):
    model = PDWN(TINY, seed=3)
    before = model.params.state()
    result = train(model, data, TrainConfig(epochs=0))
    assert result.step == 0 and result.curve == []
    for name, arr in model.params.state().items():
        assert np.array_equal(arr, before[name])


def test_schedule_arithmetic():
    cfg = TrainConfig(batch_size=4, epochs=3)
    assert cfg.steps_per_epoch(10) == 3
    assert cfg.total_steps(10) == 9
    assert dataclasses.replace(cfg, max_steps=5).total_steps(10) == 5


def test_config_round_trip_and_validation():
    cfg = TrainConfig(lr=1e-3, batch_size=2, two_phase=False)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(pretrain_fraction=1.5)


def test_training_is_deterministic(data):
    cfg = TrainConfig(lr=1e-3, batch_size=2, max_steps=4)
    a = train(PDWN(TINY, seed=1), data, cfg)
    b = train(PDWN(TINY, seed=1), data, cfg)
    assert [r.loss for r in a.curve] == [r.loss for r in b.curve]
    for name, arr in a.model.params.state().items():
        assert np.array_equal(arr, b.model.params.state()[name])


def test_resume_replays_the_same_curve(data):
    cfg = TrainConfig(lr=1e-3, batch_size=2, max_steps=6)
    full = train(PDWN(TINY, seed=1), data, cfg)
    first = train(PDWN(TINY, seed=1), data, cfg, stop_step=3)
    rest = train(first.model, data, cfg, optimizer=first.optimizer, start_step=first.step)
    assert [r.loss for r in first.curve + rest.curve] == [r.loss for r in full.curve]
    for name, arr in rest.model.params.state().items():
        assert np.array_equal(arr, full.model.params.state()[name])


def test_two_phase_schedule(data):
    cfg = TrainConfig(lr=1e-3, batch_size=3, max_steps=5, pretrain_fraction=0.6)
    phases = [r.phase for r in train(PDWN(TINY), data, cfg).curve]
    assert phases == ["pretrain"] * 3 + ["finetune"] * 2
    no_ctx = TINY.replace(context_enhancement=False)
    assert {r.phase for r in train(PDWN(no_ctx), data, cfg).curve} == {"finetune"}


def test_context_parameters_do_not_move_during_pretraining(data):
    model = PDWN(TINY)
    before = model.params["context.out.weight"].data.copy()
    train(model, data, TrainConfig(lr=1e-3, batch_size=2, max_steps=2, pretrain_fraction=1.0))
    assert np.array_equal(model.params["context.out.weight"].data, before)


def test_loss_falls_when_fitting_one_batch(data):
    cfg = TrainConfig(lr=2e-3, batch_size=1, max_steps=30, augment=False, two_phase=False)
    curve = train(PDWN(TINY), data[5:6], cfg).curve
    assert np.mean([r.loss for r in curve[-5:]]) < 0.8 * curve[0].loss


def test_non_finite_loss_raises_and_keeps_parameters(data):
    bad = dataclasses.replace(data[0], middle=np.full_like(data[0].middle, np.nan))
    model = PDWN(TINY)
    before = model.params.state()
    with pytest.raises(Divergence) as info:
        train(model, [bad], TrainConfig(batch_size=1, max_steps=3))
    assert info.value.step == 1
    for name, arr in model.params.state().items():
        assert np.array_equal(arr, before[name])


def test_non_finite_update_is_rolled_back(data):
    model = PDWN(TINY)
    cfg = TrainConfig(lr=1e-3, batch_size=2, max_steps=2)
    first = train(model, data, cfg, stop_step=1)
    saved = model.params.state()
    t = first.optimizer.t
    first.optimizer.eps = float("nan")  # forces a NaN update on the next step
    with pytest.raises(Divergence):
        train(model, data, cfg, optimizer=first.optimizer, start_step=1)
    for name, arr in model.params.state().items():
        assert np.array_equal(arr, saved[name])
    assert first.optimizer.t == t


def test_dataset_is_not_modified(data):
    before = [s.middle.copy() for s in data]
    train(PDWN(TINY), data, TrainConfig(batch_size=2, max_steps=2))
    assert all(np.array_equal(a, s.middle) for a, s in zip(before, data))


def test_periodic_evaluation(data):
    result = train(PDWN(TINY), data, TrainConfig(batch_size=2, max_steps=4, eval_every=2), held_out=data[:2])
    assert [s for s, _ in result.evals] == [2, 4]
    assert result.evals[0][1].count == 2


def test_untrained_model_scores_like_frame_averaging(data):
    model = PDWN(TINY)
    ours = evaluate(model, data)
    base = evaluate_frame_average(data)
    np.testing.assert_allclose(ours.psnr, base.psnr, atol=1e-3)
    assert ours.parameter_count == model.parameter_count()


def test_report_csv(data):
    report = evaluate_frame_average(data[:2])
    lines = report.to_csv().splitlines()
    assert lines[0] == "sample,psnr,ssim,ie"
    assert lines[-1].startswith("mean,") and len(lines) == 4


def test_curve_csv(data):
    curve = train(PDWN(TINY), data, TrainConfig(batch_size=2, max_steps=2)).curve
    lines = curve_to_csv(curve).splitlines()
    assert lines[0] == "step,epoch,phase,loss" and lines[1].startswith("1,0,")


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr=1e-3, decay="cosine", min_lr_fraction=0.1)
    assert cfg.lr_at(0, 11) == pytest.approx(1e-3)
    assert cfg.lr_at(5, 11) == pytest.approx(0.55e-3)
    assert cfg.lr_at(10, 11) == pytest.approx(1e-4)
    assert TrainConfig(lr=1e-3).lr_at(10, 11) == 1e-3
    with pytest.raises(ConfigError):
        TrainConfig(decay="step")
