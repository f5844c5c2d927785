import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from harness import training
from harness.experiment_config import from_dict, load_config
from harness.training import (
    NumericalAbort,
    StepStats,
    TrainingStream,
    cmd_eval,
    cmd_train,
    evaluate,
    held_out_set,
    load_trained,
    train_model,
)
from numerics.rng import make_rng
from toyflow.model import FlowModel
from toyflow.params import ParamLayout, load_checkpoint


def test_training_stream_walks_frames_then_streams(tiny_config):
    stream = TrainingStream(tiny_config.data)
    first = stream.batch(1)[0]
    assert (first.stream_id, first.frame) == (0, 0)
    assert (stream.sample(3).stream_id, stream.sample(3).frame) == (1, 1)
    assert_array_equal(stream.sample(2).p1, TrainingStream(tiny_config.data).sample(2).p1)


def test_held_out_set_is_disjoint_from_training(tiny_config):
    held_out = held_out_set(tiny_config.data)
    assert len(held_out) == tiny_config.data.eval_samples
    assert not np.array_equal(held_out[0].p1, TrainingStream(tiny_config.data).sample(0).p1)


def test_zero_steps_saves_the_initial_model(tiny_raw, tmp_path):
    tiny_raw["run"]["steps"] = 0
    cfg = from_dict(tiny_raw)
    result = train_model(cfg, str(tmp_path))
    assert result.initial_eval is None and result.final_eval is None
    assert pd.read_csv(tmp_path / "train_log.csv").empty
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_training_logs_steps_and_moves_every_parameter_block(tiny_config, tmp_path):
    result = train_model(tiny_config, str(tmp_path))
    train_log = pd.read_csv(tmp_path / "train_log.csv")
    eval_log = pd.read_csv(tmp_path / "eval_log.csv")
    assert train_log["step"].tolist() == [1, 2]
    assert eval_log["step"].tolist() == [0, 1, 2]
    assert (train_log["fwd_iters"] >= 1).all()
    assert (train_log["wall_ms"] == 0.0).all()

    model, theta = load_trained(tiny_config, result.checkpoint, str(tmp_path))
    assert_array_equal(theta, result.theta)
    initial = model.layout.views(FlowModel(tiny_config.model, rng=make_rng(tiny_config.data.seed, "init")).theta)
    trained = model.layout.views(theta)
    for name in ("enc1_w", "enc2_w", "ctx1_w", "ctx2_w", "motion_w", "gru_q_w", "head2_w"):
        assert not np.array_equal(trained[name], initial[name]), name


def test_checkpoint_defines_the_whole_model_under_any_seed(tiny_raw, tmp_path):
    cfg = from_dict(tiny_raw)
    result = train_model(cfg, str(tmp_path / "train"))
    tiny_raw["data"]["seed"] = 5
    model, theta = load_trained(from_dict(tiny_raw), result.checkpoint, str(tmp_path))
    assert_array_equal(model.theta, result.theta)
    assert_array_equal(theta, result.theta)
    metrics = evaluate(model, theta, held_out_set(cfg.data), cfg.forward_config())
    assert metrics["aepe"] == result.final_eval["aepe"]


@pytest.mark.parametrize("overrides", [
    {"correction": {"freq": 1}},
    {"gradient": {"mode": "ift"}},
    {"gradient": {"mode": "phantom", "k": 3, "damping": "gate"}},
    {"jacobian_reg": {"weight": 0.1}},
    {"model": {"variant": "gma"}},
])
def test_training_is_deterministic_for_every_gradient_setting(tiny_raw, tmp_path, overrides):
    for section, values in overrides.items():
        tiny_raw.setdefault(section, {}).update(values)
    tiny_raw["run"]["eval_every"] = 0
    cfg = from_dict(tiny_raw)
    first = train_model(cfg, str(tmp_path / "a"))
    second = train_model(cfg, str(tmp_path / "b"))
    assert_array_equal(first.theta, second.theta)
    assert first.train_records == second.train_records
    assert np.all(np.isfinite(first.theta))


def test_correction_terms_show_up_in_the_loss(tiny_raw, tmp_path):
    tiny_raw["correction"] = {"freq": 1}
    tiny_raw["run"]["steps"] = 1
    result = train_model(from_dict(tiny_raw), str(tmp_path))
    record = result.train_records[0]
    assert record["loss_cor"] > 0.0
    assert record["loss_total"] == pytest.approx(record["loss_main"] + record["loss_cor"])


def test_repeated_non_finite_steps_abort(tiny_raw, tmp_path, monkeypatch):
    tiny_raw["run"]["steps"] = 20
    cfg = from_dict(tiny_raw)

    def broken(model, theta, samples, cfg, step, forward_cfg=None):
        return np.full_like(theta, np.nan), StepStats(loss_total=float("nan"))

    monkeypatch.setattr(training, "batch_gradient", broken)
    with pytest.raises(NumericalAbort):
        train_model(cfg, str(tmp_path))


def test_cmd_eval_scores_a_checkpoint(tiny_config, tmp_path):
    result = cmd_train(tiny_config, str(tmp_path / "train"))
    metrics = cmd_eval(tiny_config, result.checkpoint, str(tmp_path / "eval"))
    eval_log = pd.read_csv(tmp_path / "eval" / "eval_log.csv")
    assert eval_log["step"].tolist() == [0]
    assert eval_log["aepe"].iloc[0] == pytest.approx(metrics["aepe"])
    assert metrics["aepe"] == pytest.approx(result.final_eval["aepe"])
    assert (tmp_path / "eval" / "config.json").exists()


def test_best_of_keeps_the_lowest_final_error(tiny_raw, tmp_path):
    tiny_raw["run"]["best_of"] = 2
    tiny_raw["run"]["steps"] = 1
    result = cmd_train(from_dict(tiny_raw), str(tmp_path))
    table = pd.read_csv(tmp_path / "best_of.csv")
    assert table["seed"].tolist() == [0, 1]
    assert table["best"].sum() == 1
    best = table.loc[table["best"], "final_aepe"].iloc[0]
    assert best == pytest.approx(table["final_aepe"].min())
    assert result.final_eval["aepe"] == pytest.approx(best)
    assert_array_equal(load_checkpoint(result.checkpoint, ParamLayout(from_dict(tiny_raw).model)), result.theta)
    metrics = cmd_eval(from_dict(tiny_raw), result.checkpoint, str(tmp_path / "eval"))
    assert metrics["aepe"] == pytest.approx(best)


@pytest.mark.slow
@pytest.mark.parametrize("steps,reduction", [(200, 0.0), (2000, 0.5)])
def test_training_on_translations_lowers_the_endpoint_error(tmp_path, steps, reduction):
    cfg = load_config(None, [f"run.steps={steps}", "run.eval_every=100", "data.motion=translation", "data.max_disp=2"])
    result = train_model(cfg, str(tmp_path))
    initial, final = result.initial_eval["aepe"], result.final_eval["aepe"]
    assert final < initial
    assert final <= (1.0 - reduction) * initial
