import json
from dataclasses import replace

import numpy as np
import pytest

from aem.model import LOSS_TERMS, TrainConfig, init_model, score_segments
from aem.simulator import ConfigError, OCCViolation, SimConfig, generate_dataset, inject_mistake
from aem.training import (VARIANTS, CheckpointError, DivergenceError, checkpoint_bytes,
                          load_checkpoint, loss_and_grads, make_variant, prepare_items,
                          save_checkpoint, total_loss, train)

QUICK = dict(epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    model, best, records = train(tiny_dataset, TrainConfig.from_dict(QUICK), out_dir=out)
    return model, best, records, out


def batch(ds, model, n=4, config=None):
    cfg = config or model.config
    return prepare_items(ds, ds.splits["train"][:n], cfg, model.actions)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"batch_size": 0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"rho": 0.0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"losses": {"det": False}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"prefix_init": "zeros"})
    cfg = TrainConfig.from_dict({"losses": {"cl_s": False}})
    assert cfg.losses["eff_s"] and not cfg.losses["cl_s"]
    assert TrainConfig.from_dict(cfg.to_dict()).hash() == cfg.hash()


def test_variants():
    base = TrainConfig()
    full = make_variant(base, "full")
    assert all(full.losses.values()) and full.sampler == "ranked" and full.effect_fusion
    na = make_variant(base, "no_align")
    assert not na.losses["cl_s"] and not na.losses["cl_r"] and na.losses["eff_s"]
    lf = make_variant(base, "last_frame")
    assert lf.sampler == "last_frame" and all(lf.losses.values())
    ne = make_variant(base, "no_effect")
    assert not ne.effect_fusion and [k for k, v in ne.losses.items() if v] == ["det"]
    assert not make_variant(base, "state_only").losses["eff_r"]
    assert not make_variant(base, "relation_only").losses["eff_s"]
    assert not make_variant(base, "visual_only").eff_textual
    assert not make_variant(base, "textual_only").eff_visual
    assert set(VARIANTS) >= {"full", "no_effect", "last_frame", "no_align"}
    with pytest.raises(ConfigError):
        make_variant(base, "no_token")


def test_no_effect_zeroes_and_freezes_effect_blocks(tiny_dataset):
    cfg = replace(make_variant(TrainConfig.from_dict(QUICK), "no_effect"), epochs=1)
    model, _, _ = train(tiny_dataset, cfg)
    assert not model.params["fuse.w"][16:].any()


def test_breakdown_sums_to_total(tiny_dataset):
    model = init_model(tiny_dataset, TrainConfig())
    total, bd, _ = loss_and_grads(model, batch(tiny_dataset, model), model.prompt_bank())
    assert set(bd) == set(LOSS_TERMS)
    assert abs(sum(bd.values()) - total) < 1e-12 * max(1.0, abs(total))


@pytest.mark.parametrize("term", [t for t in LOSS_TERMS if t != "det"])
def test_loss_additivity(tiny_dataset, term):
    cfg = TrainConfig()
    model = init_model(tiny_dataset, cfg)
    items = batch(tiny_dataset, model)
    P = model.tensors()
    full, bd = total_loss(P, model, items, model.prompt_bank(), cfg)
    off = replace(cfg, losses={**cfg.losses, term: False})
    part, _ = total_loss(P, model, items, model.prompt_bank(), off)
    assert float(full.data) - float(part.data) == pytest.approx(bd[term], rel=1e-12, abs=1e-12)


def test_single_action_detection_only_is_zero():
    ds = generate_dataset(SimConfig.from_dict(dict(num_actions=2, feature_dim=8, min_len=2,
                                                   max_len=3, train_videos=2, val_videos=1,
                                                   test_videos=1)), 0)
    ds.splits["train"] = [s for s in ds.splits["train"] if s.action == ds.spec.actions[0]]
    ds.spec.actions = ds.spec.actions[:1]
    cfg = make_variant(TrainConfig(), "no_effect")
    model = init_model(ds, cfg)
    total, bd, _ = loss_and_grads(model, batch(ds, model, 2), model.prompt_bank())
    assert total == 0.0 and bd == {"det": 0.0}


def test_training_rejects_mistakes(tiny_dataset):
    model = init_model(tiny_dataset, TrainConfig())
    bad = inject_mistake(tiny_dataset.splits["train"][0], "state", np.random.default_rng(0),
                         tiny_dataset.world())
    items = prepare_items(tiny_dataset, [bad], model.config, model.actions)
    with pytest.raises(OCCViolation):
        loss_and_grads(model, items, model.prompt_bank())


def test_training_is_deterministic(tiny_dataset, trained, tmp_path):
    model, _, _, out = trained
    again, _, _ = train(tiny_dataset, TrainConfig.from_dict(QUICK), out_dir=tmp_path)
    assert checkpoint_bytes(again) == checkpoint_bytes(model)
    assert (tmp_path / "final.ckpt").read_bytes() == (out / "final.ckpt").read_bytes()
    assert (tmp_path / "train_log.jsonl").read_bytes() == (out / "train_log.jsonl").read_bytes()


def test_outputs_and_log(trained):
    _, _, records, out = trained
    assert {p.name for p in out.iterdir()} == {"final.ckpt", "best.ckpt", "train_log.jsonl"}
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == QUICK["epochs"] == len(records)
    rec = json.loads(lines[0])
    assert rec["epoch"] == 0 and "det" in rec["train"] and "total" in rec["val"]


def test_checkpoint_round_trip(trained, tmp_path):
    model, _, _, out = trained
    loaded = load_checkpoint(out / "final.ckpt")
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (out / "final.ckpt").read_bytes()
    assert loaded.step == model.step and loaded.config.hash() == model.config.hash()


def test_checkpoint_corruption_detected(trained, tmp_path):
    raw = bytearray((trained[3] / "final.ckpt").read_bytes())
    raw[-3] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_frozen_tensors_unchanged(tiny_dataset, trained):
    model, _, _, _ = trained
    fresh = init_model(tiny_dataset, model.config)
    for k, v in fresh.frozen.items():
        assert v.tobytes() == model.frozen[k].tobytes()
    assert "mixing" not in model.params and "vocab" not in model.params


def test_freeze_text_branch(tiny_dataset):
    cfg = TrainConfig.from_dict({**QUICK, "epochs": 1, "freeze_text_branch": True})
    model, _, _ = train(tiny_dataset, cfg)
    fresh = init_model(tiny_dataset, cfg)
    for k in fresh.params:
        if k.startswith(("gat.", "pool_")):
            np.testing.assert_array_equal(model.params[k], fresh.params[k])
    assert not np.array_equal(model.params["token"], fresh.params["token"])


def test_divergence_keeps_last_finite_state(tiny_dataset, tmp_path):
    cfg = TrainConfig.from_dict({**QUICK, "lr": 1e308})
    with pytest.raises(DivergenceError) as err:
        train(tiny_dataset, cfg, out_dir=tmp_path)
    assert (tmp_path / "last_finite.ckpt").exists()
    state = load_checkpoint(tmp_path / "last_finite.ckpt")
    assert all(np.isfinite(v).all() for v in state.params.values())
    assert err.value.state is not None


def test_scores_are_probabilities(tiny_dataset, trained):
    model = trained[0]
    test = tiny_dataset.splits["test"]
    for mode in ("joint", "symmetric"):
        s = score_segments(model, test, mode=mode)
        assert s.shape == (len(test),) and np.all((s >= 0) & (s <= 1))
    np.testing.assert_array_equal(score_segments(model, test), score_segments(model, test))
    with pytest.raises(ValueError):
        score_segments(model, test, mode="max")


def test_detection_loss_decreases_over_first_epochs():
    ds = generate_dataset(SimConfig(), 0)
    _, _, records = train(ds, TrainConfig.from_dict({"epochs": 5}))
    det = [r["train"]["det"] for r in records]
    assert all(b < a for a, b in zip(det, det[1:])), det


def test_total_gradient_on_batch_of_two():
    from aem.gradients import TOLERANCE, run_suite
    res = run_suite(seed=5, batches=1, batch_size=2)
    assert res["total"]["worst"] < TOLERANCE and res["passed"]
