import copy
import json
import math

import numpy as np
import pytest
import torch

from gcean.data import load_paired_dataset, load_vocab, training_guard
from gcean.salm import SalmWeights
from gcean.synthgen import GeneratorConfig, generate_benchmark, split_manifest
from gcean.trainer import (
    NonFiniteLoss,
    TrainConfig,
    build_model,
    compute_losses,
    evaluate_view,
    fit,
    fit_source_only,
    load_checkpoint,
    make_optimizer,
    representation_distances,
    set_determinism,
    train_step,
)

@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    m = generate_benchmark(GeneratorConfig(splits={"train": 8, "val": 2, "test": 2}), 5, root)
    return {
        "manifest": m,
        "train": load_paired_dataset(split_manifest(m, "train"), 64),
        "val": load_paired_dataset(split_manifest(m, "val"), 64),
        "vocab": load_vocab(m),
    }


def _model(bench, cfg):
    set_determinism(cfg.seed)
    return build_model(cfg, 32, len(bench["vocab"]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_adapt=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig().ablate(["salm-x"])
    cfg = TrainConfig.from_dict({"salm": {"lambda_G": 2.0}, "decay_milestones": [3]})
    assert cfg.salm.lambda_G == 2.0 and cfg.decay_milestones == (3,)


def test_zero_weights_reduce_to_task_loss(bench):
    zero = SalmWeights(0, 0, 0, 0, 0, 0)
    cfg = TrainConfig(lambda_M=0, lambda_A=0, salm=zero)
    model = _model(bench, cfg)
    with training_guard():
        _, bd = compute_losses(model, bench["train"][0], cfg)
    assert bd.L_total == bd.L_task


def test_default_weights_total_matches_components(bench):
    cfg = TrainConfig()
    model = _model(bench, cfg)
    for pair in bench["train"][:3]:
        with training_guard():
            _, bd = compute_losses(model, pair, cfg)
        assert bd.L_total == pytest.approx(bd.recompute_total(cfg), abs=1e-6)
        manual = bd.L_SALM + 1.0 * bd.L_M + 0.1 * bd.L_A + bd.L_task
        assert bd.L_total == pytest.approx(manual, abs=1e-6)
        assert all(v > 0 for v in (bd.L_S, bd.L_G, bd.L_A, bd.L_M, bd.L_PG_T))


def test_ablation_and_source_only_zero_terms(bench):
    cfg = TrainConfig().ablate(["gccm-a", "gccm-p"])
    model = _model(bench, cfg)
    with training_guard():
        _, bd = compute_losses(model, bench["train"][0], cfg)
    assert bd.L_A == 0 and bd.L_M == 0 and bd.L_S > 0
    cfg = TrainConfig(source_only=True, salm_frame=False, salm_gaze=False, gccm_A=False, gccm_P=False)
    with training_guard(allow_target_inputs=False):
        _, bd = compute_losses(model, bench["train"][0], cfg)
    assert bd.L_A == bd.L_M == bd.L_S == bd.L_S_gaze == bd.L_G == bd.L_PG_T == 0


def test_lr_groups_and_decay():
    cfg = TrainConfig(decay_milestones=(2,), decay_factor=0.1)
    assert cfg.lr_at(1) == (1e-4, 5e-5)
    a, r = cfg.lr_at(2)
    assert a == pytest.approx(1e-5) and r == pytest.approx(5e-6)


def test_optimizer_groups(bench):
    cfg = TrainConfig()
    model = _model(bench, cfg)
    opt = make_optimizer(model, cfg)
    names = [g["name"] for g in opt.param_groups]
    assert names == ["adapt", "rest"]
    assert opt.param_groups[0]["lr"] == 1e-4 and opt.param_groups[1]["lr"] == 5e-5
    assert opt.defaults["betas"] == (0.9, 0.999)
    n_adapt = sum(p.numel() for p in opt.param_groups[0]["params"])
    assert n_adapt == sum(p.numel() for p in model.salm.parameters()) + sum(p.numel() for p in model.gccm.parameters())


def test_decay_recorded_in_history(bench):
    cfg = TrainConfig(epochs=3, decay_milestones=(2,), decay_factor=0.1)
    res = fit(cfg, bench["train"][:2], vocab=bench["vocab"])
    lrs = [h["lr_adapt"] for h in res.history]
    assert lrs[0] == pytest.approx(1e-4) and lrs[1] == pytest.approx(1e-5) and lrs[2] == pytest.approx(1e-5)


def test_early_stop_patience_one(bench):
    scores = iter([0.9, 0.5, 0.4, 0.3, 0.2])
    cfg = TrainConfig(epochs=5, patience=1)
    res = fit(cfg, bench["train"][:2], bench["val"], vocab=bench["vocab"],
              selection_metric=lambda model, epoch: next(scores))
    assert len(res.history) == 2
    assert res.checkpoint["epoch"] == 1


def test_determinism_bitwise(bench):
    cfg = TrainConfig(epochs=2, lr_adapt=1e-3, lr_rest=1e-3)
    a = fit(cfg, bench["train"][:3], bench["val"], vocab=bench["vocab"], keep_steps=True)
    b = fit(cfg, bench["train"][:3], bench["val"], vocab=bench["vocab"], keep_steps=True)
    assert [s.to_dict() for s in a.steps] == [s.to_dict() for s in b.steps]
    assert json.dumps(a.history) == json.dumps(b.history)
    for blk, state in a.checkpoint["blocks"].items():
        for k, v in state.items():
            assert torch.equal(v, b.checkpoint["blocks"][blk][k])


def test_loss_decreases_on_toy_benchmark(bench):
    wins = 0
    for seed in range(3):
        res = fit(TrainConfig(epochs=5, seed=seed), bench["train"], vocab=bench["vocab"])
        wins += res.history[-1]["train"]["L_total"] < res.history[0]["train"]["L_total"]
    assert wins >= 2


def test_guard_holds_in_every_mode(bench):
    # val pairs carry target annotations; any read during training would raise
    data = bench["val"]
    assert all(p.has_target_events for p in data)
    cfg = TrainConfig(epochs=1)
    fit(cfg, data, vocab=bench["vocab"])
    fit(cfg.ablate(["salm-f", "salm-g"]), data, vocab=bench["vocab"])
    fit(cfg.ablate(["gccm-a", "gccm-p"]), data, vocab=bench["vocab"])
    fit_source_only(cfg, data, vocab=bench["vocab"])


def test_source_only_without_target_files(bench):
    train = load_paired_dataset(split_manifest(bench["manifest"], "train"), 64, include_target=False)
    res = fit_source_only(TrainConfig(epochs=1), train[:2], vocab=bench["vocab"])
    assert res.history[0]["train"]["L_A"] == 0


def test_non_finite_loss_aborts_with_dump(bench, tmp_path):
    cfg = TrainConfig()
    model = _model(bench, cfg)
    opt = make_optimizer(model, cfg)
    pair = copy.deepcopy(bench["train"][0])
    pair.source_frames.values[0, 0] = np.inf
    with pytest.raises(NonFiniteLoss) as exc:
        train_step(model, opt, pair, cfg, tmp_path)
    assert exc.value.dump_path and json.loads(open(exc.value.dump_path).read())["pair"] == pair.index


def test_checkpoint_round_trip_and_outputs(bench, tmp_path):
    res = fit(TrainConfig(epochs=1), bench["train"][:2], bench["val"], vocab=bench["vocab"], out_dir=tmp_path)
    assert (tmp_path / "history.jsonl").read_text().count("\n") == 1
    model, ckpt = load_checkpoint(tmp_path / "checkpoint.pt")
    assert set(ckpt["blocks"]) == set(model.named_blocks()) and "dvchead" in ckpt["blocks"]
    r1, _ = evaluate_view(res.model, bench["val"], "target")
    r2, _ = evaluate_view(model, bench["val"], "target")
    assert r1.to_dict() == r2.to_dict()
    rows = representation_distances(model, bench["val"])
    assert rows[-1]["pair"] == "mean" and len(rows) == 3
    assert all(math.isfinite(rows[-1][k]) for k in ("raw", "converted", "calibrated"))


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit(TrainConfig(), [])


def test_select_after_skips_warmup_epochs(bench):
    scores = iter([0.9, 0.1, 0.3, 0.2])
    cfg = TrainConfig(epochs=4, patience=1, select_after=1)
    res = fit(cfg, bench["train"][:2], bench["val"], vocab=bench["vocab"],
              selection_metric=lambda model, epoch: next(scores))
    # epoch 1 scores best but is inside the warm-up; patience only counts afterwards
    assert [h["best_epoch"] for h in res.history] == [0, 2, 3, 3]
    assert res.checkpoint["epoch"] == 3
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, select_after=3)
