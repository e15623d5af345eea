import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixground import tensor as T
from pixground.losses import LossWeights
from pixground.model import GroundingModel, ModelConfig
from pixground.optim import AdamW, ParamGroup
from pixground.synth.splits import GroundingDataset, SplitConfig, build_splits
from pixground.tensor import Parameter
from pixground.train import (TrainingDiverged, TrainSchedule, apply_freeze, batch_loss,
                             build_optimizer, evaluate, report_from_predictions, train)

SMALL = ModelConfig(model_dim=16, num_heads=2, encoder_layers=1, decoder_layers=1, backbone_channels=16)


@pytest.fixture(scope="module")
def small_ds():
    sp = build_splits(SplitConfig(train=40, val=8, test=8, swap_pairs=3), names=("train", "val", "swap_test"))
    return {k: GroundingDataset.from_samples(v) for k, v in sp.items()}


def _state(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


# -- AdamW ------------------------------------------------------------------------

def _scalar_adamw(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 1e-1), st.floats(0.0, 0.1))
def test_adamw_matches_scalar_reference(seed, lr, wd):
    rng = np.random.default_rng(seed)
    init = rng.normal(size=5)
    grads = rng.normal(size=(100, 5))
    p = Parameter(init.copy(), dtype=np.float64, name="p")
    opt = AdamW([ParamGroup("g", [p], lr)], betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    for g in grads:
        p._grad = g.copy()
        opt.step()
    for i in range(5):
        want = _scalar_adamw(init[i], grads[:, i], lr, 0.9, 0.999, 1e-8, wd)
        assert abs(p.data[i] - want) < 1e-10


def test_first_adam_step_is_minus_lr():
    p = Parameter(np.zeros(1), dtype=np.float64, name="p")
    opt = AdamW([ParamGroup("g", [p], 0.1)], weight_decay=0.0)
    p._grad = np.ones(1)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1, abs=1e-7)


def test_frozen_parameter_and_moments_untouched():
    a = Parameter(np.ones(3), dtype=np.float64, name="a")
    b = Parameter(np.ones(3), dtype=np.float64, name="b")
    opt = AdamW([ParamGroup("g", [a, b], 0.1)])
    b.frozen = True
    a._grad, b._grad = np.ones(3), np.ones(3)
    opt.step()
    assert np.array_equal(b.data, np.ones(3)) and "b" not in opt.state.m
    assert not np.array_equal(a.data, np.ones(3))


def test_late_unfrozen_parameter_gets_full_first_step():
    a = Parameter(np.zeros(1), dtype=np.float64, name="a")
    b = Parameter(np.zeros(1), dtype=np.float64, name="b")
    opt = AdamW([ParamGroup("g", [a, b], 0.1)], weight_decay=0.0)
    b.frozen = True
    for _ in range(10):
        a._grad, b._grad = np.ones(1), np.ones(1)
        opt.step()
    b.frozen = False
    b._grad = np.ones(1)
    opt.step()
    assert b.data[0] == pytest.approx(-0.1, abs=1e-7)


def test_duplicate_names_rejected():
    p = Parameter(np.zeros(1), name="x")
    q = Parameter(np.zeros(1), name="x")
    with pytest.raises(ValueError):
        AdamW([ParamGroup("a", [p], 0.1), ParamGroup("b", [q], 0.1)])


def test_clip_grad_norm():
    p = Parameter(np.zeros(2), dtype=np.float64, name="p")
    opt = AdamW([ParamGroup("g", [p], 0.1)])
    p._grad = np.array([3.0, 4.0])
    assert opt.clip_grad_norm(1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p._grad) == pytest.approx(1.0, abs=1e-6)


# -- schedule ------------------------------------------------------------------------

def test_schedule_defaults_scale_with_total():
    s = TrainSchedule(total_steps=1000)
    assert s.freeze_steps == 100 and s.decay_step == 800
    assert s.lr_scale(799) == 1.0 and s.lr_scale(800) == pytest.approx(0.1)


def test_warmup_ramp():
    s = TrainSchedule(total_steps=100, warmup_steps=4, decay_step=100)
    assert [s.lr_scale(i) for i in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]


@pytest.mark.parametrize("bad", [
    {"total_steps": -1}, {"batch_size": 0}, {"total_steps": 10, "freeze_steps": 11},
    {"total_steps": 10, "decay_step": 12}, {"freeze_mode": "decoder"},
    {"total_steps": 10, "warmup_steps": 11},
])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        TrainSchedule(**bad)


# -- training loop -------------------------------------------------------------------

def test_one_step_reduces_batch_loss(small_ds):
    model = GroundingModel(SMALL, seed=0)
    ds = small_ds["train"]
    idx = np.arange(8)
    w = LossWeights.from_config(SMALL)
    opt = build_optimizer(model, TrainSchedule(total_steps=1, lr=1e-3, backbone_lr=1e-3))
    before, _ = batch_loss(model, ds, idx, w)
    opt.zero_grad()
    T.backward(before)
    opt.step()
    after, _ = batch_loss(model, ds, idx, w)
    assert float(after.data) < float(before.data)


@pytest.mark.parametrize("mode", ["backbone", "backbone+encoder"])
def test_freeze_mode_keeps_parameters_bitwise(small_ds, mode):
    model = GroundingModel(SMALL, seed=1)
    before = _state(model)
    sched = TrainSchedule(total_steps=100, batch_size=4, freeze_mode=mode, freeze_steps=0)
    train(model, small_ds["train"], sched, keep_best=False)
    frozen = {p.name for p in model.backbone_parameters()}
    if mode == "backbone+encoder":
        frozen |= {p.name for p in model.encoder_parameters()}
    after = model.state_dict()
    for name in frozen:
        assert np.array_equal(before[name], after[name]), name
    moved = [n for n in after if n not in frozen and not np.array_equal(before[n], after[n])]
    assert moved


def test_warm_freeze_window(small_ds):
    model = GroundingModel(SMALL, seed=1)
    sched = TrainSchedule(total_steps=10, freeze_steps=3)
    apply_freeze(model, sched, 2)
    assert all(p.frozen for p in model.backbone_parameters() + model.encoder_parameters())
    apply_freeze(model, sched, 3)
    assert not any(p.frozen for p in model.parameters())


def test_zero_backbone_lr_equals_frozen_backbone_without_clipping(small_ds):
    base = dict(total_steps=20, batch_size=4, freeze_steps=0, clip_norm=0.0)
    a = GroundingModel(SMALL, seed=2)
    b = GroundingModel(SMALL, seed=2)
    train(a, small_ds["train"], TrainSchedule(**base, backbone_lr=0.0), keep_best=False)
    train(b, small_ds["train"], TrainSchedule(**base, freeze_mode="backbone"), keep_best=False)
    for (n, x), y in zip(a.state_dict().items(), b.state_dict().values()):
        assert np.array_equal(x, y), n


def test_training_is_deterministic(small_ds, tmp_path):
    logs = []
    for name in ("a", "b"):
        model = GroundingModel(SMALL, seed=3)
        path = tmp_path / f"{name}.jsonl"
        train(model, small_ds["train"], TrainSchedule(total_steps=12, batch_size=4, log_every=4,
                                                      eval_every=6), val_ds=small_ds["val"],
              log_path=str(path))
        logs.append(path.read_bytes())
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 5


def test_keep_best_restores_best_state(small_ds):
    model = GroundingModel(SMALL, seed=0)
    res = train(model, small_ds["train"], TrainSchedule(total_steps=6, batch_size=4, eval_every=2),
                val_ds=small_ds["val"])
    assert res.best_step in (2, 4, 6)
    assert evaluate(model, small_ds["val"]).accuracy == res.best_accuracy


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_batch_seeds(small_ds):
    model = GroundingModel(SMALL, seed=0)
    for p in model.box_head.parameters():
        p.data[...] = np.inf
    with pytest.raises(TrainingDiverged, match="batch seeds"):
        train(model, small_ds["train"], TrainSchedule(total_steps=1, batch_size=2), keep_best=False)


# -- evaluation --------------------------------------------------------------------

def test_evaluate_is_pure(small_ds):
    model = GroundingModel(SMALL, seed=4)
    before = _state(model)
    r1 = evaluate(model, small_ds["val"], batch_size=3)
    r2 = evaluate(model, small_ds["val"], batch_size=8)
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert r1.accuracy == r2.accuracy and r1.mean_iou == pytest.approx(r2.mean_iou, abs=1e-12)


def test_evaluate_empty_split_rejected(small_ds):
    with pytest.raises(ValueError):
        evaluate(GroundingModel(SMALL), small_ds["val"].subset(np.array([], dtype=int)))


def test_report_perfect_and_swapped_predictions(small_ds):
    ds = small_ds["swap_test"]
    perfect = report_from_predictions(ds.boxes.copy(), ds)
    assert perfect.accuracy == 1.0 and perfect.swap_consistency == 1.0
    assert perfect.pair_divergence == 1.0
    # a model that ignores the relation word: both members get the first member's box
    same = ds.boxes.copy()
    for p in set(ds.pairs.tolist()):
        a, b = np.flatnonzero(ds.pairs == p)
        same[b] = same[a]
    rep = report_from_predictions(same, ds)
    assert rep.swap_consistency == 0.0 and rep.pair_divergence == 0.0 and rep.accuracy == 0.5


def test_oracle_predictions_score_one_and_slivers_zero(small_ds):
    ds = small_ds["val"]
    assert report_from_predictions(ds.boxes.copy(), ds).accuracy == 1.0
    sliver = np.tile([0.005, 0.005, 0.01, 0.01], (len(ds), 1))
    assert report_from_predictions(sliver, ds).accuracy == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swap_consistency_bounded_by_accuracy(small_ds, seed):
    ds = small_ds["swap_test"]
    rng = np.random.default_rng(seed)
    pred = ds.boxes + rng.normal(0, 0.05, size=ds.boxes.shape)
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1e-3
    rep = report_from_predictions(pred, ds)
    assert 0 <= rep.swap_consistency <= rep.accuracy <= 1
    assert 0 <= rep.pair_divergence <= 1
