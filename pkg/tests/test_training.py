import csv
import math

import numpy as np
import pytest

from utune import tensor as tn
from utune.checkpoint import load_tensors
from utune.backbone import Backbone, BackboneConfig, unfreeze_backbone
from utune.composer import UTuningConfig, compose, default_config
from utune.tensor import Variable
from utune.training import (CSV_HEADER, AdamW, FrozenParameterError, Schedule, ShiftSpec, SyntheticTask, TaskData,
                            TrainingDivergedError, finetune_petl, generate_dataset, linear_probe, lr_at_step,
                            pretrain_backbone)

TINY = BackboneConfig(layers=1, width=16, heads=2, d_ff=32, seq_len=4, num_classes=4, input_dim=8)


def tiny_task(**kw):
    base = dict(seed=0, num_classes=4, seq_len=4, input_dim=8, noise=0.5, train_size=256, test_size=128)
    return SyntheticTask(**{**base, **kw})


@pytest.fixture(scope="module")
def pretrained():
    task = tiny_task(shift=ShiftSpec.identity())
    bb = Backbone.build(TINY, seed=0)
    pretrain_backbone(task, bb, epochs=8, schedule=Schedule(0.005, 1, 8))
    return bb, task


# ------------------------------------------------------------------- data


def test_dataset_is_deterministic_and_extends():
    task = tiny_task()
    a, ya = generate_dataset(task, "downstream_train", 20)
    b, yb = generate_dataset(task, "downstream_train", 30)
    np.testing.assert_array_equal(a, b[:20])
    np.testing.assert_array_equal(ya, yb[:20])
    c, _ = generate_dataset(tiny_task(seed=1), "downstream_train", 20)
    assert not np.array_equal(a, c)


def test_splits_draw_different_noise():
    task = tiny_task(shift=ShiftSpec.identity())
    a, _ = generate_dataset(task, "pretrain_train", 8)
    b, _ = generate_dataset(task, "pretrain_test", 8)
    assert not np.array_equal(a, b)


def test_labels_are_balanced():
    _, y = generate_dataset(tiny_task(), "pretrain_train", 100)
    assert np.bincount(y).tolist() == [25] * 4


def test_zero_noise_returns_prototypes():
    task = tiny_task(noise=0.0)
    x, y = generate_dataset(task, "downstream_test", 8)
    np.testing.assert_array_equal(x, task.prototypes("downstream")[y])


def test_prototypes_have_zero_token_mean():
    p = tiny_task().prototypes("pretrain")
    assert np.abs(p.mean(axis=1)).max() < 1e-12


def test_identity_shift_keeps_prototypes():
    task = tiny_task(shift=ShiftSpec.identity())
    np.testing.assert_allclose(task.prototypes("downstream"), task.prototypes("pretrain"), atol=1e-12)


def test_shift_moves_every_class():
    task = tiny_task(shift=ShiftSpec(angle_deg=30.0, redraw_fraction=0.5))
    diff = np.abs(task.prototypes("downstream") - task.prototypes("pretrain")).max(axis=(1, 2))
    assert (diff > 1e-3).all()


def test_rotation_alone_preserves_norms():
    task = tiny_task(shift=ShiftSpec(angle_deg=45.0, redraw_fraction=0.0, relabel=False))
    np.testing.assert_allclose(np.linalg.norm(task.prototypes("downstream"), axis=-1),
                               np.linalg.norm(task.prototypes("pretrain"), axis=-1), rtol=1e-12)


def test_task_round_trip_and_validation():
    task = tiny_task(shift=ShiftSpec(10.0, 0.25, 0.5, False))
    assert SyntheticTask.from_dict(task.to_dict()) == task
    with pytest.raises(ValueError):
        tiny_task(noise=-1.0)
    with pytest.raises(ValueError, match="split"):
        generate_dataset(tiny_task(), "validation")


def test_dataset_follows_precision():
    with tn.precision("f32"):
        x, _ = generate_dataset(tiny_task(), "pretrain_train", 4)
    assert x.dtype == np.float32


# --------------------------------------------------------------- schedule


def test_schedule_values():
    s = Schedule(base_lr=0.1, warmup_epochs=2, epochs=10)
    assert lr_at_step(s, 0, 5) == 0.0
    assert lr_at_step(s, 5, 5) == pytest.approx(0.05)
    assert lr_at_step(s, 10, 5) == pytest.approx(0.1)
    assert lr_at_step(s, 30, 5) == pytest.approx(0.05)
    assert 0 < lr_at_step(s, 49, 5) < 1e-3
    assert lr_at_step(s, 50, 5) == 0.0
    assert lr_at_step(Schedule(0.1, 0, 4), 0, 3) == pytest.approx(0.1)
    assert lr_at_step(Schedule(0.1, 10, 50), 5 * 7, 7) == pytest.approx(0.05)


def test_schedule_is_monotone_after_warmup():
    s = Schedule(0.01, 3, 20)
    lrs = [lr_at_step(s, t, 7) for t in range(21, 140)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("kw", [dict(base_lr=0.0), dict(epochs=0), dict(warmup_epochs=11, epochs=10),
                                dict(warmup_epochs=-1)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        Schedule(**kw)


# -------------------------------------------------------------- optimizer


def test_adamw_zero_grad_applies_pure_decay():
    p = Variable(np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_adamw_first_step_matches_hand_computation():
    p = Variable(np.array([0.5]))
    opt = AdamW([p], lr=0.01, eps=1e-8, weight_decay=0.0)
    p.grad = np.array([3.0])
    opt.step()
    # bias-corrected m = g and v = g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.5 - 0.01 * 3.0 / (3.0 + 1e-8)], rtol=0, atol=1e-15)


def test_adamw_skips_frozen():
    a, b = Variable(np.ones(3)), Variable(np.ones(3), trainable=False)
    opt = AdamW({"a": a, "b": b}, lr=0.1)
    assert list(opt.params) == ["a"]
    a.grad, b.grad = np.ones(3), np.ones(3)
    opt.step()
    np.testing.assert_array_equal(b.data, np.ones(3))
    assert not np.array_equal(a.data, np.ones(3))


def test_gradients_accumulate_across_backward_calls():
    w = Variable(np.array([1.0, 2.0]))
    x = np.array([3.0, -1.0])
    tn.backward((w * x).sum())
    once = w.grad.copy()
    tn.backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, 2 * once)
    tn.zero_grads([w])
    np.testing.assert_array_equal(w.grad, 0.0)


# ------------------------------------------------------------------ loops


def test_pretraining_learns_the_source_task(pretrained):
    bb, _ = pretrained
    assert bb.pretrain_accuracy >= 0.95
    assert all(not v.trainable for k, v in bb.variables().items() if not k.startswith("head."))


def test_desk_pretraining_reaches_95_percent(pretrained_checkpoint):
    _, meta = load_tensors(pretrained_checkpoint)
    assert meta["pretrain_accuracy"] >= 0.95


def test_unshifted_linear_probe_keeps_pretrain_accuracy(pretrained):
    bb, task = pretrained
    hist = linear_probe(bb, task, Schedule(0.01, 1, 10))
    assert hist.final.train_acc >= 0.9 * bb.pretrain_accuracy


def test_finetune_keeps_backbone_bit_identical(pretrained):
    bb, task = pretrained
    model = compose(bb, default_config(dim=4))
    before = {k: v.data.copy() for k, v in model.frozen_variables().items()}
    hist = finetune_petl(model, task, Schedule(0.005, 0, 2))
    assert all(np.array_equal(before[k], v.data) for k, v in model.frozen_variables().items())
    assert hist.final.train_loss < hist.rows[0].train_loss


def test_finetune_is_deterministic(pretrained):
    bb, task = pretrained
    runs = [finetune_petl(compose(bb, default_config(dim=4), seed=3), task, Schedule(0.005, 0, 1), seed=3)
            for _ in range(2)]
    assert runs[0].rows == runs[1].rows


def test_epoch_zero_matches_between_probe_and_adapter_tuning(pretrained):
    bb, task = pretrained
    data = TaskData.load(task)
    probe = linear_probe(bb, task, Schedule(0.01, 0, 1), data=data)
    tuned = finetune_petl(compose(bb, default_config(dim=4)), task, Schedule(0.01, 0, 1), data=data)
    a, b = probe.rows[0], tuned.rows[0]
    assert abs(a.train_loss - b.train_loss) < 1e-12
    assert (a.train_acc, a.test_acc) == (b.train_acc, b.test_acc)


def test_finetune_refuses_trainable_backbone():
    bb = Backbone.build(TINY)
    model = compose(bb, UTuningConfig())
    unfreeze_backbone(bb)
    with pytest.raises(FrozenParameterError, match="trainable"):
        finetune_petl(model, tiny_task(), Schedule(0.01, 0, 1))


def test_divergence_is_reported(pretrained):
    bb, task = pretrained
    model = compose(bb, UTuningConfig())
    model.head_W.data[0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="epoch 0"):
        finetune_petl(model, task, Schedule(0.01, 0, 1))


def test_metrics_csv(pretrained, tmp_path):
    bb, task = pretrained
    path = tmp_path / "m.csv"
    linear_probe(bb, task, Schedule(0.01, 1, 3), csv_path=path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert all(math.isfinite(float(v)) for r in rows[1:] for v in r)
