"""Synthetic shifted classification task, AdamW, warmup+cosine schedule and training loops."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tn
from .backbone import Backbone, forward_classify, forward_features, freeze_backbone, unfreeze_backbone
from .composer import ComposedModel, UTuningConfig, compose
from .tensor import Tensor, Variable

SPLITS = ("pretrain_train", "pretrain_test", "downstream_train", "downstream_test")
CSV_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


class TrainingDivergedError(FloatingPointError):
    pass


class FrozenParameterError(AssertionError):
    pass


# --------------------------------------------------------------------- data


@dataclass(frozen=True)
class ShiftSpec:
    """How the downstream distribution departs from the pretraining one.

    Prototypes are rotated by ``angle_deg`` inside a random 2-plane of input
    space, a ``redraw_fraction`` of classes get brand-new prototypes, every
    token is offset by a random vector of norm ``bias_offset`` and, with
    ``relabel``, labels are permuted.
    """

    angle_deg: float = 30.0
    redraw_fraction: float = 0.5
    bias_offset: float = 0.0
    relabel: bool = True

    @classmethod
    def identity(cls) -> "ShiftSpec":
        return cls(0.0, 0.0, 0.0, False)

    @property
    def is_identity(self) -> bool:
        return self == ShiftSpec.identity()


@dataclass(frozen=True)
class SyntheticTask:
    """Token sequences ``prototype[label] + noise * N(0, I)``.

    Each prototype has zero mean over positions, so a class cannot be read
    off the mean token; the backbone has to build position-aware features.
    """

    seed: int = 0
    num_classes: int = 10
    seq_len: int = 16
    input_dim: int = 64
    noise: float = 1.5
    shift: ShiftSpec = ShiftSpec()
    train_size: int = 2000
    test_size: int = 1000

    def __post_init__(self):
        if self.num_classes < 2 or self.seq_len < 2 or self.input_dim < 2:
            raise ValueError("task needs >= 2 classes, >= 2 tokens and input_dim >= 2")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 0.0 <= self.shift.redraw_fraction <= 1.0:
            raise ValueError("redraw_fraction must lie in [0, 1]")

    def prototypes(self, distribution: str) -> np.ndarray:
        """``[C, T, d_in]`` prototypes indexed by label, for "pretrain" or "downstream"."""
        return _prototypes(self, distribution).copy()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        d = dict(d)
        shift = d.pop("shift", None)
        return cls(**d, shift=ShiftSpec(**shift) if isinstance(shift, dict) else (shift or ShiftSpec()))


def _draw_prototypes(rng: np.random.Generator, n: int, T: int, d: int) -> np.ndarray:
    p = rng.normal(size=(n, T, d))
    p -= p.mean(axis=1, keepdims=True)
    return p


@lru_cache(maxsize=32)
def _prototypes(task: SyntheticTask, distribution: str) -> np.ndarray:
    C, T, d = task.num_classes, task.seq_len, task.input_dim
    base = _draw_prototypes(np.random.default_rng([task.seed, 0]), C, T, d)
    if distribution == "pretrain":
        return base
    if distribution != "downstream":
        raise ValueError(f"unknown distribution {distribution!r}")
    s = task.shift
    rng = np.random.default_rng([task.seed, 1])
    plane, _ = np.linalg.qr(rng.normal(size=(d, 2)))
    theta = math.radians(s.angle_deg)
    rot2 = np.array([[math.cos(theta) - 1.0, -math.sin(theta)], [math.sin(theta), math.cos(theta) - 1.0]])
    rotation = np.eye(d) + plane @ rot2 @ plane.T
    shifted = base @ rotation.T
    n_redraw = int(round(s.redraw_fraction * C))
    redrawn = rng.choice(C, size=n_redraw, replace=False)
    shifted[redrawn] = _draw_prototypes(rng, n_redraw, T, d)
    offset = rng.normal(size=d)
    shifted = shifted + s.bias_offset * offset / np.linalg.norm(offset)
    order = rng.permutation(C) if s.relabel else np.arange(C)
    return shifted[order]


def generate_dataset(task: SyntheticTask, split: str, size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """``(inputs [size, T, d_in], labels [size])`` with label ``i % C`` for sample ``i``.

    Sample ``i`` depends only on ``(task.seed, split, i)``, so a larger draw
    extends a smaller one.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    if size is None:
        size = task.train_size if split.endswith("train") else task.test_size
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    protos = _prototypes(task, split.split("_")[0])
    labels = np.arange(size) % task.num_classes
    split_id = SPLITS.index(split) + 2
    noise = np.empty((size, task.seq_len, task.input_dim))
    for i in range(size):
        noise[i] = np.random.default_rng([task.seed, split_id, i]).standard_normal((task.seq_len, task.input_dim))
    x = protos[labels] + task.noise * noise
    return x.astype(tn.get_dtype()), labels


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @classmethod
    def load(cls, task: SyntheticTask, distribution: str = "downstream") -> "TaskData":
        return cls(*generate_dataset(task, f"{distribution}_train"), *generate_dataset(task, f"{distribution}_test"))


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.005
    warmup_epochs: int = 10
    epochs: int = 50

    def __post_init__(self):
        if self.base_lr <= 0 or self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"invalid schedule {self}: need base_lr > 0, epochs >= 1, 0 <= warmup <= epochs")


def lr_at_step(schedule: Schedule, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then half-cosine down to 0; 0 past the end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    total = schedule.epochs * steps_per_epoch
    warm = schedule.warmup_epochs * steps_per_epoch
    if step >= total:
        return 0.0
    if step < warm:
        return schedule.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay; frozen Variables are never touched."""

    def __init__(self, params: Union[Dict[str, Variable], Iterable[Variable]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        items = params.items() if isinstance(params, dict) else ((v.name, v) for v in params)
        self.params: Dict[str, Variable] = {k: v for k, v in items if v.trainable}
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        tn.zero_grads(self.params.values())

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ------------------------------------------------------------------ loops


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class History:
    rows: List[EpochMetrics] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final(self) -> EpochMetrics:
        return self.rows[-1]

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.epoch, f"{r.lr:.8g}", f"{r.train_loss:.8g}", f"{r.train_acc:.6f}", f"{r.test_acc:.6f}"])


def _evaluate(forward: Callable[[np.ndarray], Tensor], x: np.ndarray, y: np.ndarray,
              chunk: int = 250) -> Tuple[float, float]:
    loss = correct = 0.0
    with tn.no_grad():
        for s in range(0, len(x), chunk):
            logits = forward(x[s:s + chunk])
            loss += tn.cross_entropy(logits, y[s:s + chunk]).item() * len(logits.data)
            correct += float((logits.data.argmax(-1) == y[s:s + chunk]).sum())
    return loss / len(x), correct / len(x)


def _check_finite(loss: float, epoch: int, step: int, lr: float, last_ok: Optional[float]) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, step {step} (lr={lr:.3g}); "
                                    f"last finite loss {last_ok}")


def _fit(params: Dict[str, Variable], forward: Callable[[np.ndarray], Tensor], data: TaskData, schedule: Schedule,
         batch_size: int, seed: int, weight_decay: float, log: Optional[Callable[[EpochMetrics], None]]) -> History:
    opt = AdamW(params, lr=schedule.base_lr, weight_decay=weight_decay)
    n = len(data.train_x)
    steps_per_epoch = math.ceil(n / batch_size)
    rng = np.random.default_rng([seed, 7])
    start = time.perf_counter()
    loss0, acc0 = _evaluate(forward, data.train_x, data.train_y)
    _check_finite(loss0, 0, 0, 0.0, None)
    _, test0 = _evaluate(forward, data.test_x, data.test_y)
    hist = History([EpochMetrics(0, 0.0, loss0, acc0, test0)])
    if log:
        log(hist.rows[-1])
    step, last_ok = 0, loss0
    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(n)
        tot_loss = tot_correct = 0.0
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            lr = lr_at_step(schedule, step, steps_per_epoch)
            opt.zero_grad()
            logits = forward(data.train_x[idx])
            loss = tn.cross_entropy(logits, data.train_y[idx])
            lv = loss.item()
            _check_finite(lv, epoch, step, lr, last_ok)
            last_ok = lv
            tn.backward(loss)
            opt.step(lr)
            tot_loss += lv * len(idx)
            tot_correct += float((logits.data.argmax(-1) == data.train_y[idx]).sum())
            step += 1
        _, test_acc = _evaluate(forward, data.test_x, data.test_y)
        hist.rows.append(EpochMetrics(epoch, lr, tot_loss / n, tot_correct / n, test_acc))
        if log:
            log(hist.rows[-1])
    hist.wall_time = time.perf_counter() - start
    return hist


def pretrain_backbone(task: SyntheticTask, backbone: Backbone, epochs: int = 30,
                      schedule: Optional[Schedule] = None, batch_size: int = 32, seed: int = 0,
                      data: Optional[TaskData] = None, log=None) -> Backbone:
    """Train every backbone weight on the pretraining distribution (in place)."""
    schedule = schedule or Schedule(base_lr=0.001, warmup_epochs=min(3, epochs), epochs=epochs)
    data = data or TaskData.load(task, "pretrain")
    unfreeze_backbone(backbone)
    hist = _fit(backbone.variables(), lambda x: forward_classify(x, backbone), data, schedule, batch_size, seed,
                0.05, log)
    backbone.pretrain_accuracy = hist.final.train_acc
    backbone.pretrain_history = hist
    freeze_backbone(backbone)
    return backbone


def _snapshot(variables: Dict[str, Variable]) -> Dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in variables.items()}


def _assert_unchanged(before: Dict[str, np.ndarray], variables: Dict[str, Variable]) -> None:
    changed = [k for k, a in before.items() if not np.array_equal(a, variables[k].data)]
    if changed:
        raise FrozenParameterError(f"frozen parameters changed during training: {changed[:5]}"
                                   + (f" and {len(changed) - 5} more" if len(changed) > 5 else ""))


def finetune_petl(model: ComposedModel, task: SyntheticTask, schedule: Schedule = Schedule(),
                  batch_size: int = 32, seed: int = 0, data: Optional[TaskData] = None,
                  csv_path: Optional[Union[str, Path]] = None, log=None) -> History:
    """Train head + tuners on the downstream split; the backbone must stay bit-identical."""
    frozen = model.frozen_variables()
    trainable = model.trainable_variables()
    bad = sorted(k for k in trainable if not (k.startswith("head.") or k.startswith("tuner.")))
    if bad:
        raise FrozenParameterError(f"backbone parameters are trainable: {bad[:5]}; compose from a frozen backbone")
    before = _snapshot(frozen)
    data = data or TaskData.load(task)
    with tn.stop_gradient_at_frozen():
        hist = _fit(trainable, model.forward, data, schedule, batch_size, seed, 0.05, log)
    _assert_unchanged(before, frozen)
    if csv_path is not None:
        hist.write_csv(csv_path)
    return hist


def linear_probe(backbone: Backbone, task: SyntheticTask, schedule: Schedule = Schedule(),
                 batch_size: int = 32, seed: int = 0, data: Optional[TaskData] = None,
                 csv_path: Optional[Union[str, Path]] = None, log=None) -> History:
    """Head-only training on cached frozen features."""
    model = compose(backbone, UTuningConfig(name="linear-probe"))
    frozen = model.frozen_variables()
    before = _snapshot(frozen)
    data = data or TaskData.load(task)
    with tn.no_grad():
        feats = TaskData(_features(backbone, data.train_x), data.train_y, _features(backbone, data.test_x), data.test_y)

    def head(f):
        return tn.matmul(tn.as_tensor(f), model.head_W) + model.head_b

    hist = _fit(model.trainable_variables(), head, feats, schedule, batch_size, seed, 0.05, log)
    _assert_unchanged(before, frozen)
    hist.model = model
    if csv_path is not None:
        hist.write_csv(csv_path)
    return hist


def _features(backbone: Backbone, x: np.ndarray, chunk: int = 250) -> np.ndarray:
    return np.concatenate([forward_features(x[s:s + chunk], backbone).data for s in range(0, len(x), chunk)])


@dataclass
class TransferResult:
    seed: int
    pretrain_accuracy: float
    probe_test_acc: float
    tuned_test_acc: float
    wall_time: float

    @property
    def gap(self) -> float:
        return self.tuned_test_acc - self.probe_test_acc


def desk_transfer(seed: int, task: Optional[SyntheticTask] = None, backbone_config=None,
                  pretrain_epochs: int = 5, finetune_epochs: int = 20, probe_epochs: int = 50,
                  config: Optional[UTuningConfig] = None) -> TransferResult:
    """Pretrain, then linear probe vs. tuner fine-tuning on the shifted task, all from one seed.

    The probe gets the full desk schedule (it is cheap on cached features);
    the tuners get ``finetune_epochs``.
    """
    from .backbone import BackboneConfig
    from .composer import default_config
    start = time.perf_counter()
    task = task or SyntheticTask(seed=seed)
    backbone = Backbone.build(backbone_config or BackboneConfig(), seed=seed)
    pretrain_backbone(task, backbone, epochs=pretrain_epochs, seed=seed)
    data = TaskData.load(task)
    probe = linear_probe(backbone, task, Schedule(0.005, min(10, probe_epochs // 5), probe_epochs), seed=seed,
                         data=data)
    model = compose(backbone, config or default_config(), seed=seed)
    tuned = finetune_petl(model, task, Schedule(0.005, min(10, finetune_epochs // 5), finetune_epochs), seed=seed,
                          data=data)
    return TransferResult(seed, backbone.pretrain_accuracy, probe.final.test_acc, tuned.final.test_acc,
                          time.perf_counter() - start)
