"""Adam, reduce-on-plateau scheduling, and the two SideNet training regimes.

Frozen mode updates only SideNet parameters; the backbone's weights and its
batchnorm running statistics stay bit-identical (main batchnorm layers run in
eval mode). Joint mode optimizes L = L_M + alpha * sum_j L_Sj over everything.
Gating never happens during training: every input traverses the full graph.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, GatewireError, OptimizerError, SchedulerError, SpecError
from .graph import Model
from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction; eps is added outside the square root."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.lr = None

    def step(self, params: dict, lr: float):
        for name, p in params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient")
        self.t += 1
        self.lr = lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PlateauScheduler:
    """Divide lr by `factor` after `patience` consecutive epochs without a new
    best validation loss. "Without improvement" means val_loss >= best. The lr
    is always lr_init / factor**k after k decays, never recomputed by repeated
    division, so the power law holds exactly."""

    def __init__(self, lr_init: float, patience: int = 5, factor: float = 3.0):
        if lr_init <= 0:
            raise SchedulerError(f"lr_init must be positive, got {lr_init}")
        if patience < 1 or factor <= 1.0:
            raise SchedulerError("need patience >= 1 and factor > 1")
        self.lr_init = lr_init
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0
        self.decays = 0

    @property
    def lr(self) -> float:
        return self.lr_init / self.factor**self.decays

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise SchedulerError(f"non-finite validation loss {val_loss!r}")
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs == self.patience:
                self.decays += 1
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainConfig:
    mode: str = "joint"  # joint | frozen
    alpha: float = 1.0
    lr_init: float = 0.0003
    epochs: int = 25
    batch_size: int = 64
    plateau_patience: int = 5
    decay_factor: float = 3.0
    seed: int = 0
    sidenet_count: int | None = None  # how many sidenets join the loss; None = all

    def validate(self):
        if self.mode not in ("joint", "frozen"):
            raise SpecError(f"unknown training mode {self.mode!r}")
        if self.alpha < 0:
            raise SpecError(f"alpha must be >= 0, got {self.alpha}")
        if self.decay_factor <= 1.0:
            raise SpecError(f"decay_factor must be > 1, got {self.decay_factor}")
        if self.plateau_patience < 1:
            raise SpecError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecError("epochs and batch_size must be >= 1")
        if self.sidenet_count is not None and self.sidenet_count < 0:
            raise SpecError(f"sidenet_count must be >= 0, got {self.sidenet_count}")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc_main: float
    val_acc_sides: tuple
    lr: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def header(self):
        n_sides = len(self.rows[0].val_acc_sides) if self.rows else 0
        return (
            ["epoch", "train_loss", "val_loss", "val_acc_main"]
            + [f"val_acc_side{j}" for j in range(n_sides)]
            + ["lr"]
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                w.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc_main)]
                    + [repr(a) for a in r.val_acc_sides]
                    + [repr(r.lr)]
                )


def read_train_log_csv(path) -> TrainLog:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        n_sides = sum(1 for h in header if h.startswith("val_acc_side"))
        rows = []
        for rec in reader:
            rows.append(
                EpochRow(
                    epoch=int(rec[0]),
                    train_loss=float(rec[1]),
                    val_loss=float(rec[2]),
                    val_acc_main=float(rec[3]),
                    val_acc_sides=tuple(float(x) for x in rec[4 : 4 + n_sides]),
                    lr=float(rec[4 + n_sides]),
                )
            )
    return TrainLog(rows)


def joint_loss(main_loss: Tensor, side_losses, alpha: float) -> Tensor:
    """L = L_M + alpha * sum_j L_Sj.

    alpha == 0.0 short-circuits to L_M itself: a zero-scaled side branch adds
    nothing to any update, and keeping it out of the graph makes training with
    an idle sidenet bitwise identical to training without one.
    """
    if alpha == 0.0 or not side_losses:
        return main_loss
    total = side_losses[0]
    for extra in side_losses[1:]:
        total = T.add(total, extra)
    if alpha != 1.0:
        total = T.mul(total, Tensor(alpha))
    return T.add(main_loss, total)


def _head_loss(probs: Tensor, labels, head: str) -> Tensor:
    return T.cross_entropy(probs, labels) if head == "softmax" else T.bce(probs, labels)


def predictions(probs: np.ndarray, head: str) -> np.ndarray:
    """Class indices from probability rows; sigmoid rows decide at 0.5."""
    if head == "sigmoid":
        return (probs.reshape(-1) >= 0.5).astype(np.int64)
    return probs.argmax(axis=1)


def _accuracy(probs: np.ndarray, labels: np.ndarray, head: str) -> float:
    return float((predictions(probs, head) == labels).mean())


def _evaluate(model: Model, features, labels, alpha: float, k: int):
    model.eval_mode()
    main_probs, side_probs, _ = model.forward(features)
    main_loss = _head_loss(main_probs, labels, model.spec.head)
    losses = [
        _head_loss(side_probs[j], labels, model.spec.sidenets[j].head) for j in range(k)
    ]
    val_loss = float(joint_loss(main_loss, losses, alpha).data)
    acc_main = _accuracy(main_probs.data, labels, model.spec.head)
    acc_sides = tuple(
        _accuracy(sp.data, labels, sn.head)
        for sp, sn in zip(side_probs, model.spec.sidenets)
    )
    return val_loss, acc_main, acc_sides


def train(model: Model, train_set, val_set, config: TrainConfig) -> TrainLog:
    """Optimize the model in place and return the per-epoch log.

    Note the usual batchnorm restriction: a leftover batch of one input cannot
    be normalized in train mode, so choose batch_size accordingly.
    """
    config.validate()
    if len(train_set.labels) == 0 or len(val_set.labels) == 0:
        raise DataError("empty split")
    n_sides = len(model.spec.sidenets)
    k = n_sides if config.sidenet_count is None else config.sidenet_count
    if k > n_sides:
        raise SpecError(f"config wants {k} sidenets, model has {n_sides}")

    frozen = config.mode == "frozen"
    model.set_requires_grad(main=not frozen, side=True)
    for j in range(k, n_sides):
        for p in model.side_parameters(j).values():
            p.requires_grad = False

    step_params: dict[str, Tensor] = {}
    if not frozen:
        step_params.update(model.main_parameters())
    if config.alpha > 0.0 or frozen:
        for j in range(k):
            step_params.update(model.side_parameters(j))

    optimizer = Adam()
    scheduler = PlateauScheduler(config.lr_init, config.plateau_patience, config.decay_factor)
    rng = np.random.default_rng(config.seed)
    n = len(train_set.labels)
    log = TrainLog()

    for epoch in range(1, config.epochs + 1):
        lr_used = scheduler.lr
        model.train_mode(frozen_main=frozen)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            main_probs, side_probs, _ = model.forward(train_set.features[idx])
            labels = train_set.labels[idx]
            main_loss = _head_loss(main_probs, labels, model.spec.head)
            side_losses = [
                _head_loss(side_probs[j], labels, model.spec.sidenets[j].head)
                for j in range(k)
            ]
            loss = joint_loss(main_loss, side_losses, config.alpha)
            model.zero_grad()
            loss.backward()
            optimizer.step(step_params, lr_used)
            batch_losses.append(float(loss.data))

        val_loss, acc_main, acc_sides = _evaluate(
            model, val_set.features, val_set.labels, config.alpha, k
        )
        log.rows.append(
            EpochRow(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                val_acc_main=acc_main,
                val_acc_sides=acc_sides,
                lr=lr_used,
            )
        )
        scheduler.step(val_loss)

    model.eval_mode()
    model.set_requires_grad(main=True, side=True)
    return log


def check_gradient_independence(model: Model, features, labels) -> bool:
    """With a frozen backbone, each sidenet's loss must not touch the others.

    Backpropagates each sidenet's loss alone and checks that every other
    sidenet's parameters received no gradient.
    """
    if len(model.spec.sidenets) < 2:
        raise GatewireError("gradient independence needs at least 2 sidenets")
    model.set_requires_grad(main=False, side=True)
    model.train_mode(frozen_main=True)
    try:
        for j in range(len(model.spec.sidenets)):
            _, side_probs, _ = model.forward(features)
            loss = _head_loss(side_probs[j], labels, model.spec.sidenets[j].head)
            model.zero_grad()
            loss.backward()
            for other in range(len(model.spec.sidenets)):
                if other == j:
                    continue
                for p in model.side_parameters(other).values():
                    if p.grad is not None and np.any(p.grad != 0.0):
                        return False
            for p in model.side_parameters(j).values():
                if p.grad is None:
                    return False
    finally:
        model.eval_mode()
        model.set_requires_grad(main=True, side=True)
    return True
