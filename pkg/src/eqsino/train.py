"""Adam with weight decay, step learning-rate decay, training and evaluation loops.

All randomness is derived from ``(seed, purpose, counter)`` so a run resumed
from a checkpoint replays exactly the batches and collocation draws of an
uninterrupted run.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, NumericalError, UsageError
from .tensor import mse, read_checkpoint, softmax_cross_entropy, write_checkpoint

_EPOCH_STREAM, _STEP_STREAM, _EVAL_STREAM = 1, 2, 3


@dataclass
class OptimState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: OptimState, lr: float | None = None) -> None:
    """One in-place Adam update of ``{name: Parameter}``; missing grads count as zero.

    Decoupled decay: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    """
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise UsageError(f"optimizer moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            update = update + lr * state.weight_decay * p.data
        p.data -= update


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 8
    seed: int = 0
    lr: float = 3e-3
    weight_decay: float = 1e-4
    decoupled: bool = True
    schedule: str = "step"
    milestones: tuple = (0.6, 0.85)
    decay: float = 0.1
    loss: str = "mse"
    eval_every: int = 1
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if self.schedule not in ("step", "constant"):
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("mse", "cross_entropy"):
            raise UsageError(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch_size >= 1")
        self.milestones = tuple(self.milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    n = sum(epoch >= math.floor(m * cfg.epochs) for m in cfg.milestones)
    return cfg.lr * cfg.decay**n


@dataclass
class ArraySet:
    """Measurements ``y [n, S]`` with regression targets ``[n, 2]`` or labels ``[n]``."""

    y: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, float)
        self.targets = np.asarray(self.targets)
        if len(self.y) != len(self.targets):
            raise UsageError("measurements and targets differ in length")

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_dataset(cls, ds) -> "ArraySet":
        return cls(ds.y, ds.targets)


@dataclass
class TrainState:
    opt: OptimState
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0
    log: list = field(default_factory=list)
    loss_sum: float = 0.0


def _loss(model, out, targets, kind):
    if kind == "mse":
        return mse(out, model.normalize_targets(targets))
    return softmax_cross_entropy(out, targets)


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model, data: ArraySet, cfg: TrainConfig, val: ArraySet | None = None,
          state: TrainState | None = None, max_steps: int | None = None) -> TrainState:
    """Run (or continue) training; returns the state with the metrics log.

    ``max_steps`` stops after that many optimizer steps in this call, at any
    point inside an epoch, so the state can be checkpointed and resumed.
    """
    n = len(data)
    if n == 0:
        raise UsageError("empty training set")
    if state is None:
        state = TrainState(OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=cfg.decoupled))
        if cfg.loss == "mse":
            model.fit_scaling(data.y, data.targets)
        else:
            model.fit_scaling(data.y)
    params = dict(model.named_parameters())
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    done = 0
    while state.epoch < cfg.epochs:
        lr = lr_schedule(state.epoch, cfg)
        order = np.random.default_rng([cfg.seed, _EPOCH_STREAM, state.epoch]).permutation(n)
        model.train()
        while state.step_in_epoch < steps_per_epoch:
            if max_steps is not None and done >= max_steps:
                return state
            b = order[state.step_in_epoch * cfg.batch_size:(state.step_in_epoch + 1) * cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, _STEP_STREAM, state.global_step])
            model.zero_grad()
            loss = _loss(model, model(data.y[b], rng), data.targets[b], cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                norms = {k: float(np.linalg.norm(p.grad)) for k, p in params.items() if p.grad is not None}
                raise NumericalError(
                    f"non-finite loss at epoch {state.epoch}, step {state.global_step}; lr={lr}, "
                    f"largest grad norm={max(norms.values(), default=float('nan'))}")
            loss.backward()
            adam_step(params, state.opt, lr)
            state.loss_sum += value
            state.step_in_epoch += 1
            state.global_step += 1
            done += 1
        mean_loss = state.loss_sum / steps_per_epoch
        state.loss_sum = 0.0
        state.log.append((state.epoch, "train", "loss", _fmt(mean_loss)))
        state.log.append((state.epoch, "train", "lr", _fmt(lr)))
        if val is not None and len(val) and ((state.epoch + 1) % cfg.eval_every == 0 or state.epoch + 1 == cfg.epochs):
            for k, v in evaluate(model, val, cfg.loss, seed=cfg.seed).items():
                state.log.append((state.epoch, "val", k, _fmt(v)))
        state.epoch += 1
        state.step_in_epoch = 0
    return state


def evaluate(model, data: ArraySet, loss: str = "mse", seed: int = 0, batch_size: int = 64) -> dict:
    """Eval-mode metrics.  Every batch reuses the same collocation draw, so each
    prediction depends only on its own sample."""
    was = model.training
    model.eval()
    preds = []
    for start in range(0, len(data), batch_size):
        rng = np.random.default_rng([seed, _EVAL_STREAM])
        preds.append(model.predict(data.y[start:start + batch_size], rng))
    model.train(was)
    pred = np.concatenate(preds) if preds else np.zeros((0,) + data.targets.shape[1:])
    return metrics(pred, data.targets, loss)


def metrics(pred, targets, loss: str = "mse") -> dict:
    pred, targets = np.asarray(pred, float), np.asarray(targets)
    if loss == "mse":
        err = pred - targets
        return {"mse": float(np.mean(err**2)), "mae_dmin": float(np.mean(np.abs(err[:, 0]))),
                "mae_dmax": float(np.mean(np.abs(err[:, 1])))}
    return {"accuracy": float(np.mean(np.argmax(pred, axis=1) == targets))}


def mean_baseline(train_targets, test_targets) -> dict:
    """Metrics of predicting the training-set mean for every test sample."""
    mu = np.asarray(train_targets, float).mean(axis=0)
    return metrics(np.broadcast_to(mu, np.shape(test_targets)), test_targets)


def metrics_csv(log) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "split", "metric", "value"])
    w.writerows(log)
    return out.getvalue()


# -- checkpoints ------------------------------------------------------------------------


def checkpoint_save(path, model, state: TrainState, extra: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    for k, m in state.opt.m.items():
        arrays[f"adam_m/{k}"] = m
    for k, v in state.opt.v.items():
        arrays[f"adam_v/{k}"] = v
    opt = {k: getattr(state.opt, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "decoupled", "t")}
    meta = {
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "global_step": state.global_step,
        "loss_sum": float(state.loss_sum),
        "log": [list(r) for r in state.log],
        "optimizer": opt,
    }
    meta.update(extra or {})
    write_checkpoint(path, arrays, meta)


def checkpoint_load(path, model) -> tuple:
    """Restore parameters and buffers into ``model``; return (TrainState, meta)."""
    arrays, meta = read_checkpoint(path)
    model_state = {k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
    model.load_state_dict(model_state)
    try:
        opt = OptimState(**meta["optimizer"])
        opt.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
        state = TrainState(opt, meta["epoch"], meta["step_in_epoch"], meta["global_step"],
                           [tuple(r) for r in meta["log"]], float(meta["loss_sum"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata incomplete: {exc}") from exc
    return state, meta
