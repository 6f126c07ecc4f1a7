"""SGD with Nesterov momentum, step learning-rate schedules and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import AugmentConfig, Dataset, augment_minibatch
from .depth import SurvivalSchedule, sample_gates
from .layers import softmax_xent
from .resnet import ConstantDepth, ResNet, TestRescaled, TrainGated
from .tensor import RngStream, Stream

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    velocity: np.ndarray | None = None
    scratch: np.ndarray | None = field(default=None, repr=False)


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Update ``params`` in place.

    ``g = grad + wd * theta``, ``v = m * v - lr * g``, then
    ``theta += m * v - lr * g`` (Nesterov) or ``theta += v``.
    """
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    elif state.velocity.shape != params.shape:
        raise ValueError("velocity does not match parameter shape")
    buf = state.scratch
    if buf is None or buf.shape != params.shape:
        buf = state.scratch = np.empty_like(params)
    v = state.velocity
    np.multiply(params, state.weight_decay, out=buf)
    buf += grads
    buf *= state.lr
    v *= state.momentum
    v -= buf
    if state.nesterov:
        params -= buf
        np.multiply(v, state.momentum, out=buf)
        params += buf
    else:
        params += v
    return params


@dataclass(frozen=True)
class LrSchedule:
    """Step decay by ``factor`` after each milestone, with an optional warm-up."""

    base_lr: float = 0.1
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    warmup_epochs: int = 0
    warmup_lr: float | None = None

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch: int) -> float:
        if epoch < self.warmup_epochs and self.warmup_lr is not None:
            return self.warmup_lr
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.factor ** passed


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_error: float
    test_error: float
    mean_abs_grad_block1: float
    blocks_executed: int
    block_flops_saved_frac: float
    wall_seconds: float
    lr: float = 0.0
    minibatches: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Streams:
    gates: RngStream
    shuffle: RngStream
    augment: RngStream

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        return cls(
            RngStream(seed, Stream.GATES),
            RngStream(seed, Stream.SHUFFLE),
            RngStream(seed, Stream.AUGMENT),
        )

    def states(self) -> dict:
        return {k: getattr(self, k).get_state() for k in ("gates", "shuffle", "augment")}


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # batch-norm needs two samples
            yield idx


def train_epoch(
    net: ResNet,
    inputs: np.ndarray,
    labels: np.ndarray,
    schedule: SurvivalSchedule | None,
    optimizer: OptimizerState,
    streams: Streams,
    *,
    batch_size: int = 64,
    augment: AugmentConfig | None = None,
    epoch: int = 0,
) -> EpochMetrics:
    """One pass over the training data.

    ``schedule=None`` trains at constant depth. Validation and test errors
    are left as NaN for the caller to fill in.
    """
    t0 = time.perf_counter()
    order = streams.shuffle.permutation(len(labels))
    loss_sum = 0.0
    n_batches = 0
    grad_sum = 0.0
    grad_count = 0
    executed = 0
    flops_run = 0
    flops_full = 0
    full_block_flops = None
    for idx in _batches(len(labels), batch_size, order):
        if schedule is None:
            mode = ConstantDepth()
        else:
            mode = TrainGated(sample_gates(schedule, streams.gates, n_batches).bits)
        x = inputs[idx]
        if augment is not None and augment.enabled:
            x = augment_minibatch(x, augment, streams.augment)
        logits, rec = net.forward(x, mode)
        loss, dlogits = softmax_xent(logits, labels[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, minibatch {n_batches}")
        net.backward(rec, dlogits)
        if rec.executed[0]:
            grad_sum += float(np.mean(np.abs(net.first_block_grad())))
            grad_count += 1
        sgd_step(net.flat_params, net.flat_grads, optimizer)
        loss_sum += loss
        n_batches += 1
        executed += int(rec.executed.sum())
        flops_run += int(rec.block_flops.sum() + rec.backward_flops.sum())
        if full_block_flops is None or len(idx) != full_block_flops[0]:
            full_block_flops = (len(idx), _full_block_flops(net, x.shape))
        flops_full += 3 * full_block_flops[1]
    if n_batches == 0:
        raise ValueError("training split too small for one minibatch")
    return EpochMetrics(
        epoch=epoch,
        train_loss=loss_sum / n_batches,
        val_error=float("nan"),
        test_error=float("nan"),
        mean_abs_grad_block1=grad_sum / grad_count if grad_count else 0.0,
        blocks_executed=executed,
        block_flops_saved_frac=1.0 - flops_run / flops_full,
        wall_seconds=time.perf_counter() - t0,
        lr=optimizer.lr,
        minibatches=n_batches,
    )


def _full_block_flops(net: ResNet, x_shape) -> int:
    """Forward flops of all blocks for an input of shape ``x_shape``."""
    total = 0
    shape = _stem_out_shape(net, x_shape)
    for block in net.blocks:
        total += block.transform_flops(shape)
        spec = block.spec
        if spec.flavor == "conv":
            s = spec.stride
            shape = (shape[0], spec.out_width, -(-shape[2] // s), -(-shape[3] // s))
        else:
            shape = (shape[0], spec.out_width)
    return total


def _stem_out_shape(net: ResNet, x_shape):
    if net.spec.flavor == "conv":
        return (x_shape[0], net.spec.stem_width, x_shape[2], x_shape[3])
    return (x_shape[0], net.spec.stem_width)


def predict(net: ResNet, inputs: np.ndarray, schedule: SurvivalSchedule | None = None, batch_size: int = 256) -> np.ndarray:
    mode = ConstantDepth(train=False) if schedule is None else TestRescaled.from_schedule(schedule)
    out = []
    for start in range(0, len(inputs), batch_size):
        logits, _ = net.forward(inputs[start:start + batch_size], mode)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def evaluate(net: ResNet, inputs: np.ndarray, labels: np.ndarray, schedule: SurvivalSchedule | None = None, batch_size: int = 256) -> float:
    """0/1 error with batch-norm in eval mode; rescaled when ``schedule`` is given."""
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(net, inputs, schedule, batch_size) != np.asarray(labels)))


def select_epoch(val_errors: Sequence[float]) -> int:
    """Index of the lowest validation error; ties go to the earliest epoch."""
    if len(val_errors) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmin(np.asarray(val_errors, dtype=np.float64)))


@dataclass
class FitResult:
    history: list[EpochMetrics]
    selected_epoch: int
    best_state: dict
    val_error: float
    test_error: float
    total_wall_seconds: float
    savings_frac: float
    streams: Streams | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "selected_epoch": self.selected_epoch,
            "val_error": self.val_error,
            "test_error": self.test_error,
            "total_wall_seconds": self.total_wall_seconds,
            "savings_frac": self.savings_frac,
        }


def fit(
    net: ResNet,
    data: Dataset,
    *,
    epochs: int,
    lr_schedule: LrSchedule,
    schedule: SurvivalSchedule | None = None,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    nesterov: bool = True,
    seed: int = 0,
    augment: AugmentConfig | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> FitResult:
    """Train for ``epochs`` and keep the parameters of the best validation epoch."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if schedule is not None and schedule.L != net.L:
        raise ValueError(f"schedule covers {schedule.L} blocks, network has {net.L}")
    streams = Streams.from_seed(seed)
    opt = OptimizerState(lr_schedule.lr_at(0), momentum, weight_decay, nesterov)
    x_tr, y_tr = data.split("train")
    x_va, y_va = data.split("val")
    x_te, y_te = data.split("test")
    history: list[EpochMetrics] = []
    best_state = None
    best_val = math.inf
    flops_saved = []
    for epoch in range(epochs):
        opt.lr = lr_schedule.lr_at(epoch)
        m = train_epoch(net, x_tr, y_tr, schedule, opt, streams, batch_size=batch_size, augment=augment, epoch=epoch)
        m.val_error = evaluate(net, x_va, y_va, schedule)
        m.test_error = evaluate(net, x_te, y_te, schedule)
        history.append(m)
        flops_saved.append(m.block_flops_saved_frac)
        # strict < keeps the earliest epoch on ties
        if best_state is None or m.val_error < best_val:
            best_val = m.val_error
            best_state = net.state()
        log.info(
            "epoch %d lr %.4g loss %.4f val %.4f test %.4f blocks %d (%.1fs)",
            epoch, m.lr, m.train_loss, m.val_error, m.test_error, m.blocks_executed, m.wall_seconds,
        )
        if on_epoch is not None:
            on_epoch(m)
    sel = select_epoch([m.val_error for m in history])
    return FitResult(
        history=history,
        selected_epoch=sel,
        best_state=best_state,
        val_error=history[sel].val_error,
        test_error=history[sel].test_error,
        total_wall_seconds=sum(m.wall_seconds for m in history),
        savings_frac=float(np.mean(flops_saved)),
        streams=streams,
    )
