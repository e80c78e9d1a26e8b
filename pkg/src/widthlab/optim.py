"""SGD and Adam update rules with row-mask awareness, plus the epoch loop.

Inactive rows are never modified: their gradients arrive as exact zeros
and their Adam moments are not advanced, so their weights stay bit-frozen
for the whole task.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import TaskDataset
from .errors import NumericError
from .network import ActiveRowMask, ModelSnapshot, loss_and_grads

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def make_optimizer(kind: str, lr: float, model: ModelSnapshot) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind=kind, lr=lr)
    if kind == "adam":
        state.m = [np.zeros_like(a) for a in model.layers]
        state.v = [np.zeros_like(a) for a in model.layers]
    return state


def _row_activity(model: ModelSnapshot, mask: ActiveRowMask | None):
    """Per-layer boolean row-activity vectors; the final layer is always on."""
    if mask is None:
        return [np.ones(a.shape[0], dtype=bool) for a in model.layers]
    return list(mask.rows) + [np.ones(model.layers[-1].shape[0], dtype=bool)]


def apply_update(
    state: OptimizerState,
    model: ModelSnapshot,
    grads: list[np.ndarray],
    mask: ActiveRowMask | None,
) -> None:
    """One optimizer step in place; rows inactive under the mask stay put."""
    if len(grads) != model.depth:
        raise ValueError("gradient count differs from layer count")
    active = _row_activity(model, mask)
    if state.kind == "sgd":
        for a, g, act in zip(model.layers, grads, active):
            delta = np.where(act[:, None], state.lr * g, 0.0)
            if not np.all(np.isfinite(delta)):
                raise NumericError("non-finite SGD update")
            a -= delta
        return
    state.step += 1
    correction1 = 1.0 - ADAM_BETA1 ** state.step
    correction2 = 1.0 - ADAM_BETA2 ** state.step
    for a, g, m, v, act in zip(model.layers, grads, state.m, state.v, active):
        rows = act[:, None]
        m[:] = np.where(rows, ADAM_BETA1 * m + (1 - ADAM_BETA1) * g, m)
        v[:] = np.where(rows, ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g, v)
        m_hat = m / correction1
        v_hat = v / correction2
        delta = np.where(rows, state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), 0.0)
        if not np.all(np.isfinite(delta)):
            raise NumericError("non-finite Adam update")
        a -= delta


@dataclass
class TrainResult:
    model: ModelSnapshot
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def train_epochs(
    model: ModelSnapshot,
    mask: ActiveRowMask | None,
    task: TaskDataset,
    cfg: TrainConfig,
) -> TrainResult:
    """Train in place for cfg.epochs with seeded epoch-wise shuffling.

    Mini-batches follow the shuffle order; the returned result carries the
    mean training loss of every epoch. Non-finite losses abort with batch
    diagnostics.
    """
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    started = time.perf_counter()
    state = make_optimizer(cfg.optimizer, cfg.lr, model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(task.n)
        total, seen = 0.0, 0
        for start in range(0, task.n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            try:
                loss, grads = loss_and_grads(
                    model, mask, task.inputs[rows], task.labels[rows]
                )
                apply_update(state, model, grads, mask)
            except NumericError as err:
                raise NumericError(
                    f"divergence at epoch {epoch}, batch starting {start}: {err}"
                ) from err
            total += loss * len(rows)
            seen += len(rows)
        losses.append(total / seen)
    return TrainResult(model=model, epoch_losses=losses,
                       seconds=time.perf_counter() - started)
