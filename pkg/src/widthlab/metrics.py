"""Continual-learning metrics derived from the snapshot-vs-task accuracy matrix.

R[i][j] is the accuracy of the model snapshot taken after task i+1 on the
test split of task j+1 (0-based array, 1-based task talk). Only j <= i is
required; unfilled entries stay NaN.
"""

import numpy as np

from .continual import ExperimentRecord, ProtocolConfig, inference_model, run_sequence
from .dataset import TaskDataset, TaskSplit
from .network import accuracy


def accuracy_matrix(
    record: ExperimentRecord, test_tasks: list[TaskDataset]
) -> np.ndarray:
    """Fill the lower triangle of R from a finished experiment record."""
    n = record.n_tasks
    if len(test_tasks) != n:
        raise ValueError("need one test task per snapshot")
    r = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1):
            model = inference_model(record, i, j)
            r[i, j] = accuracy(model, record.masks[j], test_tasks[j])
    return r


def _require(matrix: np.ndarray, entries) -> None:
    for i, j in entries:
        if np.isnan(matrix[i, j]):
            raise ValueError(f"accuracy matrix entry ({i}, {j}) is missing")


def average_accuracy(r: np.ndarray) -> float:
    """Mean accuracy of the final snapshot over all tasks."""
    t = len(r)
    _require(r, [(t - 1, j) for j in range(t)])
    return float(np.mean(r[t - 1, :]))


def average_forgetting(r: np.ndarray) -> float:
    """Mean drop from each task's own-snapshot accuracy to the final one.

    Single-task runs have nothing to forget and return 0.
    """
    t = len(r)
    if t == 1:
        return 0.0
    _require(r, [(i, i) for i in range(t)] + [(t - 1, j) for j in range(t)])
    drops = [r[i, i] - r[t - 1, i] for i in range(t - 1)]
    return float(np.mean(drops))


def learning_accuracy(r: np.ndarray) -> float:
    """Mean accuracy measured immediately after training each task."""
    t = len(r)
    _require(r, [(i, i) for i in range(t)])
    return float(np.mean(np.diag(r)))


def forgetting_curve(r: np.ndarray) -> list[float]:
    """Per-task forgetting of the final snapshot; the last element is 0."""
    t = len(r)
    _require(r, [(i, i) for i in range(t)] + [(t - 1, j) for j in range(t)])
    return [float(r[i, i] - r[t - 1, i]) for i in range(t)]


def joint_accuracy(tasks: list[TaskSplit], cfg: ProtocolConfig) -> float:
    """Accuracy of one fresh dense model trained on all tasks pooled.

    The pooled training set concatenates every task's train split; the
    score is the mean accuracy across the per-task test splits.
    """
    pooled = TaskDataset(
        inputs=np.concatenate([t.train.inputs for t in tasks]),
        labels=np.concatenate([t.train.labels for t in tasks]),
        task_id=0,
        rotation_deg=0.0,
        n_classes=tasks[0].train.n_classes,
    )
    joint_cfg = ProtocolConfig(
        width=cfg.width,
        n_hidden=cfg.n_hidden,
        alpha=1.0,
        swap_heads=False,
        train=cfg.train,
        seed=cfg.seed,
    )
    record = run_sequence([pooled], joint_cfg)
    model = record.snapshots[0]
    scores = [accuracy(model, None, t.test) for t in tasks]
    return float(np.mean(scores))
