"""Sequential-task protocol: sample masks, train task-by-task, snapshot all.

Each task's model starts from the previous task's weights with a freshly
sampled active-row mask. Optionally the input/output layers are replaced
per task ("head swapping"); the default keeps them shared, matching the
dense rotated-image experiments this lab reproduces.
"""

import base64
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import TaskDataset
from .errors import ConfigError
from .network import (
    ActiveRowMask,
    ModelSnapshot,
    forward,
    init_model,
    load_snapshot,
    save_snapshot,
)
from .optim import TrainConfig, train_epochs

RECORD_SCHEMA = 1


def derive_seed(*keys: int) -> int:
    """Stable child seed from integer keys (counter-based splitting)."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
               .generate_state(1)[0])


def sample_mask(
    alpha: float, width: int, n_maskable: int, seed: int, task_id: int
) -> ActiveRowMask:
    """Bernoulli(alpha) row activity, independent across layers and tasks."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A5C, task_id]))
    rows = [rng.random(width) < alpha for _ in range(n_maskable)]
    return ActiveRowMask(rows=rows, alpha=alpha)


@dataclass
class ProtocolConfig:
    width: int
    n_hidden: int = 1
    alpha: float = 1.0
    swap_heads: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.width < 1 or self.n_hidden < 0:
            raise ConfigError("width must be >= 1 and n_hidden >= 0")


@dataclass
class GapEntry:
    t: int  # 1-based earlier task
    t_prime: int
    max_gap: float
    mean_gap: float


@dataclass
class ExperimentRecord:
    config: ProtocolConfig
    snapshots: list[ModelSnapshot]
    masks: list[ActiveRowMask]
    gap_table: list[GapEntry]
    stage_seconds: list[float]
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.snapshots)

    def gap(self, t: int, t_prime: int) -> GapEntry:
        for entry in self.gap_table:
            if entry.t == t and entry.t_prime == t_prime:
                return entry
        raise KeyError(f"no gap entry for ({t}, {t_prime})")


def output_gap(
    m_a: ModelSnapshot,
    m_b: ModelSnapshot,
    probe: TaskDataset,
    mask: ActiveRowMask | None,
) -> tuple[float, float]:
    """Max and mean l2 logit difference over the probe set.

    Both models are evaluated under the same mask (the probe task's own),
    since the comparison asks how far the later model moved on the earlier
    task's inputs.
    """
    logits_a = forward(m_a, mask, probe.inputs).logits
    logits_b = forward(m_b, mask, probe.inputs).logits
    diffs = np.linalg.norm(logits_a - logits_b, axis=1)
    return float(diffs.max()), float(diffs.mean())


def inference_model(
    record: ExperimentRecord, snapshot_idx: int, task_idx: int
) -> ModelSnapshot:
    """Model used to evaluate snapshot ``snapshot_idx`` on task ``task_idx``.

    Without head swapping this is the snapshot itself. With swapping, the
    snapshot contributes its intermediate layers and the task contributes
    the input/output layers it was trained with. Indices are 0-based.
    """
    snap = record.snapshots[snapshot_idx]
    if not record.config.swap_heads or snapshot_idx == task_idx:
        return snap
    heads = record.snapshots[task_idx]
    layers = [heads.layers[0]] + snap.layers[1:-1] + [heads.layers[-1]]
    specs = [heads.specs[0]] + snap.specs[1:-1] + [heads.specs[-1]]
    return ModelSnapshot(layers=layers, specs=specs, width=snap.width,
                         task_id=heads.task_id)


def _reinit_heads(model: ModelSnapshot, task: TaskDataset, seed: int) -> None:
    """Replace input and output layers with fresh seeded draws for a new task."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    in_dim, n_classes = task.dim, task.n_classes
    first_out = model.layers[0].shape[0]
    bound = 1.0 / np.sqrt(in_dim)
    model.layers[0] = rng.uniform(-bound, bound, size=(first_out, in_dim))
    model.specs[0] = replace(model.specs[0], in_dim=in_dim)
    last_in = model.layers[-1].shape[1]
    bound = 1.0 / np.sqrt(last_in)
    model.layers[-1] = rng.uniform(-bound, bound, size=(n_classes, last_in))
    model.specs[-1] = replace(model.specs[-1], out_dim=n_classes)


def run_sequence(tasks: list[TaskDataset], cfg: ProtocolConfig) -> ExperimentRecord:
    """Train through ``tasks`` in order, archiving every intermediate model.

    Deterministic in (tasks, cfg): init, masks, and shuffles all derive
    from cfg.seed. The gap table holds max/mean output gaps for every task
    pair (t, t'), measured on task t's inputs under task t's mask.
    """
    if not tasks:
        raise ConfigError("no tasks")
    if not cfg.swap_heads:
        dims = {(t.dim, t.n_classes) for t in tasks}
        if len(dims) > 1:
            raise ConfigError(
                "tasks disagree on input/output dims; enable swap_heads"
            )

    model = init_model(
        width=cfg.width,
        n_hidden=cfg.n_hidden,
        in_dim=tasks[0].dim,
        n_classes=tasks[0].n_classes,
        seed=derive_seed(cfg.seed, 0),
    )
    mask_seed = derive_seed(cfg.seed, 1)

    snapshots, masks, stage_seconds = [], [], []
    for t, task in enumerate(tasks):
        started = time.perf_counter()
        if cfg.swap_heads and t > 0:
            _reinit_heads(model, task, derive_seed(cfg.seed, 3, t))
        mask = sample_mask(cfg.alpha, cfg.width, model.depth - 1, mask_seed, t)
        train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, 2, t))
        train_epochs(model, mask, task, train_cfg)
        model.task_id = t
        snapshots.append(model.copy())
        masks.append(mask)
        stage_seconds.append(time.perf_counter() - started)

    record = ExperimentRecord(
        config=cfg,
        snapshots=snapshots,
        masks=masks,
        gap_table=[],
        stage_seconds=stage_seconds,
        seed=cfg.seed,
    )
    for t in range(len(tasks)):
        for t_prime in range(t, len(tasks)):
            m_a = record.snapshots[t] if not cfg.swap_heads else inference_model(
                record, t, t)
            m_b = inference_model(record, t_prime, t)
            max_gap, mean_gap = output_gap(m_a, m_b, tasks[t], masks[t])
            record.gap_table.append(
                GapEntry(t=t + 1, t_prime=t_prime + 1,
                         max_gap=max_gap, mean_gap=mean_gap)
            )
    return record


def _mask_to_manifest(mask: ActiveRowMask) -> dict:
    return {
        "alpha": mask.alpha,
        "lengths": [len(r) for r in mask.rows],
        "bitmaps": [base64.b64encode(np.packbits(r).tobytes()).decode("ascii")
                    for r in mask.rows],
    }


def _mask_from_manifest(entry: dict) -> ActiveRowMask:
    rows = []
    for length, blob in zip(entry["lengths"], entry["bitmaps"]):
        bits = np.unpackbits(np.frombuffer(base64.b64decode(blob), dtype=np.uint8))
        rows.append(bits[:length].astype(bool))
    return ActiveRowMask(rows=rows, alpha=entry["alpha"])


def save_record(directory, record: ExperimentRecord) -> None:
    """Persist a record as snapshot files plus one JSON manifest."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snapshot_files = []
    for i, (snap, mask) in enumerate(zip(record.snapshots, record.masks)):
        name = f"snapshot_{i + 1:03d}.bin"
        save_snapshot(directory / name, snap, mask)
        snapshot_files.append(name)
    manifest = {
        "schema": RECORD_SCHEMA,
        "config": asdict(record.config),
        "seed": record.seed,
        "stage_seconds": record.stage_seconds,
        "gap_table": [asdict(g) for g in record.gap_table],
        "masks": [_mask_to_manifest(m) for m in record.masks],
        "snapshots": snapshot_files,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_record(directory) -> ExperimentRecord:
    from pathlib import Path

    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["schema"] != RECORD_SCHEMA:
        raise ValueError(f"unsupported record schema {manifest['schema']}")
    cfg_dict = dict(manifest["config"])
    cfg_dict["train"] = TrainConfig(**cfg_dict["train"])
    cfg = ProtocolConfig(**cfg_dict)
    snapshots, masks = [], []
    for name in manifest["snapshots"]:
        snap, mask = load_snapshot(directory / name)
        snapshots.append(snap)
        masks.append(mask)
    stored_masks = [_mask_from_manifest(m) for m in manifest["masks"]]
    if stored_masks:
        masks = stored_masks
    return ExperimentRecord(
        config=cfg,
        snapshots=snapshots,
        masks=masks,
        gap_table=[GapEntry(**g) for g in manifest["gap_table"]],
        stage_seconds=list(manifest["stage_seconds"]),
        seed=manifest["seed"],
    )
