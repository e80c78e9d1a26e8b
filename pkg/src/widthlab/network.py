"""Feed-forward model with per-task active-row masks and manual backprop.

The model is a chain of bias-free matrices A_1..A_L with ReLU between
layers and nothing after the last. Every layer except the last outputs W
rows and is maskable: an inactive row's pre- and post-activation entries
are exactly zero, it contributes nothing downstream, and its weight rows
receive exactly-zero gradients. That keeps inactive rows bit-frozen across
an entire training run, which the drift certificates rely on.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import TaskDataset
from .errors import NumericError

SNAPSHOT_MAGIC = b"WLSN"
SNAPSHOT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """Shape and activation of one layer; activation applies to its output."""

    in_dim: int
    out_dim: int
    activation: str = "relu"  # applied after this layer, except for the last layer
    lipschitz: float = 1.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ActiveRowMask:
    """Boolean activity per row for every maskable (non-final) layer."""

    rows: list[np.ndarray]  # one bool vector per layer 1..L-1
    alpha: float

    def active_counts(self) -> list[int]:
        return [int(r.sum()) for r in self.rows]


@dataclass
class ModelSnapshot:
    """Full weight state after training on one task."""

    layers: list[np.ndarray]
    specs: list[LayerSpec]
    width: int
    task_id: int = 0

    @property
    def depth(self) -> int:
        """Number of weight matrices."""
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].shape[0]

    def copy(self) -> "ModelSnapshot":
        return ModelSnapshot(
            layers=[a.copy() for a in self.layers],
            specs=list(self.specs),
            width=self.width,
            task_id=self.task_id,
        )


@dataclass
class ForwardTrace:
    """Per-layer inputs and masked pre-activations for one batch.

    fed[l] is what layer l consumed (fed[0] is the raw input batch); pre[l]
    is its masked pre-activation output; logits is pre[-1].
    """

    fed: list[np.ndarray]
    pre: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def full_mask(model: ModelSnapshot) -> ActiveRowMask:
    """All-active mask (dense computation)."""
    return ActiveRowMask(
        rows=[np.ones(a.shape[0], dtype=bool) for a in model.layers[:-1]],
        alpha=1.0,
    )


def init_model(
    width: int, n_hidden: int, in_dim: int, n_classes: int, seed: int
) -> ModelSnapshot:
    """Fresh model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights.

    ``n_hidden`` counts the width-W hidden layers, so the model holds
    n_hidden + 1 weight matrices.
    """
    if min(width, in_dim, n_classes) <= 0 or n_hidden < 0:
        raise ValueError("dimensions must be positive")
    dims = [in_dim] + [width] * n_hidden + [n_classes]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    layers, specs = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        last = i == len(dims) - 2
        specs.append(
            LayerSpec(fan_in, fan_out, activation="identity" if last else "relu")
        )
    return ModelSnapshot(layers=layers, specs=specs, width=width, task_id=0)


def _check_mask(model: ModelSnapshot, mask: ActiveRowMask | None) -> ActiveRowMask:
    if mask is None:
        return full_mask(model)
    if len(mask.rows) != model.depth - 1:
        raise ValueError(
            f"mask covers {len(mask.rows)} layers, model has {model.depth - 1} maskable"
        )
    for a, r in zip(model.layers[:-1], mask.rows):
        if a.shape[0] != len(r):
            raise ValueError("mask length differs from layer row count")
    return mask


def forward(
    model: ModelSnapshot, mask: ActiveRowMask | None, x: np.ndarray
) -> ForwardTrace:
    """Masked forward pass for a single input vector or an (n, d) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.in_dim:
        raise ValueError(
            f"input dim {batch.shape[1]} does not match model dim {model.in_dim}"
        )
    if not np.all(np.isfinite(batch)):
        raise ValueError("input contains non-finite entries")
    mask = _check_mask(model, mask)

    fed, pre = [batch], []
    current = batch
    for l, (a, spec) in enumerate(zip(model.layers, model.specs)):
        z = current @ a.T
        if l < model.depth - 1:
            z = np.where(mask.rows[l], z, 0.0)
        pre.append(z)
        if l < model.depth - 1:
            current = np.maximum(z, 0.0) if spec.activation == "relu" else z
            fed.append(current)
    if single:
        fed = [f[0] for f in fed]
        pre = [p[0] for p in pre]
    return ForwardTrace(fed=fed, pre=pre)


def loss_and_grads(
    model: ModelSnapshot,
    mask: ActiveRowMask | None,
    inputs: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and per-layer gradients through the masked forward.

    Softmax uses max-subtraction; gradient rows of inactive units are
    exactly zero.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError("batch must be a non-empty (n, d) array")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("labels out of range")
    mask = _check_mask(model, mask)
    n = len(inputs)

    trace = forward(model, mask, inputs)
    logits = trace.logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(picked)))
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss on batch of {n} "
            f"(logit range [{logits.min():.3g}, {logits.max():.3g}])"
        )

    grads: list[np.ndarray] = [np.empty(0)] * model.depth
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    for l in range(model.depth - 1, -1, -1):
        grads[l] = delta.T @ trace.fed[l]
        if l > 0:
            back = delta @ model.layers[l]
            if model.specs[l - 1].activation == "relu":
                back = np.where(trace.pre[l - 1] > 0.0, back, 0.0)
            delta = np.where(mask.rows[l - 1], back, 0.0)
    return loss, grads


def accuracy(
    model: ModelSnapshot, mask: ActiveRowMask | None, data: TaskDataset
) -> float:
    """Fraction of examples whose argmax logit equals the label.

    Ties resolve toward the lowest class index.
    """
    trace = forward(model, mask, data.inputs)
    predictions = np.argmax(trace.logits, axis=1)
    return float(np.mean(predictions == data.labels))


_ACT_CODE = {"relu": 0, "identity": 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def save_snapshot(
    path, model: ModelSnapshot, mask: ActiveRowMask | None = None
) -> None:
    """Write a model (and optionally its training mask) as versioned binary.

    Header, then row-major float64 little-endian layer data, then packed
    mask bitmaps. Round-trips are bit-exact.
    """
    parts = [SNAPSHOT_MAGIC, struct.pack("<HIII", SNAPSHOT_VERSION,
                                         model.depth, model.width, model.task_id)]
    for a, spec in zip(model.layers, model.specs):
        parts.append(
            struct.pack(
                "<IIBd", a.shape[0], a.shape[1], _ACT_CODE[spec.activation],
                spec.lipschitz,
            )
        )
    parts.append(struct.pack("<B", 1 if mask is not None else 0))
    if mask is not None:
        parts.append(struct.pack("<d", mask.alpha))
    for a in model.layers:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    if mask is not None:
        for r in mask.rows:
            parts.append(struct.pack("<I", len(r)))
            parts.append(np.packbits(r).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_snapshot(path) -> tuple[ModelSnapshot, ActiveRowMask | None]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    version, depth, width, task_id = struct.unpack_from("<HIII", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    offset = 4 + struct.calcsize("<HIII")
    shapes, specs = [], []
    for _ in range(depth):
        rows, cols, act, lip = struct.unpack_from("<IIBd", blob, offset)
        offset += struct.calcsize("<IIBd")
        shapes.append((rows, cols))
        specs.append(LayerSpec(cols, rows, activation=_CODE_ACT[act], lipschitz=lip))
    (has_mask,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    alpha = 1.0
    if has_mask:
        (alpha,) = struct.unpack_from("<d", blob, offset)
        offset += 8
    layers = []
    for rows, cols in shapes:
        count = rows * cols
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        layers.append(arr.reshape(rows, cols).astype(np.float64))
        offset += count * 8
    mask = None
    if has_mask:
        rows_list = []
        for _ in range(depth - 1):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            nbytes = (length + 7) // 8
            bits = np.unpackbits(
                np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset)
            )[:length].astype(bool)
            rows_list.append(bits)
            offset += nbytes
        mask = ActiveRowMask(rows=rows_list, alpha=alpha)
    return (
        ModelSnapshot(layers=layers, specs=specs, width=width, task_id=task_id),
        mask,
    )
