"""Measured constants and runtime certificates for the forgetting bounds.

Everything here is measurement-first: constants (drift ratios, spectral
ratio tables, input norms, layer cushions, activation contractions) come
from trained snapshots and real data, and the bound evaluators are plain
arithmetic over those measurements. The deterministic perturbation
certificate is the one result asserted to hold on every probe point; the
expectation-style bounds are evaluated and reported with their bound/gap
ratios, since their norm products usually make them numerically loose.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .continual import ExperimentRecord, derive_seed, sample_mask
from .dataset import TaskDataset
from .errors import DegenerateLayerError
from .linalg import frobenius_norm, spectral_norm
from .network import ActiveRowMask, ModelSnapshot, forward
from .optim import train_epochs

DEGENERATE_NORM = 1e-12


# ---------------------------------------------------------------------------
# drift measurements and the power-law fit


@dataclass
class DriftObservation:
    """Relative weight movement of one layer across one task boundary."""

    width: int
    alpha: float
    layer: int  # 1-based
    task: int  # 1-based: movement from task t to t+1
    drift: float
    active_count: int


@dataclass
class DriftFit:
    gamma: float
    beta: float
    residual: float
    n_points: int
    log_log_r: float


def measure_drift(record: ExperimentRecord, t: int) -> list[DriftObservation]:
    """Per-maskable-layer relative drift between snapshots t and t+1.

    The numerator is the Frobenius norm of the weight difference on the
    rows active for task t+1; the denominator is the spectral norm of the
    earlier layer restricted to those same rows.
    """
    if not 1 <= t < record.n_tasks:
        raise ValueError(f"need snapshots {t} and {t + 1}")
    earlier = record.snapshots[t - 1]
    later = record.snapshots[t]
    mask_next = record.masks[t]
    obs = []
    for l0, rows in enumerate(mask_next.rows):
        idx = np.flatnonzero(rows)
        sub_earlier = earlier.layers[l0][idx]
        sub_later = later.layers[l0][idx]
        denom = spectral_norm(sub_earlier)
        if denom < DEGENERATE_NORM:
            raise DegenerateLayerError(
                f"layer {l0 + 1} active submatrix has ~zero spectral norm"
            )
        obs.append(
            DriftObservation(
                width=record.config.width,
                alpha=record.config.alpha,
                layer=l0 + 1,
                task=t,
                drift=frobenius_norm(sub_later - sub_earlier) / denom,
                active_count=len(idx),
            )
        )
    return obs


def fit_power_law(points: list[tuple[float, float]]) -> DriftFit:
    """Least squares for drift = gamma * count^(-beta) in log-log space."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    counts = np.array([p[0] for p in points], dtype=np.float64)
    drifts = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(counts <= 0) or np.any(drifts <= 0):
        raise ValueError("counts and drifts must be positive (log taken)")
    if len(np.unique(counts)) < 2:
        raise ValueError("need at least 2 distinct active counts")
    x = np.log(counts)
    y = np.log(drifts)
    slope, intercept = np.polyfit(x, y, 1)
    predicted = intercept + slope * x
    residual = float(np.sum((y - predicted) ** 2))
    if np.std(y) == 0.0:
        r = 0.0
    else:
        r = float(np.corrcoef(x, y)[0, 1])
    return DriftFit(
        gamma=float(np.exp(intercept)),
        beta=float(-slope),
        residual=residual,
        n_points=len(points),
        log_log_r=r,
    )


# ---------------------------------------------------------------------------
# mask-intersection statistics


@dataclass
class IntersectionStats:
    empirical_mean: float
    expected: float
    stderr: float
    trials: int


def intersection_stats(
    alpha: float, width: int, trials: int, seed: int
) -> IntersectionStats:
    """Monte-Carlo mean size of the overlap between two fresh row masks."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x17E2]))
    counts = np.empty(trials, dtype=np.int64)
    chunk = max(1, min(trials, 4_000_000 // max(width, 1)))
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        first = rng.random((size, width)) < alpha
        second = rng.random((size, width)) < alpha
        counts[done : done + size] = np.sum(first & second, axis=1)
        done += size
    stderr = float(counts.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return IntersectionStats(
        empirical_mean=float(counts.mean()),
        expected=alpha * alpha * width,
        stderr=stderr,
        trials=trials,
    )


# ---------------------------------------------------------------------------
# cross-task spectral ratios


@dataclass
class SpectralRatioTable:
    """ratios[(i, j, layer)] = |A_j[rows_i]| / |A_i[rows_i]| (1-based indices)."""

    ratios: dict[tuple[int, int, int], float]
    lambda_bar: float


def _active_rows(record: ExperimentRecord, task: int, l0: int) -> np.ndarray:
    """Active row indices of 1-based ``task`` at 0-based layer ``l0``."""
    snap = record.snapshots[task - 1]
    if l0 < snap.depth - 1:
        return np.flatnonzero(record.masks[task - 1].rows[l0])
    return np.arange(snap.layers[l0].shape[0])


def spectral_ratio_table(
    record: ExperimentRecord, t: int, t_prime: int
) -> SpectralRatioTable:
    """Spectral-norm ratios for every task pair in [t, t'] and every layer."""
    if not 1 <= t <= t_prime <= record.n_tasks:
        raise ValueError(f"bad task range ({t}, {t_prime})")
    depth = record.snapshots[0].depth
    ratios = {}
    for i in range(t, t_prime + 1):
        for l0 in range(depth):
            idx = _active_rows(record, i, l0)
            denom = spectral_norm(record.snapshots[i - 1].layers[l0][idx])
            if denom < DEGENERATE_NORM:
                raise DegenerateLayerError(
                    f"task {i} layer {l0 + 1} active submatrix has ~zero norm"
                )
            for j in range(t, t_prime + 1):
                num = spectral_norm(record.snapshots[j - 1].layers[l0][idx])
                ratios[(i, j, l0 + 1)] = num / denom
    return SpectralRatioTable(ratios=ratios, lambda_bar=max(ratios.values()))


def max_input_norm(task: TaskDataset) -> float:
    """Largest l2 norm among the task's input vectors."""
    if task.n == 0:
        raise ValueError("empty task")
    return float(np.linalg.norm(task.inputs, axis=1).max())


def max_output_norm(
    model: ModelSnapshot, mask: ActiveRowMask | None, task: TaskDataset
) -> float:
    """Largest l2 norm among the model's outputs on the task."""
    logits = forward(model, mask, task.inputs).logits
    return float(np.linalg.norm(logits, axis=1).max())


# ---------------------------------------------------------------------------
# data-dependent layer constants


def _active_submatrices(
    model: ModelSnapshot, mask: ActiveRowMask | None
) -> list[np.ndarray]:
    """Per-layer active-row submatrices; the final layer is taken whole."""
    subs = []
    for l0, a in enumerate(model.layers):
        if mask is not None and l0 < model.depth - 1:
            subs.append(a[np.flatnonzero(mask.rows[l0])])
        else:
            subs.append(a)
    return subs


def layer_cushion(
    model: ModelSnapshot, mask: ActiveRowMask | None, task: TaskDataset
) -> np.ndarray:
    """Smallest per-layer constants with |A||u| <= mu * |A u| over the data.

    u is whatever the layer actually consumes in the masked network.
    Probe points where |A u| < 1e-12 are skipped; a layer with every point
    skipped raises.
    """
    trace = forward(model, mask, task.inputs)
    subs = _active_submatrices(model, mask)
    mus = np.empty(model.depth)
    for l0 in range(model.depth):
        norm_a = spectral_norm(subs[l0])
        fed_norms = np.linalg.norm(trace.fed[l0], axis=1)
        out_norms = np.linalg.norm(trace.pre[l0], axis=1)
        valid = out_norms >= DEGENERATE_NORM
        if not np.any(valid):
            raise DegenerateLayerError(f"layer {l0 + 1}: all probe outputs ~zero")
        mus[l0] = float(np.max(norm_a * fed_norms[valid] / out_norms[valid]))
    return mus


def activation_contraction(
    model: ModelSnapshot, mask: ActiveRowMask | None, task: TaskDataset
) -> np.ndarray:
    """Smallest per-layer constants with |x| <= c * |phi(x)| over the data.

    The first layer consumes the raw input unchanged, so its constant is
    exactly 1. Probes whose activation output is ~zero are skipped.
    """
    trace = forward(model, mask, task.inputs)
    cs = np.empty(model.depth)
    cs[0] = 1.0
    for l0 in range(1, model.depth):
        pre_norms = np.linalg.norm(trace.pre[l0 - 1], axis=1)
        post_norms = np.linalg.norm(trace.fed[l0], axis=1)
        valid = post_norms >= DEGENERATE_NORM
        if not np.any(valid):
            raise DegenerateLayerError(f"layer {l0 + 1}: all activations ~zero")
        cs[l0] = float(np.max(pre_norms[valid] / post_norms[valid]))
    return cs


@dataclass
class NoiseStabilityConstants:
    mu: np.ndarray  # layer cushions
    c: np.ndarray  # activation contractions
    lipschitz: np.ndarray
    output_norm: float  # Gamma: max |M(x)| on the probe data

    @property
    def kappa(self) -> np.ndarray:
        return self.lipschitz * self.c * self.mu


def measure_noise_stability_constants(
    model: ModelSnapshot, mask: ActiveRowMask | None, task: TaskDataset
) -> NoiseStabilityConstants:
    return NoiseStabilityConstants(
        mu=layer_cushion(model, mask, task),
        c=activation_contraction(model, mask, task),
        lipschitz=np.array([s.lipschitz for s in model.specs]),
        output_norm=max_output_norm(model, mask, task),
    )


# ---------------------------------------------------------------------------
# bound evaluators


@dataclass
class BoundInputs:
    """Measured scalars feeding the sequential-training gap bounds."""

    t: int
    t_prime: int
    lambda_bar: float
    chi: float  # max input norm on task t
    spectral_norms: list[float]  # full-matrix norms of snapshot t's layers
    lipschitz: list[float]
    gamma: float
    beta: float
    alpha: float
    width: int

    def __post_init__(self):
        if self.t_prime < self.t:
            raise ValueError("t_prime must be >= t")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if len(self.spectral_norms) != len(self.lipschitz):
            raise ValueError("per-layer lists disagree on depth")

    @property
    def depth(self) -> int:
        return len(self.spectral_norms)

    @property
    def alpha_exponent(self) -> float:
        return (1.0 - 2.0 * self.beta) / 2.0


def expected_gap_bound(inputs: BoundInputs) -> float:
    """Product-form bound on the expected output gap between snapshots.

    Scales linearly in the task separation, exponentially in depth, and as
    width^(-beta) * alpha^((1-2beta)/2). A nonpositive alpha exponent
    (beta >= 1/2) is still evaluated; callers flag it in reports.
    """
    l = inputs.depth
    norm_product = 1.0
    for lip, norm in zip(inputs.lipschitz, inputs.spectral_norms):
        norm_product *= lip * norm
    return (
        (inputs.t_prime - inputs.t)
        * l
        * 2.0**l
        * inputs.lambda_bar
        * inputs.chi
        * norm_product
        * inputs.gamma
        * inputs.width ** (-inputs.beta)
        * inputs.alpha**inputs.alpha_exponent
    )


def stability_amplifier(
    kappa: np.ndarray, mu: np.ndarray, task_gap: float, gamma: float,
    lambda_bar: float,
) -> float:
    """The eta factor of the noise-stability bound."""
    terms = kappa + kappa * task_gap * gamma * lambda_bar * mu
    return float(np.prod(terms) * np.sum(kappa))


def noise_stability_bound(
    inputs: BoundInputs, constants: NoiseStabilityConstants
) -> float:
    """Gap bound that swaps weight-norm products for data-dependent cushions."""
    task_gap = float(inputs.t_prime - inputs.t)
    eta = stability_amplifier(
        constants.kappa, constants.mu, task_gap, inputs.gamma, inputs.lambda_bar
    )
    return (
        constants.output_norm
        * task_gap
        * inputs.gamma
        * inputs.lambda_bar
        * inputs.width ** (-inputs.beta)
        * inputs.alpha**inputs.alpha_exponent
        * eta
    )


# ---------------------------------------------------------------------------
# deterministic perturbation certificate


@dataclass
class CertificateReport:
    """Deterministic per-probe output-gap certificate between two snapshots."""

    max_gap: float
    mean_gap: float
    bound: float  # certificate at the largest probe norm
    layer_norms: list[float]
    perturbation_norms: list[float]
    holds: bool
    premise_ok: bool  # every |U_l| <= |A_l|; the certificate's validity premise
    n_probes: int


def perturbation_certificate(
    m_a: ModelSnapshot,
    m_b: ModelSnapshot,
    mask: ActiveRowMask | None,
    probe: TaskDataset,
) -> CertificateReport:
    """Check the measured output gap against the layerwise product bound.

    For each probe x the certificate is
        2^L * |x| * prod_l(L_l |A_l|) * sum_l(|U_l| / |A_l|)
    with A_l the first model's active-row submatrices and U_l the measured
    weight differences on those rows. ``holds`` requires every probe point
    to satisfy its own inequality, not just the max.
    """
    if [a.shape for a in m_a.layers] != [b.shape for b in m_b.layers]:
        raise ValueError("snapshots have different architectures")
    subs_a = _active_submatrices(m_a, mask)
    subs_b = _active_submatrices(m_b, mask)
    layer_norms, pert_norms = [], []
    for sub_a, sub_b in zip(subs_a, subs_b):
        norm_a = spectral_norm(sub_a)
        if norm_a < DEGENERATE_NORM:
            raise DegenerateLayerError("layer with ~zero norm cannot be certified")
        layer_norms.append(norm_a)
        pert_norms.append(spectral_norm(sub_a - sub_b))

    depth = m_a.depth
    lip_norm_product = 1.0
    for spec, norm_a in zip(m_a.specs, layer_norms):
        lip_norm_product *= spec.lipschitz * norm_a
    ratio_sum = sum(u / a for u, a in zip(pert_norms, layer_norms))
    factor = 2.0**depth * lip_norm_product * ratio_sum

    logits_a = forward(m_a, mask, probe.inputs).logits
    logits_b = forward(m_b, mask, probe.inputs).logits
    gaps = np.linalg.norm(logits_a - logits_b, axis=1)
    input_norms = np.linalg.norm(probe.inputs, axis=1)
    bounds = factor * input_norms
    return CertificateReport(
        max_gap=float(gaps.max()),
        mean_gap=float(gaps.mean()),
        bound=float(bounds.max()),
        layer_norms=layer_norms,
        perturbation_norms=pert_norms,
        holds=bool(np.all(gaps <= bounds)),
        premise_ok=all(u <= a for u, a in zip(pert_norms, layer_norms)),
        n_probes=probe.n,
    )


# ---------------------------------------------------------------------------
# mask-expectation check for the per-layer drift ratio bound


def layer_drift_ratio(
    m_a: ModelSnapshot, m_b: ModelSnapshot, mask: ActiveRowMask
) -> list[float]:
    """Per-maskable-layer |A_a[rows] - A_b[rows]| / |A_a[rows]| (spectral)."""
    ratios = []
    for l0, rows in enumerate(mask.rows):
        idx = np.flatnonzero(rows)
        sub_a = m_a.layers[l0][idx]
        denom = spectral_norm(sub_a)
        if denom < DEGENERATE_NORM:
            raise DegenerateLayerError(f"layer {l0 + 1} active submatrix ~zero")
        ratios.append(spectral_norm(sub_a - m_b.layers[l0][idx]) / denom)
    return ratios


@dataclass
class LayerDriftCheck:
    layer: int
    mean_ratio: float
    mean_lambda: float
    bound: float
    holds: bool


def expected_layer_drift_check(
    record: ExperimentRecord,
    tasks: list[TaskDataset],
    t: int,
    fit: DriftFit,
    n_seeds: int = 30,
    seed: int = 0,
) -> list[LayerDriftCheck]:
    """Average the layer drift ratio over reseeded masks and compare bounds.

    Retrains task t+1 from snapshot t under ``n_seeds`` fresh masks; the
    left side averages the measured spectral drift ratio on task t's active
    rows, the right side is lambda * gamma * W^(-beta) * alpha^((1-2beta)/2)
    with (gamma, beta) from the supplied fit. The outcome is reported, not
    asserted: the fit has to upper-envelope the drift cloud for it to hold.
    """
    if not 1 <= t < record.n_tasks:
        raise ValueError(f"need snapshots {t} and {t + 1}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    cfg = record.config
    base = record.snapshots[t - 1]
    mask_t = record.masks[t - 1]
    n_layers = len(mask_t.rows)
    ratio_sums = np.zeros(n_layers)
    lambda_sums = np.zeros(n_layers)
    for s in range(n_seeds):
        mask_next = sample_mask(
            cfg.alpha, cfg.width, base.depth - 1, derive_seed(seed, 0xD21F, s), t
        )
        model = base.copy()
        train_cfg = replace(cfg.train, seed=derive_seed(seed, 0x7A11, s))
        train_epochs(model, mask_next, tasks[t], train_cfg)
        ratios = layer_drift_ratio(base, model, mask_t)
        for l0 in range(n_layers):
            idx = np.flatnonzero(mask_t.rows[l0])
            denom = spectral_norm(base.layers[l0][idx])
            lam = spectral_norm(model.layers[l0][idx]) / denom
            ratio_sums[l0] += ratios[l0]
            lambda_sums[l0] += lam
    checks = []
    scale = (
        fit.gamma
        * cfg.width ** (-fit.beta)
        * cfg.alpha ** ((1.0 - 2.0 * fit.beta) / 2.0)
    )
    for l0 in range(n_layers):
        mean_ratio = ratio_sums[l0] / n_seeds
        mean_lambda = lambda_sums[l0] / n_seeds
        bound = mean_lambda * scale
        checks.append(
            LayerDriftCheck(
                layer=l0 + 1,
                mean_ratio=float(mean_ratio),
                mean_lambda=float(mean_lambda),
                bound=float(bound),
                holds=bool(mean_ratio <= bound),
            )
        )
    return checks


# ---------------------------------------------------------------------------
# assembled report


@dataclass
class BoundReport:
    """Every measured constant plus the evaluated bounds for one task pair."""

    t: int
    t_prime: int
    width: int
    alpha: float
    lambda_bar: float
    chi: float
    gamma: float | None
    beta: float | None
    spectral_norms: list[float]
    lipschitz: list[float]
    mu: list[float]
    c: list[float]
    kappa: list[float]
    eta: float | None
    output_norm: float
    max_gap: float
    mean_gap: float
    expected_gap_bound: float | None
    noise_stability_bound: float | None
    certificate_bound: float
    certificate_holds: bool
    certificate_premise_ok: bool
    alpha_exponent_nonpositive: bool | None

    def holds_flags(self) -> dict:
        flags = {"certificate": self.certificate_holds}
        if self.expected_gap_bound is not None:
            flags["expected_gap"] = self.expected_gap_bound >= self.max_gap
        if self.noise_stability_bound is not None:
            flags["noise_stability"] = self.noise_stability_bound >= self.max_gap
        return flags

    def to_json(self) -> dict:
        ratio = lambda b: (b / self.max_gap if self.max_gap > 0 else math.inf)
        return {
            "t": self.t,
            "t_prime": self.t_prime,
            "width": self.width,
            "alpha": self.alpha,
            "lambda_bar": self.lambda_bar,
            "chi": self.chi,
            "gamma": self.gamma,
            "beta": self.beta,
            "spectral_norms": self.spectral_norms,
            "lipschitz": self.lipschitz,
            "mu": self.mu,
            "c": self.c,
            "kappa": self.kappa,
            "eta": self.eta,
            "Gamma": self.output_norm,
            "max_gap": self.max_gap,
            "mean_gap": self.mean_gap,
            "expected_gap_bound": self.expected_gap_bound,
            "noise_stability_bound": self.noise_stability_bound,
            "certificate_bound": self.certificate_bound,
            "holds": self.holds_flags(),
            "bound_to_gap_ratios": {
                name: ratio(value)
                for name, value in (
                    ("expected_gap", self.expected_gap_bound),
                    ("noise_stability", self.noise_stability_bound),
                    ("certificate", self.certificate_bound),
                )
                if value is not None
            },
            "alpha_exponent_nonpositive": self.alpha_exponent_nonpositive,
            "certificate_premise_ok": self.certificate_premise_ok,
        }


def build_bound_report(
    record: ExperimentRecord,
    tasks: list[TaskDataset],
    t: int,
    t_prime: int,
    fit: DriftFit | None,
) -> BoundReport:
    """Measure all constants on snapshot t and evaluate every bound.

    Without a drift fit the expectation-style bounds are left unset and
    only the deterministic certificate is evaluated.
    """
    table = spectral_ratio_table(record, t, t_prime)
    snap = record.snapshots[t - 1]
    mask = record.masks[t - 1]
    probe = tasks[t - 1]
    constants = measure_noise_stability_constants(snap, mask, probe)
    cert = perturbation_certificate(snap, record.snapshots[t_prime - 1], mask, probe)
    gap = record.gap(t, t_prime) if record.gap_table else None
    max_gap = gap.max_gap if gap else cert.max_gap
    mean_gap = gap.mean_gap if gap else cert.mean_gap

    chi = max_input_norm(probe)
    spectral_norms = [spectral_norm(a) for a in snap.layers]
    lipschitz = [s.lipschitz for s in snap.specs]

    gamma = beta = None
    gap_bound = ns_bound = eta = None
    exponent_flag = None
    if fit is not None:
        gamma, beta = fit.gamma, fit.beta
        inputs = BoundInputs(
            t=t,
            t_prime=t_prime,
            lambda_bar=table.lambda_bar,
            chi=chi,
            spectral_norms=spectral_norms,
            lipschitz=lipschitz,
            gamma=gamma,
            beta=beta,
            alpha=record.config.alpha,
            width=record.config.width,
        )
        gap_bound = expected_gap_bound(inputs)
        ns_bound = noise_stability_bound(inputs, constants)
        eta = stability_amplifier(
            constants.kappa, constants.mu, float(t_prime - t), gamma,
            table.lambda_bar,
        )
        exponent_flag = inputs.alpha_exponent <= 0.0
    return BoundReport(
        t=t,
        t_prime=t_prime,
        width=record.config.width,
        alpha=record.config.alpha,
        lambda_bar=table.lambda_bar,
        chi=chi,
        gamma=gamma,
        beta=beta,
        spectral_norms=spectral_norms,
        lipschitz=lipschitz,
        mu=[float(v) for v in constants.mu],
        c=[float(v) for v in constants.c],
        kappa=[float(v) for v in constants.kappa],
        eta=eta,
        output_norm=constants.output_norm,
        max_gap=max_gap,
        mean_gap=mean_gap,
        expected_gap_bound=gap_bound,
        noise_stability_bound=ns_bound,
        certificate_bound=cert.bound,
        certificate_holds=cert.holds,
        certificate_premise_ok=cert.premise_ok,
        alpha_exponent_nonpositive=exponent_flag,
    )
