"""Downstream evaluation: linear predictor, AUROC, stratified bootstrap, MI selection."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .extraction import FeatureMatrix, program_column_name
from .generation import FeatureRegistry

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PredictorSpec:
    l2_strength: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-8


@dataclass
class LinearModel:
    column_names: list[str]
    column_provenance: list[dict]
    medians: np.ndarray
    indicator_columns: np.ndarray  # indices of feature columns that get a missingness indicator
    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    intercept: float
    final_loss: float
    iterations: int
    converged: bool


def _design(model: LinearModel, values: np.ndarray) -> np.ndarray:
    missing = np.isnan(values)
    filled = np.where(missing, model.medians, values)
    indicators = missing[:, model.indicator_columns].astype(float)
    return np.hstack([filled, indicators])


def _objective(X, y, w, b, l2):
    z = X @ w + b
    # -[y log p + (1-y) log(1-p)] computed stably
    nll = -np.sum(y * log_expit(z) + (1 - y) * log_expit(-z))
    return nll + 0.5 * l2 * float(w @ w)


def train(matrix: FeatureMatrix, labels, spec: PredictorSpec = PredictorSpec(), seed: int = 0) -> LinearModel:
    """L2-regularized logistic regression fitted by damped Newton steps.

    Imputation medians, indicator columns and standardization are fitted on
    the rows given here only. ``seed`` is recorded for interface symmetry;
    the fit itself is deterministic.
    """
    y = np.asarray(labels, dtype=float)
    if y.shape[0] != matrix.shape[0]:
        raise ValueError("labels and matrix rows differ in length")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels must contain both classes")
    values = matrix.values
    missing = np.isnan(values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        medians = np.nanmedian(values, axis=0) if values.shape[1] else np.zeros(0)
    medians = np.where(np.isnan(medians), 0.0, medians)
    model = LinearModel(
        column_names=matrix.names,
        column_provenance=[dict(c.provenance) for c in matrix.columns],
        medians=medians,
        indicator_columns=np.flatnonzero(missing.any(axis=0)),
        means=np.zeros(0),
        scales=np.zeros(0),
        weights=np.zeros(0),
        intercept=0.0,
        final_loss=float("nan"),
        iterations=0,
        converged=False,
    )
    raw = _design(model, values)
    model.means = raw.mean(axis=0)
    sd = raw.std(axis=0)
    model.scales = np.where(sd > 0, sd, 1.0)
    X = (raw - model.means) / model.scales

    n, d = X.shape
    w = np.zeros(d)
    b = float(np.log(y.mean() / (1 - y.mean())))
    l2 = spec.l2_strength
    loss = _objective(X, y, w, b, l2)
    converged = False
    it = 0
    for it in range(1, spec.max_iterations + 1):
        p = expit(X @ w + b)
        r = p - y
        grad = np.concatenate([[r.sum()], X.T @ r + l2 * w])
        s = p * (1 - p)
        Xa = np.hstack([np.ones((n, 1)), X])
        H = (Xa * s[:, None]).T @ Xa
        H[1:, 1:] += l2 * np.eye(d)
        H[0, 0] += 1e-10
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            b_new, w_new = b - t * step[0], w - t * step[1:]
            new_loss = _objective(X, y, w_new, b_new, l2)
            if new_loss <= loss + 1e-12 or t < 1e-8:
                break
            t *= 0.5
        b, w = b_new, w_new
        decrease = loss - new_loss
        loss = new_loss
        if np.max(np.abs(t * step)) < spec.tolerance or decrease < spec.tolerance * max(1.0, abs(loss)):
            converged = True
            break
    if not converged:
        warnings.warn(f"logistic fit did not converge in {spec.max_iterations} iterations", ConvergenceWarning)
    model.weights, model.intercept = w, b
    model.final_loss, model.iterations, model.converged = float(loss), it, converged
    log.debug("trained linear model: d=%d loss=%.6g iterations=%d", d, loss, it)
    return model


def predict(model: LinearModel, matrix: FeatureMatrix) -> np.ndarray:
    """Positive-class probabilities; columns are matched to training by name and provenance."""
    have = {c.name: dict(c.provenance) for c in matrix.columns}
    want = dict(zip(model.column_names, model.column_provenance))
    missing = [n for n in model.column_names if n not in have]
    extra = [n for n in have if n not in want]
    changed = [n for n in model.column_names if n in have and have[n] != want[n]]
    if missing or extra or changed:
        raise ValueError(
            f"column mismatch: missing={missing} extra={extra} provenance-changed={changed}"
        )
    values = matrix.select_columns(model.column_names).values if matrix.names != model.column_names else matrix.values
    X = (_design(model, values) - model.means) / model.scales
    return expit(X @ model.weights + model.intercept)


# ----------------------------------------------------------------- metrics


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.sum() == 0 or y.sum() == y.size:
        raise ValueError("AUROC needs both classes present")
    return y


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=float)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def stratified_resamples(labels, n_boot: int, seed: int) -> Iterator[np.ndarray]:
    """Index arrays drawing |pos| positives and |neg| negatives with replacement.

    Resample k uses its own spawned seed, so results do not depend on how the
    resamples are scheduled.
    """
    y = np.asarray(labels).astype(int)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    for child in np.random.SeedSequence(seed).spawn(n_boot):
        rng = np.random.default_rng(child)
        yield np.concatenate([rng.choice(pos, size=pos.size, replace=True), rng.choice(neg, size=neg.size, replace=True)])


def bootstrap_aurocs(scores, labels, n_boot: int = 1000, seed: int = 0, workers: int = 1) -> np.ndarray:
    y = _check_binary(labels)
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    s = np.asarray(scores, dtype=float)
    resamples = stratified_resamples(y, n_boot, seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(lambda idx: auroc(s[idx], y[idx]), resamples)))
    return np.array([auroc(s[idx], y[idx]) for idx in resamples])


def bootstrap_ci(scores, labels, n_boot: int = 1000, seed: int = 0, workers: int = 1) -> tuple[float, float]:
    """Percentile 95% interval from the 2.5th and 97.5th bootstrap percentiles."""
    stats = bootstrap_aurocs(scores, labels, n_boot, seed, workers)
    lower, upper = np.percentile(stats, [2.5, 97.5])
    return float(lower), float(upper)


def equal_frequency_bins(column, n_bins: int = 10) -> np.ndarray:
    """Bin codes 0..k-1 by order statistics; masked (NaN) cells get the code k."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    x = np.asarray(column, dtype=float)
    nan = np.isnan(x)
    codes = np.full(x.shape, n_bins, dtype=int)
    observed = x[~nan]
    if observed.size:
        edges = np.unique(np.quantile(observed, np.arange(1, n_bins) / n_bins, method="inverted_cdf"))
        codes[~nan] = np.searchsorted(edges, observed, side="left")
    return codes


def mutual_information(column, labels, n_bins: int = 10) -> float:
    """Plug-in MI (nats) between the binned column and a binary label."""
    codes = equal_frequency_bins(column, n_bins)
    y = np.asarray(labels).astype(int)
    joint = np.zeros((n_bins + 1, 2))
    np.add.at(joint, (codes, y), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def prompt_groups(registry: FeatureRegistry) -> list[list]:
    """Valid programs grouped by originating prompt call, in registry order."""
    groups: dict[tuple, list] = {}
    for p in registry.valid():
        groups.setdefault((p.round_index, p.prompt_hash), []).append(p)
    return list(groups.values())


def select_best_of_b(registry: FeatureRegistry, matrix: FeatureMatrix, labels, n_bins: int = 10) -> FeatureRegistry:
    """Keep the highest-MI program of each prompt group (first wins ties)."""
    names = set(matrix.names)
    chosen = []
    for group in prompt_groups(registry):
        best, best_mi = None, -1.0
        for p in group:
            name = program_column_name(p)
            if name not in names:
                raise ValueError(f"matrix has no column for program {p.id}")
            mi = mutual_information(matrix.column(name), labels, n_bins)
            if mi > best_mi:
                best, best_mi = p, mi
        chosen.append(best)
    return registry.subset(chosen)


def first_of_b(registry: FeatureRegistry) -> FeatureRegistry:
    """Single-sample ablation: keep candidate 0 of each prompt when it is valid."""
    return registry.subset([p for p in registry.valid() if p.candidate_index == 0])


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class EvalReport:
    method: str
    auroc: float
    ci_lower: float
    ci_upper: float
    n_boot: int
    seed: int
    n_train: int = 0
    n_test: int = 0
    n_features: int = 0

    @property
    def half_width(self) -> float:
        return (self.ci_upper - self.ci_lower) / 2.0

    def to_row(self) -> dict:
        return {**asdict(self), "half_width": self.half_width}


REPORT_FIELDS = ("method", "auroc", "ci_lower", "ci_upper", "half_width", "n_train", "n_test", "n_features", "n_boot", "seed")


def evaluate_method(
    name: str,
    train_matrix: FeatureMatrix,
    test_matrix: FeatureMatrix,
    y_train,
    y_test,
    spec: PredictorSpec = PredictorSpec(),
    n_boot: int = 1000,
    seed: int = 0,
) -> EvalReport:
    model = train(train_matrix, y_train, spec, seed)
    scores = predict(model, test_matrix)
    lower, upper = bootstrap_ci(scores, y_test, n_boot, seed)
    return EvalReport(
        name, auroc(scores, y_test), lower, upper, n_boot, seed, len(y_train), len(y_test), train_matrix.shape[1]
    )


def evaluate_pipeline(
    y_train,
    y_test,
    matrices_by_method: Mapping[str, tuple[FeatureMatrix, FeatureMatrix]],
    spec: PredictorSpec = PredictorSpec(),
    n_boot: int = 1000,
    seed: int = 0,
) -> list[EvalReport]:
    """Fit and score every method on one shared split."""
    rows_train = rows_test = None
    reports = []
    for name, (tr, te) in matrices_by_method.items():
        if rows_train is None:
            rows_train, rows_test = tr.patient_ids, te.patient_ids
        elif tr.patient_ids != rows_train or te.patient_ids != rows_test:
            raise ValueError(f"method {name!r} does not share the common split/row order")
        reports.append(evaluate_method(name, tr, te, y_train, y_test, spec, n_boot, seed))
    return reports


def format_table(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.to_row()
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def format_summary(reports: Sequence[EvalReport]) -> str:
    width = max((len(r.method) for r in reports), default=6)
    lines = [f"{'method':<{width}}  AUROC   ±half-width  [95% CI]           d"]
    for r in reports:
        lines.append(
            f"{r.method:<{width}}  {r.auroc:.4f}  ±{r.half_width:.4f}     [{r.ci_lower:.4f}, {r.ci_upper:.4f}]  {r.n_features}"
        )
    return "\n".join(lines) + "\n"
