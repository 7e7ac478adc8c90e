"""Disentanglement metrics (FVM, MIG, SAP, DCI) and Welch's t-test.

All scores are reported on a 0-100 scale.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.linear_model import Lasso, Ridge
from sklearn.metrics import mutual_info_score

from .autodiff import rng
from .data import FactorDataset, fixed_factor_batch

log = logging.getLogger(__name__)

METRICS = ("fvm", "mig", "sap", "dci")


@dataclass
class RepresentationTable:
    codes: np.ndarray
    factors: np.ndarray
    factor_cardinalities: list[int]
    factor_names: list[str] | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.factors = np.asarray(self.factors, dtype=np.int64)
        if self.codes.ndim != 2 or self.factors.ndim != 2:
            raise ValueError("codes and factors must be 2-D")
        if len(self.codes) != len(self.factors):
            raise ValueError("codes and factors must have aligned rows")
        if self.factors.shape[1] != len(self.factor_cardinalities):
            raise ValueError("one cardinality per factor column required")
        if (self.factors >= np.asarray(self.factor_cardinalities)).any() or (self.factors < 0).any():
            raise ValueError("factor value outside its cardinality")

    @classmethod
    def from_dataset(cls, codes, dataset: FactorDataset) -> "RepresentationTable":
        return cls(codes, dataset.factors, list(dataset.cardinalities), list(dataset.names))


@dataclass
class DciMatrix:
    importance: np.ndarray
    row_max: np.ndarray
    row_std: np.ndarray


def _codes_fn(encoder, dataset: FactorDataset) -> Callable[[np.ndarray], np.ndarray]:
    if callable(encoder):
        return lambda idx: np.asarray(encoder(dataset.as_float(idx)), dtype=np.float64)
    codes = np.asarray(encoder, dtype=np.float64)
    if len(codes) != len(dataset):
        raise ValueError("precomputed codes must align with the dataset rows")
    return lambda idx: codes[idx]


def fvm(encoder, dataset: FactorDataset, votes: int = 800, samples_per_vote: int = 100,
        seed: int = 0, eval_votes: int | None = None, global_samples: int = 10000,
        collapse_threshold: float = 0.05) -> float:
    """Factor-VAE metric.

    ``encoder`` is a callable mapping a float image batch to codes, or an array
    of codes aligned with ``dataset``. Each vote fixes one factor at a random
    value, encodes ``samples_per_vote`` samples and records the latent
    dimension with the smallest variance after scaling by the global std.
    A majority-vote classifier (dimension -> factor) is fit on ``votes`` votes
    and scored on ``eval_votes`` fresh ones (default ``votes // 2``).
    """
    codes_of = _codes_fn(encoder, dataset)
    gen = rng(seed, "fvm")
    n_global = min(global_samples, len(dataset))
    global_codes = codes_of(gen.choice(len(dataset), size=n_global, replace=False))
    scale = global_codes.std(axis=0)
    active = scale >= collapse_threshold
    if not active.any():
        raise ValueError("fvm: every latent dimension is collapsed")
    n_dims = global_codes.shape[1]
    n_factors = dataset.num_factors
    eval_votes = votes // 2 if eval_votes is None else eval_votes

    def one_vote(v: int) -> tuple[int, int]:
        f = int(gen.integers(n_factors))
        idx, _, _ = fixed_factor_batch(dataset, f, seed * 1_000_003 + v, samples_per_vote)
        var = (codes_of(idx)[:, active] / scale[active]).var(axis=0)
        dim = int(np.flatnonzero(active)[np.argmin(var)])
        return dim, f

    counts = np.zeros((n_dims, n_factors), dtype=np.int64)
    for v in range(votes):
        d, f = one_vote(v)
        counts[d, f] += 1
    classifier = counts.argmax(axis=1)
    if eval_votes <= 0:
        return 100.0 * counts.max(axis=1).sum() / votes
    correct = 0
    for v in range(votes, votes + eval_votes):
        d, f = one_vote(v)
        correct += int(classifier[d] == f)
    return 100.0 * correct / eval_votes


def _discretize(codes: np.ndarray, bins: int) -> np.ndarray:
    out = np.zeros(codes.shape, dtype=np.int64)
    for d in range(codes.shape[1]):
        col = codes[:, d]
        lo, hi = col.min(), col.max()
        if hi > lo:
            edges = np.linspace(lo, hi, bins + 1)[1:-1]
            out[:, d] = np.digitize(col, edges)
    return out


def mutual_info_matrix(table: RepresentationTable, bins: int = 20) -> np.ndarray:
    """Histogram estimate of ``I(code_d; factor_f)`` in nats, shape ``(n, F)``."""
    disc = _discretize(table.codes, bins)
    n, nf = disc.shape[1], table.factors.shape[1]
    mi = np.zeros((n, nf))
    for d in range(n):
        for f in range(nf):
            mi[d, f] = mutual_info_score(table.factors[:, f], disc[:, d])
    return mi


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _top_gap(column: np.ndarray) -> float:
    s = np.sort(column)[::-1]
    return float(s[0] - (s[1] if len(s) > 1 else 0.0))


def mig(table: RepresentationTable, bins: int = 20) -> float:
    """Mutual information gap, averaged over factors with non-zero entropy."""
    mi = mutual_info_matrix(table, bins)
    gaps = []
    for f in range(mi.shape[1]):
        h = _entropy(table.factors[:, f])
        if h <= 0:
            continue
        gaps.append(_top_gap(mi[:, f]) / h)
    if not gaps:
        raise ValueError("mig: every factor is constant")
    return 100.0 * float(np.mean(gaps))


def sap(table: RepresentationTable) -> float:
    """Separated attribute predictability with 1-D linear-regression R^2 scores."""
    codes, factors = table.codes, table.factors.astype(np.float64)
    gaps = []
    for f in range(factors.shape[1]):
        y = factors[:, f]
        if y.var() == 0:
            log.warning("sap: factor %d has zero variance; skipped", f)
            continue
        scores = np.zeros(codes.shape[1])
        for d in range(codes.shape[1]):
            x = codes[:, d]
            if x.var() == 0:
                continue
            r = np.corrcoef(x, y)[0, 1]
            scores[d] = r * r
        gaps.append(_top_gap(scores))
    if not gaps:
        raise ValueError("sap: every factor is constant")
    return 100.0 * float(np.mean(gaps))


def importance_matrix(table: RepresentationTable, method: str = "gbt", l1_strength: float = 0.01,
                      seed: int = 0, n_estimators: int = 50) -> np.ndarray:
    """Raw ``(n, F)`` importance of each code dimension for predicting each factor.

    ``method="gbt"`` uses impurity importances of a gradient-boosted regressor
    per factor; ``method="lasso"`` uses absolute L1-regularised linear
    coefficients on standardised codes and targets (ridge when the lasso
    zeroes every coefficient).
    """
    codes = table.codes
    std = codes.std(axis=0)
    x = (codes - codes.mean(axis=0)) / np.where(std > 0, std, 1.0)
    n, nf = codes.shape[1], table.factors.shape[1]
    imp = np.zeros((n, nf))
    for f in range(nf):
        y = table.factors[:, f].astype(np.float64)
        if y.var() == 0:
            continue
        if method == "gbt":
            model = GradientBoostingRegressor(n_estimators=n_estimators, max_depth=3,
                                              random_state=seed)
            model.fit(x, y)
            imp[:, f] = model.feature_importances_
        elif method == "lasso":
            yz = (y - y.mean()) / y.std()
            coef = Lasso(alpha=l1_strength, fit_intercept=False).fit(x, yz).coef_
            if not np.any(coef):
                log.warning("dci: lasso zeroed all coefficients for factor %d; ridge fallback", f)
                coef = Ridge(alpha=1.0, fit_intercept=False).fit(x, yz).coef_
            imp[:, f] = np.abs(coef)
        else:
            raise ValueError(f"unknown importance method {method!r}")
    return imp


def dci_from_importance(importance: np.ndarray) -> tuple[float, DciMatrix]:
    imp = np.asarray(importance, dtype=np.float64)
    nf = imp.shape[1]
    colsum = imp.sum(axis=0)
    imp = imp / np.where(colsum > 0, colsum, 1.0)
    row_mass = imp.sum(axis=1)
    matrix = DciMatrix(imp, imp.max(axis=1), imp.std(axis=1))
    if row_mass.sum() == 0 or nf < 2:
        return 0.0, matrix
    p = imp / np.where(row_mass > 0, row_mass, 1.0)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1) / math.log(nf)
    disent = 1.0 - ent
    score = float((disent * row_mass).sum() / row_mass.sum())
    return 100.0 * score, matrix


def dci(table: RepresentationTable, l1_strength: float = 0.01, method: str = "gbt",
        seed: int = 0) -> tuple[float, DciMatrix]:
    """DCI disentanglement score and the column-normalised importance matrix."""
    return dci_from_importance(importance_matrix(table, method, l1_strength, seed))


def welch_ttest(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance t-test."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("welch_ttest needs at least two samples per group")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    if va + vb == 0:
        return 1.0 if diff == 0 else 0.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


def evaluate(table: RepresentationTable, metrics=METRICS, dataset: FactorDataset | None = None,
             seed: int = 0, votes: int = 800, samples_per_vote: int = 100,
             dci_method: str = "gbt") -> tuple[dict[str, float], DciMatrix | None]:
    """Run the requested metrics on a representation table."""
    out: dict[str, float] = {}
    matrix = None
    for name in metrics:
        if name == "fvm":
            if dataset is None:
                dataset = FactorDataset(np.zeros((len(table.codes), 1)), table.factors,
                                        table.factor_names or [f"f{i}" for i in range(len(table.factor_cardinalities))],
                                        table.factor_cardinalities)
            out["fvm"] = fvm(table.codes, dataset, votes, samples_per_vote, seed)
        elif name == "mig":
            out["mig"] = mig(table)
        elif name == "sap":
            out["sap"] = sap(table)
        elif name == "dci":
            out["dci"], matrix = dci(table, method=dci_method, seed=seed)
        else:
            raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")
    return out, matrix


def write_metrics_csv(path, values: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in values.items():
            w.writerow([k, repr(float(v))])


def read_metrics_csv(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def write_dci_csv(path, matrix: DciMatrix, factor_names=None) -> None:
    imp = matrix.importance
    names = factor_names or [f"factor{j}" for j in range(imp.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", *names, "row_max", "row_std"])
        for d in range(imp.shape[0]):
            w.writerow([f"z{d}", *(repr(float(v)) for v in imp[d]),
                        repr(float(matrix.row_max[d])), repr(float(matrix.row_std[d]))])
