"""Experiment sweeps and studies built on the training loop.

Every sweep cell is a pure function of ``(config, seed)``: cells may run in a
thread pool (``MIPET_THREADS``) and results are merged in submission order, so
the output does not depend on scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy import stats

from .autodiff import DTYPE
from .config import ExperimentConfig, apply_overrides
from .data import FactorDataset
from .metrics import METRICS, welch_ttest
from .model import mipet_forward
from .training import build_dataset, build_model, evaluate_model, posterior_samples, train_config

log = logging.getLogger(__name__)

MASK_LAMBDAS = (0.0, 0.5, 1.0, 1.5, 2.0, math.inf)
ABLATIONS = ("full", "w/o E", "w/o EF")
SWEEP_COLUMNS = ("sweep_axis", "seed", "metric", "value")
CATEGORIES = ("positive-significant", "positive-insignificant",
              "negative-insignificant", "negative-significant")


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MIPET_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class SweepRow:
    level: str
    seed: int
    metric: str
    value: float

    def as_list(self) -> list:
        return [self.level, self.seed, self.metric, repr(float(self.value))]


def level_name(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def run_cell(cfg: ExperimentConfig, dataset: FactorDataset | None = None) -> dict[str, float]:
    """Train one configuration and return its metric values."""
    result, dataset = train_config(cfg, dataset)
    values, _ = evaluate_model(result.model, dataset, cfg.eval, cfg.seed)
    return values


def run_sweep(base: ExperimentConfig, levels: Iterable, seeds: Iterable[int],
              make_config: Callable[[ExperimentConfig, object], ExperimentConfig],
              dataset: FactorDataset | None = None,
              cell_fn: Callable[[ExperimentConfig, FactorDataset | None], dict] = run_cell,
              ) -> tuple[list[SweepRow], list[dict]]:
    """Run every ``(level, seed)`` cell; a failing cell yields NaN rows and an error record."""
    levels, seeds = list(levels), list(seeds)
    if not levels:
        raise ValueError("sweep needs at least one level")
    if dataset is None and base.data.kind in ("minisprites", "dsprites", "npz"):
        dataset = build_dataset(base.data, base.seed)
    cells = [(lv, s, apply_overrides(make_config(base, lv), [f"seed={s}"])) for lv in levels for s in seeds]

    def work(cell):
        lv, s, cfg = cell
        try:
            return cell_fn(cfg, dataset), None
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.error("sweep cell %s seed %d failed: %s", level_name(lv), s, exc)
            return {m: math.nan for m in cfg.eval.metrics}, {
                "level": level_name(lv), "seed": s, "error": f"{type(exc).__name__}: {exc}"}

    with ThreadPoolExecutor(max_workers()) as pool:
        outcomes = list(pool.map(work, cells))
    rows, errors = [], []
    for (lv, s, cfg), (values, err) in zip(cells, outcomes):
        for metric in cfg.eval.metrics:
            rows.append(SweepRow(level_name(lv), s, metric, values[metric]))
        if err:
            errors.append(err)
    return rows, errors


def write_sweep_csv(rows: Iterable[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        return [SweepRow(r["sweep_axis"], int(r["seed"]), r["metric"], float(r["value"]))
                for r in csv.DictReader(fh)]


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value), ignoring NaNs."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def significance_category(diff: float, p: float, alpha: float = 0.05) -> str:
    sign = "positive" if diff >= 0 else "negative"
    return f"{sign}-{'significant' if p < alpha else 'insignificant'}"


def compare(baseline, treatment, alpha: float = 0.05) -> dict:
    """Mean difference, Welch p-value and significance category of two samples."""
    a = [x for x in baseline if not math.isnan(x)]
    b = [x for x in treatment if not math.isnan(x)]
    diff = (float(np.mean(b)) - float(np.mean(a))) if a and b else math.nan
    p = welch_ttest(a, b) if len(a) >= 2 and len(b) >= 2 else math.nan
    cat = significance_category(diff, p, alpha) if not math.isnan(p) else None
    return {"diff": diff, "p_value": p, "category": cat}


def summarize(rows: Iterable[SweepRow], baseline: str | None = None) -> dict:
    """``{level: {metric: {mean, std, n}}}`` plus Welch comparisons against ``baseline``."""
    rows = list(rows)
    grouped: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        grouped.setdefault(r.level, {}).setdefault(r.metric, []).append(r.value)
    levels = {}
    for lv, per_metric in grouped.items():
        levels[lv] = {}
        for m, vals in per_metric.items():
            mean, std = mean_std(vals)
            levels[lv][m] = {"mean": mean, "std": std, "n": len(vals)}
    out: dict = {"levels": levels}
    if baseline is not None and baseline in grouped:
        out["baseline"] = baseline
        out["comparisons"] = {
            lv: {m: compare(grouped[baseline].get(m, []), vals) for m, vals in per_metric.items()}
            for lv, per_metric in grouped.items() if lv != baseline
        }
    return out


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=True) + "\n")


# sweeps -----------------------------------------------------------------------


def unit_scaling_gap(base: ExperimentConfig, k: int, input_shape=None, batch: int = 32,
                     seed: int = 0) -> float:
    """``|total(k shared units, beta) - total(1 unit, k*beta)|`` on one random batch.

    All units share the first unit's transform and heads and see the same
    prior draw. The similarity and calibration weights are zeroed because
    only the ELBO terms scale with the number of units.
    """
    if input_shape is None:
        input_shape = (2,) if base.data.kind in ("beta", "dirichlet") else (base.data.resolution,) * 2
    zero_aux = ["model.w_el=0", "model.w_cali=0"]
    multi = build_model(apply_overrides(base, [f"model.k={k}", *zero_aux]).model, input_shape, seed)
    single = build_model(apply_overrides(base, ["model.k=1", *zero_aux,
                                                f"model.beta={base.model.beta * k!r}"]).model,
                         input_shape, seed)
    with torch.no_grad():
        single.encoder.load_state_dict(multi.encoder.state_dict())
        single.decoder.load_state_dict(multi.decoder.state_dict())
        for i in range(k):
            multi.units[i].load_state_dict(multi.units[0].state_dict())
            multi.heads[i].load_state_dict(multi.heads[0].state_dict())
        single.units[0].load_state_dict(multi.units[0].state_dict())
        single.heads[0].load_state_dict(multi.heads[0].state_dict())
    gen = np.random.default_rng(seed)
    x = (gen.random((batch, *input_shape)) < 0.2).astype(np.float64)
    eps = torch.as_tensor(gen.standard_normal((batch, multi.n)), dtype=DTYPE)
    a = mipet_forward(multi, x, seed, prior_noise=eps, measure_aux=False).total
    b = mipet_forward(single, x, seed, prior_noise=eps, measure_aux=False).total
    return abs(float(a.detach()) - float(b.detach()))


def run_ipe_count_sweep(base: ExperimentConfig, ks, seeds, dataset=None, check_identity: bool = True,
                        cell_fn=run_cell):
    ks = list(ks)
    if not ks:
        raise ValueError("ks must be non-empty")
    if check_identity:
        for k in ks:
            if k >= 1:
                gap = unit_scaling_gap(base, k)
                if gap > 1e-8:
                    raise AssertionError(f"unit-count identity violated for k={k}: gap {gap:.3e}")
    return run_sweep(base, ks, seeds, lambda c, k: apply_overrides(c, [f"model.k={k}"]), dataset,
                     cell_fn)


def run_mask_sweep(base: ExperimentConfig, lambdas=MASK_LAMBDAS, seeds=(0, 1, 2), dataset=None,
                   cell_fn=run_cell):
    return run_sweep(base, lambdas, seeds,
                     lambda c, lam: apply_overrides(c, [f"model.mask_lambda={level_name(float(lam))}"]),
                     dataset, cell_fn)


def ablation_config(base: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "full":
        return base
    if variant == "w/o E":
        return apply_overrides(base, ["model.mode=asymmetric"])
    if variant == "w/o EF":
        return apply_overrides(base, ["model.heads=gaussian", "model.kl=gaussian",
                                      "model.w_el=0", "model.w_cali=0"])
    raise ValueError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")


def run_ablation(base: ExperimentConfig, variants=ABLATIONS, seeds=(0, 1, 2), dataset=None,
                 cell_fn=run_cell):
    return run_sweep(base, variants, seeds, ablation_config, dataset, cell_fn)


def run_symmetry_benefit(base: ExperimentConfig, seeds, dataset=None, cell_fn=run_cell):
    """Fraction of paired ``(seed, metric)`` cells where the symmetric unit scores at least as well."""
    seeds = list(seeds)
    rows, errors = run_sweep(base, ("symmetric", "asymmetric"), seeds,
                             lambda c, m: apply_overrides(c, [f"model.mode={m}"]), dataset, cell_fn)
    by = {(r.level, r.seed, r.metric): r.value for r in rows}
    wins = total = 0
    for s in seeds:
        for m in base.eval.metrics:
            a, b = by[("symmetric", s, m)], by[("asymmetric", s, m)]
            if math.isnan(a) or math.isnan(b):
                continue
            total += 1
            wins += int(a >= b)
    ratio = wins / total if total else math.nan
    return ratio, rows, errors


# toy 2-D study ----------------------------------------------------------------


def toy_config(dist: str = "beta", seed: int = 0, epochs: int = 60, count: int = 5000,
               latent_dim: int = 2) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), [
        f"data.kind={dist}", f"data.count={count}", "model.encoder=mlp4",
        f"model.latent_dim={latent_dim}", "model.recon=gaussian", "model.recon_sigma=0.1",
        f"schedule.epochs={epochs}", "schedule.batch_size=256", f"seed={seed}",
        "optimizer.lr=1e-3", "optimizer.weight_decay=0",
    ])


TOY_MODELS = {
    "vae": ["model.k=0"],
    "mipet": ["model.k=1", "model.mask_lambda=1.0"],
    "mipet_nomask": ["model.k=1", "model.mask_lambda=inf"],
    "mipet_k2": ["model.k=2", "model.mask_lambda=1.0"],
}


def shape_stats(samples: np.ndarray) -> dict[str, float]:
    """Mean absolute skewness and excess kurtosis over the dimensions of a sample cloud."""
    return {
        "skew": float(np.mean(np.abs(stats.skew(samples, axis=0)))),
        "kurtosis": float(np.mean(stats.kurtosis(samples, axis=0))),
    }


def histogram_kl(a: np.ndarray, b: np.ndarray, bins: int = 20, smoothing: float = 1e-6) -> float:
    """Symmetrised KL, ``(KL(p||q) + KL(q||p)) / 2``, between two sample clouds.

    Both clouds are binned on a shared grid spanning their joint range; a small
    additive smoothing keeps empty bins finite.
    """
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    edges = [np.linspace(l, h if h > l else l + 1.0, bins + 1) for l, h in zip(lo, hi)]
    p, _ = np.histogramdd(a, bins=edges)
    q, _ = np.histogramdd(b, bins=edges)
    p = (p + smoothing) / (p + smoothing).sum()
    q = (q + smoothing) / (q + smoothing).sum()
    return float(0.5 * ((p * np.log(p / q)).sum() + (q * np.log(q / p)).sum()))


def run_toy2d(dist: str = "beta", seeds=(0, 1, 2), epochs: int = 60, count: int = 5000,
              out_dir=None, models=tuple(TOY_MODELS)) -> dict:
    """Train the toy models on 2-D data and measure the shape of their posterior clouds.

    Returns ``{model: {seed: stats}}``; the ``k = 2`` model also reports the
    histogram KL between its two units' clouds. With ``out_dir`` set, writes
    ``posterior_<dist>.csv`` with (input, posterior sample, reconstruction)
    triples and ``toy2d_<dist>.json`` with the statistics.
    """
    results: dict = {m: {} for m in models}
    dump_rows = []
    for seed in seeds:
        base = toy_config(dist, seed, epochs, count)
        dataset = build_dataset(base.data, seed)
        x = dataset.as_float()
        for name in models:
            cfg = apply_overrides(base, TOY_MODELS[name])
            result, _ = train_config(cfg, dataset)
            clouds = posterior_samples(result.model, x, seed)
            stats_ = shape_stats(clouds[0])
            if len(clouds) >= 2:
                stats_["unit_kl"] = histogram_kl(clouds[0], clouds[1])
            results[name][seed] = stats_
            if out_dir is not None:
                with torch.no_grad():
                    recon = result.model.mean_output(
                        result.model.decode(torch.as_tensor(clouds[0], dtype=DTYPE))).numpy()
                for i in range(len(x)):
                    dump_rows.append([name, seed, *map(repr, x[i]), *map(repr, map(float, clouds[0][i])),
                                      *map(repr, map(float, recon[i]))])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"posterior_{dist}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n = len(dump_rows[0]) - 2 if dump_rows else 6
            d = n // 3
            w.writerow(["model", "seed", *[f"x{i}" for i in range(d)], *[f"z{i}" for i in range(d)],
                        *[f"r{i}" for i in range(d)]])
            w.writerows(dump_rows)
        write_summary({m: {str(s): v for s, v in r.items()} for m, r in results.items()},
                      out_dir / f"toy2d_{dist}.json")
    return results


__all__ = [
    "ABLATIONS", "CATEGORIES", "MASK_LAMBDAS", "METRICS", "SweepRow", "ablation_config", "compare",
    "histogram_kl", "mean_std", "read_sweep_csv", "run_ablation", "run_cell", "run_ipe_count_sweep",
    "run_mask_sweep", "run_sweep", "run_symmetry_benefit", "run_toy2d", "shape_stats",
    "significance_category", "summarize", "toy_config", "unit_scaling_gap", "write_summary",
    "write_sweep_csv",
]
