"""Deterministic training loop, dataset/model construction and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import metrics as M
from .autodiff import DTYPE, NonFiniteError, ParamStore, rng
from .config import DataConfig, EvalConfig, ExperimentConfig, ModelConfig, OptimizerConfig
from .data import (
    FactorDataset,
    MiniSpritesConfig,
    gen_minisprites,
    load_dsprites_npz,
    load_npz_dataset,
    toy_dataset,
)
from .model import MipetModel, reparameterize, train_step

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "step", "total", "rec", "kl", "el", "cali", "grad_norm")


def build_dataset(cfg: DataConfig, seed: int = 0) -> FactorDataset:
    if cfg.kind == "minisprites":
        ds = gen_minisprites(MiniSpritesConfig(resolution=cfg.resolution))
    elif cfg.kind == "dsprites":
        ds = load_dsprites_npz(cfg.path)
    elif cfg.kind == "npz":
        ds = load_npz_dataset(cfg.path)
    else:
        ds = toy_dataset(cfg.kind, cfg.count, seed, alpha=cfg.alpha, beta=cfg.beta)
    if cfg.subsample:
        ds = ds.subsample(cfg.subsample, seed)
    return ds


def build_model(cfg: ModelConfig, input_shape, seed: int = 0, **extra) -> MipetModel:
    return MipetModel(
        input_shape, latent_dim=cfg.latent_dim, k=cfg.k, mode=cfg.mode, encoder=cfg.encoder,
        hidden=cfg.hidden, beta=cfg.beta, w_el=cfg.w_el, w_cali=cfg.w_cali,
        mask_lambda=cfg.mask_lambda, recon=cfg.recon, recon_sigma=cfg.recon_sigma,
        heads=cfg.heads, kl=cfg.kl, seed=seed, **extra,
    )


def trainable_store(model: torch.nn.Module) -> ParamStore:
    return ParamStore((n, p) for n, p in model.named_parameters() if p.requires_grad)


def step_seed(seed: int, step: int) -> int:
    """Key for the noise drawn at one optimizer step of one run."""
    return (int(seed) << 32) | int(step)


def epoch_batches(count: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batch indices for one epoch (the last partial batch is kept)."""
    order = rng(seed, f"epoch/{epoch}").permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


@dataclass
class TrainResult:
    model: MipetModel
    store: ParamStore
    losses: list[dict] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.store.step_count


def fit(model: MipetModel, x: np.ndarray, epochs: int, batch_size: int, seed: int,
        optimizer: OptimizerConfig | None = None, store: ParamStore | None = None,
        max_steps: int | None = None,
        on_step: Callable[[dict, ParamStore], None] | None = None) -> TrainResult:
    """Train ``model`` on the rows of ``x`` with Adam.

    Batch order and all sampling noise are keyed on ``seed`` and the step
    index, so a rerun with the same inputs reproduces every loss exactly.
    """
    optimizer = optimizer or OptimizerConfig()
    store = store or trainable_store(model)
    data = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    result = TrainResult(model, store)
    for epoch in range(epochs):
        for idx in epoch_batches(len(data), batch_size, seed, epoch):
            if max_steps is not None and store.step_count >= max_steps:
                return result
            step = store.step_count
            try:
                rec = train_step(model, store, data[idx], step_seed(seed, step), optimizer.lr,
                                 optimizer.beta1, optimizer.beta2, optimizer.eps,
                                 optimizer.weight_decay)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.name, step) from exc
            row = {"epoch": epoch, "step": step, **rec}
            result.losses.append(row)
            if on_step is not None:
                on_step(row, store)
    return result


def train_config(cfg: ExperimentConfig, dataset: FactorDataset | None = None,
                 on_step=None) -> tuple[TrainResult, FactorDataset]:
    dataset = dataset if dataset is not None else build_dataset(cfg.data, cfg.seed)
    model = build_model(cfg.model, dataset.images.shape[1:], cfg.seed)
    result = fit(model, dataset.as_float(), cfg.schedule.epochs, cfg.schedule.batch_size,
                 cfg.seed, cfg.optimizer, max_steps=cfg.schedule.max_steps, on_step=on_step)
    return result, dataset


def losses_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], r["step"], *(repr(float(r[c])) for c in LOSS_COLUMNS[2:])])
    return buf.getvalue()


def read_losses_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


@torch.no_grad()
def encode_means(model: MipetModel, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        mu, _ = model.encode(torch.as_tensor(np.asarray(x[i:i + batch_size]), dtype=DTYPE))
        out.append(mu.numpy())
    return np.concatenate(out) if out else np.zeros((0, model.n))


def evaluate_model(model: MipetModel, dataset: FactorDataset, cfg: EvalConfig | None = None,
                   seed: int = 0) -> tuple[dict[str, float], M.DciMatrix | None]:
    """Disentanglement metrics of the encoder means over ``dataset``."""
    cfg = cfg or EvalConfig()
    if cfg.subsample:
        dataset = dataset.subsample(cfg.subsample, seed)
    if dataset.num_factors < 2 and any(m in cfg.metrics for m in ("fvm", "dci")):
        raise ValueError("metrics need a dataset with at least two ground-truth factors")
    codes = encode_means(model, dataset.as_float())
    table = M.RepresentationTable.from_dataset(codes, dataset)
    return M.evaluate(table, cfg.metrics, dataset, seed, cfg.votes, cfg.samples_per_vote)


def posterior_samples(model: MipetModel, x: np.ndarray, seed: int) -> list[np.ndarray]:
    """One transformed posterior sample per input for every unit (``z`` itself if ``k=0``)."""
    with torch.no_grad():
        mu, log_var = model.encode(torch.as_tensor(np.asarray(x), dtype=DTYPE))
        z = reparameterize(mu, log_var, seed)
        if model.k == 0:
            return [z.numpy()]
        return [(z @ u.matrix().T).numpy() for u in model.units]


def nan_safe_mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan
