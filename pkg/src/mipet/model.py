"""VAE networks with multiple invertible latent-to-latent units.

The encoder produces ``(mu, log_var)``; one reparameterised sample ``z`` is
pushed through every unit ``psi_i``. Each transformed latent is decoded by the
shared decoder and the reconstruction terms are averaged over units, while
the per-unit KL terms are summed, so ``k`` identical units act like a KL
weight of ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .autodiff import DTYPE, NonFiniteError, adam_step, check_finite, normal, seeded_init_
from .expfam import (
    EFHeads,
    GaussianHeads,
    calibration_loss,
    ef_kl,
    ef_similarity_loss,
    gaussian_kl,
)
from .matexp import IPEUnit

ENCODER_KINDS = ("conv64", "conv32", "mlp", "mlp4")
LOG_VAR_CLAMP = (-10.0, 10.0)

__all__ = [
    "ENCODER_KINDS",
    "LossBreakdown",
    "MipetModel",
    "build_networks",
    "gaussian_kl",
    "latent_traversal",
    "mipet_forward",
    "reparameterize",
    "sample_output",
    "train_step",
]


def build_networks(kind: str, input_shape: tuple[int, ...], n: int,
                   hidden: int | None = None) -> tuple[nn.Module, nn.Module]:
    """Encoder (to ``2n`` outputs) and decoder (to the flattened/NCHW input) pair.

    ``conv64`` follows the 64x64 layout: four 4x4 stride-2 convolutions
    (32, 32, 64, 64 channels), FC ``hidden``, FC ``2n``; the decoder mirrors it
    with transposed convolutions. ``conv32`` drops one stage for 32x32 input.
    ``mlp`` is a two-hidden-layer perceptron pair for flattened images and
    ``mlp4`` is the toy pair: a 4-layer perceptron encoder and a single affine
    decoder.
    """
    if kind not in ENCODER_KINDS:
        raise ValueError(f"encoder kind must be one of {ENCODER_KINDS}, got {kind!r}")
    dim = int(np.prod(input_shape))
    if kind in ("conv64", "conv32"):
        stages = 4 if kind == "conv64" else 3
        side = 64 if kind == "conv64" else 32
        if len(input_shape) not in (2, 3) or input_shape[-1] != side or input_shape[-2] != side:
            raise ValueError(f"{kind} expects {side}x{side} images, got shape {input_shape}")
        c = 1 if len(input_shape) == 2 else input_shape[0]
        hidden = 128 if hidden is None else hidden
        chans = [32, 32, 64, 64] if stages == 4 else [32, 32, 64]
        up = [64, 32, 32] if stages == 4 else [32, 32]
        enc: list[nn.Module] = [nn.Unflatten(1, (c, side, side))]
        prev = c
        for ch in chans:
            enc += [nn.Conv2d(prev, ch, 4, 2, 1, dtype=DTYPE), nn.ReLU()]
            prev = ch
        enc += [nn.Flatten(), nn.Linear(prev * 16, hidden, dtype=DTYPE), nn.ReLU(),
                nn.Linear(hidden, 2 * n, dtype=DTYPE)]
        dec: list[nn.Module] = [nn.Linear(n, hidden, dtype=DTYPE), nn.ReLU(),
                                nn.Linear(hidden, 64 * 16, dtype=DTYPE), nn.ReLU(),
                                nn.Unflatten(1, (64, 4, 4))]
        prev = 64
        for ch in up:
            dec += [nn.ConvTranspose2d(prev, ch, 4, 2, 1, dtype=DTYPE), nn.ReLU()]
            prev = ch
        dec += [nn.ConvTranspose2d(prev, c, 4, 2, 1, dtype=DTYPE), nn.Flatten()]
        return nn.Sequential(*enc), nn.Sequential(*dec)
    if kind == "mlp":
        hidden = 256 if hidden is None else hidden
        enc = nn.Sequential(
            nn.Linear(dim, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, 2 * n, dtype=DTYPE),
        )
        dec = nn.Sequential(
            nn.Linear(n, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
            nn.Linear(hidden, dim, dtype=DTYPE),
        )
        return enc, dec
    hidden = 64 if hidden is None else hidden
    enc = nn.Sequential(
        nn.Linear(dim, hidden, dtype=DTYPE), nn.ReLU(),
        nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
        nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
        nn.Linear(hidden, 2 * n, dtype=DTYPE),
    )
    return enc, nn.Linear(n, dim, dtype=DTYPE)


class MipetModel(nn.Module):
    """Encoder, shared decoder, ``k`` IPE units and their EF heads.

    ``k = 0`` is a plain (beta-)VAE. ``heads="gaussian"`` freezes the heads to
    the diagonal Gaussian family; ``kl="gaussian"`` replaces the family KL by
    the closed-form Gaussian KL of the encoder (the "without EF" ablation).
    """

    def __init__(self, input_shape, latent_dim: int = 10, k: int = 1, mode: str = "symmetric",
                 encoder: str = "mlp", hidden: int | None = None, beta: float = 1.0,
                 w_el: float = 1.0, w_cali: float = 1.0, mask_lambda: float = math.inf,
                 recon: str = "bernoulli", recon_sigma: float = 1.0, heads: str = "learned",
                 kl: str = "ef", kl_form: str = "bregman", freeze_units: bool = False,
                 unit_init_scale: float | None = None, seed: int = 0):
        super().__init__()
        if k < 0:
            raise ValueError("k must be >= 0")
        if recon not in ("bernoulli", "gaussian"):
            raise ValueError(f"recon must be 'bernoulli' or 'gaussian', got {recon!r}")
        if heads not in ("learned", "gaussian"):
            raise ValueError(f"heads must be 'learned' or 'gaussian', got {heads!r}")
        if kl not in ("ef", "gaussian"):
            raise ValueError(f"kl must be 'ef' or 'gaussian', got {kl!r}")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n = latent_dim
        self.k = k
        self.beta = beta
        self.w_el = w_el
        self.w_cali = w_cali
        self.recon_kind = recon
        self.recon_sigma = recon_sigma
        self.heads_kind = heads
        self.kl_kind = kl
        self.kl_form = kl_form
        self.encoder_kind = encoder
        self.encoder, self.decoder = build_networks(encoder, self.input_shape, latent_dim, hidden)
        seeded_init_(self.encoder, seed, "encoder")
        seeded_init_(self.decoder, seed, "decoder")
        self.units = nn.ModuleList(
            IPEUnit(latent_dim, mode, unit_init_scale, seed=seed, tag=f"unit{i}") for i in range(k)
        )
        if freeze_units:
            for u in self.units:
                u.generator.requires_grad_(False)
        head_cls = EFHeads if heads == "learned" else GaussianHeads
        self.heads = nn.ModuleList(
            head_cls(latent_dim, mask_lambda=mask_lambda, seed=seed, tag=f"heads{i}")
            for i in range(k)
        )

    # encoder side -------------------------------------------------------

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[1:].numel() != int(np.prod(self.input_shape)):
            raise ValueError(
                f"encode: input shape {tuple(x.shape[1:])} does not match model input {self.input_shape}"
            )
        h = self.encoder(x.reshape(x.shape[0], -1))
        mu, log_var = h[:, : self.n], h[:, self.n:]
        return mu, torch.clamp(log_var, *LOG_VAR_CLAMP)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Decoder output (Bernoulli logits or Gaussian means), flattened."""
        return self.decoder(z).reshape(z.shape[0], -1)

    def recon_loss(self, x: torch.Tensor, out: torch.Tensor) -> torch.Tensor:
        """Per-sample negative log-likelihood, summed over input dimensions."""
        x = torch.as_tensor(x, dtype=DTYPE).reshape(x.shape[0], -1)
        if self.recon_kind == "bernoulli":
            return F.binary_cross_entropy_with_logits(out, x, reduction="none").sum(-1)
        return 0.5 * ((out - x) ** 2).sum(-1) / self.recon_sigma ** 2

    def mean_output(self, out: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(out) if self.recon_kind == "bernoulli" else out

    def transformed_moments(self, w: torch.Tensor, mu: torch.Tensor, log_var: torch.Tensor):
        """Mean and diagonal variance of ``W z`` and of ``W eps`` for Gaussian heads."""
        var = torch.exp(log_var)
        mean_hat = mu @ w.T
        var_hat = var @ (w * w).T
        prior_var = (w * w).sum(1).expand_as(mean_hat)
        return mean_hat, var_hat, prior_var


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, noise) -> torch.Tensor:
    """``mu + exp(log_var / 2) * eps``.

    ``noise`` is either a tensor of standard-normal draws or an integer seed,
    in which case draws come from the ``(seed, "reparameterize")`` stream.
    """
    log_var = torch.clamp(log_var, *LOG_VAR_CLAMP)
    if not torch.is_tensor(noise):
        noise = normal(int(noise), "reparameterize", tuple(mu.shape))
    return mu + torch.exp(0.5 * log_var) * noise


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    kl: torch.Tensor
    el: torch.Tensor
    cali: torch.Tensor
    total: torch.Tensor
    weights: dict = field(default_factory=dict)
    per_unit: list = field(default_factory=list)

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "rec": float(self.rec.detach()),
            "kl": float(self.kl.detach()),
            "el": float(self.el.detach()),
            "cali": float(self.cali.detach()),
        }


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def mipet_forward(model: MipetModel, x, step_seed: int, prior_noise=None,
                  measure_aux: bool = True) -> LossBreakdown:
    """Compute every loss term for one batch.

    ``prior_noise`` may be a single ``(B, n)`` tensor shared by every unit or a
    list with one tensor per unit; by default each unit draws fresh
    ``eps ~ N(0, I)`` from the ``(step_seed, "prior/<i>")`` stream. The
    similarity and calibration terms are always evaluated when their weight is
    non-zero; with zero weight they are still reported (detached) when
    ``measure_aux`` is set.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    b = x.shape[0]
    mu, log_var = model.encode(x)
    z = reparameterize(mu, log_var, normal(step_seed, "reparameterize", (b, model.n)))

    if model.k == 0:
        rec = model.recon_loss(x, model.decode(z)).mean()
        kl = gaussian_kl(mu, log_var).mean()
        total = rec + model.beta * kl
        out = LossBreakdown(rec, kl, _zero(), _zero(), total,
                            {"beta": model.beta, "w_el": 0.0, "w_cali": 0.0})
        _check(out, step_seed)
        return out

    rec_terms, kl_terms, el_terms, cali_terms, per_unit = [], [], [], [], []
    for i, (unit, heads) in enumerate(zip(model.units, model.heads)):
        if prior_noise is None:
            eps = normal(step_seed, f"prior/{i}", (b, model.n))
        elif torch.is_tensor(prior_noise):
            eps = prior_noise
        else:
            eps = prior_noise[i]
        w = unit.matrix()
        z_hat = z @ w.T
        eps_hat = eps @ w.T
        rec_terms.append(model.recon_loss(x, model.decode(z_hat)).mean())

        if model.heads_kind == "gaussian":
            mean_hat, var_hat, prior_var = model.transformed_moments(w, mu, log_var)
            zero_mean = torch.zeros_like(mean_hat)

            def theta_fn(zh, eh, heads=heads, m=mean_hat, v=var_hat, pv=prior_var, zm=zero_mean):
                return heads.natural_params(zh, m, v), heads.natural_params(eh, zm, pv)
        else:
            def theta_fn(zh, eh, heads=heads):
                return heads.natural_params(zh), heads.natural_params(eh)

        theta_z, theta_eps = theta_fn(z_hat, eps_hat)
        kl_ef = ef_kl(theta_z, theta_eps, heads, form=model.kl_form)
        if model.kl_kind == "ef":
            kl_terms.append(kl_ef.mean())
        else:
            kl_terms.append(gaussian_kl(mu, log_var).mean())

        if model.w_el != 0 or measure_aux:
            el = ef_similarity_loss(z_hat, eps_hat, heads, theta_fn, kl_form=model.kl_form)
            el_terms.append(el if model.w_el != 0 else el.detach())
        if model.w_cali != 0 or measure_aux:
            cali = calibration_loss(mu, log_var, theta_z, theta_eps, heads, kl_form=model.kl_form)
            cali_terms.append(cali if model.w_cali != 0 else cali.detach())
        per_unit.append({"rec": float(rec_terms[-1].detach()), "kl": float(kl_terms[-1].detach())})

    rec = sum(rec_terms) / model.k
    kl = sum(kl_terms)
    el = sum(el_terms) if el_terms else _zero()
    cali = sum(cali_terms) if cali_terms else _zero()
    total = rec + model.beta * kl
    if model.w_el != 0:
        total = total + model.w_el * el
    if model.w_cali != 0:
        total = total + model.w_cali * cali
    out = LossBreakdown(rec, kl, el, cali, total,
                        {"beta": model.beta, "w_el": model.w_el, "w_cali": model.w_cali},
                        per_unit)
    _check(out, step_seed)
    return out


def _check(out: LossBreakdown, step: int) -> None:
    for name in ("rec", "kl", "el", "cali", "total"):
        check_finite(getattr(out, name), f"loss term {name}", step)


@torch.no_grad()
def sample_output(model: MipetModel, x, use_mean: bool = True, noise_seed: int = 0) -> torch.Tensor:
    """Average of the decoded outputs over units (probabilities for Bernoulli)."""
    mu, log_var = model.encode(torch.as_tensor(x, dtype=DTYPE))
    z = mu if use_mean else reparameterize(mu, log_var, noise_seed)
    return decode_latent(model, z)


@torch.no_grad()
def decode_latent(model: MipetModel, z: torch.Tensor) -> torch.Tensor:
    if model.k == 0:
        return model.mean_output(model.decode(z))
    outs = [model.mean_output(model.decode(z @ u.matrix().T)) for u in model.units]
    return sum(outs) / model.k


def train_step(model: MipetModel, store, batch, step_seed: int, lr: float = 4e-4,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0, measure_aux: bool = False) -> dict[str, float]:
    """One forward pass, one backward pass and one Adam update."""
    losses = mipet_forward(model, batch, step_seed, measure_aux=measure_aux)
    params = store.tensors()
    grads = torch.autograd.grad(losses.total, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(gnorm):
        raise NonFiniteError("gradient", step_seed)
    adam_step(store, grads, lr, beta1, beta2, eps, weight_decay)
    rec = losses.as_floats()
    rec["grad_norm"] = gnorm
    return rec


@torch.no_grad()
def latent_traversal(model: MipetModel, x, dim: int, values) -> list[np.ndarray]:
    """Decode copies of ``x``'s latent mean with coordinate ``dim`` set to each value."""
    if not 0 <= dim < model.n:
        raise ValueError(f"dim {dim} out of range for latent dimension {model.n}")
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape == model.input_shape or x.ndim == len(model.input_shape):
        x = x.unsqueeze(0)
    mu, _ = model.encode(x)
    out = []
    for v in values:
        z = mu.clone()
        z[:, dim] = float(v)
        out.append(decode_latent(model, z).reshape((-1, *model.input_shape)).numpy())
    return out
