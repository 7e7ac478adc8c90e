"""Matrix exponential and the invertible latent-to-latent transform built on it."""

from __future__ import annotations

import csv
import math
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, rng

MODES = ("symmetric", "asymmetric", "linear")
FAMILIES = ("E_S", "E_M", "M_n")


class MatrixExpError(ArithmeticError):
    """The truncated series did not reach the requested tolerance."""

    def __init__(self, residual: float, terms: int):
        self.residual = residual
        self.terms = terms
        super().__init__(
            f"matrix_exp: series term norm {residual:.3e} still above tolerance "
            f"after {terms} terms"
        )


def _check_square(a: torch.Tensor, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {tuple(a.shape)}")


def symmetrize(m: torch.Tensor) -> torch.Tensor:
    _check_square(m, "symmetrize")
    return 0.5 * (m + m.T)


def matrix_exp(a: torch.Tensor, tol: float = 1e-12, max_terms: int = 40) -> torch.Tensor:
    """Differentiable ``e^a`` by scaling and squaring a truncated Taylor series.

    The matrix is scaled by ``2^-s`` with ``s = max(0, ceil(log2 ||a||_inf) + 1)``,
    so the scaled norm is at most 1/2; series terms are added until a term's
    infinity norm drops below ``tol``, then the result is squared ``s`` times.

    An exactly symmetric input gets an exactly symmetric output: rounding in
    the matrix products would otherwise leave an asymmetry that grows with
    the entries, so the result is replaced by ``(E + E^T)/2``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = torch.as_tensor(a, dtype=DTYPE)
    _check_square(a, "matrix_exp")
    n = a.shape[0]
    norm = float(a.detach().abs().sum(dim=1).max()) if n else 0.0
    s = max(0, math.ceil(math.log2(norm)) + 1) if norm > 0 else 0
    scaled = a / (2.0 ** s)
    result = torch.eye(n, dtype=DTYPE)
    term = torch.eye(n, dtype=DTYPE)
    residual = float("inf")
    for k in range(1, max_terms + 1):
        term = term @ scaled / k
        result = result + term
        residual = float(term.detach().abs().sum(dim=1).max())
        if residual < tol:
            break
    else:
        raise MatrixExpError(residual, max_terms)
    for _ in range(s):
        result = result @ result
    if n and torch.equal(a.detach(), a.detach().T):
        result = 0.5 * (result + result.T)
    return result


class IPEUnit(nn.Module):
    """One invertible latent-to-latent map ``z -> e^G z``.

    ``mode="symmetric"`` uses ``G = (M + M^T)/2``, ``"asymmetric"`` uses the raw
    generator ``M`` and ``"linear"`` multiplies by ``M`` without exponentiating
    (not invertible in general; only for probes and ablations).
    """

    def __init__(self, n: int, mode: str = "symmetric", init_scale: float | None = None,
                 seed: int = 0, tag: str = "ipe"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.n = n
        self.mode = mode
        std = math.sqrt(0.01 / n) if init_scale is None else init_scale
        init = rng(seed, f"init/{tag}").standard_normal((n, n)) * std
        self.generator = nn.Parameter(torch.from_numpy(init))

    def effective_generator(self) -> torch.Tensor:
        if self.mode == "symmetric":
            return symmetrize(self.generator)
        return self.generator

    def matrix(self) -> torch.Tensor:
        """The matrix actually applied to latent vectors."""
        if self.mode == "linear":
            return self.generator
        return matrix_exp(self.effective_generator())

    def inverse_matrix(self) -> torch.Tensor:
        if self.mode == "linear":
            raise ValueError("linear mode is not guaranteed invertible; ipe_invert unsupported")
        return matrix_exp(-self.effective_generator())

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return ipe_apply(self, z)

    def extra_repr(self) -> str:
        return f"n={self.n}, mode={self.mode}"


def _check_width(unit: IPEUnit, z: torch.Tensor) -> None:
    if z.shape[-1] != unit.n:
        raise ValueError(f"latent width {z.shape[-1]} does not match unit dimension {unit.n}")


def ipe_apply(unit: IPEUnit, z: torch.Tensor) -> torch.Tensor:
    """Transform a batch of row vectors: ``z_hat[b] = W @ z[b]``."""
    _check_width(unit, z)
    return z @ unit.matrix().T


def ipe_invert(unit: IPEUnit, z_hat: torch.Tensor) -> torch.Tensor:
    _check_width(unit, z_hat)
    return z_hat @ unit.inverse_matrix().T


def equivariance_deviation(unit: IPEUnit, g, z) -> float:
    """Mean relative gap ``||psi(g z) - g psi(z)|| / ||g psi(z)||`` over the batch."""
    g = torch.as_tensor(g, dtype=DTYPE)
    z = torch.as_tensor(z, dtype=DTYPE)
    _check_square(g, "equivariance_deviation")
    with torch.no_grad():
        lhs = ipe_apply(unit, z @ g.T)
        rhs = ipe_apply(unit, z) @ g.T
        num = torch.linalg.vector_norm(lhs - rhs, dim=-1)
        den = torch.linalg.vector_norm(rhs, dim=-1) + 1e-12
    return float((num / den).mean())


def _relative_commutator(a: np.ndarray, b: np.ndarray) -> float:
    ab = a @ b
    return float(np.linalg.norm(ab - b @ a) / np.linalg.norm(ab))


def _asymmetry(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - a.T) / np.linalg.norm(a))


def _family_map(family: str, gen: np.ndarray) -> np.ndarray:
    if family == "E_S":
        return matrix_exp(symmetrize(torch.from_numpy(gen))).numpy()
    if family == "E_M":
        return matrix_exp(torch.from_numpy(gen)).numpy()
    return gen


def commutation_probe(n: int, trials: int, seed: int = 0,
                      shared_direction: bool = False) -> list[dict]:
    """Sample map pairs from each family and record commutation/asymmetry statistics.

    Generators are entrywise standard normal. ``E_S`` maps are ``e^{sym(G)}``,
    ``E_M`` maps are ``e^G`` and ``M_n`` maps are ``G`` itself. With
    ``shared_direction=True`` both maps of a pair are exponentials along the
    same generator (``a*G`` and ``b*G``), a one-parameter subgroup.

    Returns one record per (family, trial) with keys family, trial, comm_dev, asym.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    gen = rng(seed, f"commutation_probe/n={n}")
    rows = []
    for t in range(trials):
        g1 = gen.standard_normal((n, n))
        g2 = gen.standard_normal((n, n))
        if shared_direction:
            a, b = gen.uniform(-1, 1, size=2)
            g1, g2 = a * g1, b * g1
        for fam in FAMILIES:
            m1, m2 = _family_map(fam, g1), _family_map(fam, g2)
            rows.append({
                "family": fam,
                "trial": t,
                "comm_dev": _relative_commutator(m1, m2),
                "asym": _asymmetry(m1),
            })
    return rows


def summarize_probe(rows: Iterable[dict]) -> dict[str, dict[str, float]]:
    """Mean, median and quartiles of each statistic, per family."""
    rows = list(rows)
    out = {}
    for fam in FAMILIES:
        sub = [r for r in rows if r["family"] == fam]
        if not sub:
            continue
        stats = {}
        for key in ("comm_dev", "asym"):
            v = np.array([r[key] for r in sub])
            stats[f"{key}_mean"] = float(v.mean())
            stats[f"{key}_median"] = float(np.median(v))
            stats[f"{key}_q25"] = float(np.quantile(v, 0.25))
            stats[f"{key}_q75"] = float(np.quantile(v, 0.75))
            stats[f"{key}_max"] = float(v.max())
        out[fam] = stats
    return out


def write_probe_csv(rows: Iterable[dict], path) -> None:
    rows = list(rows)
    fields = list(rows[0]) if rows else ["family", "trial", "comm_dev", "asym"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
