"""Exponential-family conversion heads and losses.

Each latent-to-latent unit owns a set of heads: a natural-parameter generator,
learnable sufficient statistics ``T`` and a learnable log-normalizer ``A``
(whose weights pass through the semantic mask), plus the evidence matrix
``nu`` and a Lagrange multiplier. The base measure is taken as zero
throughout; it never depends on the natural parameters.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .autodiff import DTYPE, gradnorm_sq, seeded_init_


def semantic_mask(w: torch.Tensor, lam: float) -> torch.Tensor:
    """Binary mask keeping entries with ``|w| >= mean|w| - lam * std|w|``.

    Statistics are over all entries (population std). ``lam = inf`` disables
    masking. The mask is returned detached: it is a constant for
    differentiation.
    """
    w = torch.as_tensor(w, dtype=DTYPE).detach()
    if math.isinf(lam):
        return torch.ones_like(w)
    a = w.abs()
    thresh = a.mean() - lam * a.std(unbiased=False)
    return (a >= thresh).to(w.dtype)


class MaskedLinear(nn.Linear):
    """Affine layer whose weight is multiplied by its own semantic mask.

    With ``nonneg=True`` the layer uses ``|W|`` so that stacking it on a convex
    activation keeps the output convex in the input.
    """

    def __init__(self, in_features: int, out_features: int, mask_lambda: float = math.inf,
                 nonneg: bool = False):
        super().__init__(in_features, out_features, dtype=DTYPE)
        self.mask_lambda = mask_lambda
        self.nonneg = nonneg

    def effective_weight(self) -> torch.Tensor:
        w = self.weight.abs() if self.nonneg else self.weight
        if math.isinf(self.mask_lambda):
            return w
        return w * semantic_mask(self.weight, self.mask_lambda)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden, dtype=DTYPE), nn.Softplus(), nn.Linear(hidden, n_out, dtype=DTYPE)
    )


class EFHeads(nn.Module):
    """Learned exponential-family heads for one unit.

    ``npg`` maps a latent vector to natural parameters, ``t_net`` maps it to
    sufficient statistics and ``a_net`` maps natural parameters to the scalar
    log-normalizer. Two affine layers with softplus keep ``A`` smooth enough to
    differentiate three times (the similarity loss differentiates the KL,
    which already contains ``grad A``). The output layer of ``a_net`` has
    non-negative weights, so ``A`` is convex like every log-normalizer and the
    Bregman KL below is never negative.
    """

    kind = "learned"

    def __init__(self, n: int, d: int | None = None, hidden: int | None = None,
                 mask_lambda: float = math.inf, seed: int = 0, tag: str = "ef",
                 zero_init: bool = False):
        super().__init__()
        d = n if d is None else d
        hidden = 2 * n if hidden is None else hidden
        self.n, self.d = n, d
        self.npg = _mlp(n, hidden, d)
        self.t_net = _mlp(n, hidden, d)
        self.a_net = nn.Sequential(
            MaskedLinear(d, hidden, mask_lambda), nn.Softplus(),
            MaskedLinear(hidden, 1, mask_lambda, nonneg=True),
        )
        self.nu = nn.Parameter(0.1 * torch.eye(d, dtype=DTYPE))
        self.lam = nn.Parameter(torch.tensor(1.0, dtype=DTYPE))
        seeded_init_(self, seed, tag, zero=zero_init)

    @property
    def mask_lambda(self) -> float:
        return self.a_net[0].mask_lambda

    def natural_params(self, samples: torch.Tensor, mean=None, var=None) -> torch.Tensor:
        return self.npg(samples)

    def sufficient_stats(self, x: torch.Tensor) -> torch.Tensor:
        return self.t_net(x)

    def log_normalizer(self, theta: torch.Tensor) -> torch.Tensor:
        return self.a_net(theta).squeeze(-1)

    def masks(self) -> list[torch.Tensor]:
        return [semantic_mask(layer.weight, layer.mask_lambda)
                for layer in self.a_net if isinstance(layer, MaskedLinear)]


class GaussianHeads(nn.Module):
    """Heads frozen to the diagonal Gaussian family.

    ``T(x) = (x, x^2)`` per dimension and ``A`` is the Gaussian log-normalizer,
    so natural parameters are ``(mu / var, -1 / (2 var))`` computed from the
    moments handed in by the caller rather than from samples.
    """

    kind = "gaussian"

    def __init__(self, n: int, **_):
        super().__init__()
        self.n, self.d = n, 2 * n
        self.nu = nn.Parameter(0.1 * torch.eye(2 * n, dtype=DTYPE))
        self.lam = nn.Parameter(torch.tensor(1.0, dtype=DTYPE))

    @staticmethod
    def to_natural(mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
        return torch.cat([mean / var, -0.5 / var], dim=-1)

    def natural_params(self, samples: torch.Tensor, mean=None, var=None) -> torch.Tensor:
        if mean is None or var is None:
            raise ValueError("Gaussian heads need the distribution's mean and variance")
        mean = torch.as_tensor(mean, dtype=DTYPE).expand_as(samples)
        var = torch.as_tensor(var, dtype=DTYPE).expand_as(samples)
        return self.to_natural(mean, var)

    def sufficient_stats(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, x * x], dim=-1)

    def log_normalizer(self, theta: torch.Tensor) -> torch.Tensor:
        t1, t2 = theta[..., : self.n], theta[..., self.n:]
        return (-t1 * t1 / (4 * t2) - 0.5 * torch.log(-2 * t2)).sum(-1)


def ef_log_density(x: torch.Tensor, theta: torch.Tensor, heads) -> torch.Tensor:
    """``theta . T(x) - A(theta)`` per sample."""
    return (theta * heads.sufficient_stats(x)).sum(-1) - heads.log_normalizer(theta)


def _bilinear(theta: torch.Tensor, nu: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
    return (theta * (xi @ nu.T)).sum(-1)


def conjugate_prior_log_density(theta, xi, nu, heads) -> torch.Tensor:
    """Unnormalised conjugate-prior log density ``theta^T nu xi - (tr(nu)/d) A(theta)``.

    With a matrix-valued evidence, the scalar weight on ``A`` is the mean
    diagonal entry of ``nu``, so ``nu = c*I`` recovers the scalar-evidence form.
    """
    d = nu.shape[0]
    return _bilinear(theta, nu, xi) - (torch.diagonal(nu).sum() / d) * heads.log_normalizer(theta)


def posterior_log_density(theta, x, xi, nu, heads) -> torch.Tensor:
    """``theta^T (sum_n T(x_n) + nu xi) - A(theta)``, up to a theta-free constant.

    ``x`` has shape ``(..., N, n)`` with the observation axis second to last;
    ``theta`` and ``xi`` have shape ``(..., d)``.
    """
    if x.ndim < 2:
        raise ValueError("posterior_log_density: x needs an observation axis")
    suff = heads.sufficient_stats(x).sum(-2)
    return (theta * (suff + xi @ nu.T)).sum(-1) - heads.log_normalizer(theta)


def _grad_log_normalizer(theta: torch.Tensor, heads) -> tuple[torch.Tensor, torch.Tensor]:
    if not theta.requires_grad:
        theta = theta.detach().requires_grad_(True)
    with torch.enable_grad():
        a = heads.log_normalizer(theta)
        (ga,) = torch.autograd.grad(a.sum(), theta, create_graph=True)
    return a, ga


def ef_kl(theta_z: torch.Tensor, theta_eps: torch.Tensor, heads, form: str = "bregman") -> torch.Tensor:
    """KL between two members of the family defined by ``heads``, per sample.

    The default is the Bregman form of the log-normalizer,
    ``A(th_e) - A(th_z) - (th_e - th_z) . grad A(th_z)``, which is exact for
    any exponential family (``grad A`` is the mean of ``T``). ``form="printed"``
    evaluates the second expectation at ``th_e`` instead,
    ``A(th_e) - A(th_z) + th_z . grad A(th_z) - th_e . grad A(th_e)``; it is
    kept for comparison only, since it is not a divergence (for Gaussians it
    reduces to ``-log(sigma)``).
    """
    a_z, ga_z = _grad_log_normalizer(theta_z, heads)
    if form == "bregman":
        a_e = heads.log_normalizer(theta_eps)
        return a_e - a_z - ((theta_eps - theta_z) * ga_z).sum(-1)
    if form == "printed":
        a_e, ga_e = _grad_log_normalizer(theta_eps, heads)
        return a_e - a_z + (theta_z * ga_z).sum(-1) - (theta_eps * ga_e).sum(-1)
    raise ValueError(f"unknown KL form {form!r}")


def similarity_objective(z_hat, eps_hat, heads, theta_z=None, theta_eps=None,
                         kl_form: str = "bregman") -> torch.Tensor:
    """Lagrangian ``L_s``: batch mean of posterior log density plus ``lam * KL``.

    Each transformed latent is its own single observation, paired with the
    natural parameters generated from it and from the transformed prior draw.
    """
    if theta_z is None:
        theta_z = heads.natural_params(z_hat)
    if theta_eps is None:
        theta_eps = heads.natural_params(eps_hat)
    post = posterior_log_density(theta_z, z_hat.unsqueeze(-2), theta_eps, heads.nu, heads)
    kl = ef_kl(theta_z, theta_eps, heads, form=kl_form)
    return post.mean() + heads.lam * kl.mean()


def ef_similarity_loss(z_hat, eps_hat, heads, theta_fn=None, kl_form: str = "bregman") -> torch.Tensor:
    """Squared norm of the gradient of ``L_s`` w.r.t. ``z_hat``, ``eps_hat`` and ``lam``.

    The result stays in the graph, so backpropagating it differentiates through
    the first-order gradient. ``theta_fn(z_hat, eps_hat) -> (theta_z, theta_eps)``
    overrides natural-parameter generation (used by the Gaussian heads).
    """
    z_hat = z_hat if z_hat.requires_grad else z_hat.detach().requires_grad_(True)
    eps_hat = eps_hat if eps_hat.requires_grad else eps_hat.detach().requires_grad_(True)
    with torch.enable_grad():
        if theta_fn is None:
            theta_z, theta_eps = heads.natural_params(z_hat), heads.natural_params(eps_hat)
        else:
            theta_z, theta_eps = theta_fn(z_hat, eps_hat)
        ls = similarity_objective(z_hat, eps_hat, heads, theta_z, theta_eps, kl_form)
        return gradnorm_sq(ls, [z_hat, eps_hat, heads.lam])


def gaussian_kl(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """``KL(N(mu, exp(log_var)) || N(0, I))`` per sample, summed over dimensions."""
    return 0.5 * (mu * mu + torch.exp(log_var) - 1.0 - log_var).sum(-1)


def calibration_loss(mu, log_var, theta_z, theta_eps, heads, kl_form: str = "bregman") -> torch.Tensor:
    """MSE between the closed-form Gaussian KL and the family KL, over the batch."""
    diff = gaussian_kl(mu, log_var) - ef_kl(theta_z, theta_eps, heads, form=kl_form)
    return (diff * diff).mean()
