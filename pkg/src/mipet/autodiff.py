"""Differentiation helpers, parameter store, Adam and seeded random streams.

Tensors are ``torch.Tensor`` in float64. The graph machinery (including
differentiable backward passes for second-order terms) is torch's autograd;
this module pins down the small contract the rest of the package relies on.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """A tensor that must be finite contains NaN or Inf."""

    def __init__(self, name: str, step: int | None = None):
        self.name = name
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {name}{where}")


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, name: str, step: int | None = None) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(name, step)
    return t


def check_shapes(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    """Raise a ValueError naming both shapes when ``a`` and ``b`` don't broadcast."""
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(
            f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not compatible"
        ) from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(
            f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} are not compatible"
        )
    return a @ b


def grad(
    output: torch.Tensor,
    wrt: Sequence[torch.Tensor],
    create_graph: bool = False,
) -> list[torch.Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors the output does not depend on get a zero gradient. With
    ``create_graph=True`` the returned gradients are themselves part of the
    graph, so they can be differentiated again.
    """
    if output.numel() != 1:
        raise ValueError(f"grad: output must be scalar, got shape {tuple(output.shape)}")
    wrt = list(wrt)
    needs = [w for w in wrt if w.requires_grad]
    if not output.requires_grad or not needs:
        return [torch.zeros_like(w) for w in wrt]
    got = torch.autograd.grad(
        output.reshape(()), needs, create_graph=create_graph,
        retain_graph=True, allow_unused=True,
    )
    it = iter(got)
    out = []
    for w in wrt:
        g = next(it) if w.requires_grad else None
        out.append(torch.zeros_like(w) if g is None else g)
    return out


def gradnorm_sq(output: torch.Tensor, wrt: Sequence[torch.Tensor]) -> torch.Tensor:
    """``||d output / d wrt||^2`` summed over every tensor, kept differentiable."""
    gs = grad(output, wrt, create_graph=True)
    return sum((g * g).sum() for g in gs)


def grad_of_gradnorm(
    loss_builder: Callable[[], torch.Tensor],
    wrt: Sequence[torch.Tensor],
    params: Sequence[torch.Tensor],
    method: str = "autograd",
    h: float = 1e-5,
) -> list[torch.Tensor]:
    """Gradient of ``g = ||grad_wrt L||^2`` with respect to ``params``.

    ``loss_builder`` must rebuild ``L`` from the current values of ``wrt`` and
    ``params`` on every call. ``method="autograd"`` differentiates through the
    first-order gradient; ``method="fd"`` is the debugging fallback that takes
    central differences of ``g`` over every parameter entry.

    ReLU kinks follow the subgradient convention: first derivative 0 at 0 and
    second derivative 0 everywhere.
    """
    if method == "autograd":
        g = gradnorm_sq(loss_builder(), wrt)
        return grad(g, params)
    if method != "fd":
        raise ValueError(f"unknown method {method!r}")

    def g_value() -> float:
        with torch.enable_grad():
            gs = grad(loss_builder(), wrt)
        return float(sum((x.detach() ** 2).sum() for x in gs))

    out = []
    for p in params:
        dp = torch.zeros_like(p)
        flat = dp.view(-1)
        with torch.no_grad():
            pv = p.view(-1)
            for i in range(pv.numel()):
                orig = pv[i].item()
                pv[i] = orig + h
                up = g_value()
                pv[i] = orig - h
                down = g_value()
                pv[i] = orig
                flat[i] = (up - down) / (2 * h)
        out.append(dp)
    return out


class ParamStore:
    """Named parameters plus Adam moment buffers."""

    def __init__(self, params: Iterable[tuple[str, torch.Tensor]]):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, p in params:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} does not require grad")
            self.params[name] = p
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(module.named_parameters())

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[torch.Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        """Parameters and optimizer moments as numpy arrays, for checkpointing."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for k, p in self.params.items():
            out[f"param/{k}"] = p.detach().cpu().numpy().copy()
        for k in self.params:
            out[f"adam_m/{k}"] = self.m[k].cpu().numpy().copy()
            out[f"adam_v/{k}"] = self.v[k].cpu().numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        with torch.no_grad():
            for k, p in self.params.items():
                src = arrays[f"param/{k}"]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(
                        f"shape mismatch for {k}: stored {src.shape}, expected {tuple(p.shape)}"
                    )
                p.copy_(torch.as_tensor(np.array(src, dtype=np.float64)))
                self.m[k] = torch.from_numpy(np.array(arrays[f"adam_m/{k}"]))
                self.v[k] = torch.from_numpy(np.array(arrays[f"adam_v/{k}"]))
        self.step_count = int(step_count)


def adam_step(
    store: ParamStore,
    grads: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    lr: float = 4e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One Adam update with bias correction and decoupled weight decay (in place)."""
    if not isinstance(grads, dict):
        grads = dict(zip(store.names(), grads))
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(
                    f"adam_step: gradient shape {tuple(g.shape)} does not match "
                    f"parameter {name!r} shape {tuple(p.shape)}"
                )
            m, v = store.m[name], store.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return store


def rng(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, purpose)``.

    Streams for different purposes are independent, so e.g. changing how much
    data noise is drawn never shifts parameter initialisation.
    """
    digest = hashlib.sha256(purpose.encode()).digest()
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    words += [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def normal(seed: int, purpose: str, shape) -> torch.Tensor:
    return torch.from_numpy(rng(seed, purpose).standard_normal(shape))



def _fan_in(layer: torch.nn.Module) -> int:
    w = layer.weight
    if isinstance(layer, torch.nn.ConvTranspose2d):
        return int(w.shape[1] * np.prod(w.shape[2:]))
    return int(np.prod(w.shape[1:]))


def seeded_init_(module: torch.nn.Module, seed: int, tag: str, zero: bool = False) -> torch.nn.Module:
    """Re-initialise linear/conv layers of ``module`` from keyed streams.

    Weights and biases are uniform in ``+-1/sqrt(fan_in)`` (torch's default
    range) but drawn from ``rng(seed, "init/<tag>/<layer>")`` so initialisation
    does not depend on global RNG state. ``zero=True`` zeroes them instead.
    """
    layers = (torch.nn.Linear, torch.nn.Conv2d, torch.nn.ConvTranspose2d)
    with torch.no_grad():
        for name, layer in module.named_modules():
            if not isinstance(layer, layers):
                continue
            if zero:
                for p in layer.parameters(recurse=False):
                    p.zero_()
                continue
            bound = 1.0 / np.sqrt(_fan_in(layer))
            stream = rng(seed, f"init/{tag}/{name}")
            layer.weight.copy_(torch.from_numpy(stream.uniform(-bound, bound, tuple(layer.weight.shape))))
            if layer.bias is not None:
                layer.bias.copy_(torch.from_numpy(stream.uniform(-bound, bound, tuple(layer.bias.shape))))
    return module
