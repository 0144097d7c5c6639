"""Reverse-mode differentiation utilities on top of float64 torch tensors.

All numerics in this package run in 64-bit: the reconstruction loops take
thousands of steps and the cosine losses sit very close to zero, so float32
headroom is not enough. Gradients support nesting (grad-of-grad) via
``create_graph``, which everything downstream relies on.
"""
from __future__ import annotations

import hashlib
import warnings
from typing import Callable, Sequence

import torch

DTYPE = torch.float64


class NonFiniteError(RuntimeError):
    """Raised when a checked tensor contains NaN or Inf."""


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor from nested lists / numpy arrays."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast(a, b)
    return a * b


def relu(a: torch.Tensor) -> torch.Tensor:
    # Subgradient at 0 is 0 (torch convention); finite-difference tests must
    # keep probe points at least ~1e-3 away from the kink.
    return torch.relu(a)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _check_broadcast(a: torch.Tensor, b: torch.Tensor) -> None:
    # Only exact shape match or scalar broadcast is part of the contract.
    if a.shape != b.shape and a.numel() != 1 and b.numel() != 1:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def grad(
    output: torch.Tensor,
    wrt: Sequence[torch.Tensor],
    create_graph: bool = False,
) -> list[torch.Tensor]:
    """Gradients of a scalar output w.r.t. each tensor in ``wrt``.

    Tensors that do not participate in the graph of ``output`` yield a zero
    gradient plus a warning instead of an error: some unlearning branches
    legitimately drop one of the dummy inputs from the selected loss term.
    """
    if output.numel() != 1:
        raise ValueError("grad requires a scalar output")
    wrt = list(wrt)
    grads = torch.autograd.grad(
        output, wrt, create_graph=create_graph, allow_unused=True
    )
    out = []
    for g, w in zip(grads, wrt):
        if g is None:
            warnings.warn("gradient target not reachable from output; returning zeros")
            g = torch.zeros_like(w)
        out.append(g)
    return out


def hvp(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    theta: torch.Tensor,
    v: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Hessian-vector product H(theta) @ v via grad(<grad(loss), v>)."""
    if theta.shape != v.shape:
        raise ValueError("hvp: v must match theta's shape")
    th = theta.detach().clone().requires_grad_(True)
    loss = loss_fn(th)
    (g,) = torch.autograd.grad(loss, [th], create_graph=True)
    (hv,) = torch.autograd.grad(g @ v, [th], create_graph=create_graph)
    return hv


def cg_solve(
    matvec: Callable[[torch.Tensor], torch.Tensor],
    b: torch.Tensor,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> torch.Tensor:
    """Conjugate gradients for symmetric positive-definite matvec(x) = b."""
    x = torch.zeros_like(b)
    r = b.clone()
    p = r.clone()
    rs = r @ r
    b_norm = torch.linalg.norm(b)
    if b_norm == 0:
        return x
    for _ in range(max_iter):
        ap = matvec(p)
        alpha = rs / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = r @ r
        if torch.sqrt(rs_new) <= tol * b_norm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    check_finite(x, "cg solution")
    return x


def split_seed(master: int, *parts) -> int:
    """Derive an independent child seed from a master seed and a label path.

    Counter-based split so per-(round, client) streams never overlap and do
    not depend on execution order.
    """
    h = hashlib.sha256(("/".join([str(master)] + [str(p) for p in parts])).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g
