"""Numeric checks of the stationarity and error-bound claims on tiny models.

Independent finite-difference oracles, an explicit Jacobian-of-gradient
construction, and three stationarity regimes: the classical baseline matched
against a coupled (retain-minus-unlearn) client, the baseline against a pure
ascent client, and the joint two-variable surrogate. The similarity loss here
is the squared l2 norm, which is the form the statements are proved in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import DTYPE, generator, split_seed
from .attack import AdamState, AttackConfig, cosine_term, surrogate_update
from .models import ModelSpec, ParamVector, batch_loss, init_params

FD_STEP = 1e-5
JACOBIAN_BUDGET = 10**7


@dataclass
class TheoryProbe:
    """Tiny model + data pair for the numeric theorem checks."""

    theta: ParamVector
    x_u: torch.Tensor  # (1, C, H, W)
    y_u: torch.Tensor
    x_r: torch.Tensor
    y_r: torch.Tensor
    h: float = FD_STEP
    mu_x: float | None = field(default=None)
    mu_theta: float | None = field(default=None)

    @property
    def spec(self) -> ModelSpec:
        return self.theta.spec

    @property
    def d_x(self) -> int:
        return self.x_u.numel()

    @property
    def d_theta(self) -> int:
        return self.theta.numel()


def make_probe(
    seed: int,
    input_shape: tuple[int, int, int] = (1, 8, 8),
    num_classes: int = 4,
    hidden: tuple[int, ...] = (24,),
) -> TheoryProbe:
    """Random small-MLP probe; d_theta stays under 2,000 parameters."""
    spec = ModelSpec("mlp", input_shape, num_classes, mlp_hidden=hidden)
    if spec.num_params() < np.prod(input_shape):
        raise ValueError("probe violates d_theta >= d_x")
    theta = init_params(spec, split_seed(seed, "theta"))
    gen = generator(split_seed(seed, "data"))
    x_u = torch.rand((1, *input_shape), dtype=DTYPE, generator=gen)
    x_r = torch.rand((1, *input_shape), dtype=DTYPE, generator=gen)
    y = torch.randint(0, num_classes, (2,), generator=gen)
    return TheoryProbe(theta, x_u, y[:1], x_r, y[1:])


def finite_diff_grad(f, x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Central differences per coordinate; independent of the tape."""
    flat = x.detach().reshape(-1).clone()
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            probe = flat.clone()
            probe[i] += sign * h
            val = float(f(probe.view(x.shape)))
            if not np.isfinite(val):
                raise ValueError("non-finite function value in finite differences")
            out[i] += sign * val
    return (out / (2 * h)).view(x.shape)


def _grad_theta(probe: TheoryProbe, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    th = probe.theta.values.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(batch_loss(th, probe.spec, x, y), [th])
    return g


def jacobian_of_gradient(probe: TheoryProbe, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """J = d(grad_theta L)/dx as a dense (d_theta, d_x) matrix."""
    if probe.d_theta * x.numel() > JACOBIAN_BUDGET:
        raise ValueError("Jacobian budget exceeded")
    th = probe.theta.values.detach()

    def grad_fn(x_flat: torch.Tensor) -> torch.Tensor:
        t = th.clone().requires_grad_(True)
        loss = batch_loss(t, probe.spec, x_flat.view(x.shape), y)
        (g,) = torch.autograd.grad(loss, [t], create_graph=True)
        return g

    J = torch.autograd.functional.jacobian(
        grad_fn, x.detach().reshape(-1), vectorize=True
    )
    return J


def coupled_client_gradient(probe: TheoryProbe) -> torch.Tensor:
    """grad_theta of the coupled unlearning loss L(x_r) - L(x_u)."""
    return _grad_theta(probe, probe.x_r, probe.y_r) - _grad_theta(probe, probe.x_u, probe.y_u)


def _sim_loss_sq(target: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    return ((target - sim) ** 2).sum()


def stationarity_check(loss_kind: str, probe: TheoryProbe) -> float:
    """Norm of the similarity-loss input gradient at the ground truth.

    * "gia-on-coupled": single-dummy surrogate against a coupled client;
      the truth is not stationary, so the norm is large.
    * "gia-on-ascent": single-dummy surrogate against a matching ascent
      client; exact stationary point.
    * "draun-joint": two-variable surrogate against the coupled client;
      exact stationary point of the joint loss.
    """
    spec = probe.spec
    th = probe.theta.values.detach()

    def grad_at(x, y):
        t = th.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(batch_loss(t, spec, x, y), [t], create_graph=True)
        return g

    if loss_kind == "gia-on-coupled":
        target = coupled_client_gradient(probe)
        x = probe.x_u.detach().clone().requires_grad_(True)
        loss = _sim_loss_sq(target, grad_at(x, probe.y_u))
        (gx,) = torch.autograd.grad(loss, [x])
        return float(torch.linalg.norm(gx))
    if loss_kind == "gia-on-ascent":
        target = -_grad_theta(probe, probe.x_u, probe.y_u)
        x = probe.x_u.detach().clone().requires_grad_(True)
        loss = _sim_loss_sq(target, -grad_at(x, probe.y_u))
        (gx,) = torch.autograd.grad(loss, [x])
        return float(torch.linalg.norm(gx))
    if loss_kind == "draun-joint":
        target = coupled_client_gradient(probe)
        xu = probe.x_u.detach().clone().requires_grad_(True)
        xr = probe.x_r.detach().clone().requires_grad_(True)
        loss = _sim_loss_sq(target, grad_at(xr, probe.y_r) - grad_at(xu, probe.y_u))
        gu, gr = torch.autograd.grad(loss, [xu, xr])
        return float(torch.sqrt(torch.linalg.norm(gu) ** 2 + torch.linalg.norm(gr) ** 2))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def estimate_smoothness(
    probe: TheoryProbe, n_pairs: int = 200, radius: float = 0.1, seed: int = 0
) -> tuple[float, float]:
    """Local empirical (mu_x, mu_theta): max gradient-difference ratios over
    random pairs in a ball around the probe point. Local estimates, not
    global constants; an underestimate only makes the bound smaller."""
    gen = generator(split_seed(seed, "smooth"))
    spec = probe.spec
    th = probe.theta.values.detach()

    def input_grad(x):
        xg = x.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(batch_loss(th, spec, xg, probe.y_u), [xg])
        return g.reshape(-1)

    def theta_grad(t):
        tg = t.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(batch_loss(tg, spec, probe.x_u, probe.y_u), [tg])
        return g

    mu_x = 0.0
    mu_t = 0.0
    for _ in range(n_pairs):
        d1 = radius * torch.randn(probe.x_u.shape, dtype=DTYPE, generator=gen)
        d2 = radius * torch.randn(probe.x_u.shape, dtype=DTYPE, generator=gen)
        g1 = input_grad(probe.x_u + d1)
        g2 = input_grad(probe.x_u + d2)
        denom = float(torch.linalg.norm((d1 - d2).reshape(-1)))
        if denom > 0:
            mu_x = max(mu_x, float(torch.linalg.norm(g1 - g2)) / denom)
        e1 = radius * torch.randn(th.shape, dtype=DTYPE, generator=gen)
        e2 = radius * torch.randn(th.shape, dtype=DTYPE, generator=gen)
        h1 = theta_grad(th + e1)
        h2 = theta_grad(th + e2)
        denom = float(torch.linalg.norm(e1 - e2))
        if denom > 0:
            mu_t = max(mu_t, float(torch.linalg.norm(h1 - h2)) / denom)
    probe.mu_x, probe.mu_theta = mu_x, mu_t
    return mu_x, mu_t


def run_gia_coupled(probe: TheoryProbe, iterations: int = 400, lr: float = 0.05, seed: int = 0) -> torch.Tensor:
    """Optimize the single-dummy squared-l2 objective against the coupled
    client; returns the converged dummy input (the biased minimizer)."""
    target = coupled_client_gradient(probe)
    spec = probe.spec
    th = probe.theta.values.detach()
    gen = generator(split_seed(seed, "giainit"))
    x = torch.rand(probe.x_u.shape, dtype=DTYPE, generator=gen)
    adam = AdamState([x], AttackConfig(iterations=iterations, eta_rec=lr, mode="gia"))
    for _ in range(iterations):
        xg = x.detach().clone().requires_grad_(True)
        t = th.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(batch_loss(t, spec, xg, probe.y_u), [t], create_graph=True)
        loss = _sim_loss_sq(target, g)
        (gx,) = torch.autograd.grad(loss, [xg])
        (x,) = adam.step([x], [gx])
    return x.detach()


def error_bound_eval(probe: TheoryProbe, x_star: torch.Tensor) -> tuple[float, float, bool]:
    """Evaluate the reconstruction-error lower bound against an observed
    minimizer: bound = ||J^T grad L_r|| / (mu_x ||J||_F + 2 mu_theta ||g_u||)."""
    if probe.mu_x is None or probe.mu_theta is None:
        estimate_smoothness(probe)
    J = jacobian_of_gradient(probe, probe.x_u, probe.y_u)
    g_r = _grad_theta(probe, probe.x_r, probe.y_r)
    g_client = coupled_client_gradient(probe)
    numerator = float(torch.linalg.norm(J.T @ g_r))
    denominator = probe.mu_x * float(torch.linalg.norm(J)) + 2 * probe.mu_theta * float(
        torch.linalg.norm(g_client)
    )
    if denominator == 0.0:
        bound = 0.0
    else:
        bound = numerator / denominator
    lhs = float(torch.linalg.norm((x_star - probe.x_u).reshape(-1)))
    return bound, lhs, lhs >= bound * (1.0 - 1e-6)


def collapse_probe(
    theta_s: ParamVector,
    x_u: torch.Tensor,
    y_u: torch.Tensor,
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    epochs: int,
    eta_unl: float,
    g_true: torch.Tensor | None = None,
) -> tuple[float, float]:
    """(||g1||, ||d l1 / d x_u||) for the gradient-difference branch with the
    pull-back penalty disabled. With x_r == x_u the branch collapses to the
    exact zero vector and carries no input gradient."""
    xu = x_u.detach().clone().requires_grad_(True)
    xr = x_r.detach().clone().requires_grad_(True)
    g1, _ = surrogate_update(theta_s, xu, y_u, xr, y_r, epochs, eta_unl, delta=0.0)
    g1_norm = float(torch.linalg.norm(g1.values.detach()))
    if g_true is None:
        gen = generator(0)
        g_true = torch.randn(theta_s.numel(), dtype=DTYPE, generator=gen)
        g_true = g_true / torch.linalg.norm(g_true)
    l1 = cosine_term(g_true, g1.values)
    if l1.requires_grad:
        (gx,) = torch.autograd.grad(l1, [xu], allow_unused=True)
        grad_norm = 0.0 if gx is None else float(torch.linalg.norm(gx.reshape(-1)))
    else:
        grad_norm = 0.0
    return g1_norm, grad_norm
