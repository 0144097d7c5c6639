"""Client-side unlearning update rules.

Four first-order methods (gradient ascent, ascent with a pull-back penalty,
gradient difference, and a three-term weighted variant) plus a damped Newton
step on the retain-set Hessian. All produce theta_c from (theta_s, D_u, D_r).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import cg_solve, check_finite, split_seed
from .data import ClientDataset
from .models import ParamVector, batch_loss

FIRST_ORDER_ALGOS = ("ascent", "halimi", "abl", "alam")
ALGOS = FIRST_ORDER_ALGOS + ("newton",)
RATIO_EPS = 1e-6


@dataclass
class UnlearnConfig:
    algo: str = "ascent"
    eta: float = 0.1  # unlearning rate
    epochs: int = 1
    batch: int | None = None  # None: full unlearn set per step
    retain_batch: int | None = None  # None: match the unlearn batch size
    delta: float = 10.0  # pull-back penalty weight (halimi)
    alam_alpha: float = 1.0
    alam_beta: float = 1.0
    alam_gamma: float = 0.001  # ratio-penalty gradients are large; keep it comparable to the data terms
    newton_damp: float = 1e-3
    newton_eta: float = 0.1

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown unlearning algo {self.algo!r}")
        if self.eta <= 0 or self.epochs < 1 or (self.batch is not None and self.batch < 1):
            raise ValueError("eta must be > 0, epochs >= 1, batch >= 1")

    def needs_retain(self) -> bool:
        return self.algo in ("abl", "alam", "newton")


def norm_penalty_grad(theta: torch.Tensor, theta_s: torch.Tensor) -> torch.Tensor:
    """Gradient of ||theta - theta_s||_2; subgradient 0 at theta == theta_s."""
    diff = theta - theta_s
    nrm = torch.linalg.norm(diff)
    if nrm == 0:
        return torch.zeros_like(theta)
    return diff / nrm


def ratio_penalty_grad(theta: torch.Tensor, theta_s: torch.Tensor) -> torch.Tensor:
    """Gradient of ||theta / theta_s||_2 with epsilon-guarded denominators."""
    denom = torch.where(theta_s >= 0, theta_s.clamp(min=RATIO_EPS), theta_s.clamp(max=-RATIO_EPS))
    ratio = theta / denom
    nrm = torch.linalg.norm(ratio)
    if nrm == 0:
        return torch.zeros_like(theta)
    return ratio / (nrm * denom)


def _grad(theta: torch.Tensor, pv_spec, x, y) -> torch.Tensor:
    th = theta.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(batch_loss(th, pv_spec, x, y), [th])
    return g


def first_order_step(
    algo: str,
    theta: torch.Tensor,
    theta_s: torch.Tensor,
    spec,
    xu,
    yu,
    xr,
    yr,
    cfg: UnlearnConfig,
) -> torch.Tensor:
    """One update of the given rule evaluated at the current iterate."""
    eta = cfg.eta
    if algo == "ascent":
        return theta + eta * _grad(theta, spec, xu, yu)
    if algo == "halimi":
        step = eta * _grad(theta, spec, xu, yu)
        step = step - eta * cfg.delta * norm_penalty_grad(theta, theta_s)
        return theta + step
    if algo == "abl":
        d = _grad(theta, spec, xr, yr) - _grad(theta, spec, xu, yu)
        return theta - eta * d
    if algo == "alam":
        d = (
            cfg.alam_alpha * _grad(theta, spec, xr, yr)
            - cfg.alam_beta * _grad(theta, spec, xu, yu)
            + cfg.alam_gamma * ratio_penalty_grad(theta, theta_s)
        )
        return theta - eta * d
    raise ValueError(f"not a first-order algo: {algo}")


def retain_hvp(theta: torch.Tensor, spec, xr, yr):
    def matvec(v: torch.Tensor) -> torch.Tensor:
        th = theta.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(batch_loss(th, spec, xr, yr), [th], create_graph=True)
        (hv,) = torch.autograd.grad(g @ v, [th])
        return hv

    return matvec


def newton_direction(
    theta_s: torch.Tensor,
    spec,
    xu,
    yu,
    xr,
    yr,
    damp: float,
) -> torch.Tensor:
    """(H_r + damp*I)^-1 grad L_u, solved by conjugate gradients on HVPs."""
    g_u = _grad(theta_s, spec, xu, yu)
    hvp = retain_hvp(theta_s, spec, xr, yr)
    delta = cg_solve(lambda v: hvp(v) + damp * v, g_u, tol=1e-8, max_iter=500)
    return check_finite(delta, "newton direction")


def unlearn(
    theta_s: ParamVector,
    cd: ClientDataset,
    cfg: UnlearnConfig,
    seed: int = 0,
) -> tuple[ParamVector, int]:
    """Run the configured unlearning rule; returns (theta_c, steps)."""
    if not cd.unlearn:
        raise ValueError("unlearn set is empty")
    if cfg.needs_retain() and not cd.retain:
        raise ValueError(f"retain set required for algo {cfg.algo!r}")
    spec = theta_s.spec
    ts = theta_s.values.detach()
    m = cfg.batch or len(cd.unlearn)
    steps_per_epoch = math.ceil(len(cd.unlearn) / m)
    steps = steps_per_epoch * cfg.epochs

    if cfg.algo == "newton":
        xu, yu = cd.unlearn_batch()
        xr, yr = cd.retain_batch()
        delta = newton_direction(ts, spec, xu, yu, xr, yr, cfg.newton_damp)
        theta_c = ts + cfg.newton_eta * delta
        return ParamVector(theta_c, spec), steps

    theta = ts.clone()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(split_seed(seed, "unlearn", epoch))
        order = rng.permutation(len(cd.unlearn))
        for start in range(0, len(cd.unlearn), m):
            batch_idx = [cd.unlearn[i] for i in order[start : start + m]]
            xu, yu = cd.batch(batch_idx)
            xr = yr = None
            if cd.retain:
                k = min(cfg.retain_batch or len(batch_idx), len(cd.retain))
                ridx = rng.choice(len(cd.retain), size=k, replace=False)
                xr, yr = cd.batch([cd.retain[i] for i in ridx])
            theta = first_order_step(cfg.algo, theta, ts, spec, xu, yu, xr, yr, cfg)
            check_finite(theta, "unlearned parameters")
    return ParamVector(theta.detach(), spec), steps
