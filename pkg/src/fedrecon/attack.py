"""Server-side reconstruction engine.

Given the global model theta_s and an unlearned update theta_c, optimize
dummy inputs so that a simulated unlearning update matches the observed
pseudo-gradient. Four modes: the two-branch algorithm-agnostic attack
("draun"), the classical gradient-inversion baseline ("gia"), the
algorithm-specific variant, and the second-order (Newton/HVP) variant.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .autodiff import DTYPE, cg_solve, generator, split_seed
from .models import ModelSpec, ParamVector, batch_loss
from .metrics import tv
from .unlearn import UnlearnConfig, norm_penalty_grad, ratio_penalty_grad

MODES = ("draun", "gia", "draun-specific", "draun-2nd")
INIT_NOISE_CAP = 10_000


@dataclass
class AttackConfig:
    iterations: int = 8000  # T
    eta_rec: float = 0.1
    lambda_tv: float = 1e-6
    beta: float = 0.9  # TV mixing: weight on the unlearn dummy
    eta_unl: float = 0.1
    delta: float = 10.0  # surrogate pull-back weight
    separation: float = 5.0  # Delta: required dummy pair distance
    sigma: float = 1.0  # noise std during separation
    epochs: int = 1  # surrogate unlearning steps per iteration
    batch: int | None = None  # client batch size m (None: |D_u|)
    mode: str = "draun"
    use_adam: bool = True
    clamp_box: bool = False  # project dummies to [0,1] after each update
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    newton_damp: float = 1e-3  # second-order mode
    cg_iters: int = 100  # second-order mode solver budget
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if self.separation < 0 or self.iterations < 0:
            raise ValueError("separation and iterations must be >= 0")


@dataclass
class PseudoGradient:
    values: torch.Tensor
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("pseudo-gradient needs steps >= 1")


@dataclass
class ReconstructionResult:
    x_u_recon: torch.Tensor  # clamped to [0, 1]
    x_r_final: torch.Tensor
    loss_trace: list[tuple[int, float, float, float, int]]  # iter, l, l0, l1, branch
    wall_time: float
    diverged: bool = False

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0][1]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][1]


def pseudo_gradient(
    theta_s: ParamVector, theta_c: ParamVector, du_size: int, epochs: int, m: int
) -> PseudoGradient:
    """g = (theta_s - theta_c) / U_c with U_c = ceil(|D_u|/m) * epochs."""
    steps = math.ceil(du_size / m) * epochs
    if steps == 0:
        raise ValueError("zero client steps")
    return PseudoGradient((theta_s.values - theta_c.values) / steps, steps)


def init_dummies(
    du_size: int,
    input_shape: tuple[int, int, int],
    separation: float,
    sigma: float,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """U[0,1] dummy pairs; noise added to the retain dummy until each pair is
    more than ``separation`` apart in Frobenius norm."""
    gen = generator(seed)
    shape = (du_size, *input_shape)
    x_u = torch.rand(shape, dtype=DTYPE, generator=gen)
    x_r = torch.rand(shape, dtype=DTYPE, generator=gen)
    for i in range(du_size):
        rounds = 0
        while torch.linalg.norm(x_u[i] - x_r[i]) <= separation:
            x_r[i] += sigma * torch.randn(input_shape, dtype=DTYPE, generator=gen)
            rounds += 1
            if rounds > INIT_NOISE_CAP:
                raise RuntimeError("dummy separation did not terminate")
    return x_u, x_r


def _param_grad(theta: torch.Tensor, spec: ModelSpec, x, y) -> torch.Tensor:
    (g,) = torch.autograd.grad(batch_loss(theta, spec, x, y), [theta], create_graph=True)
    return g


def _pullback(theta: torch.Tensor, theta_s: torch.Tensor, first_step: bool) -> torch.Tensor:
    # Subgradient of ||theta - theta_s||_2 is 0 at the start point.
    if first_step:
        return torch.zeros_like(theta)
    diff = theta - theta_s
    return diff / torch.linalg.norm(diff)


def surrogate_update(
    theta_s: ParamVector,
    x_u: torch.Tensor,
    y_u: torch.Tensor,
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    epochs: int,
    eta_unl: float,
    delta: float,
) -> tuple[PseudoGradient, PseudoGradient]:
    """Run both surrogate branches from theta_s; the whole trajectory stays on
    the tape so the returned pseudo-gradients are differentiable in the
    dummy inputs.

    Branch 1 descends the gradient difference (retain minus unlearn); branch
    0 ascends the unlearn gradient. Both descend the delta-weighted pull-back
    penalty toward theta_s.
    """
    ts = theta_s.values.detach()
    spec = theta_s.spec
    th1 = ts.clone().requires_grad_(True)
    th0 = ts.clone().requires_grad_(True)
    t1, t0 = th1, th0
    for step in range(epochs):
        first = step == 0
        d1 = _param_grad(t1, spec, x_r, y_r) - _param_grad(t1, spec, x_u, y_u)
        t1 = t1 - eta_unl * (d1 + delta * _pullback(t1, ts, first))
        g0 = _param_grad(t0, spec, x_u, y_u)
        t0 = t0 + eta_unl * g0 - eta_unl * delta * _pullback(t0, ts, first)
    g1 = (ts - t1) / epochs
    g0 = (ts - t0) / epochs
    return PseudoGradient(g1, epochs), PseudoGradient(g0, epochs)


def cosine_term(g_true: torch.Tensor, g_sim: torch.Tensor) -> torch.Tensor:
    """1 - cos(g_true, g_sim); defined as 1 when either side has zero norm."""
    n_t = torch.linalg.norm(g_true)
    n_s = torch.linalg.norm(g_sim)
    if float(n_t.detach()) == 0.0 or float(n_s.detach()) == 0.0:
        return torch.ones((), dtype=DTYPE)
    return 1.0 - (g_true @ g_sim) / (n_t * n_s)


def recon_loss(
    g_true: PseudoGradient,
    g1: PseudoGradient,
    g0: PseudoGradient,
    x_u: torch.Tensor,
    x_r: torch.Tensor,
    lambda_tv: float,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    """(selected loss, l0, l1, branch); ties resolve to branch 1."""
    tv_term = lambda_tv * (beta * tv(x_u) + (1.0 - beta) * tv(x_r))
    l1 = cosine_term(g_true.values, g1.values) + tv_term
    l0 = cosine_term(g_true.values, g0.values) + tv_term
    if float(l1.detach()) <= float(l0.detach()):
        return l1, l0, l1, 1
    return l0, l0, l1, 0


class AdamState:
    """Bias-corrected Adam over a list of tensors."""

    def __init__(self, tensors: list[torch.Tensor], cfg: AttackConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [torch.zeros_like(x) for x in tensors]
        self.v = [torch.zeros_like(x) for x in tensors]

    def step(self, tensors: list[torch.Tensor], grads: list[torch.Tensor]) -> list[torch.Tensor]:
        cfg = self.cfg
        self.t += 1
        out = []
        for i, (x, g) in enumerate(zip(tensors, grads)):
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1 - cfg.adam_beta1) * g
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1 - cfg.adam_beta2) * g * g
            m_hat = self.m[i] / (1 - cfg.adam_beta1**self.t)
            v_hat = self.v[i] / (1 - cfg.adam_beta2**self.t)
            out.append(x - cfg.eta_rec * m_hat / (torch.sqrt(v_hat) + cfg.adam_eps))
        return out


def adam_step(
    state: AdamState, tensors: list[torch.Tensor], grads: list[torch.Tensor]
) -> list[torch.Tensor]:
    return state.step(tensors, grads)


def _detach(v):
    return v.detach() if torch.is_tensor(v) else v


def _input_grads(loss: torch.Tensor, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, inputs, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs)]


def _optimize(
    dummies: list[torch.Tensor],
    cfg: AttackConfig,
    loss_fn: Callable[[list[torch.Tensor]], tuple],
    snapshot: Callable[[int, torch.Tensor], None] | None = None,
    snapshot_every: int = 0,
) -> ReconstructionResult:
    """Shared reconstruction loop: loss_fn maps live dummies to
    (loss, l0, l1, branch); dummies are updated by Adam or plain descent."""
    start = time.perf_counter()
    adam = AdamState(dummies, cfg)
    trace: list[tuple[int, float, float, float, int]] = []
    diverged = False
    xs = [x.detach().clone().requires_grad_(True) for x in dummies]
    for it in range(cfg.iterations):
        loss, l0, l1, branch = loss_fn(xs)
        if not (torch.isfinite(loss) if torch.is_tensor(loss) else math.isfinite(loss)):
            diverged = True
            break
        trace.append(
            (it, float(loss.detach()), float(_detach(l0)), float(_detach(l1)), branch)
        )
        grads = _input_grads(loss, xs)
        if cfg.use_adam:
            new = adam.step([x.detach() for x in xs], [g.detach() for g in grads])
        else:
            new = [x.detach() - cfg.eta_rec * g.detach() for x, g in zip(xs, grads)]
        if cfg.clamp_box:
            new = [x.clamp(0.0, 1.0) for x in new]
        xs = [x.requires_grad_(True) for x in new]
        if snapshot is not None and snapshot_every and (it + 1) % snapshot_every == 0:
            snapshot(it + 1, xs[0].detach().clamp(0.0, 1.0))
    if not trace:  # T == 0: report the initialization
        trace.append((0, math.nan, math.nan, math.nan, 1))
    return ReconstructionResult(
        x_u_recon=xs[0].detach().clamp(0.0, 1.0),
        x_r_final=xs[-1].detach(),
        loss_trace=trace,
        wall_time=time.perf_counter() - start,
        diverged=diverged,
    )


def run_draun(
    theta_s: ParamVector,
    theta_c: ParamVector,
    y_u: torch.Tensor,
    y_r: torch.Tensor,
    cfg: AttackConfig,
    snapshot: Callable[[int, torch.Tensor], None] | None = None,
    snapshot_every: int = 0,
) -> ReconstructionResult:
    du = len(y_u)
    m = cfg.batch or du
    g_true = pseudo_gradient(theta_s, theta_c, du, cfg.epochs, m)
    x_u0, x_r0 = init_dummies(
        du, theta_s.spec.input_shape, cfg.separation, cfg.sigma, split_seed(cfg.seed, "init")
    )

    def loss_fn(xs):
        x_u, x_r = xs
        g1, g0 = surrogate_update(
            theta_s, x_u, y_u, x_r, y_r, cfg.epochs, cfg.eta_unl, cfg.delta
        )
        return recon_loss(g_true, g1, g0, x_u, x_r, cfg.lambda_tv, cfg.beta)

    return _optimize([x_u0, x_r0], cfg, loss_fn, snapshot, snapshot_every)


def run_gia(
    theta_s: ParamVector,
    theta_c: ParamVector,
    y_u: torch.Tensor,
    cfg: AttackConfig,
    snapshot: Callable[[int, torch.Tensor], None] | None = None,
    snapshot_every: int = 0,
) -> ReconstructionResult:
    """Classical gradient inversion: a single dummy whose direct parameter
    gradient is matched against the observed pseudo-gradient.

    The baseline models the client as one ascent step on the unlearn data,
    so under the fixed (theta_s - theta_end)/steps convention its simulated
    gradient is -eta_unl * grad L(theta_s, x, y_u). Labels are fixed to the
    known y_u.
    """
    du = len(y_u)
    m = cfg.batch or du
    g_true = pseudo_gradient(theta_s, theta_c, du, cfg.epochs, m)
    x0, _ = init_dummies(
        du, theta_s.spec.input_shape, 0.0, cfg.sigma, split_seed(cfg.seed, "init")
    )
    ts = theta_s.values.detach()
    spec = theta_s.spec

    def loss_fn(xs):
        (x,) = xs
        th = ts.clone().requires_grad_(True)
        g_sim = -cfg.eta_unl * _param_grad(th, spec, x, y_u)
        loss = cosine_term(g_true.values, g_sim) + cfg.lambda_tv * tv(x)
        return loss, loss, loss, 0

    return _optimize([x0], cfg, loss_fn, snapshot, snapshot_every)


def simulate_exact_rule(
    theta_s: ParamVector,
    x_u: torch.Tensor,
    y_u: torch.Tensor,
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    rule: UnlearnConfig,
) -> PseudoGradient:
    """Differentiable replay of a first-order client rule on the dummies,
    full dummy sets per step."""
    ts = theta_s.values.detach()
    spec = theta_s.spec
    th = ts.clone().requires_grad_(True)
    t = th
    for step in range(rule.epochs):
        first = step == 0
        if rule.algo == "ascent":
            t = t + rule.eta * _param_grad(t, spec, x_u, y_u)
        elif rule.algo == "halimi":
            t = t + rule.eta * _param_grad(t, spec, x_u, y_u) - rule.eta * rule.delta * _pullback(t, ts, first)
        elif rule.algo == "abl":
            d = _param_grad(t, spec, x_r, y_r) - _param_grad(t, spec, x_u, y_u)
            t = t - rule.eta * d
        elif rule.algo == "alam":
            # Unlike the l2 pull-back, the ratio penalty is nonzero at
            # theta = theta_s, so the first step carries it too.
            pen = _ratio_pullback(t, ts)
            d = (
                rule.alam_alpha * _param_grad(t, spec, x_r, y_r)
                - rule.alam_beta * _param_grad(t, spec, x_u, y_u)
                + rule.alam_gamma * pen
            )
            t = t - rule.eta * d
        else:
            raise ValueError(f"exact simulation not defined for {rule.algo!r}")
    return PseudoGradient((ts - t) / rule.epochs, rule.epochs)


def _ratio_pullback(theta: torch.Tensor, theta_s: torch.Tensor) -> torch.Tensor:
    # Same epsilon guard as the client-side rule, but kept on the tape.
    return ratio_penalty_grad(theta, theta_s)


def run_draun_specific(
    theta_s: ParamVector,
    theta_c: ParamVector,
    y_u: torch.Tensor,
    y_r: torch.Tensor,
    true_rule: UnlearnConfig,
    cfg: AttackConfig,
    snapshot: Callable[[int, torch.Tensor], None] | None = None,
    snapshot_every: int = 0,
) -> ReconstructionResult:
    """Algorithm-specific attack: the surrogate replays the exact client rule
    instead of the two-branch approximation."""
    du = len(y_u)
    m = true_rule.batch or du
    g_true = pseudo_gradient(theta_s, theta_c, du, true_rule.epochs, m)
    x_u0, x_r0 = init_dummies(
        du, theta_s.spec.input_shape, cfg.separation, cfg.sigma, split_seed(cfg.seed, "init")
    )

    def loss_fn(xs):
        x_u, x_r = xs
        g_sim = simulate_exact_rule(theta_s, x_u, y_u, x_r, y_r, true_rule)
        tv_term = cfg.lambda_tv * (cfg.beta * tv(x_u) + (1 - cfg.beta) * tv(x_r))
        loss = cosine_term(g_true.values, g_sim.values) + tv_term
        return loss, loss, loss, 1

    return _optimize([x_u0, x_r0], cfg, loss_fn, snapshot, snapshot_every)


def _cosine_grad_wrt_sim(g_true: torch.Tensor, g_sim: torch.Tensor) -> torch.Tensor:
    """d(1 - cos(g_true, g_sim)) / d g_sim, closed form."""
    n_t = torch.linalg.norm(g_true)
    n_s = torch.linalg.norm(g_sim)
    cos = (g_true @ g_sim) / (n_t * n_s)
    return -(g_true / (n_t * n_s) - cos * g_sim / n_s**2)


def run_draun_2nd(
    theta_s: ParamVector,
    delta_theta: torch.Tensor,
    y_u: torch.Tensor,
    y_r: torch.Tensor,
    cfg: AttackConfig,
    snapshot: Callable[[int, torch.Tensor], None] | None = None,
    snapshot_every: int = 0,
) -> ReconstructionResult:
    """Second-order attack: match the client's Newton direction against
    (H(x_r_dummy) + damp I)^-1 grad L(x_u_dummy).

    The linear solves use conjugate gradients on Hessian-vector products.
    Input gradients are assembled by implicit differentiation of the solve:
    one extra CG solve plus two tape passes per iteration, instead of
    differentiating through the CG iterations themselves.
    """
    du = len(y_u)
    ts = theta_s.values.detach()
    spec = theta_s.spec
    x_u0, x_r0 = init_dummies(
        du, spec.input_shape, cfg.separation, cfg.sigma, split_seed(cfg.seed, "init")
    )
    start = time.perf_counter()
    adam = AdamState([x_u0, x_r0], cfg)
    trace: list[tuple[int, float, float, float, int]] = []
    x_u, x_r = x_u0.clone(), x_r0.clone()
    diverged = False

    def solve(x_r_det: torch.Tensor, rhs: torch.Tensor) -> torch.Tensor:
        def matvec(v):
            th = ts.clone().requires_grad_(True)
            (g,) = torch.autograd.grad(
                batch_loss(th, spec, x_r_det, y_r), [th], create_graph=True
            )
            (hv,) = torch.autograd.grad(g @ v, [th])
            return hv + cfg.newton_damp * v

        return cg_solve(matvec, rhs, tol=1e-8, max_iter=cfg.cg_iters)

    for it in range(cfg.iterations):
        xu = x_u.detach().clone().requires_grad_(True)
        xr = x_r.detach().clone().requires_grad_(True)
        th = ts.clone().requires_grad_(True)
        (g_u,) = torch.autograd.grad(
            batch_loss(th, spec, xu, y_u), [th], create_graph=True
        )
        sim = solve(xr.detach(), g_u.detach())
        loss_cos = cosine_term(delta_theta, sim)
        tv_u = tv(xu)
        loss = float(_detach(loss_cos)) + cfg.lambda_tv * float(tv_u.detach())
        if not math.isfinite(loss):
            diverged = True
            break
        trace.append((it, loss, loss, loss, 1))

        w = _cosine_grad_wrt_sim(delta_theta, sim)
        v = solve(xr.detach(), w)
        # d loss / d x_u: through the solve's right-hand side.
        (grad_xu,) = torch.autograd.grad(g_u @ v + cfg.lambda_tv * tv_u, [xu])
        # d loss / d x_r: through the Hessian, via -v^T (dH/dx_r) u.
        (g_r,) = torch.autograd.grad(
            batch_loss(th, spec, xr, y_r), [th], create_graph=True
        )
        (hv_u,) = torch.autograd.grad(g_r @ sim, [th], create_graph=True)
        (grad_xr,) = torch.autograd.grad(hv_u @ v, [xr])
        grad_xr = -grad_xr
        x_u, x_r = adam.step([x_u, x_r], [grad_xu, grad_xr]) if cfg.use_adam else (
            x_u - cfg.eta_rec * grad_xu,
            x_r - cfg.eta_rec * grad_xr,
        )
        if cfg.clamp_box:
            x_u, x_r = x_u.clamp(0.0, 1.0), x_r.clamp(0.0, 1.0)
        if snapshot is not None and snapshot_every and (it + 1) % snapshot_every == 0:
            snapshot(it + 1, x_u.detach().clamp(0.0, 1.0))
    if not trace:
        trace.append((0, math.nan, math.nan, math.nan, 1))
    return ReconstructionResult(
        x_u_recon=x_u.detach().clamp(0.0, 1.0),
        x_r_final=x_r.detach(),
        loss_trace=trace,
        wall_time=time.perf_counter() - start,
        diverged=diverged,
    )


def write_trace_csv(path: str | Path, trace: list[tuple[int, float, float, float, int]]) -> None:
    from .metrics import format_float

    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iter", "loss", "loss0", "loss1", "branch"])
        for it, l, l0, l1, b in trace:
            out.writerow([it, format_float(l), format_float(l0), format_float(l1), b])
