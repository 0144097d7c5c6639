"""Differentiation utilities against finite-difference and dense oracles."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrecon.autodiff import (
    DTYPE,
    NonFiniteError,
    add,
    cg_solve,
    check_finite,
    generator,
    grad,
    hvp,
    matmul,
    mul,
    relu,
    split_seed,
    tensor,
)
from fedrecon.models import ModelSpec, batch_loss, init_params

FD_H = 1e-5


def fd_grad(f, x: torch.Tensor, h: float = FD_H) -> torch.Tensor:
    """Central-difference oracle, element by element."""
    flat = x.detach().reshape(-1).clone()
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        out[i] = (float(f(plus.view(x.shape))) - float(f(minus.view(x.shape)))) / (2 * h)
    return out.view(x.shape)


def test_add_example():
    assert torch.equal(add(tensor([1.0, 2.0]), tensor([3.0, 4.0])), tensor([4.0, 6.0]))


def test_mul_zero_example():
    assert torch.equal(mul(tensor([2.0]), tensor([0.0])), tensor([0.0]))


def test_relu_definition():
    assert torch.equal(relu(tensor([-1.0, 0.0, 2.0])), tensor([0.0, 0.0, 2.0]))


def test_add_shape_mismatch():
    with pytest.raises(ValueError):
        add(tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))


def test_matmul_identity():
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(matmul(torch.eye(2, dtype=DTYPE), a), a)


def test_matmul_selector_row():
    v = tensor([[5.0], [7.0]])
    assert torch.equal(matmul(tensor([[1.0, 0.0]]), v), tensor([[5.0]]))


def test_matmul_against_triple_loop():
    gen = generator(0)
    a = torch.rand((3, 4), dtype=DTYPE, generator=gen)
    b = torch.rand((4, 2), dtype=DTYPE, generator=gen)
    ref = torch.zeros((3, 2), dtype=DTYPE)
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert torch.allclose(matmul(a, b), ref, atol=1e-12, rtol=0)


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        matmul(torch.ones((2, 3), dtype=DTYPE), torch.ones((2, 3), dtype=DTYPE))


def test_grad_square_at_three():
    x = tensor(3.0, requires_grad=True)
    (g,) = grad(x * x, [x])
    assert float(g) == pytest.approx(6.0, abs=1e-12)


def test_second_derivative_of_square():
    x = tensor(1.7, requires_grad=True)
    (g,) = torch.autograd.grad(x * x, [x], create_graph=True)
    (g2,) = grad(g, [x])
    assert float(g2) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_nested_polynomial_second_derivative(n):
    x0 = 1.3
    x = tensor(x0, requires_grad=True)
    (g,) = torch.autograd.grad(x**n, [x], create_graph=True)
    (g2,) = grad(g, [x])
    assert abs(float(g2) - n * (n - 1) * x0 ** (n - 2)) < 1e-10


def test_mlp_grad_matches_finite_differences():
    spec = ModelSpec("mlp", (1, 4, 4), 3, mlp_hidden=(8,))
    theta = init_params(spec, 7)
    gen = generator(11)
    x = torch.rand((2, 1, 4, 4), dtype=DTYPE, generator=gen)
    y = torch.tensor([0, 2])
    th = theta.values.detach().clone().requires_grad_(True)
    (g,) = grad(batch_loss(th, spec, x, y), [th])
    fd = fd_grad(lambda t: batch_loss(t, spec, x, y), theta.values)
    rel = float(torch.linalg.norm(g - fd) / torch.linalg.norm(fd))
    assert rel < 1e-4


def test_grad_unreachable_warns_and_zeros():
    x = tensor(2.0, requires_grad=True)
    z = tensor(5.0, requires_grad=True)
    with pytest.warns(UserWarning):
        gx, gz = grad(x * x, [x, z])
    assert float(gx) == pytest.approx(4.0)
    assert float(gz) == 0.0


def test_hvp_identity_hessian():
    v = tensor([1.0, -2.0, 3.0])
    out = hvp(lambda t: 0.5 * (t @ t), torch.zeros(3, dtype=DTYPE), v)
    assert torch.allclose(out, v, atol=1e-12, rtol=0)


def test_hvp_quadratic_form():
    a = tensor([[2.0, 1.0], [1.0, 3.0]])
    v = tensor([0.5, -1.0])
    out = hvp(lambda t: t @ (a @ t), torch.zeros(2, dtype=DTYPE), v)
    assert torch.allclose(out, 2 * a @ v, atol=1e-12, rtol=0)


def test_hvp_against_dense_fd_hessian():
    spec = ModelSpec("mlp", (1, 3, 3), 2, mlp_hidden=(5,))
    theta = init_params(spec, 3).values
    gen = generator(4)
    x = torch.rand((2, 1, 3, 3), dtype=DTYPE, generator=gen)
    y = torch.tensor([0, 1])

    def loss_fn(t):
        return batch_loss(t, spec, x, y)

    n = theta.numel()
    dense = torch.zeros((n, n), dtype=DTYPE)
    for j in range(n):
        e = torch.zeros(n, dtype=DTYPE)
        e[j] = FD_H
        gp = fd_grad(loss_fn, theta + e, h=FD_H)
        gm = fd_grad(loss_fn, theta - e, h=FD_H)
        dense[:, j] = (gp - gm) / (2 * FD_H)
    v = torch.rand(n, dtype=DTYPE, generator=gen)
    out = hvp(loss_fn, theta, v)
    rel = float(torch.linalg.norm(out - dense @ v) / torch.linalg.norm(dense @ v))
    assert rel < 1e-3


def test_cg_matches_numpy_solve():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((12, 12))
    a = m @ m.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x = cg_solve(lambda v: torch.from_numpy(a) @ v, torch.from_numpy(b))
    ref = np.linalg.solve(a, b)
    assert np.linalg.norm(x.numpy() - ref) / np.linalg.norm(ref) < 1e-6


def test_cg_zero_rhs():
    out = cg_solve(lambda v: 2 * v, torch.zeros(5, dtype=DTYPE))
    assert torch.equal(out, torch.zeros(5, dtype=DTYPE))


def test_check_finite_raises():
    with pytest.raises(NonFiniteError):
        check_finite(tensor([1.0, float("nan")]))


def test_split_seed_deterministic_and_distinct():
    assert split_seed(0, "a", 1) == split_seed(0, "a", 1)
    seen = {split_seed(0, "r", i, c) for i in range(10) for c in range(10)}
    assert len(seen) == 100


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.text(max_size=8), st.integers(0, 1000))
def test_split_seed_range(master, label, idx):
    s = split_seed(master, label, idx)
    assert 0 <= s < 2**64


def test_generator_determinism():
    a = torch.rand(4, generator=generator(9))
    b = torch.rand(4, generator=generator(9))
    assert torch.equal(a, b)
