"""Image metrics vs reference implementations; defenses; artifact formats."""
import itertools
import math

import numpy as np
import pytest
import torch

from fedrecon.autodiff import DTYPE, generator
from fedrecon.metrics import (
    SSIM_C1,
    assign_batch,
    defend_noise,
    defend_prune,
    format_float,
    mse,
    psnr,
    read_image,
    ssim,
    tv,
    write_image,
    write_metrics_csv,
)
from fedrecon.models import ModelSpec, ParamVector, init_params

skimage_metrics = pytest.importorskip("skimage.metrics")


def test_tv_constant_zero():
    assert float(tv(torch.full((1, 5, 5), 0.3, dtype=DTYPE))) == 0.0


def test_tv_hand_count_2x2():
    img = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=DTYPE)
    assert float(tv(img)) == pytest.approx(2.0, abs=1e-12)


def test_tv_brute_force_3x3():
    gen = generator(0)
    img = torch.rand((1, 3, 3), dtype=DTYPE, generator=gen)
    ref = 0.0
    a = img[0]
    for i in range(3):
        for j in range(3):
            if i + 1 < 3:
                ref += abs(float(a[i + 1, j] - a[i, j]))
            if j + 1 < 3:
                ref += abs(float(a[i, j + 1] - a[i, j]))
    assert float(tv(img)) == pytest.approx(ref, abs=1e-12)


def test_psnr_identical_inf():
    a = torch.rand((1, 4, 4), dtype=DTYPE, generator=generator(1))
    assert psnr(a, a) == math.inf


def test_psnr_uniform_differences():
    a = torch.zeros((1, 4, 4), dtype=DTYPE)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.5) == pytest.approx(10 * math.log10(4.0), abs=1e-4)


def test_mse_shape_check():
    with pytest.raises(ValueError):
        mse(torch.zeros((1, 2, 2)), torch.zeros((1, 3, 3)))


def test_ssim_identical_is_one():
    a = torch.rand((1, 16, 16), dtype=DTYPE, generator=generator(2))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_analytic():
    a = torch.zeros((1, 16, 16), dtype=DTYPE)
    b = torch.ones((1, 16, 16), dtype=DTYPE)
    # means 0 and 1, zero variance: SSIM = C1/(mu0^2+mu1^2+C1) * C2/C2
    expect = SSIM_C1 / (1.0 + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("shape", [(1, 16, 16), (3, 20, 14), (1, 28, 28)])
def test_ssim_matches_skimage_oracle(shape):
    gen = generator(3)
    a = torch.rand(shape, dtype=DTYPE, generator=gen)
    b = (a + 0.2 * torch.randn(shape, dtype=DTYPE, generator=gen)).clamp(0, 1)
    ref = skimage_metrics.structural_similarity(
        a.numpy(), b.numpy(), channel_axis=0, data_range=1.0,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    )
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_small_image_fallback_warns():
    a = torch.rand((1, 8, 8), dtype=DTYPE, generator=generator(4))
    with pytest.warns(UserWarning, match="window"):
        v = ssim(a, a)
    assert v == pytest.approx(1.0, abs=1e-12)


def test_assign_identity_k1():
    a = torch.rand((1, 1, 16, 16), dtype=DTYPE, generator=generator(5))
    rec = assign_batch(a, a)
    assert rec.assignment == [0]
    assert rec.ssim == pytest.approx(1.0, abs=1e-12)


def test_assign_recovers_permutation():
    gen = generator(6)
    truths = torch.rand((3, 1, 16, 16), dtype=DTYPE, generator=gen)
    perm = [2, 0, 1]
    recons = truths[perm]
    rec = assign_batch(recons, truths)
    assert rec.assignment == perm
    assert rec.ssim == pytest.approx(1.0, abs=1e-12)


def test_assign_matches_brute_force_k3():
    gen = generator(7)
    recons = torch.rand((3, 1, 16, 16), dtype=DTYPE, generator=gen)
    truths = torch.rand((3, 1, 16, 16), dtype=DTYPE, generator=gen)
    rec = assign_batch(recons, truths)
    best = -math.inf
    for perm in itertools.permutations(range(3)):
        total = sum(ssim(recons[i], truths[perm[i]]) for i in range(3))
        best = max(best, total)
    assert sum(rec.ssim_per_image) == pytest.approx(best, abs=1e-10)


def _pv(vals):
    spec = ModelSpec("mlp", (1, 1, 1), 2, mlp_hidden=(1,))
    d = spec.num_params()
    v = torch.zeros(d, dtype=DTYPE)
    v[: len(vals)] = torch.as_tensor(vals, dtype=DTYPE)
    return ParamVector(v, spec)


def test_defend_noise_zero_identity():
    a = _pv([1.0, 2.0])
    out = defend_noise(a, a, 0.0, seed=0)
    assert torch.equal(out.values, a.values)


def test_defend_noise_deterministic():
    a = _pv([1.0, 2.0])
    x = defend_noise(a, a, 1e-3, seed=5)
    y = defend_noise(a, a, 1e-3, seed=5)
    assert torch.equal(x.values, y.values)
    assert not torch.equal(x.values, a.values)


def test_defend_noise_empirical_std():
    spec = ModelSpec("mlp", (1, 10, 10), 10, mlp_hidden=(1000,))
    pv = init_params(spec, 0)
    assert pv.numel() >= 10**5
    out = defend_noise(pv, pv, 1e-2, seed=1)
    std = float((out.values - pv.values).std())
    assert abs(std - 1e-2) / 1e-2 < 0.02


def test_defend_prune_tau_zero_identity():
    s = _pv([0.0, 0.0])
    c = _pv([0.5, 0.01])
    out = defend_prune(c, s, 0.0)
    assert torch.equal(out.values, c.values)


def test_defend_prune_hand_case():
    s = _pv([0.0, 0.0])
    c = _pv([0.5, 0.01])
    out = defend_prune(c, s, 0.1)
    assert float(out.values[0]) == 0.5
    assert float(out.values[1]) == 0.0


def test_defend_prune_gaussian_fraction():
    spec = ModelSpec("mlp", (1, 10, 10), 10, mlp_hidden=(1000,))
    zeros = ParamVector(torch.zeros(spec.num_params(), dtype=DTYPE), spec)
    gen = generator(9)
    c = ParamVector(torch.randn(spec.num_params(), dtype=DTYPE, generator=gen), spec)
    out = defend_prune(c, zeros, 1.0)
    frac = float((out.values == 0).to(DTYPE).mean())
    assert abs(frac - 0.6827) < 0.01


@pytest.mark.parametrize("c", [1, 3])
def test_image_write_read_roundtrip(tmp_path, c):
    gen = generator(10)
    img = torch.rand((c, 9, 7), dtype=DTYPE, generator=gen)
    path = tmp_path / ("a.pgm" if c == 1 else "a.ppm")
    write_image(path, img)
    magic = path.read_bytes()[:2]
    assert magic == (b"P5" if c == 1 else b"P6")
    back = read_image(path)
    assert back.shape == img.shape
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-12


def test_format_float_inf_literal():
    assert format_float(math.inf) == "inf"
    assert format_float(0.25) == "0.25"


def test_metrics_csv_schema(tmp_path):
    gen = generator(11)
    imgs = torch.rand((2, 1, 16, 16), dtype=DTYPE, generator=gen)
    rec = assign_batch(imgs, imgs)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rec)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "target_id,ssim,psnr,mse"
    assert len(lines) == 3
    assert lines[1].split(",")[2] == "inf"  # identical images: psnr inf
