"""Image-quality metrics, batch assignment, and update-level defenses."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .autodiff import DTYPE
from .models import ParamVector

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def tv(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation over the trailing two (H, W) axes."""
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError("tv needs H, W >= 1")
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs().sum()
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs().sum()
    return dv + dh


def mse(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return float(((a - b) ** 2).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10*log10(1/MSE) for images in [0,1]; +inf when identical."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    r = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    k = torch.exp(-(r**2) / (2 * sigma**2))
    k = k / k.sum()
    return torch.outer(k, k)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5), mean over windows/channels.

    Inputs are (C, H, W) in [0, 1]; dynamic range fixed to 1. Images smaller
    than the window fall back to a single global uniform window.
    """
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        warnings.warn("image smaller than SSIM window; using global uniform window")
        kernel = torch.full((h, w), 1.0 / (h * w), dtype=DTYPE)
    else:
        kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    kern = kernel[None, None].expand(c, 1, *kernel.shape)
    x = a[None].to(DTYPE)
    y = b[None].to(DTYPE)
    mu_x = F.conv2d(x, kern, groups=c)
    mu_y = F.conv2d(y, kern, groups=c)
    var_x = F.conv2d(x * x, kern, groups=c) - mu_x**2
    var_y = F.conv2d(y * y, kern, groups=c) - mu_y**2
    cov = F.conv2d(x * y, kern, groups=c) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float((num / den).mean())


@dataclass
class MetricsRecord:
    ssim_per_image: list[float]
    psnr_per_image: list[float]
    mse_per_image: list[float]
    assignment: list[int]  # recon index -> truth index
    ssim: float = field(init=False)
    psnr: float = field(init=False)
    mse: float = field(init=False)

    def __post_init__(self):
        self.ssim = float(np.mean(self.ssim_per_image))
        self.psnr = float(np.mean(self.psnr_per_image))
        self.mse = float(np.mean(self.mse_per_image))


def assign_batch(recons: torch.Tensor, truths: torch.Tensor) -> MetricsRecord:
    """Metrics under the one-to-one assignment maximizing total SSIM."""
    if len(recons) != len(truths):
        raise ValueError("reconstruction/truth counts differ")
    k = len(recons)
    scores = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            scores[i, j] = ssim(recons[i], truths[j])
    rows, cols = linear_sum_assignment(-scores)
    assignment = [int(cols[list(rows).index(i)]) for i in range(k)]
    return MetricsRecord(
        ssim_per_image=[scores[i, assignment[i]] for i in range(k)],
        psnr_per_image=[psnr(recons[i], truths[assignment[i]]) for i in range(k)],
        mse_per_image=[mse(recons[i], truths[assignment[i]]) for i in range(k)],
        assignment=assignment,
    )


def defend_noise(
    theta_c: ParamVector, theta_s: ParamVector, sigma_n: float, seed: int
) -> ParamVector:
    """Gaussian noise added elementwise to the unlearned model."""
    if sigma_n < 0:
        raise ValueError("sigma_n must be >= 0")
    if sigma_n == 0:
        return theta_c.clone()
    noise = np.random.default_rng(seed).standard_normal(theta_c.numel()) * sigma_n
    return ParamVector(theta_c.values + torch.from_numpy(noise), theta_c.spec)


def defend_prune(theta_c: ParamVector, theta_s: ParamVector, tau: float) -> ParamVector:
    """Zero out update components with magnitude strictly below tau."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    u = theta_c.values - theta_s.values
    u = torch.where(u.abs() < tau, torch.zeros_like(u), u)
    return ParamVector(theta_s.values + u, theta_s.spec)


# ---------------------------------------------------------------------------
# Artifact emission


def write_image(path: str | Path, img: torch.Tensor) -> None:
    """PGM (P5) for 1-channel, PPM (P6) for 3-channel; maxval 255."""
    arr = img.detach().clamp(0.0, 1.0).numpy()
    c, h, w = arr.shape
    data = np.rint(255.0 * arr).astype(np.uint8)
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode()
        body = data[0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n".encode()
        body = data.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"unsupported channel count {c}")
    Path(path).write_bytes(header + body)


def read_image(path: str | Path) -> torch.Tensor:
    """Read back a P5/P6 image written by write_image, as (C, H, W) in [0,1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise ValueError(f"unsupported image file {path}")
    w, h = (int(v) for v in parts[1].split())
    c = 1 if parts[0] == b"P5" else 3
    data = np.frombuffer(parts[3], dtype=np.uint8, count=c * h * w)
    if c == 1:
        arr = data.reshape(1, h, w)
    else:
        arr = data.reshape(h, w, 3).transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float64) / 255.0)


def format_float(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return f"{x:.17g}"


def write_metrics_csv(path: str | Path, record: MetricsRecord) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["target_id", "ssim", "psnr", "mse"])
        for i in range(len(record.ssim_per_image)):
            out.writerow(
                [
                    i,
                    format_float(record.ssim_per_image[i]),
                    format_float(record.psnr_per_image[i]),
                    format_float(record.mse_per_image[i]),
                ]
            )
