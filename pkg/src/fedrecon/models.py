"""Classification models under attack: an MLP and a reduced-width ConvNet.

Models are pure functions of a flat parameter vector, so that parameter
gradients, pseudo-gradients and Hessian-vector products all live in one
well-defined vector space. The flat layout is fixed by the ModelSpec.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .autodiff import DTYPE, generator

MLP_HIDDEN = (1024, 1024, 1024)

_KIND_CODES = {"mlp": 0, "convnet-s": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "mlp" | "convnet-s"
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    width: int = 16  # convnet base width, unused for mlp
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN  # smaller tuples for probe models

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        c, h, w = self.input_shape
        if self.kind == "mlp":
            dims = [c * h * w, *self.mlp_hidden, self.num_classes]
            out = []
            for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
                out.append((f"fc{i}.weight", (dout, din)))
                out.append((f"fc{i}.bias", (dout,)))
            return out
        wd = self.width
        chans = [(c, wd), (wd, 2 * wd), (2 * wd, 2 * wd)]
        out = []
        for i, (cin, cout) in enumerate(chans):
            out.append((f"conv{i}.weight", (cout, cin, 3, 3)))
            out.append((f"conv{i}.bias", (cout,)))
        feat = 2 * wd * (h // 4) * (w // 4)
        out.append(("head.weight", (self.num_classes, feat)))
        out.append(("head.bias", (self.num_classes,)))
        return out

    def num_params(self) -> int:
        total = 0
        for _, shape in self.layout():
            n = 1
            for s in shape:
                n *= s
            total += n
        return total


@dataclass
class ParamVector:
    """Flat float64 parameter vector tied to a model spec."""

    values: torch.Tensor
    spec: ModelSpec

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        if self.values.numel() != self.spec.num_params():
            raise ValueError(
                f"expected {self.spec.num_params()} params, got {self.values.numel()}"
            )

    def clone(self) -> "ParamVector":
        return ParamVector(self.values.detach().clone(), self.spec)

    def numel(self) -> int:
        return self.values.numel()

    def unflatten(self) -> dict[str, torch.Tensor]:
        return unflatten(self.values, self.spec)


def unflatten(flat: torch.Tensor, spec: ModelSpec) -> dict[str, torch.Tensor]:
    out = {}
    offset = 0
    for name, shape in spec.layout():
        n = 1
        for s in shape:
            n *= s
        out[name] = flat[offset : offset + n].view(shape)
        offset += n
    return out


def flatten(tensors: dict[str, torch.Tensor], spec: ModelSpec) -> torch.Tensor:
    return torch.cat([tensors[name].reshape(-1) for name, _ in spec.layout()])


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Kaiming-uniform fan-in weights, zero biases, deterministic under seed."""
    gen = generator(seed)
    parts = []
    for name, shape in spec.layout():
        if name.endswith("bias"):
            parts.append(torch.zeros(shape, dtype=DTYPE))
            continue
        fan_in = 1
        for s in shape[1:]:
            fan_in *= s
        bound = (6.0 / fan_in) ** 0.5
        w = torch.empty(shape, dtype=DTYPE)
        w.uniform_(-bound, bound, generator=gen)
        parts.append(w)
    flat = torch.cat([p.reshape(-1) for p in parts])
    return ParamVector(flat, spec)


def forward(params: ParamVector | torch.Tensor, spec_or_x, x=None) -> torch.Tensor:
    """Logits for a batch x of shape (batch, C, H, W).

    Accepts either ``forward(param_vector, x)`` or ``forward(flat, spec, x)``;
    the flat-tensor form is what gradient-of-gradient code uses.
    """
    if isinstance(params, ParamVector):
        flat, spec, x = params.values, params.spec, spec_or_x
    else:
        flat, spec = params, spec_or_x
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(
            f"input shape {tuple(x.shape)} does not match spec {spec.input_shape}"
        )
    p = unflatten(flat, spec)
    if spec.kind == "mlp":
        h = x.reshape(x.shape[0], -1)
        n_layers = len(spec.mlp_hidden) + 1
        for i in range(n_layers):
            h = F.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = torch.relu(h)
        return h
    h = torch.relu(F.conv2d(x, p["conv0.weight"], p["conv0.bias"], padding=1))
    h = torch.relu(F.conv2d(h, p["conv1.weight"], p["conv1.bias"], padding=1))
    h = F.max_pool2d(h, 2)
    h = torch.relu(F.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
    h = F.max_pool2d(h, 2)
    h = h.reshape(h.shape[0], -1)
    return F.linear(h, p["head.weight"], p["head.bias"])


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log softmax(logits)[label], stabilized by max subtraction."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    z = logits - logits.max(dim=1, keepdim=True).values.detach()
    logp = z - torch.log(torch.exp(z).sum(dim=1, keepdim=True))
    return -logp[torch.arange(logits.shape[0]), labels].mean()


def batch_loss(flat: torch.Tensor, spec: ModelSpec, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy(forward(flat, spec, x), y)


def loss_grads(
    params: ParamVector,
    batch: tuple[torch.Tensor, torch.Tensor],
    want_input_grad: bool = False,
    create_graph: bool = False,
):
    """(loss, grad wrt params, optionally grad wrt inputs), nest-composable."""
    x, y = batch
    flat = params.values
    if not flat.requires_grad:
        flat = flat.detach().clone().requires_grad_(True)
    xg = x
    if want_input_grad and not xg.requires_grad:
        xg = x.detach().clone().requires_grad_(True)
    loss = batch_loss(flat, params.spec, xg, y)
    wrt = [flat] + ([xg] if want_input_grad else [])
    grads = torch.autograd.grad(loss, wrt, create_graph=create_graph)
    g_params = ParamVector(grads[0], params.spec)
    g_input = grads[1] if want_input_grad else None
    return loss.detach() if not create_graph else loss, g_params, g_input


def accuracy(params: ParamVector, x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        pred = forward(params, x).argmax(dim=1)
    return float((pred == y).to(DTYPE).mean())


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian header (magic "FLCK", version, spec
# fields) followed by the raw float64 parameter array. Bit-exact round trip.

_MAGIC = b"FLCK"
_VERSION = 1


def save_checkpoint(path: str | Path, params: ParamVector) -> None:
    spec = params.spec
    c, h, w = spec.input_shape
    hidden = spec.mlp_hidden
    header = _MAGIC + struct.pack(
        "<IBIIIIII",
        _VERSION,
        _KIND_CODES[spec.kind],
        c,
        h,
        w,
        spec.num_classes,
        spec.width,
        len(hidden),
    )
    header += struct.pack(f"<{len(hidden)}I", *hidden)
    header += struct.pack("<Q", params.numel())
    data = params.values.detach().to(DTYPE).contiguous().numpy()
    if data.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts only
        data = data.byteswap()
    Path(path).write_bytes(header + data.tobytes())


def load_checkpoint(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"bad magic in checkpoint {path}")
    head_len = struct.calcsize("<IBIIIIII")
    version, kind, c, h, w, ncls, width, n_hidden = struct.unpack(
        "<IBIIIIII", raw[4 : 4 + head_len]
    )
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 4 + head_len
    hidden = struct.unpack(f"<{n_hidden}I", raw[pos : pos + 4 * n_hidden])
    pos += 4 * n_hidden
    (n,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    spec = ModelSpec(_KIND_NAMES[kind], (c, h, w), ncls, width, mlp_hidden=hidden)
    body = raw[pos:]
    if len(body) != 8 * n:
        raise ValueError("truncated checkpoint")
    import numpy as np

    values = torch.from_numpy(np.frombuffer(body, dtype="<f8").copy())
    return ParamVector(values, spec)
