"""FedAvg orchestration: client sampling, local SGD, weighted aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import split_seed
from .data import ClientDataset, Dataset
from .models import ModelSpec, ParamVector, accuracy, batch_loss, init_params


@dataclass
class FedConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    local_lr: float = 0.1
    local_epochs: int = 2
    batch_size: int = 128
    rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.num_clients, self.clients_per_round, self.local_epochs,
               self.batch_size, self.rounds + 1) <= 0 or self.local_lr <= 0:
            raise ValueError("FedConfig fields must be positive")
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round exceeds num_clients")


@dataclass
class ClientUpdate:
    client_id: int
    theta_after: ParamVector
    num_samples: int
    steps_taken: int


def local_sgd(
    theta_in: ParamVector,
    data: ClientDataset,
    lr: float,
    epochs: int,
    batch: int,
    seed: int,
) -> ClientUpdate:
    """Plain SGD over shuffled mini-batches, deterministic under seed."""
    idx = data.retain if data.retain else data.indices
    if not idx:
        raise ValueError("empty client dataset")
    theta = theta_in.values.detach().clone()
    spec = theta_in.spec
    steps = 0
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(idx))
        for start in range(0, len(idx), batch):
            chosen = [idx[i] for i in order[start : start + batch]]
            x, y = data.batch(chosen)
            th = theta.requires_grad_(True)
            loss = batch_loss(th, spec, x, y)
            (g,) = torch.autograd.grad(loss, [th])
            theta = (theta.detach() - lr * g).detach()
            steps += 1
    return ClientUpdate(data.client_id, ParamVector(theta, spec), len(idx), steps)


def aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Sample-count-weighted mean, reduced in ascending client id order."""
    if not updates:
        raise ValueError("no updates to aggregate")
    spec = updates[0].theta_after.spec
    if any(u.theta_after.spec != spec for u in updates):
        raise ValueError("model spec mismatch across updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.num_samples for u in ordered)
    acc = torch.zeros_like(ordered[0].theta_after.values)
    for u in ordered:
        acc = acc + (u.num_samples / total) * u.theta_after.values
    return ParamVector(acc, spec)


@dataclass
class TrainResult:
    theta: ParamVector
    accuracy_trace: list[float] = field(default_factory=list)


def train_global(
    cfg: FedConfig,
    clients: list[ClientDataset],
    spec: ModelSpec,
    test_set: Dataset | None = None,
    on_round=None,
) -> TrainResult:
    """Run cfg.rounds FedAvg rounds and track per-round test accuracy."""
    theta = init_params(spec, split_seed(cfg.seed, "init"))
    trace: list[float] = []
    for rnd in range(cfg.rounds):
        rng = np.random.default_rng(split_seed(cfg.seed, "sample", rnd))
        chosen = rng.choice(len(clients), size=cfg.clients_per_round, replace=False)
        updates = [
            local_sgd(
                theta,
                clients[int(c)],
                cfg.local_lr,
                cfg.local_epochs,
                cfg.batch_size,
                seed=split_seed(cfg.seed, "local", rnd, int(c)),
            )
            for c in sorted(int(c) for c in chosen)
        ]
        theta = aggregate(updates)
        if test_set is not None:
            trace.append(accuracy(theta, test_set.images, test_set.labels))
        if on_round is not None:
            on_round(rnd, theta)
    return TrainResult(theta, trace)
