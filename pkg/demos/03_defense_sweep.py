"""Sweep the post-hoc defenses and chart attack quality against strength.

For the noise defense, sigma_n is swept over decades; for pruning, the
threshold tau. Each point reports the median SSIM of three attack seeds.
"""
import argparse

import numpy as np

from fedrecon.attack import AttackConfig, run_draun
from fedrecon.autodiff import split_seed
from fedrecon.data import Dataset, mark_unlearn, partition, shuffle, synth_digits
from fedrecon.fedsim import FedConfig, train_global
from fedrecon.metrics import assign_batch, defend_noise, defend_prune
from fedrecon.models import ModelSpec
from fedrecon.unlearn import UnlearnConfig, unlearn


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=1000)
    args = ap.parse_args()

    ds = shuffle(synth_digits(per_class=20, seed=0), split_seed(0, "shuffle"))
    test = Dataset(ds.images[:40], ds.labels[:40], ds.name)
    train = Dataset(ds.images[40:], ds.labels[40:], ds.name)
    spec = ModelSpec("convnet-s", (1, 28, 28), 10, width=8)
    fed = FedConfig(num_clients=8, clients_per_round=4, rounds=10,
                    local_epochs=2, batch_size=32, local_lr=0.1, seed=0)
    clients = partition(train, fed.num_clients, split_seed(fed.seed, "partition"))
    print("training ...")
    theta_s = train_global(fed, clients, spec, test).theta

    cd = mark_unlearn(clients[0], 1, split_seed(fed.seed, "mark", 0))
    x_u, y_u = cd.unlearn_batch()
    rng = np.random.default_rng(split_seed(0, "unlearn", 0))
    rng.permutation(1)
    ridx = rng.choice(len(cd.retain), size=1, replace=False)
    _, y_r = cd.batch([cd.retain[i] for i in ridx])
    theta_c, _ = unlearn(theta_s, cd, UnlearnConfig(algo="ascent", eta=0.1, epochs=1), seed=0)

    def attack(defended):
        vals = []
        for s in (1, 2, 3):
            cfg = AttackConfig(iterations=args.iterations, lambda_tv=1e-4,
                               clamp_box=True, seed=s)
            r = run_draun(theta_s, defended, y_u, y_r, cfg)
            vals.append(assign_batch(r.x_u_recon, x_u).ssim)
        return float(np.median(vals))

    print("noise defense:")
    for sigma in (0.0, 1e-5, 1e-4, 1e-3, 1e-2):
        d = defend_noise(theta_c, theta_s, sigma, seed=split_seed(1, "defense"))
        print(f"  sigma_n={sigma:8.0e}  median SSIM {attack(d):+.4f}")
    print("pruning defense:")
    for tau in (0.0, 1e-5, 1e-4, 1e-3):
        d = defend_prune(theta_c, theta_s, tau)
        print(f"  tau    ={tau:8.0e}  median SSIM {attack(d):+.4f}")


if __name__ == "__main__":
    main()
