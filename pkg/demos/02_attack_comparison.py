"""Compare the two-dummy attack against the one-step inversion baseline.

Trains a small federated model on rendered digits, unlearns one sample with
the gradient-difference rule, then runs both attacks against the same
(theta_s, theta_c) pair and prints SSIM plus the loss-convergence shape.
"""
import argparse

import numpy as np

from fedrecon.attack import AttackConfig, run_draun, run_gia
from fedrecon.autodiff import split_seed
from fedrecon.data import Dataset, mark_unlearn, partition, shuffle, synth_digits
from fedrecon.fedsim import FedConfig, train_global
from fedrecon.metrics import assign_batch, write_image
from fedrecon.models import ModelSpec
from fedrecon.unlearn import UnlearnConfig, unlearn


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--algo", default="abl", choices=["ascent", "halimi", "abl", "alam"])
    ap.add_argument("--out", default="/tmp/fedrecon-demo2")
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
    theta_c, _ = unlearn(theta_s, cd, UnlearnConfig(algo=args.algo, eta=0.1, epochs=1), seed=0)

    cfg = AttackConfig(iterations=args.iterations, lambda_tv=1e-4, clamp_box=True, seed=1)
    print(f"attacking ({args.iterations} iterations each) ...")
    for name, res in (
        ("draun", run_draun(theta_s, theta_c, y_u, y_r, cfg)),
        ("gia", run_gia(theta_s, theta_c, y_u, cfg)),
    ):
        m = assign_batch(res.x_u_recon, x_u)
        ratio = res.final_loss / res.initial_loss
        print(f"  {name:6s} SSIM {m.ssim:+.4f}  PSNR {m.psnr:6.2f} dB  "
              f"loss final/initial {ratio:.3f}")
        write_image(f"{args.out}_{name}.pgm", res.x_u_recon[0])
    write_image(f"{args.out}_truth.pgm", x_u[0])
    print(f"images written to {args.out}_*.pgm")


if __name__ == "__main__":
    main()
