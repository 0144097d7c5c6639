"""Experiment driver: train -> unlearn -> (defend) -> attack -> metrics -> verify.

Config files are flat ``section.key=value`` lines; every key can also be
overridden on the command line with ``--set section.key=value``. Exit codes:
0 success, 1 failed check, 2 usage/config error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import attack as attack_mod
from . import metrics as metrics_mod
from . import theory as theory_mod
from .autodiff import split_seed
from .data import (
    Dataset,
    load_cifar10,
    load_idx,
    mark_unlearn,
    partition,
    shuffle,
    synth_blobs,
    synth_digits,
)
from .fedsim import FedConfig, train_global
from .metrics import format_float
from .models import ModelSpec, ParamVector, load_checkpoint, save_checkpoint
from .unlearn import UnlearnConfig, unlearn

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def parse_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    cfg: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        for line in p.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {line!r}")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"malformed --set item: {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _get(cfg: dict, key: str, default, cast=None):
    if key not in cfg:
        return default
    raw = cfg[key]
    cast = cast or (type(default) if default is not None else str)
    if cast is bool:
        return raw.lower() in ("1", "true", "yes")
    return cast(raw)


def build_dataset(cfg: dict) -> Dataset:
    # Loaders and generators emit class-ordered samples; shuffle before any
    # test split or partition so shards and the held-out set stay balanced.
    ds = _load_dataset(cfg)
    seed = _get(cfg, "dataset.seed", _get(cfg, "master_seed", 0))
    return shuffle(ds, split_seed(seed, "shuffle"))


def _load_dataset(cfg: dict) -> Dataset:
    kind = _get(cfg, "dataset.kind", "synth")
    seed = _get(cfg, "dataset.seed", _get(cfg, "master_seed", 0))
    if kind == "mnist":
        images = cfg.get("dataset.images")
        labels = cfg.get("dataset.labels")
        for path in (images, labels):
            if not path or not Path(path).exists():
                raise ConfigError(f"dataset file not found: {path}")
        ds = load_idx(images, labels)
        return Dataset(ds.images, ds.labels, "mnist")
    if kind == "cifar10":
        batches = (cfg.get("dataset.batches") or "").split(",")
        for path in batches:
            if not path or not Path(path).exists():
                raise ConfigError(f"dataset file not found: {path}")
        return load_cifar10(batches)
    if kind == "digits":
        return synth_digits(
            per_class=_get(cfg, "dataset.per_class", 50),
            seed=seed,
            size=_get(cfg, "dataset.size", 28),
        )
    if kind == "synth":
        shape = tuple(int(v) for v in _get(cfg, "dataset.shape", "1x8x8").split("x"))
        return synth_blobs(
            num_classes=_get(cfg, "dataset.num_classes", 2),
            per_class=_get(cfg, "dataset.per_class", 100),
            shape=shape,
            sep=_get(cfg, "dataset.sep", 0.5),
            seed=seed,
        )
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_spec(cfg: dict, ds: Dataset) -> ModelSpec:
    kind = _get(cfg, "model.kind", "mlp")
    hidden_raw = cfg.get("model.hidden")
    kwargs = {}
    if hidden_raw:
        kwargs["mlp_hidden"] = tuple(int(v) for v in hidden_raw.split(","))
    return ModelSpec(
        kind,
        ds.input_shape,
        _get(cfg, "model.num_classes", ds.num_classes),
        width=_get(cfg, "model.width", 16),
        **kwargs,
    )


def build_fed(cfg: dict) -> FedConfig:
    return FedConfig(
        num_clients=_get(cfg, "fed.num_clients", 100),
        clients_per_round=_get(cfg, "fed.clients_per_round", 10),
        local_lr=_get(cfg, "fed.local_lr", 0.1),
        local_epochs=_get(cfg, "fed.local_epochs", 2),
        batch_size=_get(cfg, "fed.batch_size", 128),
        rounds=_get(cfg, "fed.rounds", 100),
        seed=_get(cfg, "fed.seed", _get(cfg, "master_seed", 0)),
    )


def build_unlearn(cfg: dict) -> UnlearnConfig:
    return UnlearnConfig(
        algo=_get(cfg, "unlearn.algo", "ascent"),
        eta=_get(cfg, "unlearn.eta", 0.1),
        epochs=_get(cfg, "unlearn.epochs", 1),
        batch=_get(cfg, "unlearn.batch", None, int),
        delta=_get(cfg, "unlearn.delta", 10.0),
        alam_alpha=_get(cfg, "unlearn.alam_alpha", 1.0),
        alam_beta=_get(cfg, "unlearn.alam_beta", 1.0),
        alam_gamma=_get(cfg, "unlearn.alam_gamma", 0.01),
        newton_damp=_get(cfg, "unlearn.newton_damp", 1e-3),
        newton_eta=_get(cfg, "unlearn.newton_eta", 0.1),
    )


def build_attack(cfg: dict) -> attack_mod.AttackConfig:
    return attack_mod.AttackConfig(
        iterations=_get(cfg, "attack.iterations", 8000),
        eta_rec=_get(cfg, "attack.eta_rec", 0.1),
        lambda_tv=_get(cfg, "attack.lambda_tv", 1e-6),
        beta=_get(cfg, "attack.beta", 0.9),
        eta_unl=_get(cfg, "attack.eta_unl", 0.1),
        delta=_get(cfg, "attack.delta", 10.0),
        separation=_get(cfg, "attack.separation", 5.0),
        sigma=_get(cfg, "attack.sigma", 1.0),
        epochs=_get(cfg, "attack.epochs", 1),
        batch=_get(cfg, "attack.batch", None, int),
        mode=_get(cfg, "attack.mode", "draun"),
        use_adam=_get(cfg, "attack.use_adam", True),
        clamp_box=_get(cfg, "attack.clamp_box", False),
        newton_damp=_get(cfg, "attack.newton_damp", 1e-3),
        cg_iters=_get(cfg, "attack.cg_iters", 100),
        seed=_get(cfg, "attack.seed", _get(cfg, "master_seed", 0)),
    )


def target_client(cfg: dict, ds: Dataset):
    """Partition the dataset and mark the unlearn split of the target client."""
    fed = build_fed(cfg)
    clients = partition(ds, fed.num_clients, split_seed(fed.seed, "partition"))
    cid = _get(cfg, "unlearn.client", 0)
    k = _get(cfg, "unlearn.k", 1)
    return mark_unlearn(clients[cid], k, split_seed(fed.seed, "mark", cid)), clients


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: dict, artifacts: list[Path], wall: float) -> None:
    manifest = {
        "config": dict(sorted(cfg.items())),
        "artifacts": {p.name: _sha256(p) for p in artifacts if p.exists()},
        "versions": {
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "wall_time_s": round(wall, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = parse_config(args.config, args.set)
    if args.seed is not None:
        cfg["master_seed"] = str(args.seed)
    out = _out_dir(args)
    ds = build_dataset(cfg)
    spec = build_spec(cfg, ds)
    fed = build_fed(cfg)
    test_frac = _get(cfg, "dataset.test_frac", 0.2)
    n_test = int(len(ds) * test_frac)
    test = Dataset(ds.images[:n_test], ds.labels[:n_test], ds.name) if n_test else None
    train = Dataset(ds.images[n_test:], ds.labels[n_test:], ds.name)
    clients = partition(train, fed.num_clients, split_seed(fed.seed, "partition"))
    every = _get(cfg, "fed.checkpoint_every", 0)

    def on_round(rnd, theta):
        if every and (rnd + 1) % every == 0:
            save_checkpoint(out / f"theta_round{rnd + 1:04d}.flck", theta)

    result = train_global(fed, clients, spec, test, on_round=on_round)
    save_checkpoint(out / "theta_s.flck", result.theta)
    with open(out / "accuracy.csv", "w") as fh:
        fh.write("round,accuracy\n")
        for i, acc in enumerate(result.accuracy_trace):
            fh.write(f"{i},{format_float(acc)}\n")
    write_manifest(out, cfg, [out / "theta_s.flck", out / "accuracy.csv"], time.perf_counter() - t0)
    return EXIT_OK


def cmd_unlearn(args) -> int:
    t0 = time.perf_counter()
    cfg = parse_config(args.config, args.set)
    if args.seed is not None:
        cfg["master_seed"] = str(args.seed)
    out = _out_dir(args)
    theta_s = load_checkpoint(args.checkpoint)
    ds = build_dataset(cfg)
    # The training split drops the test fraction; mirror it here.
    n_test = int(len(ds) * _get(cfg, "dataset.test_frac", 0.2))
    train = Dataset(ds.images[n_test:], ds.labels[n_test:], ds.name)
    if build_spec(cfg, train) != theta_s.spec:
        raise ConfigError("checkpoint model spec does not match config")
    ucfg = build_unlearn(cfg)
    cd, _ = target_client(cfg, train)
    theta_c, steps = unlearn(theta_s, cd, ucfg, seed=_get(cfg, "master_seed", 0))
    save_checkpoint(out / "theta_c.flck", theta_c)
    # Server-visible metadata only; the algorithm name lives in a separate
    # file that agnostic attacks never read.
    metadata = {
        "client_id": cd.client_id,
        "total_size": len(cd),
        "unlearn_size": len(cd.unlearn),
        "epochs": ucfg.epochs,
        "batch": ucfg.batch or len(cd.unlearn),
        "steps": steps,
    }
    (out / "metadata.json").write_text(json.dumps(metadata, indent=2) + "\n")
    (out / "algo.json").write_text(
        json.dumps({"algo": ucfg.algo, "eta": ucfg.eta, "delta": ucfg.delta}, indent=2) + "\n"
    )
    write_manifest(out, cfg, [out / "theta_c.flck", out / "metadata.json"], time.perf_counter() - t0)
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = parse_config(args.config, args.set)
    out = _out_dir(args)
    theta_c = load_checkpoint(args.checkpoint)
    theta_s = load_checkpoint(args.global_checkpoint)
    kind = _get(cfg, "defense.kind", "none")
    if kind == "noise":
        theta_c = metrics_mod.defend_noise(
            theta_c, theta_s, _get(cfg, "defense.sigma_n", 1e-3),
            seed=_get(cfg, "defense.seed", _get(cfg, "master_seed", 0)),
        )
    elif kind == "prune":
        theta_c = metrics_mod.defend_prune(theta_c, theta_s, _get(cfg, "defense.tau", 1e-3))
    elif kind != "none":
        raise ConfigError(f"unknown defense {kind!r}")
    save_checkpoint(out / "theta_c_defended.flck", theta_c)
    return EXIT_OK


def cmd_attack(args) -> int:
    t0 = time.perf_counter()
    cfg = parse_config(args.config, args.set)
    if args.seed is not None:
        cfg["attack.seed"] = str(args.seed)
    out = _out_dir(args)
    theta_s = load_checkpoint(args.global_checkpoint)
    theta_c = load_checkpoint(args.unlearned_checkpoint)
    if theta_s.spec != theta_c.spec:
        raise ConfigError("global/unlearned checkpoints disagree on model spec")
    ds = build_dataset(cfg)
    n_test = int(len(ds) * _get(cfg, "dataset.test_frac", 0.2))
    train = Dataset(ds.images[n_test:], ds.labels[n_test:], ds.name)
    cd, _ = target_client(cfg, train)
    acfg = build_attack(cfg)
    x_u, y_u = cd.unlearn_batch()
    rng = np.random.default_rng(split_seed(acfg.seed, "retain-labels"))
    ridx = rng.choice(len(cd.retain), size=len(y_u), replace=len(cd.retain) < len(y_u))
    _, y_r = cd.batch([cd.retain[i] for i in ridx])

    every = _get(cfg, "attack.snapshot_every", 0)

    def snapshot(it, imgs):
        for i in range(len(imgs)):
            metrics_mod.write_image(out / f"snap_{it:06d}_{i:02d}{_ext(imgs[i])}", imgs[i])

    if acfg.mode == "draun":
        result = attack_mod.run_draun(theta_s, theta_c, y_u, y_r, acfg, snapshot, every)
    elif acfg.mode == "gia":
        result = attack_mod.run_gia(theta_s, theta_c, y_u, acfg, snapshot, every)
    elif acfg.mode == "draun-specific":
        rule = build_unlearn(cfg)
        result = attack_mod.run_draun_specific(theta_s, theta_c, y_u, y_r, rule, acfg, snapshot, every)
    elif acfg.mode == "draun-2nd":
        ucfg = build_unlearn(cfg)
        if ucfg.algo != "newton":
            raise ConfigError("draun-2nd requires unlearn.algo=newton")
        delta_theta = (theta_c.values - theta_s.values) / ucfg.newton_eta
        result = attack_mod.run_draun_2nd(theta_s, delta_theta, y_u, y_r, acfg, snapshot, every)
    else:  # pragma: no cover - modes validated by AttackConfig
        raise ConfigError(f"unknown attack mode {acfg.mode!r}")

    artifacts = []
    for i in range(len(result.x_u_recon)):
        path = out / f"recon_{i:02d}{_ext(result.x_u_recon[i])}"
        metrics_mod.write_image(path, result.x_u_recon[i])
        artifacts.append(path)
    attack_mod.write_trace_csv(out / "trace.csv", result.loss_trace)
    record = metrics_mod.assign_batch(result.x_u_recon, x_u)
    metrics_mod.write_metrics_csv(out / "metrics.csv", record)
    artifacts += [out / "trace.csv", out / "metrics.csv"]
    write_manifest(out, cfg, artifacts, time.perf_counter() - t0)
    if result.diverged:
        print("attack diverged: loss became non-finite", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _ext(img: torch.Tensor) -> str:
    return ".pgm" if img.shape[0] == 1 else ".ppm"


def cmd_metrics(args) -> int:
    recons = torch.stack([metrics_mod.read_image(p) for p in args.recon])
    truths = torch.stack([metrics_mod.read_image(p) for p in args.truth])
    record = metrics_mod.assign_batch(recons, truths)
    metrics_mod.write_metrics_csv(args.out, record)
    print(f"ssim={record.ssim:.4f} psnr={record.psnr:.4f} mse={record.mse:.6g}")
    return EXIT_OK


def _verify_checks(which: str, seed: int):
    """Yield (name, value, threshold, passed) rows for the chosen suite."""
    rows = []
    if which in ("autodiff", "all"):
        for i in range(3):
            probe = theory_mod.make_probe(split_seed(seed, "ad", i), hidden=(12,))
            from .models import batch_loss

            def f(x):
                return batch_loss(probe.theta.values, probe.spec, x.view(probe.x_u.shape), probe.y_u)

            fd = theory_mod.finite_diff_grad(f, probe.x_u)
            xg = probe.x_u.detach().clone().requires_grad_(True)
            (ad,) = torch.autograd.grad(
                batch_loss(probe.theta.values, probe.spec, xg, probe.y_u), [xg]
            )
            rel = float(torch.linalg.norm(ad - fd) / torch.linalg.norm(fd))
            rows.append((f"autodiff/input-grad-{i}", rel, 1e-4, rel < 1e-4))
        for n in (2, 3, 4):
            x = torch.tensor(1.3, dtype=torch.float64, requires_grad=True)
            (g,) = torch.autograd.grad(x**n, [x], create_graph=True)
            (g2,) = torch.autograd.grad(g, [x])
            err = abs(float(g2) - n * (n - 1) * 1.3 ** (n - 2))
            rows.append((f"autodiff/nested-poly-n{n}", err, 1e-10, err < 1e-10))
    if which in ("stationarity", "all"):
        probe = theory_mod.make_probe(split_seed(seed, "st"))
        coupled = theory_mod.stationarity_check("gia-on-coupled", probe)
        joint = theory_mod.stationarity_check("draun-joint", probe)
        rows.append(("stationarity/coupled-over-joint", coupled / max(joint, 1e-300), 100.0,
                     coupled > 100 * joint))
        rows.append(("stationarity/joint-near-zero", joint, 1e-6, joint < 1e-6))
    if which in ("bound", "all"):
        probe = theory_mod.make_probe(split_seed(seed, "bd"))
        x_star = theory_mod.run_gia_coupled(probe, iterations=300)
        bound, lhs, holds = theory_mod.error_bound_eval(probe, x_star)
        rows.append(("bound/lower-bound-holds", lhs - bound, 0.0, holds))
    if which in ("collapse", "all"):
        probe = theory_mod.make_probe(split_seed(seed, "cl"))
        g1_norm, _ = theory_mod.collapse_probe(
            probe.theta, probe.x_u, probe.y_u, probe.x_u, probe.y_u, 1, 0.1
        )
        rows.append(("collapse/shared-input-zero", g1_norm, 0.0, g1_norm == 0.0))
        xu, xr = attack_mod.init_dummies(1, probe.spec.input_shape, 5.0, 1.0, seed)
        g1_norm, _ = theory_mod.collapse_probe(probe.theta, xu, probe.y_u, xr, probe.y_r, 1, 0.1)
        rows.append(("collapse/separated-nonzero", g1_norm, 0.0, g1_norm > 0.0))
    return rows


def cmd_verify(args) -> int:
    out = _out_dir(args)
    rows = _verify_checks(args.check, args.seed or 0)
    with open(out / "verify.csv", "w") as fh:
        fh.write("check,value,threshold,pass\n")
        for name, value, thr, ok in rows:
            fh.write(f"{name},{format_float(value)},{format_float(thr)},{int(ok)}\n")
    lines = [
        f"{'PASS' if ok else 'FAIL'} {name}: value={value:.3e} threshold={thr:.3e}"
        for name, value, thr, ok in rows
    ]
    report = "\n".join(lines) + "\n"
    (out / "verify.txt").write_text(report)
    print(report, end="")
    return EXIT_OK if all(ok for *_, ok in rows) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrecon")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        if needs_out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run federated training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="run client-side unlearning")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("defend", help="apply a defense to an unlearned update")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--global", dest="global_checkpoint", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("attack", help="reconstruct unlearned inputs")
    common(p)
    p.add_argument("--global", dest="global_checkpoint", required=True)
    p.add_argument("--unlearned", dest="unlearned_checkpoint", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("metrics", help="score reconstructions against truth images")
    p.add_argument("--recon", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="run the numeric verification suite")
    common(p)
    p.add_argument("--check", choices=["autodiff", "stationarity", "bound", "collapse", "all"],
                   default="all")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
