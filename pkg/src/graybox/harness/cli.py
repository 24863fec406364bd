"""Command-line entry point: ``graybox <subcommand> ...`` (or ``python3 -m graybox``).

Commands that produce results write into ``--run-dir`` and leave a
``manifest.txt`` there (key=value lines: command, seeds, config, vault checksums).
Training configs are key=value files, one ``TrainConfig`` field per line.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from graybox.adapters import load_adapters, save_adapters

log = logging.getLogger("graybox")


def _vault(args):
    from graybox.harness.pretrain import pretrain_vault
    from graybox.vault import load_vault

    if getattr(args, "vault", None):
        return load_vault(args.vault)
    return pretrain_vault(args.vault_seed)


def _data(args):
    from graybox.harness.data import generate_dataset, load_dataset
    from graybox.harness.experiments import SHIFTS

    if getattr(args, "data", None):
        return load_dataset(args.data)
    return generate_dataset(args.n_train, args.n_test, SHIFTS[args.shift], seed=args.data_seed)


def _client(args, vault):
    from graybox.training import LocalVaultClient

    if getattr(args, "remote", None) is not None:
        from graybox.protocol import RemoteVaultClient

        return RemoteVaultClient(args.remote or None)
    return LocalVaultClient(vault)


def _manifest(run_dir: Path, **items) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in items.items():
        if isinstance(v, int) and k.startswith("checksum"):
            v = f"{v:#018x}"
        lines.append(f"{k}={v}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _add_vault_args(p) -> None:
    p.add_argument("--vault", help="vault checkpoint file (default: pretrained vault for --vault-seed)")
    p.add_argument("--vault-seed", type=int, default=42)


def _add_data_args(p) -> None:
    p.add_argument("--data", help="dataset .npz from gen-data (overrides the generation flags)")
    p.add_argument("--shift", choices=("none", "affine-pixel", "frequency"), default="affine-pixel")
    p.add_argument("--n-train", type=int, default=2048)
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--data-seed", type=int, default=0)


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from graybox.harness.data import save_dataset

    ds = _data(args)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds.train)} train / {len(ds.test)} test pairs, shift={ds.shift.kind}")
    return 0


def cmd_pretrain(args) -> int:
    from graybox.harness.pretrain import PretrainConfig, cache_path, pretrain_vault

    vault = pretrain_vault(args.vault_seed, use_cache=not args.no_cache)
    if args.out:
        vault.owner_unlock(args.vault_seed).save(args.out)
    print(f"vault seed={args.vault_seed} checksum={vault.checksum:#018x} cache={cache_path(args.vault_seed, PretrainConfig())}")
    return 0


def cmd_serve(args) -> int:
    from graybox.protocol import ServerLimits, VaultServer

    vault = _vault(args)
    srv = VaultServer(vault, args.addr, ServerLimits(idle_timeout=args.idle_timeout))
    print(f"serving vault {vault.checksum:#018x} on {srv.address}", flush=True)
    try:
        srv.serve_forever()
    finally:
        if args.ledger:
            Path(args.ledger).write_text(srv.ledger.to_text())
    return 0


def cmd_train(args) -> int:
    from graybox.training import TrainConfig, train

    overrides = {k: v for k, v in (("method", args.method), ("epochs", args.epochs), ("lr0", args.lr),
                                   ("seed", args.seed)) if v is not None}
    text = Path(args.config).read_text() if args.config else ""
    config = TrainConfig.from_kv(text, **overrides)
    vault = _vault(args)
    data = _data(args)
    client = _client(args, vault)
    handle = vault.owner_unlock(args.vault_seed) if config.method in ("ft", "llft", "lora") else None
    before = vault.checksum
    result = train(config, data, client=client, handle=handle)
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.kv").write_text(config.to_kv())
    (run / "history.txt").write_text(result.history.to_text())
    if result.adapters is not None:
        save_adapters(result.adapters, run / "adapters.gba")
    if hasattr(client, "ledger"):
        (run / "ledger.txt").write_text(client.ledger.to_text())
    _manifest(run, command="train", method=config.label, seed=config.seed, vault_seed=args.vault_seed,
              data_seed=args.data_seed, shift=data.shift.kind, checksum_before=before, checksum_after=vault.checksum,
              remote=args.remote or "")
    print(f"{config.label}: " + " ".join(f"R@{k}={result.history.final(f'R@{k}'):.4f}" for k in config.eval_ks))
    return 0


def cmd_eval(args) -> int:
    from graybox.training import evaluate_adapters, evaluate_zero_shot

    vault = _vault(args)
    data = _data(args)
    client = _client(args, vault)
    if args.adapters:
        history = evaluate_adapters(client, load_adapters(args.adapters), data)
    else:
        history = evaluate_zero_shot(client, data)
    print("".join(r.line() + "\n" for r in history), end="")
    return 0


def cmd_ablate(args) -> int:
    from graybox.harness.experiments import ablation_suite

    vault = _vault(args)
    data = _data(args)
    run = Path(args.run_dir)
    for kind in args.kind:
        table = ablation_suite(kind, data, vault, client=_client(args, vault), owner_seed=args.vault_seed,
                               out_dir=run)
        print(table.to_text())
    _manifest(run, command="ablate", kinds=",".join(args.kind), vault_seed=args.vault_seed, data_seed=args.data_seed,
              shift=data.shift.kind, checksum=vault.checksum)
    return 0


def cmd_experiment(args) -> int:
    from graybox.harness.experiments import ExperimentSpec, run_experiment

    vault = _vault(args)
    spec = ExperimentSpec(shift=args.shift, methods=tuple(args.methods), n_train=args.n_train, n_test=args.n_test,
                          data_seed=args.data_seed, seed=args.seed, mode=args.mode)
    run = Path(args.run_dir)
    table = run_experiment(spec, vault, client=_client(args, vault), owner_seed=args.vault_seed, out_dir=run)
    print(table.to_text())
    _manifest(run, command="experiment", methods=",".join(args.methods), seed=args.seed, vault_seed=args.vault_seed,
              data_seed=args.data_seed, shift=args.shift, checksum=vault.checksum)
    return 0


def cmd_bench(args) -> int:
    from graybox.harness.bench import efficiency_bench

    print(efficiency_bench(args.domains, args.samples).to_text(), end="")
    return 0


def cmd_visualize(args) -> int:
    from graybox.adapters import AdapterConfig, init_adapters
    from graybox.harness.views import dump_adapter_views

    data = _data(args)
    adapters = load_adapters(args.adapters) if args.adapters else init_adapters(AdapterConfig())
    paths = dump_adapter_views(adapters, data.test.images[: args.n], args.out_dir)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def cmd_audit(args) -> int:
    from graybox.protocol import ExposureLedger, audit_ledger

    vault = _vault(args)
    report = audit_ledger(ExposureLedger.from_text(Path(args.ledger).read_text()), vault)
    print(report.to_text(args.method) or "empty ledger: nothing to report")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graybox", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset to .npz")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain (or load from cache) the vault for a seed")
    p.add_argument("--vault-seed", type=int, default=42)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--out", help="also write the vault checkpoint here")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("serve", help="serve a sealed vault over TCP")
    _add_vault_args(p)
    p.add_argument("--addr", help="host:port (default: $GBX_ADDR or 127.0.0.1:7461)")
    p.add_argument("--idle-timeout", type=float, default=60.0, help="seconds before idle sessions expire")
    p.add_argument("--ledger", help="write the exposure ledger here on shutdown")
    p.set_defaults(func=cmd_serve)

    remote_help = "train against a remote vault (optional host:port, else $GBX_ADDR)"
    p = sub.add_parser("train", help="train one method and save history/adapters")
    _add_vault_args(p)
    _add_data_args(p)
    p.add_argument("--config", help="key=value TrainConfig file")
    p.add_argument("--method", help="zs, lp, dga, lga, lora, llft(n), ft")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--remote", nargs="?", const="", help=remote_help)
    p.add_argument("--run-dir", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved adapters (or zero-shot) on the test split")
    _add_vault_args(p)
    _add_data_args(p)
    p.add_argument("--adapters", help="adapter checkpoint from train")
    p.add_argument("--remote", nargs="?", const="", help=remote_help)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="method comparison table")
    _add_vault_args(p)
    _add_data_args(p)
    p.add_argument("--methods", nargs="+", default=["zs", "lp", "dga", "lga"])
    p.add_argument("--mode", choices=("retrieval", "classification"), default="retrieval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--remote", nargs="?", const="", help=remote_help)
    p.add_argument("--run-dir", default="runs/experiment")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", help="ablation tables")
    _add_vault_args(p)
    _add_data_args(p)
    p.add_argument("--kind", nargs="+", default=["adapter-combos"],
                   choices=("adapter-combos", "extra-token-count", "proxy-count", "proxy-layers", "last-layers"))
    p.add_argument("--remote", nargs="?", const="", help=remote_help)
    p.add_argument("--run-dir", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="shared vs separate backbone FLOPs and memory")
    p.add_argument("--domains", type=int, default=10)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("visualize", help="write PPM views of the visual input adapter")
    _add_data_args(p)
    p.add_argument("--adapters", help="adapter checkpoint (default: identity adapters)")
    p.add_argument("-n", type=int, default=8, help="number of test images")
    p.add_argument("--out-dir", default="runs/views")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("audit", help="audit an exposure ledger file")
    _add_vault_args(p)
    p.add_argument("--ledger", required=True)
    p.add_argument("--method", default="run", help="row label for the report")
    p.set_defaults(func=cmd_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"graybox {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
