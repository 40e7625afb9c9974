"""Command line interface.

Subcommands: gen (write synthetic data as CSV), train, ablate, sweep-alpha,
embed (dump head embeddings of a checkpoint), eval (score a checkpoint).
Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, model, nn, report
from .config import (
    CsvDomainConfig,
    DataConfig,
    load_config,
    resolved,
    save_config,
)
from .data import generate_synthetic, write_csv
from .embedding import embed_data, embed_gradient
from .errors import ConfigError, DataError, NumericalError
from .nn import CheckpointError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

DEFAULT_SWEEP_ALPHAS = (0.0, 0.05, 0.1, 0.15, 0.2)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this project reserves 2 for
    # config errors, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mhfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--variant", choices=[f"ver{k}" for k in range(1, 9)], default=None,
                       help="override the config variant")
        p.add_argument("--horizon", type=int, default=None, help="override the prediction horizon")
        p.add_argument("--out", required=out_required, default=None, help="output directory")

    common(sub.add_parser("gen", help="generate synthetic runs as CSV files"), out_required=True)
    common(sub.add_parser("train", help="run one training configuration"))
    common(sub.add_parser("ablate", help="run all eight variants on one seed"))
    sweep = sub.add_parser("sweep-alpha", help="sweep the blending fraction")
    common(sweep)
    sweep.add_argument("--alphas", default=None,
                       help="comma-separated blending fractions (default 0,0.05,0.1,0.15,0.2)")
    embed = sub.add_parser("embed", help="dump head embeddings of a client checkpoint")
    common(embed)
    embed.add_argument("--checkpoint", required=True, help="client checkpoint directory")
    evalp = sub.add_parser("eval", help="evaluate a client checkpoint on one split")
    common(evalp)
    evalp.add_argument("--checkpoint", required=True, help="client checkpoint directory")
    evalp.add_argument("--split", choices=["train", "val", "test"], default="test")
    return parser


def _load_run_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
    if args.horizon is not None:
        cfg = replace(cfg, horizon=args.horizon)
    return cfg


def _cmd_gen(args) -> int:
    cfg = resolved(_load_run_config(args))
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen requires a config with data.kind = 'synthetic'")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = generate_synthetic(cfg.data.synthetic)
    csv_sections = {}
    for domain_id in sorted(domains):
        domain_dir = out_dir / domain_id
        domain_dir.mkdir(exist_ok=True)
        paths = []
        for run_obj in domains[domain_id]:
            path = domain_dir / f"{run_obj.run_id}.csv"
            write_csv(run_obj, path)
            paths.append(str(path))
        csv_sections[domain_id] = CsvDomainConfig(
            paths=paths,
            feature_cols=domains[domain_id][0].feature_names,
            label_col="y",
        )
    train_cfg = replace(cfg, data=DataConfig(kind="csv", csv=csv_sections))
    save_config(train_cfg, out_dir / "train_config.json")
    print(f"wrote {sum(len(r) for r in domains.values())} runs under {out_dir}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    metrics = harness.run(cfg, out_dir=args.out)
    if args.out is not None:
        report.write_val_curves(metrics, Path(args.out) / "val_curves.png")
    for line in harness.metrics_lines(metrics):
        print(line)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    results = harness.ablate(cfg, out_dir=args.out)
    for variant in sorted(results):
        for res in results[variant].finals:
            print(json.dumps({"variant": variant, "domain": res.domain,
                              "test_mse": res.test_mse}, sort_keys=True))
    return EXIT_OK


def _cmd_sweep_alpha(args) -> int:
    cfg = _load_run_config(args)
    if args.alphas is None:
        alphas = list(DEFAULT_SWEEP_ALPHAS)
    else:
        try:
            alphas = [float(tok) for tok in args.alphas.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"--alphas: {exc}") from exc
        if not alphas:
            raise ConfigError("--alphas: no values given")
    results = harness.sweep_alpha(cfg, alphas, out_dir=args.out)
    for alpha, metrics in results:
        for res in metrics.finals:
            print(json.dumps({"alpha": alpha, "domain": res.domain,
                              "test_mse": res.test_mse}, sort_keys=True))
    return EXIT_OK


def _checkpoint_batch(args, client):
    """First validation batch (evaluation order) of the checkpoint's domain."""
    cfg = resolved(_load_run_config(args))
    domains, _ = harness.prepare_domains(cfg)
    for d in domains:
        if d.domain_id == client.domain_id:
            n = min(cfg.batch, len(d.val))
            return d, d.val.subset(np.arange(n))
    raise DataError(f"config data has no domain '{client.domain_id}'")


def _cmd_embed(args) -> int:
    client = model.load_client(args.checkpoint)
    _, batch = _checkpoint_batch(args, client)
    lines = []
    for i, head in enumerate(client.heads):
        trace = nn.forward(head, batch.x[:, i, :])
        targets = batch.c[:, i]
        grad_e = embed_gradient(trace, targets)
        data_e = embed_data(head, trace, targets)
        lines.append(json.dumps({
            "domain": client.domain_id,
            "head": i,
            "gradient": [float(v) for v in grad_e.e],
            "data": [float(v) for v in data_e.e],
            "sample_count": grad_e.sample_count,
        }, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "embeddings.jsonl").write_text(text)
    print(text, end="")
    return EXIT_OK


def _cmd_eval(args) -> int:
    client = model.load_client(args.checkpoint)
    cfg = resolved(_load_run_config(args))
    domains, _ = harness.prepare_domains(cfg)
    for d in domains:
        if d.domain_id == client.domain_id:
            samples = {"train": d.train, "val": d.val, "test": d.test}[args.split]
            scores = model.evaluate(client, samples)
            print(json.dumps({
                "domain": client.domain_id,
                "split": args.split,
                "mse": scores["mse"],
                "per_head_accuracy": [float(a) for a in scores["per_head_accuracy"]],
            }, sort_keys=True))
            return EXIT_OK
    raise DataError(f"config data has no domain '{client.domain_id}'")


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "sweep-alpha": _cmd_sweep_alpha,
    "embed": _cmd_embed,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
