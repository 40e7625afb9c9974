"""Training harness: data preparation, the federated training loop, metrics.

One run: split each domain's runs 60/20/20 by whole runs, window, initialize
one client per domain, pretrain, then train with periodic federated rounds.
Validation after every epoch drives per-client save-best; the best snapshot
is restored before the final forward-only test pass.

Determinism: every random draw comes from a named stream derived from the
run seed, so identical configs produce byte-identical metrics files. Wall
time is therefore kept out of the metrics file and lives in the summary
sidecar instead.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fed, model, nn
from .config import VARIANTS, RunConfig, config_hash, resolved
from .data import (
    DataError,
    Normalizer,
    SampleSet,
    SplitSpec,
    generate_synthetic,
    ingest_csv,
    iter_batch_indices,
    split_runs,
    stack_samples,
    window,
)
from .embedding import embed_data, embed_gradient
from .fed import PoolEmptyError, SourcePool
from .model import ClientModel

# named rng streams derived from the run seed
_STREAM_SPLIT = 1
_STREAM_INIT = 2
_STREAM_BATCH = 3
_STREAM_PROTOCOL = 4
_STREAM_RANDOM_SELECT = 5


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # "pretrain" | "train"
    domain: str
    val_mse: float


@dataclass
class DomainResult:
    domain: str
    test_mse: float
    per_head_accuracy: list[float]
    best_epoch: int
    best_val_mse: float


@dataclass
class RunMetrics:
    variant: str
    seed: int
    alpha: float
    config_hash: str
    split_hash: str
    epochs: list[EpochRecord]
    finals: list[DomainResult]
    federated_rounds: int
    pool_versions: dict[str, int]
    batches_trained: dict[str, int]
    wall_time_s: float


def metrics_lines(metrics: RunMetrics) -> list[str]:
    """Serialize a run as JSONL. Excludes wall time so reruns are byte-identical."""
    lines = [json.dumps({
        "kind": "run",
        "variant": metrics.variant,
        "seed": metrics.seed,
        "alpha": metrics.alpha,
        "config_hash": metrics.config_hash,
        "split_hash": metrics.split_hash,
    }, sort_keys=True)]
    for rec in metrics.epochs:
        lines.append(json.dumps({
            "kind": "epoch",
            "epoch": rec.epoch,
            "phase": rec.phase,
            "domain": rec.domain,
            "val_mse": rec.val_mse,
        }, sort_keys=True))
    for res in metrics.finals:
        lines.append(json.dumps({
            "kind": "final",
            "domain": res.domain,
            "test_mse": res.test_mse,
            "per_head_accuracy": res.per_head_accuracy,
            "best_epoch": res.best_epoch,
            "best_val_mse": res.best_val_mse,
        }, sort_keys=True))
    lines.append(json.dumps({
        "kind": "fed",
        "federated_rounds": metrics.federated_rounds,
        "pool_versions": metrics.pool_versions,
        "batches_trained": metrics.batches_trained,
    }, sort_keys=True))
    return lines


def write_metrics(metrics: RunMetrics, path) -> None:
    Path(path).write_text("\n".join(metrics_lines(metrics)) + "\n")


def write_summary(metrics: RunMetrics, path) -> None:
    """Volatile sidecar: everything coarse plus wall time."""
    Path(path).write_text(json.dumps({
        "variant": metrics.variant,
        "seed": metrics.seed,
        "alpha": metrics.alpha,
        "config_hash": metrics.config_hash,
        "wall_time_s": metrics.wall_time_s,
        "test_mse": {r.domain: r.test_mse for r in metrics.finals},
        "best_epoch": {r.domain: r.best_epoch for r in metrics.finals},
        "federated_rounds": metrics.federated_rounds,
    }, indent=2, sort_keys=True) + "\n")


@dataclass
class DomainData:
    domain_id: str
    nf: int
    normalizer: Normalizer
    split: SplitSpec
    train: SampleSet
    val: SampleSet
    test: SampleSet


def _load_runs(cfg: RunConfig) -> dict[str, list]:
    if cfg.data.kind == "synthetic":
        return generate_synthetic(cfg.data.synthetic)
    domains = {}
    for domain_id in sorted(cfg.data.csv):
        section = cfg.data.csv[domain_id]
        runs = ingest_csv(sorted(section.paths), section.schema, domain_id)
        runs.sort(key=lambda r: r.run_id)
        domains[domain_id] = runs
    return domains


def prepare_domains(cfg: RunConfig) -> tuple[list[DomainData], str]:
    """Split, fit normalizers on training runs only, and window every split."""
    runs_by_domain = _load_runs(cfg)
    prepared = []
    split_record = {}
    for j, domain_id in enumerate(sorted(runs_by_domain)):
        runs = runs_by_domain[domain_id]
        by_id = {r.run_id: r for r in runs}
        split = split_runs(runs, np.random.default_rng([cfg.seed, _STREAM_SPLIT, j]))
        split_record[domain_id] = {"train": split.train, "val": split.val, "test": split.test}
        norm = Normalizer.fit([by_id[rid] for rid in split.train])

        def windows(ids):
            samples = []
            for rid in ids:
                samples.extend(window(by_id[rid], cfg.w, cfg.horizon, norm))
            if not samples:
                raise DataError(f"domain '{domain_id}': a split produced zero samples")
            return stack_samples(samples)

        prepared.append(DomainData(
            domain_id=domain_id,
            nf=runs[0].nf,
            normalizer=norm,
            split=split,
            train=windows(split.train),
            val=windows(split.val),
            test=windows(split.test),
        ))
    split_hash = hashlib.sha256(
        json.dumps(split_record, sort_keys=True).encode()
    ).hexdigest()
    return prepared, split_hash


def _compute_embeddings(client: ClientModel, batch: SampleSet, embed_kind: str) -> list:
    embs = []
    for i, head in enumerate(client.heads):
        trace = nn.forward(head, batch.x[:, i, :])
        targets = batch.c[:, i]
        if embed_kind == "gradient":
            embs.append(embed_gradient(trace, targets))
        else:
            embs.append(embed_data(head, trace, targets))
    return embs


def _federated_round(clients: dict[str, ClientModel], batches: dict[str, SampleSet],
                     participants: list[str], cfg: RunConfig, pool: SourcePool,
                     proto_rng: np.random.Generator, select_rng: np.random.Generator,
                     dump_rows: list | None) -> None:
    """One federated round: embed, share (with drop-out), select, blend.

    All still-active clients participate. Selection reads the post-share pool,
    and blending touches only local heads, so client order cannot leak state.
    """
    pool.round += 1
    mode = cfg.fed.mode
    embeddings = {
        j: _compute_embeddings(clients[j], batches[j], cfg.fed.embed_kind)
        for j in participants
    }
    for j in participants:
        fed.share(pool, j, model.snapshot_heads(clients[j]), embeddings[j],
                  cfg.fed.dr, proto_rng)
    for j in participants:
        client = clients[j]
        for i in range(client.nf):
            key = (j, i)
            emb = embeddings[j][i]
            try:
                if mode == "single":
                    selected = [fed.select_single(pool, key, emb)]
                    scales = np.array([1.0])
                elif mode == "multiple":
                    selected = fed.select_multiple(pool, key, emb)
                    if not selected:
                        continue
                    scales = fed.blend_scale(selected, emb, cfg.fed.negate_distance)
                elif mode == "fedavg":
                    selected = [fed.fedavg_aggregate(pool, key, client.heads[i])]
                    scales = np.array([1.0])
                elif mode == "random":
                    selected = [fed.random_select(pool, key, select_rng)]
                    scales = np.array([1.0])
                else:
                    raise ValueError(f"unexpected federation mode {mode!r}")
            except PoolEmptyError:
                continue
            client.heads[i] = fed.blend_update(client.heads[i], selected, scales, cfg.fed.alpha)
    if dump_rows is not None:
        for key in sorted(pool.entries):
            entry = pool.entries[key]
            dump_rows.append(json.dumps({
                "round": pool.round,
                "domain": entry.domain_id,
                "head": entry.head_index,
                "version": entry.version,
                "embedding": [float(v) for v in entry.embedding.e],
            }, sort_keys=True))


def _train_epoch(clients: dict[str, ClientModel], domains: list[DomainData],
                 cfg: RunConfig, pool: SourcePool, cum_batches: dict[str, int],
                 proto_rng, select_rng, epoch_idx: int, federate: bool,
                 constant_targets: bool, dump_rows, rounds_done: list[int]) -> None:
    """Round-robin one batch per still-active client until the epoch is spent.

    A federated round triggers whenever any active client's cumulative batch
    count sits on a period boundary, before that pass's training step.
    """
    order = [d.domain_id for d in domains]
    data = {d.domain_id: d for d in domains}
    queues = {}
    for jidx, j in enumerate(order):
        rng = np.random.default_rng([cfg.seed, _STREAM_BATCH, jidx, epoch_idx])
        queues[j] = list(iter_batch_indices(len(data[j].train), cfg.batch, rng))
    cursor = {j: 0 for j in order}
    while True:
        active = [j for j in order if cursor[j] < len(queues[j])]
        if not active:
            break
        batches = {j: data[j].train.subset(queues[j][cursor[j]]) for j in active}
        if federate and any(
            cum_batches[j] > 0 and cum_batches[j] % cfg.federated_period_batches == 0
            for j in active
        ):
            _federated_round(clients, batches, active, cfg, pool,
                             proto_rng, select_rng, dump_rows)
            rounds_done[0] += 1
        for j in active:
            model.train_batch(clients[j], batches[j], constant_targets=constant_targets)
            cum_batches[j] += 1
            cursor[j] += 1


def _snapshot_client(m: ClientModel) -> tuple[list, nn.DenseNet]:
    return ([h.copy() for h in m.heads], m.predictor.copy())


def _restore_client(m: ClientModel, snap) -> None:
    heads, predictor = snap
    m.heads = [h.copy() for h in heads]
    m.predictor = predictor.copy()


def run(config: RunConfig, out_dir=None) -> RunMetrics:
    """Execute one full training run and return its metrics.

    When out_dir is given, writes metrics.jsonl, summary.json, best-model
    checkpoints per domain, and (if enabled) the per-round pool dump.
    """
    cfg = resolved(config)
    t0 = time.perf_counter()
    domains, split_hash = prepare_domains(cfg)
    spec = cfg.variant_spec

    # one broadcast head initialization (weight averaging needs aligned
    # starting points); predictors are never shared, so they stay per-domain
    head_template = nn.init(model.head_dims(cfg.w), model.HEAD_ACTIVATIONS,
                            np.random.default_rng([cfg.seed, _STREAM_INIT]))
    clients: dict[str, ClientModel] = {}
    for jidx, d in enumerate(domains):
        clients[d.domain_id] = model.init_client(
            d.domain_id, d.nf, cfg.w, cfg.lr, d.normalizer,
            np.random.default_rng([cfg.seed, _STREAM_INIT, jidx]),
            head_template=head_template,
        )

    pool = SourcePool()
    proto_rng = np.random.default_rng([cfg.seed, _STREAM_PROTOCOL])
    select_rng = np.random.default_rng([cfg.seed, _STREAM_RANDOM_SELECT])
    cum_batches = {d.domain_id: 0 for d in domains}
    rounds_done = [0]
    dump_rows: list | None = [] if cfg.dump_pool else None

    best: dict[str, tuple[float, int, tuple]] = {}
    epoch_records: list[EpochRecord] = []
    epoch_idx = 0
    phases = [("pretrain", cfg.pretrain_epochs, False), ("train", cfg.epochs, spec.mode != "off")]
    for phase, n_epochs, federate in phases:
        for _ in range(n_epochs):
            _train_epoch(clients, domains, cfg, pool, cum_batches, proto_rng,
                         select_rng, epoch_idx, federate,
                         constant_targets=not spec.pre_classification,
                         dump_rows=dump_rows, rounds_done=rounds_done)
            for d in domains:
                val = model.evaluate(clients[d.domain_id], d.val)
                epoch_records.append(EpochRecord(epoch_idx, phase, d.domain_id, val["mse"]))
                kept = best.get(d.domain_id)
                if kept is None or val["mse"] < kept[0]:
                    best[d.domain_id] = (val["mse"], epoch_idx,
                                         _snapshot_client(clients[d.domain_id]))
            epoch_idx += 1

    finals = []
    for d in domains:
        best_val, best_epoch, snap = best[d.domain_id]
        _restore_client(clients[d.domain_id], snap)
        test = model.evaluate(clients[d.domain_id], d.test)
        finals.append(DomainResult(
            domain=d.domain_id,
            test_mse=test["mse"],
            per_head_accuracy=[float(a) for a in test["per_head_accuracy"]],
            best_epoch=best_epoch,
            best_val_mse=best_val,
        ))

    pool_versions = {d.domain_id: -1 for d in domains}
    for (domain_id, _), entry in pool.entries.items():
        pool_versions[domain_id] = max(pool_versions[domain_id], entry.version)

    metrics = RunMetrics(
        variant=cfg.variant,
        seed=cfg.seed,
        alpha=cfg.fed.alpha,
        config_hash=config_hash(cfg),
        split_hash=split_hash,
        epochs=epoch_records,
        finals=finals,
        federated_rounds=rounds_done[0],
        pool_versions=pool_versions,
        batches_trained=dict(cum_batches),
        wall_time_s=time.perf_counter() - t0,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out_dir / "metrics.jsonl")
        write_summary(metrics, out_dir / "summary.json")
        if dump_rows is not None:
            (out_dir / "pool_dump.jsonl").write_text("\n".join(dump_rows) + "\n" if dump_rows else "")
        for d in domains:
            model.save_client(clients[d.domain_id], out_dir / "checkpoints" / d.domain_id)
    return metrics


def ablate(config: RunConfig, out_dir=None) -> dict[str, RunMetrics]:
    """Run all eight variants on the same seed and data; optionally write a report."""
    results: dict[str, RunMetrics] = {}
    for variant in sorted(VARIANTS):
        results[variant] = run(replace(config, variant=variant))
    if out_dir is not None:
        from . import report
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for variant, metrics in results.items():
            write_metrics(metrics, out_dir / f"metrics_{variant}.jsonl")
            write_summary(metrics, out_dir / f"summary_{variant}.json")
        report.write_ablation_report(results, out_dir)
    return results


def sweep_alpha(config: RunConfig, alphas: list[float], out_dir=None) -> list[tuple[float, RunMetrics]]:
    """Rerun one config over a grid of blending fractions; optionally write a report."""
    if not alphas:
        raise ValueError("sweep_alpha needs at least one alpha")
    results = []
    for alpha in alphas:
        cfg = replace(config, fed=replace(config.fed, alpha=float(alpha)))
        results.append((float(alpha), run(cfg)))
    if out_dir is not None:
        from . import report
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for alpha, metrics in results:
            write_metrics(metrics, out_dir / f"metrics_alpha_{alpha:g}.jsonl")
        report.write_sweep_report(results, out_dir)
    return results
