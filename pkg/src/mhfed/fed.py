"""Federation protocol: source pool, sharing with drop-out, selection, blending.

The source pool is a versioned map from (domain_id, head_index) to the
latest shared head snapshot and its embedding. Sharing is lossy on purpose:
each domain keeps its pool entries fresh only with probability 1 - drop_rate
per federated round, and stale entries stay eligible for selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import Embedding, embedding_distance
from .nn import DenseNet


class PoolEmptyError(Exception):
    """No eligible source entries for the requested target."""


@dataclass
class PoolEntry:
    domain_id: str
    head_index: int
    weights: DenseNet
    embedding: Embedding
    version: int

    @property
    def key(self) -> tuple[str, int]:
        return (self.domain_id, self.head_index)


@dataclass
class SourcePool:
    entries: dict[tuple[str, int], PoolEntry] = field(default_factory=dict)
    round: int = 0


def share(pool: SourcePool, domain_id: str, snapshots: list[tuple[int, DenseNet]],
          embeddings: list[Embedding], drop_rate: float, rng: np.random.Generator) -> bool:
    """Publish a domain's head snapshots, subject to one drop draw per round.

    With probability 1 - drop_rate all of the domain's entries are replaced
    atomically (stamped with the pool's current round); otherwise nothing
    changes. snapshots and embeddings must align one-to-one.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must lie in [0, 1], got {drop_rate}")
    if len(snapshots) != len(embeddings):
        raise ValueError(
            f"{len(snapshots)} snapshots vs {len(embeddings)} embeddings for domain '{domain_id}'"
        )
    if rng.random() < drop_rate:
        return False
    for (head_index, net), emb in zip(snapshots, embeddings):
        pool.entries[(domain_id, head_index)] = PoolEntry(
            domain_id=domain_id,
            head_index=head_index,
            weights=net,
            embedding=emb,
            version=pool.round,
        )
    return True


def _ranked(pool: SourcePool, target_key: tuple[str, int], target_embedding: Embedding):
    """Eligible entries with distances, in deterministic key order."""
    for key in sorted(pool.entries):
        if key == target_key:
            continue
        entry = pool.entries[key]
        yield embedding_distance(entry.embedding, target_embedding), entry


def select_single(pool: SourcePool, target_key: tuple[str, int],
                  target_embedding: Embedding) -> PoolEntry:
    """Pool-wide nearest entry by embedding distance, excluding the target itself.

    Exact distance ties break toward the lowest (domain_id, head_index).
    """
    best_d = np.inf
    best = None
    for d, entry in _ranked(pool, target_key, target_embedding):
        if d < best_d:
            best_d, best = d, entry
    if best is None:
        raise PoolEmptyError(f"no eligible source entries for {target_key}")
    return best


def select_multiple(pool: SourcePool, target_key: tuple[str, int],
                    target_embedding: Embedding) -> list[PoolEntry]:
    """Nearest eligible entry of every domain, ordered by domain id.

    The target's own key is excluded from its own domain's candidates;
    domains left without candidates are omitted. May return an empty list.
    """
    best: dict[str, tuple[float, PoolEntry]] = {}
    for d, entry in _ranked(pool, target_key, target_embedding):
        kept = best.get(entry.domain_id)
        if kept is None or d < kept[0]:
            best[entry.domain_id] = (d, entry)
    return [best[domain][1] for domain in sorted(best)]


def blend_scale(selected: list[PoolEntry], target_embedding: Embedding,
                negate_distance: bool = False) -> np.ndarray:
    """Softmax over the selected entries' embedding distances.

    Applied to the raw distances, farther sources get larger weight; the
    negate_distance switch flips the sign so nearer sources dominate instead.
    """
    if not selected:
        raise ValueError("blend_scale needs at least one selected entry")
    d = np.array([embedding_distance(e.embedding, target_embedding) for e in selected])
    z = -d if negate_distance else d
    z = z - z.max()
    expz = np.exp(z)
    return expz / expz.sum()


def _blend_sources(selected) -> list[tuple[str, DenseNet]]:
    out = []
    for item in selected:
        if isinstance(item, PoolEntry):
            out.append((f"({item.domain_id}, {item.head_index})", item.weights))
        else:
            out.append(("aggregate", item))
    return out


def blend_update(target: DenseNet, selected, scales: np.ndarray, alpha: float) -> DenseNet:
    """Convex update: (1 - alpha) * target + alpha * sum_l scales[l] * source_l.

    selected holds PoolEntry objects or bare DenseNets; scales must sum to 1.
    alpha = 0 returns the target unchanged bit-for-bit. Topology mismatches
    raise, naming the offending entry.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    scales = np.asarray(scales, dtype=np.float64)
    sources = _blend_sources(selected)
    if scales.shape != (len(sources),):
        raise ValueError(f"{len(sources)} sources but {scales.shape} scales")
    if sources and abs(scales.sum() - 1.0) > 1e-9:
        raise ValueError(f"blend scales must sum to 1, got {scales.sum()!r}")
    if alpha == 0.0:
        return target.copy()
    for label, net in sources:
        if net.dims != target.dims or net.activations != target.activations:
            raise ValueError(
                f"topology mismatch: source entry {label} has dims {net.dims}, "
                f"target has {target.dims}"
            )
    blended = target.copy()
    for k, layer in enumerate(blended.layers):
        mix_w = sum(s * net.layers[k].weights for s, (_, net) in zip(scales, sources))
        mix_b = sum(s * net.layers[k].bias for s, (_, net) in zip(scales, sources))
        layer.weights = (1.0 - alpha) * layer.weights + alpha * mix_w
        layer.bias = (1.0 - alpha) * layer.bias + alpha * mix_b
    return blended


def fedavg_aggregate(pool: SourcePool, target_key: tuple[str, int],
                     target_net: DenseNet) -> DenseNet:
    """Unweighted element-wise mean of all pool entries compatible with target_net."""
    nets = [
        entry.weights
        for key in sorted(pool.entries)
        if (entry := pool.entries[key]).weights.dims == target_net.dims
        and entry.weights.activations == target_net.activations
    ]
    if not nets:
        raise PoolEmptyError(f"no compatible pool entries to average for {target_key}")
    mean = nets[0].copy()
    for k, layer in enumerate(mean.layers):
        layer.weights = sum(net.layers[k].weights for net in nets) / len(nets)
        layer.bias = sum(net.layers[k].bias for net in nets) / len(nets)
    return mean


def random_select(pool: SourcePool, target_key: tuple[str, int],
                  rng: np.random.Generator) -> PoolEntry:
    """Uniform draw over eligible entries (everything but the target's own key)."""
    keys = sorted(k for k in pool.entries if k != target_key)
    if not keys:
        raise PoolEmptyError(f"no eligible source entries for {target_key}")
    return pool.entries[keys[int(rng.integers(len(keys)))]]
