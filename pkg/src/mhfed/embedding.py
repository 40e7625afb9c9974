"""Force-vector embeddings of head networks.

A head's output layer has one weight row per class; over a batch, samples of
the target class pull their row's score up while the rest push it down. The
embedding summarizes those two forces for both rows as four scalars, so heads
can be compared across clients without exchanging data or full weights.

Two flavors share the same force structure and differ only in the magnitude
factor: the gradient-based embedding weighs each sample by the mean of its
final hidden vector, and the data-based embedding weighs rows by the mean of
their own output-layer weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseNet, ForwardTrace


@dataclass
class Embedding:
    """Four components: [pull_row1, push_row1, pull_row2, push_row2]."""

    e: np.ndarray
    sample_count: int


def _split_targets(trace: ForwardTrace, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = trace.out
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"embedding expects a two-class head trace, got output shape {p.shape}")
    t = np.asarray(targets)
    if t.size == 0:
        raise ValueError("cannot embed an empty batch")
    if t.shape != (p.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match batch size {p.shape[0]}")
    if not np.isin(t, (-1, 1)).all():
        raise ValueError("targets must be +1 or -1")
    return p, t == 1, t == -1


def embed_gradient(trace: ForwardTrace, targets: np.ndarray) -> Embedding:
    """Gradient-based embedding of one head on one batch.

    Per-sample magnitude is the arithmetic mean of the final hidden vector;
    all four components carry a global 1/T factor (T = batch size), so rare
    classes contribute small sums rather than being renormalized away.
    """
    p, pos, neg = _split_targets(trace, targets)
    t_count = p.shape[0]
    avg_h = trace.final_input.mean(axis=1)
    p1, p2 = p[:, 0], p[:, 1]
    e = np.array([
        (avg_h[pos] * (1.0 - p1[pos])).sum() / t_count,
        (avg_h[neg] * (-p1[neg])).sum() / t_count,
        (avg_h[pos] * (-p2[pos])).sum() / t_count,
        (avg_h[neg] * (1.0 - p2[neg])).sum() / t_count,
    ])
    return Embedding(e=e, sample_count=t_count)


def embed_data(head: DenseNet, trace: ForwardTrace, targets: np.ndarray) -> Embedding:
    """Data-based embedding: forces weighted by each output row's mean weight."""
    p, pos, neg = _split_targets(trace, targets)
    t_count = p.shape[0]
    out_w = head.layers[-1].weights
    if out_w.shape[0] != 2:
        raise ValueError(f"head output layer must have 2 rows, got {out_w.shape[0]}")
    avg_w1 = out_w[0].mean()
    avg_w2 = out_w[1].mean()
    p1, p2 = p[:, 0], p[:, 1]
    e = np.array([
        avg_w1 * (1.0 - p1[pos]).sum() / t_count,
        avg_w1 * (-p1[neg]).sum() / t_count,
        avg_w2 * (-p2[pos]).sum() / t_count,
        avg_w2 * (1.0 - p2[neg]).sum() / t_count,
    ])
    return Embedding(e=e, sample_count=t_count)


def embedding_distance(a: Embedding, b: Embedding) -> float:
    """Mean of component-wise squared differences between two embeddings."""
    diff = a.e - b.e
    return float((diff * diff).mean())
