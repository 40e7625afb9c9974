"""Per-client model: one head network per feature plus one prediction network.

Head i is a binary classifier of feature i's next movement; its two output
probabilities are concatenated (after the flattened feature windows) into the
prediction network's input. Heads and predictor train on separate losses:
the prediction loss never backpropagates into the heads, so head parameters
depend only on their own classification objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import Normalizer, SampleSet, as_sample_set
from .errors import NumericalError
from .nn import AdamState, CheckpointError, DenseNet

HEAD_HIDDEN = (8, 64, 32, 8)
PREDICTOR_HIDDEN = (8, 64, 32, 8)
HEAD_ACTIVATIONS = [nn.LEAKY_RELU] * 4 + [nn.SOFTMAX]
PREDICTOR_ACTIVATIONS = [nn.LEAKY_RELU] * 3 + [nn.IDENTITY] * 2

# output row order of every head: row 0 scores class +1, row 1 scores class -1
CLASS_UP = 0
CLASS_DOWN = 1


def head_dims(w: int) -> list[int]:
    return [w, *HEAD_HIDDEN, 2]


def predictor_dims(nf: int, w: int) -> list[int]:
    # flattened (NF, W) windows plus two probabilities per head
    return [(w + 2) * nf, *PREDICTOR_HIDDEN, 1]


@dataclass
class ClientModel:
    domain_id: str
    w: int
    heads: list[DenseNet]
    predictor: DenseNet
    head_opt: list[AdamState]
    predictor_opt: AdamState
    normalizer: Normalizer

    @property
    def nf(self) -> int:
        return len(self.heads)


@dataclass
class BatchOutput:
    """Forward results for one batch: probabilities, predictions, and losses."""

    p: np.ndarray        # (B, 2*NF), head probabilities in head order
    y_hat: np.ndarray    # (B,)
    head_traces: list[nn.ForwardTrace]
    predictor_trace: nn.ForwardTrace
    head_losses: np.ndarray  # (NF,) cross-entropy per head
    prediction_loss: float


def init_client(domain_id: str, nf: int, w: int, lr: float, normalizer: Normalizer,
                seed, head_template: nn.DenseNet | None = None) -> ClientModel:
    """Build a client with nf heads and one predictor.

    When head_template is given every head starts as a copy of it (the usual
    federated convention: one broadcast initialization keeps clients' weight
    spaces aligned so later averaging is meaningful). Otherwise each head is
    freshly seeded from `seed`.
    """
    if nf < 1:
        raise ValueError(f"client needs at least one feature, got nf={nf}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if head_template is None:
        heads = [nn.init(head_dims(w), HEAD_ACTIVATIONS, rng) for _ in range(nf)]
    else:
        if head_template.dims != head_dims(w):
            raise ValueError(
                f"head template dims {head_template.dims} do not match w={w}")
        heads = [head_template.copy() for _ in range(nf)]
    predictor = nn.init(predictor_dims(nf, w), PREDICTOR_ACTIVATIONS, rng)
    return ClientModel(
        domain_id=domain_id,
        w=w,
        heads=heads,
        predictor=predictor,
        head_opt=[nn.init_adam(h, lr) for h in heads],
        predictor_opt=nn.init_adam(predictor, lr),
        normalizer=normalizer,
    )


def head_targets(c_column: np.ndarray) -> np.ndarray:
    """Map movement classes {-1, +1} to head class indices {CLASS_DOWN, CLASS_UP}."""
    return np.where(c_column == 1, CLASS_UP, CLASS_DOWN)


def _predictor_input(batch: SampleSet, p: np.ndarray) -> np.ndarray:
    b = len(batch)
    flat = batch.x.reshape(b, batch.nf * batch.x.shape[2])
    return np.concatenate([flat, p], axis=1)


def forward_client(m: ClientModel, batch) -> BatchOutput:
    """Forward-only pass of all heads and the predictor on one batch."""
    ss = as_sample_set(batch)
    if ss.nf != m.nf:
        raise ValueError(f"batch has {ss.nf} features, client '{m.domain_id}' has {m.nf}")
    b = len(ss)
    p = np.empty((b, 2 * m.nf))
    traces = []
    head_losses = np.empty(m.nf)
    for i, head in enumerate(m.heads):
        trace = nn.forward(head, ss.x[:, i, :])
        traces.append(trace)
        p[:, 2 * i:2 * i + 2] = trace.out
        head_losses[i], _ = nn.cross_entropy(trace, head_targets(ss.c[:, i]))
    pred_trace = nn.forward(m.predictor, _predictor_input(ss, p))
    y_hat = pred_trace.out[:, 0]
    prediction_loss, _ = nn.mse(y_hat, ss.y)
    return BatchOutput(p, y_hat, traces, pred_trace, head_losses, prediction_loss)


def train_batch(m: ClientModel, batch, constant_targets: bool = False) -> dict:
    """One training step: every head on its own targets, then the predictor.

    The predictor consumes the probabilities produced before the head updates
    (one forward pass, then all updates). With constant_targets the heads are
    fit to the constant class -1 instead of the movement classes, which keeps
    the architecture and update schedule intact while removing the movement
    signal. Raises NumericalError on any non-finite loss.
    """
    ss = as_sample_set(batch)
    if len(ss) == 0:
        raise ValueError("cannot train on an empty batch")
    if ss.nf != m.nf:
        raise ValueError(f"batch has {ss.nf} features, client '{m.domain_id}' has {m.nf}")
    b = len(ss)
    p = np.empty((b, 2 * m.nf))
    head_losses = np.empty(m.nf)
    for i, head in enumerate(m.heads):
        trace = nn.forward(head, ss.x[:, i, :])
        p[:, 2 * i:2 * i + 2] = trace.out
        if constant_targets:
            targets = np.full(b, CLASS_DOWN)
        else:
            targets = head_targets(ss.c[:, i])
        loss, out_grad = nn.cross_entropy(trace, targets)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite cross-entropy in head {i} of domain '{m.domain_id}'"
            )
        head_losses[i] = loss
        nn.adam_step(head, nn.backward(head, trace, out_grad), m.head_opt[i])
    pred_trace = nn.forward(m.predictor, _predictor_input(ss, p))
    y_hat = pred_trace.out[:, 0]
    prediction_loss, grad = nn.mse(y_hat, ss.y)
    if not np.isfinite(prediction_loss):
        raise NumericalError(f"non-finite prediction loss in domain '{m.domain_id}'")
    nn.adam_step(m.predictor, nn.backward(m.predictor, pred_trace, grad[:, None]), m.predictor_opt)
    return {"head_ce": head_losses, "mse": prediction_loss}


def evaluate(m: ClientModel, samples, chunk: int = 4096) -> dict:
    """Forward-only metrics: prediction MSE and per-head movement accuracy."""
    ss = as_sample_set(samples)
    if len(ss) == 0:
        raise ValueError("cannot evaluate on an empty sample list")
    sq_err = 0.0
    correct = np.zeros(m.nf)
    for start in range(0, len(ss), chunk):
        part = ss.subset(np.arange(start, min(start + chunk, len(ss))))
        out = forward_client(m, part)
        sq_err += float(((out.y_hat - part.y) ** 2).sum())
        for i in range(m.nf):
            predicted = out.p[:, 2 * i:2 * i + 2].argmax(axis=1)
            correct[i] += (predicted == head_targets(part.c[:, i])).sum()
    return {
        "mse": sq_err / len(ss),
        "per_head_accuracy": correct / len(ss),
    }


def snapshot_heads(m: ClientModel) -> list[tuple[int, DenseNet]]:
    """Deep copies of all heads, indexed; later training never mutates them."""
    return [(i, head.copy()) for i, head in enumerate(m.heads)]


def save_client(m: ClientModel, out_dir) -> None:
    """Write a client checkpoint: one file per network plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "domain_id": m.domain_id,
        "nf": m.nf,
        "w": m.w,
        "normalizer": {
            "mean": [float(v) for v in m.normalizer.mean],
            "std": [float(v) for v in m.normalizer.std],
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i, head in enumerate(m.heads):
        nn.save(head, out_dir / f"head_{i:03d}.net")
    nn.save(m.predictor, out_dir / "predictor.net")


def load_client(checkpoint_dir, lr: float = 0.01) -> ClientModel:
    """Load a client checkpoint; optimizer state starts fresh."""
    checkpoint_dir = Path(checkpoint_dir)
    manifest_path = checkpoint_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{checkpoint_dir}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
        domain_id = manifest["domain_id"]
        nf = int(manifest["nf"])
        w = int(manifest["w"])
        norm = Normalizer(
            mean=np.asarray(manifest["normalizer"]["mean"], dtype=np.float64),
            std=np.asarray(manifest["normalizer"]["std"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{manifest_path}: malformed manifest ({exc})") from exc
    if norm.mean.shape != (nf,) or norm.std.shape != (nf,):
        raise CheckpointError(f"{manifest_path}: normalizer stats do not match nf={nf}")
    heads = []
    for i in range(nf):
        head = nn.load(checkpoint_dir / f"head_{i:03d}.net")
        if head.dims != head_dims(w):
            raise CheckpointError(
                f"{checkpoint_dir}: head {i} dims {head.dims} do not match W={w}"
            )
        heads.append(head)
    predictor = nn.load(checkpoint_dir / "predictor.net")
    if predictor.dims != predictor_dims(nf, w):
        raise CheckpointError(
            f"{checkpoint_dir}: predictor dims {predictor.dims} do not match nf={nf}, W={w}"
        )
    return ClientModel(
        domain_id=domain_id,
        w=w,
        heads=heads,
        predictor=predictor,
        head_opt=[nn.init_adam(h, lr) for h in heads],
        predictor_opt=nn.init_adam(predictor, lr),
        normalizer=norm,
    )
