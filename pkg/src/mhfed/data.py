"""Data pipeline: CSV ingestion, synthetic generation, windowing, batching.

A "run" is one uninterrupted multivariate recording: an (NF, T) feature block
plus a length-T label series. Runs are the unit of train/validation/test
splitting so that no window ever straddles a split boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

STD_FLOOR = 1e-8


@dataclass
class RawRun:
    """One contiguous recording for one domain.

    Attributes:
        domain_id: owning client identifier.
        run_id: unique id of this recording within the domain.
        features: float64 array of shape (NF, T), feature rows over time.
        labels: float64 array of shape (T,), the raw prediction target.
        feature_names: length-NF column names, in row order.
    """

    domain_id: str
    run_id: str
    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str]

    @property
    def nf(self) -> int:
        return self.features.shape[0]

    @property
    def t_run(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise DataError(f"run '{self.run_id}': features must be 2-d (NF, T)")
        if self.labels.shape != (self.features.shape[1],):
            raise DataError(
                f"run '{self.run_id}': labels length {self.labels.shape} does not match "
                f"T={self.features.shape[1]}"
            )
        if len(self.feature_names) != self.nf:
            raise DataError(f"run '{self.run_id}': feature_names length does not match NF")
        if not np.isfinite(self.features).all() or not np.isfinite(self.labels).all():
            raise DataError(f"run '{self.run_id}': non-finite values present")


@dataclass
class FeatureTensor:
    """One windowed sample: feature windows, movement targets, raw label.

    x is the (NF, W) block of standardized feature windows ending at time
    t_index - 1; c holds the per-feature movement class at t_index (+1 if the
    feature rises at t_index, else -1); y is the raw label at t_index + horizon.
    """

    x: np.ndarray
    c: np.ndarray
    y: float
    t_index: int


@dataclass
class SampleSet:
    """Column-stacked windowed samples for fast slicing.

    x: (N, NF, W) float64; c: (N, NF) int8 in {-1, +1}; y: (N,) float64.
    """

    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    t_index: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def nf(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(self.x[idx], self.c[idx], self.y[idx], self.t_index[idx])


@dataclass
class SplitSpec:
    """Disjoint run-id lists for one domain."""

    train: list[str]
    val: list[str]
    test: list[str]


@dataclass
class CsvSchema:
    feature_cols: list[str]
    label_col: str


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic multi-domain generator.

    All domains observe linear mixtures of the same family of latent AR(1)
    processes, so head tasks transfer across domains by construction. Feature
    i of every domain mixes the latents through (a jittered copy of) the same
    dictionary row, and the label is the same linear functional of the
    latents everywhere.
    """

    ns: int
    nf: list[int]
    runs_per_domain: int | list[int] = 10
    t_run: int = 200
    latent_dim: int = 6
    noise: float = 0.5
    label_noise: float = 0.1
    ar_coef: float = 0.9
    mix_jitter: float = 0.0
    noise_spread: float = 0.0
    identity_mixing: bool = False
    seed: int | None = 0


def ingest_csv(paths, schema: CsvSchema, domain_id: str) -> list[RawRun]:
    """Parse one run per CSV file.

    Files must have a header row naming at least the schema's columns; every
    selected cell must parse as a finite float. Errors name the file and,
    where applicable, the 1-based line and column.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    runs = []
    for path in paths:
        path = Path(path)
        try:
            handle = path.open(newline="")
        except OSError as exc:
            raise DataError(f"{path}: cannot open ({exc})") from exc
        with handle:
            reader = csv.reader(handle)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            col_idx = {}
            for name in schema.feature_cols + [schema.label_col]:
                if name not in header:
                    raise DataError(f"{path}: missing column '{name}'")
                col_idx[name] = header.index(name)
            feat_rows: list[list[float]] = []
            label_vals: list[float] = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                parsed = {}
                for name, j in col_idx.items():
                    if j >= len(row):
                        raise DataError(f"{path}, line {line_no}: missing value in column '{name}'")
                    cell = row[j]
                    try:
                        value = float(cell)
                    except ValueError:
                        raise DataError(
                            f"{path}, line {line_no}: non-numeric value {cell!r} in column '{name}'"
                        ) from None
                    if not np.isfinite(value):
                        raise DataError(
                            f"{path}, line {line_no}: non-finite value in column '{name}'"
                        )
                    parsed[name] = value
                feat_rows.append([parsed[name] for name in schema.feature_cols])
                label_vals.append(parsed[schema.label_col])
            if not feat_rows:
                raise DataError(f"{path}: empty run (no data rows)")
        run = RawRun(
            domain_id=domain_id,
            run_id=path.stem,
            # C-contiguous so downstream reductions block identically to the
            # synthetic path (csv round trips stay bit-exact end to end)
            features=np.ascontiguousarray(np.asarray(feat_rows, dtype=np.float64).T),
            labels=np.asarray(label_vals, dtype=np.float64),
            feature_names=list(schema.feature_cols),
        )
        run.validate()
        runs.append(run)
    return runs


def write_csv(run: RawRun, path) -> None:
    """Write a run as CSV with full round-trip float precision."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(run.feature_names + ["y"])
        for t in range(run.t_run):
            writer.writerow([repr(float(v)) for v in run.features[:, t]] + [repr(float(run.labels[t]))])


def generate_synthetic(spec: SyntheticSpec) -> dict[str, list[RawRun]]:
    """Generate seeded multi-domain runs; returns {domain_id: [RawRun, ...]}.

    Latents follow a stationary AR(1) with unit marginal variance. Domain j's
    features are fixed linear mixtures of the latents plus observation noise;
    the label is a fixed unit-norm linear functional of the latents plus
    label noise. With identity_mixing and zero noise, features equal the
    latents exactly.

    noise_spread > 0 gives feature index i the noise multiplier
    exp(U(-spread, spread)), shared across domains, so same-index features
    everywhere stay identically distributed while different indices diverge
    in movement signal-to-noise.
    """
    if spec.seed is None:
        raise DataError("synthetic spec has no seed")
    if spec.ns < 1:
        raise DataError(f"ns must be >= 1, got {spec.ns}")
    if len(spec.nf) != spec.ns:
        raise DataError(f"nf must list {spec.ns} feature counts, got {len(spec.nf)}")
    if any(n < 1 for n in spec.nf):
        raise DataError("all feature counts must be >= 1")
    runs_per = spec.runs_per_domain
    if isinstance(runs_per, int):
        runs_per = [runs_per] * spec.ns
    if len(runs_per) != spec.ns or any(r < 1 for r in runs_per):
        raise DataError(f"runs_per_domain must give >= 1 runs for each of {spec.ns} domains")
    if spec.t_run < 2:
        raise DataError(f"t_run must be >= 2, got {spec.t_run}")
    if spec.latent_dim < 1:
        raise DataError("latent_dim must be >= 1")
    if not abs(spec.ar_coef) < 1:
        raise DataError(f"ar_coef must lie in (-1, 1), got {spec.ar_coef}")
    if spec.noise_spread < 0:
        raise DataError(f"noise_spread must be >= 0, got {spec.noise_spread}")
    if spec.identity_mixing and any(n != spec.latent_dim for n in spec.nf):
        raise DataError("identity_mixing requires nf == latent_dim for every domain")

    k = spec.latent_dim
    rng_struct = np.random.default_rng([spec.seed, 11])
    dictionary = rng_struct.normal(size=(max(spec.nf), k))
    dictionary /= np.linalg.norm(dictionary, axis=1, keepdims=True)
    label_w = rng_struct.normal(size=k)
    label_w /= np.linalg.norm(label_w)
    mixers = []
    for j in range(spec.ns):
        if spec.identity_mixing:
            mixers.append(np.eye(k))
            continue
        m = dictionary[: spec.nf[j]] + spec.mix_jitter * rng_struct.normal(size=(spec.nf[j], k))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        mixers.append(m)
    # drawn after all structural draws so spread=0 reproduces older streams
    noise_scales = np.ones(max(spec.nf))
    if spec.noise_spread > 0:
        noise_scales = np.exp(rng_struct.uniform(
            -spec.noise_spread, spec.noise_spread, size=max(spec.nf)))

    innov_scale = np.sqrt(1.0 - spec.ar_coef ** 2)
    out: dict[str, list[RawRun]] = {}
    for j in range(spec.ns):
        domain = f"d{j}"
        names = [f"x{i}" for i in range(spec.nf[j])]
        runs = []
        for r in range(runs_per[j]):
            rng = np.random.default_rng([spec.seed, 12, j, r])
            z = np.empty((k, spec.t_run))
            z[:, 0] = rng.normal(size=k)
            eps = rng.normal(size=(k, spec.t_run - 1))
            for t in range(1, spec.t_run):
                z[:, t] = spec.ar_coef * z[:, t - 1] + innov_scale * eps[:, t - 1]
            noise_col = spec.noise * noise_scales[: spec.nf[j], None]
            features = mixers[j] @ z + noise_col * rng.normal(size=(spec.nf[j], spec.t_run))
            labels = label_w @ z + spec.label_noise * rng.normal(size=spec.t_run)
            run = RawRun(domain, f"r{r:03d}", features, labels, names)
            run.validate()
            runs.append(run)
        out[domain] = runs
    return out


def pre_classify(run: RawRun) -> np.ndarray:
    """Per-feature movement classes: +1 where x[i, t] > x[i, t-1], else -1.

    Column 0 has no predecessor and is defined as -1; equality counts as -1.
    """
    if run.t_run < 2:
        raise ValueError(f"run '{run.run_id}' too short to pre-classify (T={run.t_run})")
    c = np.full(run.features.shape, -1, dtype=np.int8)
    rises = run.features[:, 1:] > run.features[:, :-1]
    c[:, 1:][rises] = 1
    return c


@dataclass
class Normalizer:
    """Per-feature z-scoring statistics, fitted on training runs only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, runs: list[RawRun]) -> "Normalizer":
        if not runs:
            raise DataError("cannot fit normalizer on zero runs")
        nf = runs[0].nf
        if any(r.nf != nf for r in runs):
            raise DataError("runs disagree on feature count")
        all_feats = np.concatenate([r.features for r in runs], axis=1)
        std = all_feats.std(axis=1)
        return cls(mean=all_feats.mean(axis=1), std=np.maximum(std, STD_FLOOR))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean[:, None]) / self.std[:, None]

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return features * self.std[:, None] + self.mean[:, None]


def window(run: RawRun, w: int, horizon: int, norm: Normalizer) -> list[FeatureTensor]:
    """Cut a run into sliding windows with standardized features and raw labels.

    Sample at anchor t has x = standardized features[:, t-w:t], c = movement
    classes at t, y = labels[t + horizon]. Yields T - w - horizon samples.
    """
    if w < 1:
        raise ValueError(f"window length must be >= 1, got {w}")
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    needed = w + horizon + 1
    if run.t_run < needed:
        raise DataError(
            f"run '{run.run_id}' too short: T={run.t_run} < W + horizon + 1 = {needed}"
        )
    standardized = norm.transform(run.features)
    classes = pre_classify(run)
    samples = []
    for t in range(w, run.t_run - horizon):
        samples.append(
            FeatureTensor(
                x=standardized[:, t - w:t].copy(),
                c=classes[:, t].copy(),
                y=float(run.labels[t + horizon]),
                t_index=t,
            )
        )
    return samples


def stack_samples(samples: list[FeatureTensor]) -> SampleSet:
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    return SampleSet(
        x=np.stack([s.x for s in samples]),
        c=np.stack([s.c for s in samples]),
        y=np.array([s.y for s in samples], dtype=np.float64),
        t_index=np.array([s.t_index for s in samples], dtype=np.int64),
    )


def as_sample_set(batch) -> SampleSet:
    if isinstance(batch, SampleSet):
        return batch
    return stack_samples(list(batch))


def iter_batch_indices(n: int, batch: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering range(n) in consecutive chunks.

    With an rng the order is a seeded permutation (training mode); without
    one, original order (evaluation mode). The final chunk may be short.
    """
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def batch_iter(samples, batch: int, seed=None, shuffle: bool = True):
    """Yield batches of samples; shuffled when a seed is given and shuffle is True."""
    if isinstance(samples, SampleSet):
        n = len(samples)
        take = samples.subset
    else:
        samples = list(samples)
        n = len(samples)

        def take(idx):
            return [samples[i] for i in idx]

    rng = np.random.default_rng(seed) if shuffle else None
    for idx in iter_batch_indices(n, batch, rng):
        yield take(idx)


def split_runs(runs: list[RawRun], rng: np.random.Generator) -> SplitSpec:
    """Split a domain's runs into train/validation/test by whole runs.

    Proportions approximate 60/20/20 by run count; rounding remainders go to
    training. Needs at least 3 runs so every split is non-empty.
    """
    ids = sorted(r.run_id for r in runs)
    if len(ids) != len(set(ids)):
        raise DataError("duplicate run ids within a domain")
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 runs per domain to split, got {n}")
    n_val = max(1, int(np.floor(0.2 * n)))
    n_test = max(1, int(np.floor(0.2 * n)))
    n_train = n - n_val - n_test
    perm = rng.permutation(n)
    shuffled = [ids[i] for i in perm]
    return SplitSpec(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
    )
