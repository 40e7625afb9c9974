"""Run configuration: dataclasses, JSON round-trip, variant map, hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import CsvSchema, SyntheticSpec
from .errors import ConfigError

MODES = ("off", "fedavg", "random", "single", "multiple")
EMBED_KINDS = ("gradient", "data")


@dataclass(frozen=True)
class Variant:
    """What one ablation variant enables: movement targets, federation mode, embedding."""

    pre_classification: bool
    mode: str
    embed_kind: str


# ver1: no movement targets, no federation; ver2 restores movement targets;
# ver3/ver4 are the unweighted-average and random-source baselines; ver5-ver8
# cross selection strategy (single/multiple) with embedding kind (gradient/data).
VARIANTS: dict[str, Variant] = {
    "ver1": Variant(pre_classification=False, mode="off", embed_kind="gradient"),
    "ver2": Variant(pre_classification=True, mode="off", embed_kind="gradient"),
    "ver3": Variant(pre_classification=True, mode="fedavg", embed_kind="gradient"),
    "ver4": Variant(pre_classification=True, mode="random", embed_kind="gradient"),
    "ver5": Variant(pre_classification=True, mode="single", embed_kind="gradient"),
    "ver6": Variant(pre_classification=True, mode="single", embed_kind="data"),
    "ver7": Variant(pre_classification=True, mode="multiple", embed_kind="gradient"),
    "ver8": Variant(pre_classification=True, mode="multiple", embed_kind="data"),
}


@dataclass
class FedConfig:
    alpha: float = 0.1
    dr: float = 0.5
    mode: str = "single"
    embed_kind: str = "gradient"
    negate_distance: bool = False


@dataclass
class CsvDomainConfig:
    paths: list[str]
    feature_cols: list[str]
    label_col: str

    @property
    def schema(self) -> CsvSchema:
        return CsvSchema(feature_cols=list(self.feature_cols), label_col=self.label_col)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    synthetic: SyntheticSpec | None = None
    csv: dict[str, CsvDomainConfig] | None = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    w: int = 5
    horizon: int = 0
    batch: int = 600
    lr: float = 0.01
    epochs: int = 25
    pretrain_epochs: int = 1
    federated_period_batches: int = 10
    fed: FedConfig = field(default_factory=FedConfig)
    variant: str = "ver5"
    seed: int = 0
    dump_pool: bool = False

    @property
    def variant_spec(self) -> Variant:
        return VARIANTS[self.variant]


def resolved(config: RunConfig) -> RunConfig:
    """Validated copy with variant-derived fields and data seed filled in.

    The variant determines the federation mode and embedding kind; a synthetic
    data section without its own seed inherits the run seed.
    """
    cfg = replace(
        config,
        data=replace(config.data),
        fed=replace(config.fed),
    )
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant: unknown variant {cfg.variant!r} (expected ver1..ver8)")
    spec = VARIANTS[cfg.variant]
    cfg.fed.mode = spec.mode
    cfg.fed.embed_kind = spec.embed_kind
    if cfg.data.kind == "synthetic":
        if cfg.data.synthetic is None:
            raise ConfigError("data.synthetic: required when data.kind is 'synthetic'")
        cfg.data.synthetic = replace(cfg.data.synthetic)
        if cfg.data.synthetic.seed is None:
            cfg.data.synthetic.seed = cfg.seed
    elif cfg.data.kind == "csv":
        if not cfg.data.csv:
            raise ConfigError("data.csv: required when data.kind is 'csv'")
    else:
        raise ConfigError(f"data.kind: unknown kind {cfg.data.kind!r}")
    _validate(cfg)
    return cfg


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _validate(cfg: RunConfig) -> None:
    _require(cfg.w >= 1, "w", f"window length must be >= 1, got {cfg.w}")
    _require(cfg.horizon >= 0, "horizon", f"must be >= 0, got {cfg.horizon}")
    _require(cfg.batch >= 1, "batch", f"must be >= 1, got {cfg.batch}")
    _require(cfg.lr > 0, "lr", f"must be > 0, got {cfg.lr}")
    _require(cfg.epochs >= 1, "epochs", f"must be >= 1, got {cfg.epochs}")
    _require(cfg.pretrain_epochs >= 0, "pretrain_epochs", f"must be >= 0, got {cfg.pretrain_epochs}")
    _require(cfg.federated_period_batches >= 1, "federated_period_batches",
             f"must be >= 1, got {cfg.federated_period_batches}")
    _require(0.0 <= cfg.fed.alpha <= 1.0, "fed.alpha", f"must lie in [0, 1], got {cfg.fed.alpha}")
    _require(0.0 <= cfg.fed.dr <= 1.0, "fed.dr", f"must lie in [0, 1], got {cfg.fed.dr}")
    _require(cfg.fed.mode in MODES, "fed.mode", f"unknown mode {cfg.fed.mode!r}")
    _require(cfg.fed.embed_kind in EMBED_KINDS, "fed.embed_kind",
             f"unknown embedding kind {cfg.fed.embed_kind!r}")


_SYNTH_KEYS = {f.name for f in SyntheticSpec.__dataclass_fields__.values()}  # type: ignore[attr-defined]
_FED_KEYS = {"alpha", "dr", "mode", "embed_kind", "negate_distance"}
_TOP_KEYS = {"data", "w", "horizon", "batch", "lr", "epochs", "pretrain_epochs",
             "federated_period_batches", "fed", "variant", "seed", "dump_pool"}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where}{key}'")


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, naming any offending key."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _check_keys(raw, _TOP_KEYS, "")
    cfg = RunConfig()
    try:
        data_raw = raw.get("data", {})
        _check_keys(data_raw, {"kind", "synthetic", "csv"}, "data.")
        kind = data_raw.get("kind", "synthetic")
        synthetic = None
        csv_domains = None
        if "synthetic" in data_raw and data_raw["synthetic"] is not None:
            _check_keys(data_raw["synthetic"], _SYNTH_KEYS, "data.synthetic.")
            synthetic = SyntheticSpec(**data_raw["synthetic"])
        if "csv" in data_raw and data_raw["csv"] is not None:
            csv_domains = {}
            for domain, section in data_raw["csv"].items():
                _check_keys(section, {"paths", "feature_cols", "label_col"}, f"data.csv.{domain}.")
                csv_domains[domain] = CsvDomainConfig(
                    paths=list(section["paths"]),
                    feature_cols=list(section["feature_cols"]),
                    label_col=section["label_col"],
                )
        cfg.data = DataConfig(kind=kind, synthetic=synthetic, csv=csv_domains)
        fed_raw = raw.get("fed", {})
        _check_keys(fed_raw, _FED_KEYS, "fed.")
        cfg.fed = FedConfig(**{**asdict(FedConfig()), **fed_raw})
        for key in ("w", "horizon", "batch", "epochs", "pretrain_epochs",
                    "federated_period_batches", "seed"):
            if key in raw:
                setattr(cfg, key, int(raw[key]))
        if "lr" in raw:
            cfg.lr = float(raw["lr"])
        if "variant" in raw:
            cfg.variant = str(raw["variant"])
        if "dump_pool" in raw:
            cfg.dump_pool = bool(raw["dump_pool"])
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    out = {
        "data": {"kind": cfg.data.kind},
        "w": cfg.w,
        "horizon": cfg.horizon,
        "batch": cfg.batch,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "pretrain_epochs": cfg.pretrain_epochs,
        "federated_period_batches": cfg.federated_period_batches,
        "fed": asdict(cfg.fed),
        "variant": cfg.variant,
        "seed": cfg.seed,
        "dump_pool": cfg.dump_pool,
    }
    if cfg.data.synthetic is not None:
        out["data"]["synthetic"] = asdict(cfg.data.synthetic)
    if cfg.data.csv is not None:
        out["data"]["csv"] = {d: asdict(s) for d, s in sorted(cfg.data.csv.items())}
    return out


def load_config(path) -> RunConfig:
    """Read a JSON config file whose keys mirror RunConfig field names."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: RunConfig) -> str:
    """Deterministic digest of every config field."""
    canonical = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def reference_synthetic_config(seed: int = 0, variant: str = "ver5") -> RunConfig:
    """The bundled desk-scale preset: 4 heterogeneous domains, 2000 rows each."""
    return RunConfig(
        data=DataConfig(
            kind="synthetic",
            synthetic=SyntheticSpec(
                ns=4,
                nf=[25, 19, 19, 19],
                runs_per_domain=10,
                t_run=200,
                latent_dim=6,
                noise=0.5,
                label_noise=0.1,
                ar_coef=0.9,
                mix_jitter=0.0,
                seed=None,
            ),
        ),
        w=5,
        horizon=0,
        batch=100,
        lr=0.01,
        epochs=10,
        pretrain_epochs=1,
        federated_period_batches=10,
        # dr below the 0.5 field default: at 10 epochs a fresher pool keeps
        # blending ahead of plain training instead of dragging toward stale
        # snapshots
        fed=FedConfig(alpha=0.1, dr=0.25),
        variant=variant,
        seed=seed,
    )
