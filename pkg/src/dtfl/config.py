"""Run configuration: schema, defaults, validation, YAML round-trip."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .numerics import OptimKind
from .protocol import AggregationMode
from .simulator import MBPS, ResourceProfile, default_profile_pool


def _check_keys(raw: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass
class ModelConfig:
    block_widths: list[int] = field(default_factory=lambda: [32, 24, 16, 12])
    tiers: int = 4
    cuts: list[int] = field(default_factory=lambda: [1, 2, 3, 4])

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        _check_keys(raw, {"block_widths", "tiers", "cuts"}, "model")
        widths = list(raw.get("block_widths", cls().block_widths))
        _require(
            bool(widths) and all(isinstance(w, int) and w > 0 for w in widths),
            "model.block_widths must be positive integers",
        )
        tiers = raw.get("tiers")
        cuts = raw.get("cuts")
        if cuts is not None:
            cuts = list(cuts)
            if tiers is None:
                tiers = len(cuts)
        elif tiers is None:
            tiers = len(widths)
        _require(isinstance(tiers, int) and tiers >= 1, "model.tiers must be >= 1")
        if cuts is None:
            cuts = list(range(1, tiers + 1))
        _require(
            len(cuts) == tiers
            and all(isinstance(c, int) and 1 <= c <= len(widths) for c in cuts)
            and all(b > a for a, b in zip(cuts, cuts[1:])),
            "model.cuts must be strictly increasing block indices, one per tier",
        )
        return cls(block_widths=widths, tiers=tiers, cuts=cuts)

    def to_dict(self) -> dict:
        return {
            "block_widths": self.block_widths,
            "tiers": self.tiers,
            "cuts": self.cuts,
        }


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.001

    @classmethod
    def from_dict(cls, raw: dict) -> "OptimizerConfig":
        _check_keys(raw, {"kind", "learning_rate"}, "optimizer")
        kind = str(raw.get("kind", cls().kind)).lower()
        _require(kind in ("sgd", "adam"), f"optimizer.kind must be sgd or adam, got {kind!r}")
        lr = raw.get("learning_rate", cls().learning_rate)
        _require(isinstance(lr, (int, float)) and lr >= 0, "optimizer.learning_rate must be >= 0")
        return cls(kind=kind, learning_rate=float(lr))

    @property
    def optim_kind(self) -> OptimKind:
        return OptimKind.SGD if self.kind == "sgd" else OptimKind.ADAM

    def to_dict(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate}


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 3
    dim: int = 20
    samples: int = 6000
    separation: float = 2.0
    test_fraction: float = 0.2
    path: str | None = None
    label_column: str = "label"

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetConfig":
        _check_keys(
            raw,
            {"kind", "classes", "dim", "samples", "separation", "test_fraction", "path", "label_column"},
            "dataset",
        )
        d = cls()
        d.kind = str(raw.get("kind", d.kind)).lower()
        _require(d.kind in ("blobs", "csv"), f"dataset.kind must be blobs or csv, got {d.kind!r}")
        d.classes = raw.get("classes", d.classes)
        d.dim = raw.get("dim", d.dim)
        d.samples = raw.get("samples", d.samples)
        d.separation = float(raw.get("separation", d.separation))
        d.test_fraction = float(raw.get("test_fraction", d.test_fraction))
        d.path = raw.get("path", None)
        d.label_column = str(raw.get("label_column", d.label_column))
        if d.kind == "blobs":
            _require(isinstance(d.classes, int) and d.classes >= 2, "dataset.classes must be >= 2")
            _require(isinstance(d.dim, int) and d.dim >= 1, "dataset.dim must be >= 1")
            _require(isinstance(d.samples, int) and d.samples >= 1, "dataset.samples must be >= 1")
            _require(d.separation >= 0, "dataset.separation must be >= 0")
        else:
            _require(bool(d.path), "dataset.path is required for csv datasets")
        _require(0 <= d.test_fraction < 1, "dataset.test_fraction must lie in [0, 1)")
        return d

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "classes": self.classes,
            "dim": self.dim,
            "samples": self.samples,
            "separation": self.separation,
            "test_fraction": self.test_fraction,
            "path": self.path,
            "label_column": self.label_column,
        }


@dataclass
class PartitionConfig:
    kind: str = "iid"
    beta: float = 0.5

    @classmethod
    def from_dict(cls, raw: dict) -> "PartitionConfig":
        _check_keys(raw, {"kind", "beta"}, "partition")
        kind = str(raw.get("kind", cls().kind)).lower()
        _require(kind in ("iid", "dirichlet"), f"partition.kind must be iid or dirichlet, got {kind!r}")
        beta = float(raw.get("beta", cls().beta))
        _require(beta > 0, "partition.beta must be positive")
        return cls(kind=kind, beta=beta)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta}


@dataclass
class ChurnConfig:
    period: int = 0
    fraction: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ChurnConfig":
        _check_keys(raw, {"period", "fraction"}, "profiles.churn")
        period = raw.get("period", cls().period)
        fraction = float(raw.get("fraction", cls().fraction))
        _require(isinstance(period, int) and period >= 0, "churn.period must be >= 0")
        _require(0 <= fraction <= 1, "churn.fraction must lie in [0, 1]")
        _require(
            fraction == 0 or period >= 1,
            "churn.period must be >= 1 when churn.fraction > 0",
        )
        return cls(period=period, fraction=fraction)

    def to_dict(self) -> dict:
        return {"period": self.period, "fraction": self.fraction}


@dataclass
class ProfilesConfig:
    pool: list[ResourceProfile] = field(default_factory=default_profile_pool)
    assignment: str | list[int] = "round_robin"
    churn: ChurnConfig = field(default_factory=ChurnConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "ProfilesConfig":
        _check_keys(raw, {"pool", "assignment", "churn"}, "profiles")
        pool_raw = raw.get("pool", "default")
        if pool_raw == "default":
            pool = default_profile_pool()
        else:
            _require(
                isinstance(pool_raw, list) and pool_raw,
                "profiles.pool must be 'default' or a non-empty list",
            )
            pool = []
            for i, entry in enumerate(pool_raw):
                _require(isinstance(entry, dict), "profiles.pool entries must be mappings")
                _check_keys(entry, {"cpu_factor", "mbps"}, f"profiles.pool[{i}]")
                _require(
                    "cpu_factor" in entry and "mbps" in entry,
                    "profiles.pool entries need cpu_factor and mbps",
                )
                cpu = float(entry["cpu_factor"])
                mbps = float(entry["mbps"])
                _require(cpu > 0 and mbps > 0, "pool cpu_factor and mbps must be positive")
                pool.append(ResourceProfile(cpu, mbps * MBPS))
        assignment = raw.get("assignment", "round_robin")
        if isinstance(assignment, str):
            _require(
                assignment in ("round_robin", "random"),
                f"profiles.assignment must be round_robin, random, or an index list, got {assignment!r}",
            )
        else:
            _require(
                isinstance(assignment, list)
                and all(isinstance(i, int) and 0 <= i < len(pool) for i in assignment),
                "profiles.assignment list entries must index into the pool",
            )
        churn = ChurnConfig.from_dict(raw.get("churn", {}) or {})
        return cls(pool=pool, assignment=assignment, churn=churn)

    def to_dict(self) -> dict:
        return {
            "pool": [
                {"cpu_factor": p.cpu_factor, "mbps": p.bandwidth / MBPS} for p in self.pool
            ],
            "assignment": self.assignment,
            "churn": self.churn.to_dict(),
        }


@dataclass
class SchedulerConfig:
    mode: str = "dynamic"
    ema_alpha: float = 0.5
    noise_sigma: float = 0.0
    reference_flops: float = 1.0e7

    @classmethod
    def from_dict(cls, raw: dict) -> "SchedulerConfig":
        _check_keys(raw, {"mode", "ema_alpha", "noise_sigma", "reference_flops"}, "scheduler")
        c = cls()
        c.mode = str(raw.get("mode", c.mode))
        parse_mode(c.mode)
        c.ema_alpha = float(raw.get("ema_alpha", c.ema_alpha))
        _require(0 < c.ema_alpha <= 1, "scheduler.ema_alpha must lie in (0, 1]")
        c.noise_sigma = float(raw.get("noise_sigma", c.noise_sigma))
        _require(c.noise_sigma >= 0, "scheduler.noise_sigma must be >= 0")
        c.reference_flops = float(raw.get("reference_flops", c.reference_flops))
        _require(c.reference_flops > 0, "scheduler.reference_flops must be positive")
        return c

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ema_alpha": self.ema_alpha,
            "noise_sigma": self.noise_sigma,
            "reference_flops": self.reference_flops,
        }


@dataclass
class PrivacySection:
    alpha: float = 0.0
    patch_shuffle: bool = False
    patch_size: int = 1
    client_alphas: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "PrivacySection":
        _check_keys(raw, {"alpha", "patch_shuffle", "patch_size", "client_alphas"}, "privacy")
        c = cls()
        c.alpha = float(raw.get("alpha", c.alpha))
        _require(0 <= c.alpha <= 1, "privacy.alpha must lie in [0, 1]")
        c.patch_shuffle = bool(raw.get("patch_shuffle", c.patch_shuffle))
        c.patch_size = raw.get("patch_size", c.patch_size)
        _require(
            isinstance(c.patch_size, int) and c.patch_size >= 1,
            "privacy.patch_size must be a positive integer",
        )
        overrides = raw.get("client_alphas", {}) or {}
        _require(
            isinstance(overrides, dict)
            and all(
                isinstance(k, int) and isinstance(v, (int, float)) and 0 <= v <= 1
                for k, v in overrides.items()
            ),
            "privacy.client_alphas must map client ids to values in [0, 1]",
        )
        c.client_alphas = {int(k): float(v) for k, v in overrides.items()}
        return c

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "patch_shuffle": self.patch_shuffle,
            "patch_size": self.patch_size,
            "client_alphas": self.client_alphas,
        }


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    rounds: int = 100
    clients: int = 10
    participation: float = 1.0
    batch_size: int = 100
    local_epochs: int = 1
    aggregation: str = "data_weighted"
    target_accuracy: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    profiles: ProfilesConfig = field(default_factory=ProfilesConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    privacy: PrivacySection = field(default_factory=PrivacySection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        _check_keys(
            raw,
            {
                "seed", "output_dir", "rounds", "clients", "participation",
                "batch_size", "local_epochs", "aggregation", "target_accuracy",
                "model", "optimizer", "dataset", "partition", "profiles",
                "scheduler", "privacy",
            },
            "config",
        )
        c = cls(
            model=ModelConfig.from_dict(raw.get("model", {}) or {}),
            optimizer=OptimizerConfig.from_dict(raw.get("optimizer", {}) or {}),
            dataset=DatasetConfig.from_dict(raw.get("dataset", {}) or {}),
            partition=PartitionConfig.from_dict(raw.get("partition", {}) or {}),
            profiles=ProfilesConfig.from_dict(raw.get("profiles", {}) or {}),
            scheduler=SchedulerConfig.from_dict(raw.get("scheduler", {}) or {}),
            privacy=PrivacySection.from_dict(raw.get("privacy", {}) or {}),
        )
        c.seed = raw.get("seed", c.seed)
        _require(isinstance(c.seed, int), "seed must be an integer")
        c.output_dir = str(raw.get("output_dir", c.output_dir))
        c.rounds = raw.get("rounds", c.rounds)
        _require(isinstance(c.rounds, int) and c.rounds >= 0, "rounds must be >= 0")
        c.clients = raw.get("clients", c.clients)
        _require(isinstance(c.clients, int) and c.clients >= 1, "clients must be >= 1")
        c.participation = float(raw.get("participation", c.participation))
        _require(0 < c.participation <= 1, "participation must lie in (0, 1]")
        c.batch_size = raw.get("batch_size", c.batch_size)
        _require(isinstance(c.batch_size, int) and c.batch_size >= 1, "batch_size must be >= 1")
        c.local_epochs = raw.get("local_epochs", c.local_epochs)
        _require(isinstance(c.local_epochs, int) and c.local_epochs >= 1, "local_epochs must be >= 1")
        c.aggregation = str(raw.get("aggregation", c.aggregation)).lower()
        _require(
            c.aggregation in ("uniform", "data_weighted"),
            f"aggregation must be uniform or data_weighted, got {c.aggregation!r}",
        )
        target = raw.get("target_accuracy", None)
        if target is not None:
            _require(
                isinstance(target, (int, float)) and 0 < target <= 1,
                "target_accuracy must lie in (0, 1]",
            )
            c.target_accuracy = float(target)
        if isinstance(c.profiles.assignment, list):
            _require(
                len(c.profiles.assignment) == c.clients,
                "profiles.assignment list must have one entry per client",
            )
        static_tier = parse_mode(c.scheduler.mode)[1]
        if static_tier is not None:
            _require(
                static_tier <= c.model.tiers,
                f"static tier {static_tier} exceeds model.tiers {c.model.tiers}",
            )
        return c

    @property
    def aggregation_mode(self) -> AggregationMode:
        if self.aggregation == "uniform":
            return AggregationMode.UNIFORM
        return AggregationMode.DATA_WEIGHTED

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "rounds": self.rounds,
            "clients": self.clients,
            "participation": self.participation,
            "batch_size": self.batch_size,
            "local_epochs": self.local_epochs,
            "aggregation": self.aggregation,
            "target_accuracy": self.target_accuracy,
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "dataset": self.dataset.to_dict(),
            "partition": self.partition.to_dict(),
            "profiles": self.profiles.to_dict(),
            "scheduler": self.scheduler.to_dict(),
            "privacy": self.privacy.to_dict(),
        }


def parse_mode(mode: str) -> tuple[str, int | None]:
    """Split a scheduling mode string into (kind, static tier)."""
    if mode == "dynamic" or mode == "fedavg":
        return mode, None
    if mode.startswith("static:"):
        try:
            tier = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad static tier in mode {mode!r}") from None
        if tier < 1:
            raise ConfigError(f"static tier must be >= 1, got {tier}")
        return "static", tier
    raise ConfigError(f"mode must be dynamic, static:<m>, or fedavg, got {mode!r}")


def load_config(path) -> RunConfig:
    """Read a YAML run config, applying defaults and validating strictly."""
    with open(path, encoding="utf-8") as handle:
        try:
            raw = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
    if raw is None:
        raw = {}
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    """The full effective configuration as YAML, defaults included."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)
