"""Experiment configuration: YAML in, resolved objects + stable hash out.

The config file is line-oriented YAML with one block per subsystem. Seeds
for data generation, partitioning and the held-out test set default to
offsets of the experiment seed so a single --seed override re-randomizes
the whole experiment. Hashing uses a canonical JSON serialization of the
fully resolved dict (sorted keys), so field order in the file never changes
the hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datasets import (
    Dataset,
    Partition,
    gen_synthetic_classification,
    partition_dirichlet,
    partition_iid,
    partition_shards,
)
from .federation import AdaptiveParams, FederationConfig, GmaParams, ImaConfig, mild_exponential
from .nn import LrSchedule, ModelSpec

DATA_SEED_OFFSET = 1000
PARTITION_SEED_OFFSET = 2000
TEST_SEED_OFFSET = 3000


class ConfigError(ValueError):
    """Invalid or missing configuration; maps to exit code 2 in the CLI."""


def _require(block: dict, key: str, where: str) -> Any:
    if key not in block:
        raise ConfigError(f"missing '{key}' in {where} block")
    return block[key]


def parse_schedule(raw: dict, where: str) -> LrSchedule:
    kind = _require(raw, "kind", where)
    try:
        if kind == "constant":
            return LrSchedule.constant(float(_require(raw, "lr", where)))
        if kind == "exponential":
            return LrSchedule.exponential(float(_require(raw, "lr", where)),
                                          float(_require(raw, "gamma", where)))
        if kind == "cyclic":
            return LrSchedule.cyclic(float(_require(raw, "lr_hi", where)),
                                     float(_require(raw, "lr_lo", where)),
                                     int(_require(raw, "period", where)))
        if kind == "epoch_decay":
            return LrSchedule.epoch_decay(float(_require(raw, "lr", where)),
                                          int(_require(raw, "epochs0", where)),
                                          int(_require(raw, "drop_every", where)))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown schedule kind {kind!r}")


def _parse_mild(raw: dict, base: LrSchedule, start_round: int) -> LrSchedule:
    kind = raw.get("kind", "exponential")
    if kind == "exponential" and "lr" not in raw:
        # restart the decay from whatever lr the base schedule reaches at t_s
        return mild_exponential(base, start_round, float(raw.get("gamma", 0.03)))
    if kind == "epoch_decay":
        # epochs0 is interpreted as the epoch count at t_s
        adjusted = dict(raw)
        drop = int(_require(raw, "drop_every", "ima.mild"))
        adjusted["epochs0"] = int(_require(raw, "epochs0", "ima.mild")) + start_round // drop
        return parse_schedule(adjusted, "ima.mild")
    return parse_schedule(raw, "ima.mild")


@dataclass
class DatasetBlock:
    n_classes: int
    n_per_class: int
    dim: int
    separation: float
    seed: int
    test_n_per_class: int
    test_seed: int


@dataclass
class DecompositionBlock:
    enabled: bool
    source: str            # "round_clients" or "seed_replicas"
    samples: int           # S: replicas or consecutive rounds
    cadence: int


@dataclass
class LandscapeBlock:
    resolution: int = 15
    margin: float = 0.2


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: Path
    dataset: DatasetBlock
    model_spec: ModelSpec
    partition_method: str
    partition_params: dict
    partition_seed: int
    federation: FederationConfig
    checkpoint_cadence: int
    decomposition: DecompositionBlock
    landscape: LandscapeBlock
    resolved: dict = field(repr=False, default_factory=dict)
    compare_block: dict | None = None

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.resolved)


def canonical_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def resolve_experiment(raw: dict, seed_override: int | None = None,
                       out_override: str | None = None) -> ExperimentConfig:
    """Turn the raw mapping into validated objects with defaults filled in."""
    exp = raw.get("experiment", {})
    seed = int(seed_override if seed_override is not None else exp.get("seed", 0))
    name = str(exp.get("name", "experiment"))
    out_dir = Path(out_override if out_override is not None
                   else exp.get("out_dir", f"runs/{name}"))

    ds_raw = raw.get("dataset")
    if ds_raw is None:
        raise ConfigError("missing dataset block")
    dataset = DatasetBlock(
        n_classes=int(_require(ds_raw, "n_classes", "dataset")),
        n_per_class=int(_require(ds_raw, "n_per_class", "dataset")),
        dim=int(_require(ds_raw, "dim", "dataset")),
        separation=float(_require(ds_raw, "separation", "dataset")),
        seed=int(ds_raw.get("seed", seed + DATA_SEED_OFFSET)),
        test_n_per_class=int(ds_raw.get("test_n_per_class", 0)),
        test_seed=int(ds_raw.get("test_seed", seed + TEST_SEED_OFFSET)),
    )

    model_raw = raw.get("model", {})
    hidden = [int(h) for h in model_raw.get("hidden", [16])]
    widths = [dataset.dim] + hidden + [dataset.n_classes]
    try:
        model_spec = ModelSpec.mlp(widths, model_raw.get("activation", "relu"),
                                   model_raw.get("loss", "mse"))
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    part_raw = raw.get("partition")
    if part_raw is None:
        raise ConfigError("missing partition block")
    method = _require(part_raw, "method", "partition")
    if method not in ("dirichlet", "shards", "iid"):
        raise ConfigError(f"partition: unknown method {method!r}")
    part_params: dict = {}
    if method == "dirichlet":
        part_params["alpha"] = float(_require(part_raw, "alpha", "partition"))
    elif method == "shards":
        part_params["classes_per_client"] = int(
            _require(part_raw, "classes_per_client", "partition"))
    partition_seed = int(part_raw.get("seed", seed + PARTITION_SEED_OFFSET))

    fed_raw = raw.get("federation")
    if fed_raw is None:
        raise ConfigError("missing federation block")
    base_sched = parse_schedule(_require(fed_raw, "lr", "federation"), "federation.lr")
    ima_raw = fed_raw.get("ima")
    ima = None
    if ima_raw:
        start_round = int(_require(ima_raw, "start_round", "ima"))
        window = int(ima_raw.get("window", 5))
        mild = _parse_mild(ima_raw.get("mild", {}), base_sched, start_round)
        try:
            ima = ImaConfig(start_round=start_round, window=window, mild_schedule=mild)
        except ValueError as exc:
            raise ConfigError(f"ima: {exc}") from exc
    adaptive_raw = fed_raw.get("adaptive", {})
    gma_raw = fed_raw.get("gma", {})
    try:
        federation = FederationConfig(
            n_clients=int(_require(fed_raw, "clients", "federation")),
            participation=float(fed_raw.get("participation", 1.0)),
            rounds=int(_require(fed_raw, "rounds", "federation")),
            local_epochs=int(fed_raw.get("local_epochs", 1)),
            batch_size=int(fed_raw.get("batch_size", 32)),
            lr_schedule=base_sched,
            momentum=float(fed_raw.get("momentum", 0.9)),
            aggregator=fed_raw.get("aggregator", "fedavg"),
            adaptive=AdaptiveParams(
                eta=float(adaptive_raw.get("eta", 0.01)),
                beta1=float(adaptive_raw.get("beta1", 0.9)),
                beta2=float(adaptive_raw.get("beta2", 0.99)),
                tau=float(adaptive_raw.get("tau", 0.001))),
            gma=GmaParams(epsilon=float(gma_raw.get("epsilon", 0.8)),
                          server_lr=float(gma_raw.get("server_lr", 1.0))),
            prox_mu=float(fed_raw.get("prox_mu", 0.0)),
            ima=ima,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"federation: {exc}") from exc

    eval_raw = raw.get("evaluation", {})
    checkpoint_cadence = int(eval_raw.get("checkpoint_cadence", 0))

    dec_raw = raw.get("decomposition", {})
    decomposition = DecompositionBlock(
        enabled=bool(dec_raw.get("enabled", False)),
        source=dec_raw.get("source", "seed_replicas"),
        samples=int(dec_raw.get("samples", 8)),
        cadence=int(dec_raw.get("cadence", 10)),
    )
    if decomposition.source not in ("round_clients", "seed_replicas"):
        raise ConfigError(f"decomposition: unknown source {decomposition.source!r}")

    land_raw = raw.get("landscape", {})
    landscape = LandscapeBlock(resolution=int(land_raw.get("resolution", 15)),
                               margin=float(land_raw.get("margin", 0.2)))

    resolved = {
        "name": name,
        "seed": seed,
        "dataset": dataset.__dict__,
        "model": {"widths": widths, "activation": model_raw.get("activation", "relu"),
                  "loss": model_raw.get("loss", "mse")},
        "partition": {"method": method, "seed": partition_seed, **part_params},
        "federation": {
            "clients": federation.n_clients,
            "participation": federation.participation,
            "rounds": federation.rounds,
            "local_epochs": federation.local_epochs,
            "batch_size": federation.batch_size,
            "momentum": federation.momentum,
            "aggregator": federation.aggregator,
            "adaptive": federation.adaptive.__dict__,
            "gma": federation.gma.__dict__,
            "prox_mu": federation.prox_mu,
            "lr": _schedule_dict(base_sched),
            "ima": None if ima is None else {
                "start_round": ima.start_round, "window": ima.window,
                "mild": _schedule_dict(ima.mild_schedule)},
        },
        "evaluation": {"checkpoint_cadence": checkpoint_cadence},
        "decomposition": decomposition.__dict__,
        "landscape": landscape.__dict__,
    }

    return ExperimentConfig(
        name=name, seed=seed, out_dir=out_dir, dataset=dataset,
        model_spec=model_spec, partition_method=method,
        partition_params=part_params, partition_seed=partition_seed,
        federation=federation, checkpoint_cadence=checkpoint_cadence,
        decomposition=decomposition, landscape=landscape, resolved=resolved,
        compare_block=raw.get("compare"),
    )


def _schedule_dict(s: LrSchedule) -> dict:
    return {"variant": s.variant, "lr": s.lr, "gamma": s.gamma,
            "lr_lo": s.lr_lo, "period": s.period, "epochs0": s.epochs0,
            "drop_every": s.drop_every}


def load_experiment(path: str | Path, seed_override: int | None = None,
                    out_override: str | None = None) -> ExperimentConfig:
    return resolve_experiment(load_config_file(path), seed_override, out_override)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    return gen_synthetic_classification(d.seed, d.n_classes, d.n_per_class,
                                        d.dim, d.separation)


def build_test_dataset(cfg: ExperimentConfig) -> Dataset | None:
    d = cfg.dataset
    if d.test_n_per_class <= 0:
        return None
    return gen_synthetic_classification(d.test_seed, d.n_classes,
                                        d.test_n_per_class, d.dim, d.separation)


def build_partition(cfg: ExperimentConfig, dataset: Dataset) -> Partition:
    k = cfg.federation.n_clients
    if cfg.partition_method == "iid":
        return partition_iid(dataset, k, cfg.partition_seed)
    if cfg.partition_method == "shards":
        return partition_shards(dataset, k, cfg.partition_params["classes_per_client"],
                                cfg.partition_seed)
    return partition_dirichlet(dataset, k, cfg.partition_params["alpha"],
                               cfg.partition_seed)
