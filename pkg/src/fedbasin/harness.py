"""Experiment orchestration: runs to files, comparisons, decomposition sweeps.

This is the layer the CLI calls into. A run writes metrics.csv, a manifest
and checkpoints under the experiment's output directory; metrics lines use
repr() floats so reruns of the same config reproduce the file byte for byte
(manifest timestamps excepted).
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    build_dataset,
    build_partition,
    build_test_dataset,
    resolve_experiment,
)
from .datasets import Dataset, Partition, export_dataset_csv, export_partition_csv, validate_partition
from .decomposition import DecompositionReport, JointEnsemble, decompose
from .federation import (
    FederationResult,
    RoundContext,
    RoundRecord,
    client_batch,
    client_rng,
    local_train,
    run_federation,
)
from .nn import ModelSpec, ParamVector, save_checkpoint

# keys an arm override may touch in a comparison (one declared axis)
COMPARE_AXES = {
    "ima": [("federation", "ima")],
    "aggregator": [("federation", "aggregator"), ("federation", "adaptive"),
                   ("federation", "gma")],
    "schedule": [("federation", "lr"), ("federation", "ima")],
}

METRICS_COLUMNS = ["round", "lr", "test_loss", "test_acc", "locality_l2",
                   "broadcast_kind", "aggregator"]
DECOMP_COLUMNS = ["round", "bias_term", "train_bias_mean_sq", "heter_bias_mean_sq",
                  "variance_term", "covariance_term", "locality", "approx_gap",
                  "direct_loss", "fma_loss"]


def smooth_series(values, window: int, poly_order: int) -> np.ndarray:
    """Savitzky-Golay smoothing; length preserved.

    The window is padded to the nearest odd length >= 3. Edges are handled
    by fitting a polynomial to the boundary window, so series that are
    polynomials of degree <= poly_order pass through unchanged everywhere.
    """
    values = np.asarray(values, dtype=np.float64)
    window = max(int(window), 3)
    if window % 2 == 0:
        window += 1
    if poly_order >= window:
        raise ValueError("poly_order must be < window")
    if values.size < window:
        raise ValueError(f"series of {values.size} shorter than window {window}")
    return savgol_filter(values, window_length=window, polyorder=poly_order,
                         mode="interp")


def rounds_to_target(accuracies, target: float, window: int = 10,
                     poly_order: int = 2) -> int | None:
    """First 1-based round whose smoothed accuracy reaches the target.

    The smoothing window is clamped to the series length so that short runs
    still produce a reading.
    """
    accuracies = np.asarray(accuracies, dtype=np.float64)
    window = min(window, accuracies.size)
    if window % 2 == 0:
        window -= 1
    if window >= 3:
        smoothed = smooth_series(accuracies, window,
                                 min(poly_order, max(window - 2, 1)))
    else:
        smoothed = accuracies
    hits = np.flatnonzero(smoothed >= target)
    return int(hits[0]) + 1 if hits.size else None


def last_k_mean_accuracy(records: list[RoundRecord], k: int = 10) -> float:
    return float(np.mean([r.test_acc for r in records[-k:]]))


def write_metrics_csv(path: Path, records: list[RoundRecord], aggregator: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow([r.round, repr(r.lr), repr(r.test_loss),
                             repr(r.test_acc), repr(r.locality_l2),
                             r.broadcast_kind, aggregator])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, cfg: ExperimentConfig, started: str,
                   finished: str, files: list[Path]) -> Path:
    manifest = {
        "config_hash": cfg.config_hash,
        "code_version": __version__,
        "seed": cfg.seed,
        "started": started,
        "finished": finished,
        "files": {p.name: {"bytes": p.stat().st_size, "sha256": _sha256(p)}
                  for p in files},
        "config": cfg.resolved,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class RunOutput:
    result: FederationResult
    out_dir: Path
    metrics_path: Path
    manifest_path: Path


def run_experiment(cfg: ExperimentConfig, quiet: bool = True,
                   on_round=None) -> RunOutput:
    """Execute one federated run and persist metrics/checkpoints/manifest."""
    started = datetime.datetime.now().isoformat(timespec="seconds")
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    partition = build_partition(cfg, dataset)
    test_ds = build_test_dataset(cfg)

    result = run_federation(cfg.model_spec, cfg.federation, dataset, partition,
                            eval_dataset=test_ds,
                            checkpoint_rounds=cfg.checkpoint_cadence,
                            on_round=on_round)

    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, result.records, cfg.federation.aggregator)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    written = [metrics_path]
    for label, model in result.checkpoints.items():
        path = ckpt_dir / f"{label}.fima"
        save_checkpoint(path, model)
        written.append(path)
    finished = datetime.datetime.now().isoformat(timespec="seconds")
    manifest_path = write_manifest(out_dir, cfg, started, finished, written)
    if not quiet:
        last = result.records[-1]
        print(f"[{cfg.name}] {len(result.records)} rounds, "
              f"final acc {last.test_acc:.4f}, loss {last.test_loss:.4f}")
    return RunOutput(result=result, out_dir=out_dir, metrics_path=metrics_path,
                     manifest_path=manifest_path)


def gen_data_files(cfg: ExperimentConfig) -> list[Path]:
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    paths = [out_dir / "dataset.csv"]
    export_dataset_csv(dataset, paths[0])
    test_ds = build_test_dataset(cfg)
    if test_ds is not None:
        path = out_dir / "dataset_test.csv"
        export_dataset_csv(test_ds, path)
        paths.append(path)
    return paths


def partition_files(cfg: ExperimentConfig) -> list[Path]:
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    partition = build_partition(cfg, dataset)
    csv_path = out_dir / "partition.csv"
    export_partition_csv(partition, csv_path)
    report = validate_partition(dataset, partition)
    report_path = out_dir / "partition_report.json"
    report_path.write_text(json.dumps({
        "disjoint": report.disjoint,
        "covered": report.covered,
        "sizes": report.sizes,
        "class_histograms": [h.tolist() for h in report.class_histograms],
    }, indent=2))
    return [csv_path, report_path]


class _DecompositionCollector:
    """Observer that harvests joint ensembles at the configured cadence."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset,
                 partition: Partition) -> None:
        self.cfg = cfg
        self.dataset = dataset
        self.partition = partition
        self.spec = cfg.model_spec
        sizes = np.array(partition.sizes(), dtype=float)
        self.weights = sizes / sizes.sum()
        self.client_data = [client_batch(dataset, idx, self.spec)
                            for idx in partition.client_indices]
        dec = cfg.decomposition
        if dec.source == "round_clients":
            if cfg.federation.participation < 1.0:
                raise ConfigError(
                    "decomposition source 'round_clients' needs participation=1 "
                    "so every round yields one model per client")
            self.window: deque = deque(maxlen=dec.samples)
        self.rows: list[tuple[int, DecompositionReport]] = []

    def __call__(self, record: RoundRecord, ctx: RoundContext) -> None:
        dec = self.cfg.decomposition
        if dec.source == "round_clients":
            joint = [u.final_params.copy()
                     for u in sorted(ctx.updates, key=lambda u: u.client_id)]
            self.window.append(joint)
            ready = len(self.window) == dec.samples
            if ready and ctx.round % dec.cadence == 0:
                self._emit(ctx.round, list(self.window))
        else:
            if ctx.round % dec.cadence == 0:
                self._emit(ctx.round, self._replica_samples(ctx))

    def _replica_samples(self, ctx: RoundContext) -> list[list[ParamVector]]:
        fed = self.cfg.federation
        samples = []
        for s in range(self.cfg.decomposition.samples):
            joint = []
            for cid in range(fed.n_clients):
                rng = client_rng(fed.seed, ctx.round, cid, extra=1 + s)
                upd = local_train(self.spec, ctx.broadcast, self.client_data[cid],
                                  ctx.epochs, fed.batch_size, ctx.lr,
                                  fed.momentum, fed.prox_mu, rng, client_id=cid)
                joint.append(upd.final_params)
            samples.append(joint)
        return samples

    def _emit(self, round_idx: int, samples: list[list[ParamVector]]) -> None:
        ensemble = JointEnsemble(samples, self.weights,
                                 self.partition.client_indices)
        report = decompose(ensemble, self.dataset, self.spec)
        self.rows.append((round_idx, report))


def run_decomposition(cfg: ExperimentConfig) -> Path:
    """Replay the configured run, decomposing at the configured cadence."""
    if not cfg.decomposition.enabled:
        raise ConfigError("decomposition block is not enabled")
    if cfg.model_spec.loss_kind != "mse":
        raise ConfigError("decomposition requires model loss 'mse'")
    dataset = build_dataset(cfg)
    partition = build_partition(cfg, dataset)
    collector = _DecompositionCollector(cfg, dataset, partition)
    run_federation(cfg.model_spec, cfg.federation, dataset, partition,
                   eval_dataset=build_test_dataset(cfg), on_round=collector)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "decomposition.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DECOMP_COLUMNS)
        for round_idx, rep in collector.rows:
            writer.writerow([round_idx, repr(rep.bias_term),
                             repr(rep.train_bias_mean_sq),
                             repr(rep.heter_bias_mean_sq),
                             repr(rep.variance_term), repr(rep.covariance_term),
                             repr(rep.locality_delta), repr(rep.approx_gap),
                             repr(rep.direct_expected_loss), repr(rep.fma_loss)])
    return path


@dataclass
class ArmSummary:
    name: str
    final_acc: list[float]
    last10_acc: list[float]
    rounds_to_target: list[int | None]

    def mean_final(self) -> float:
        return float(np.mean(self.final_acc))

    def mean_last10(self) -> float:
        return float(np.mean(self.last10_acc))

    def mean_rounds(self) -> float | None:
        reached = [r for r in self.rounds_to_target if r is not None]
        return float(np.mean(reached)) if reached else None


def _check_axis(overrides: dict, axis: str) -> None:
    allowed = COMPARE_AXES.get(axis)
    if allowed is None:
        raise ConfigError(f"compare: unknown axis {axis!r}")
    for block, sub in overrides.items():
        if not isinstance(sub, dict):
            raise ConfigError(f"compare: override for {block!r} must be a mapping")
        for key in sub:
            if (block, key) not in allowed:
                raise ConfigError(
                    f"compare: override {block}.{key} is outside axis {axis!r}")


def _merge_raw(base: dict, override: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for block, sub in override.items():
        slot = out.setdefault(block, {})
        for key, val in sub.items():
            slot[key] = val
    return out


def run_compare(raw: dict, out_override: str | None = None,
                quiet: bool = True) -> tuple[Path, list[ArmSummary]]:
    """Run all arms over the shared seeds and write the side-by-side summary.

    Arms share data, partition and init seeds; each override may only touch
    the declared comparison axis.
    """
    compare = raw.get("compare")
    if not compare:
        raise ConfigError("missing compare block")
    axis = compare.get("axis", "ima")
    seeds = [int(s) for s in compare.get("seeds", [0])]
    target = compare.get("target_accuracy")
    arms_raw = compare.get("arms")
    if not arms_raw or len(arms_raw) < 2:
        raise ConfigError("compare needs at least two arms")

    base_exp = resolve_experiment(raw, out_override=out_override)
    out_dir = base_exp.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    summaries = []
    for arm in arms_raw:
        name = arm.get("name") or "arm"
        overrides = arm.get("overrides", {})
        _check_axis(overrides, axis)
        merged = _merge_raw({k: v for k, v in raw.items() if k != "compare"}, overrides)
        final_acc, last10, rtt = [], [], []
        for seed in seeds:
            cfg = resolve_experiment(merged, seed_override=seed,
                                     out_override=str(out_dir / name / f"seed_{seed}"))
            out = run_experiment(cfg, quiet=quiet)
            records = out.result.records
            final_acc.append(records[-1].test_acc)
            last10.append(last_k_mean_accuracy(records))
            if target is not None:
                rtt.append(rounds_to_target([r.test_acc for r in records],
                                            float(target)))
            else:
                rtt.append(None)
        summaries.append(ArmSummary(name, final_acc, last10, rtt))

    path = out_dir / "compare.csv"
    base_mean = summaries[0].mean_last10()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "seeds", "mean_final_acc", "mean_last10_acc",
                         "mean_rounds_to_target", "last10_delta_vs_first"])
        for s in summaries:
            rounds = s.mean_rounds()
            writer.writerow([s.name, len(seeds), repr(s.mean_final()),
                             repr(s.mean_last10()),
                             "" if rounds is None else repr(rounds),
                             repr(s.mean_last10() - base_mean)])
    if not quiet:
        for s in summaries:
            rounds = s.mean_rounds()
            print(f"{s.name}: final {s.mean_final():.4f}, "
                  f"last10 {s.mean_last10():.4f}, "
                  f"rounds-to-target {rounds if rounds is not None else '-'}")
    return path, summaries
