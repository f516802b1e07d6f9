"""Experiment runner and command-line interface.

Subcommands: profile (cost table only), run (one scheduling mode), sweep
(dynamic vs every static tier vs full-model baseline), partition (inspect
the federated split). All outputs are plain JSON/CSV with deterministic
bytes for a given config and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config, parse_mode
from .data import (
    Dataset,
    label_histogram,
    load_csv,
    partition_dirichlet,
    partition_iid,
    synth_blobs,
)
from .errors import ConfigError, InputError, ParseError
from .privacy import PrivacyConfig
from .protocol import GlobalModelState, RoundContext, fedavg_round, run_round
from .rng import derive_rng
from .scheduler import (
    ClientHistory,
    TierProfileTable,
    profile_tiers,
    record_observation,
    schedule,
)
from .simulator import ChurnPolicy, ResourceProfile, ResourceSimulator, RoundReport
from .split_model import build_stack

logger = logging.getLogger(__name__)


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "blobs":
        return synth_blobs(d.classes, d.dim, d.samples, d.separation, cfg.seed)
    return load_csv(d.path, d.label_column)


def split_train_test(
    dataset: Dataset, fraction: float, seed: int
) -> tuple[Dataset, Dataset | None]:
    """Carve a held-out evaluation set off the dataset, seeded."""
    n = len(dataset)
    n_test = min(int(round(n * fraction)), n - 1)
    if n_test <= 0:
        return dataset, None
    perm = derive_rng(seed, "split").permutation(n)

    def subset(idx: np.ndarray) -> Dataset:
        idx = np.sort(idx)
        return Dataset(
            dataset.features[idx], dataset.labels[idx], dataset.num_classes
        )

    return subset(perm[n_test:]), subset(perm[:n_test])


def initial_profiles(cfg: RunConfig) -> dict[int, ResourceProfile]:
    pool = cfg.profiles.pool
    assignment = cfg.profiles.assignment
    if assignment == "round_robin":
        return {cid: pool[cid % len(pool)] for cid in range(cfg.clients)}
    if assignment == "random":
        rng = derive_rng(cfg.seed, "profiles")
        return {
            cid: pool[int(rng.integers(len(pool)))] for cid in range(cfg.clients)
        }
    return {cid: pool[assignment[cid]] for cid in range(cfg.clients)}


def _sample_participants(cfg: RunConfig, round_index: int) -> list[int]:
    if cfg.participation >= 1.0:
        return list(range(cfg.clients))
    count = max(1, round(cfg.participation * cfg.clients))
    rng = derive_rng(cfg.seed, "participation", round_index)
    return sorted(int(c) for c in rng.choice(cfg.clients, size=count, replace=False))


@dataclass
class ExperimentResult:
    mode: str
    reports: list[RoundReport]
    assignment_rows: list[dict]
    summary: dict
    table: TierProfileTable


def run_experiment(cfg: RunConfig, mode: str | None = None, jobs: int = 1) -> ExperimentResult:
    """Run the full training loop in one scheduling mode.

    All random streams are keyed by purpose, round, and client, so modes
    sharing a seed see identical data, profiles, churn, and noise, and the
    worker count never changes the result.
    """
    mode = cfg.scheduler.mode if mode is None else mode
    kind, static_tier = parse_mode(mode)
    if static_tier is not None and static_tier > cfg.model.tiers:
        raise ConfigError(
            f"static tier {static_tier} exceeds model.tiers {cfg.model.tiers}"
        )
    full = build_dataset(cfg)
    train, test = split_train_test(full, cfg.dataset.test_fraction, cfg.seed)
    stack = build_stack(
        train.dim,
        cfg.model.block_widths,
        full.num_classes,
        derive_rng(cfg.seed, "init"),
    )
    table = profile_tiers(
        stack, cfg.model.cuts, cfg.batch_size, cfg.scheduler.reference_flops
    )
    if cfg.partition.kind == "iid":
        partition = partition_iid(train, cfg.clients, cfg.seed)
    else:
        partition = partition_dirichlet(
            train, cfg.clients, cfg.partition.beta, cfg.seed
        )
    churn = None
    if cfg.profiles.churn.fraction > 0:
        churn = ChurnPolicy(
            cfg.profiles.churn.period,
            cfg.profiles.churn.fraction,
            tuple(cfg.profiles.pool),
        )
    sim = ResourceSimulator(
        table,
        initial_profiles(cfg),
        cfg.seed,
        churn=churn,
        noise_sigma=cfg.scheduler.noise_sigma,
    )
    state = GlobalModelState(stack, cfg.model.cuts, cfg.seed)
    privacy = None
    if cfg.privacy.alpha > 0 or cfg.privacy.patch_shuffle or cfg.privacy.client_alphas:
        privacy = PrivacyConfig(
            alpha=cfg.privacy.alpha,
            patch_shuffle=cfg.privacy.patch_shuffle,
            patch_size=cfg.privacy.patch_size,
            client_alphas=dict(cfg.privacy.client_alphas),
        )
    ctx = RoundContext(
        dataset=train,
        partition=partition,
        batch_size=cfg.batch_size,
        local_epochs=cfg.local_epochs,
        optim_kind=cfg.optimizer.optim_kind,
        learning_rate=cfg.optimizer.learning_rate,
        aggregation=cfg.aggregation_mode,
        privacy=privacy,
        test_set=test,
        jobs=jobs,
    )
    histories = {
        cid: ClientHistory(
            client_id=cid,
            bandwidth=sim.bandwidth(cid),
            n_batches=ctx.n_batches(cid),
            ema_alpha=cfg.scheduler.ema_alpha,
        )
        for cid in range(cfg.clients)
    }
    reports: list[RoundReport] = []
    rows: list[dict] = []
    for r in range(cfg.rounds):
        participants = _sample_participants(cfg, r)
        if kind == "fedavg":
            report = fedavg_round(state, participants, sim, ctx, r)
        else:
            if kind == "dynamic":
                # bandwidth is re-measured at round start; compute history stays stale
                for cid in participants:
                    histories[cid].bandwidth = sim.bandwidth(cid)
                tiers = schedule(histories, table, participants).tiers
            else:
                tiers = {cid: static_tier for cid in participants}
            report = run_round(state, tiers, sim, ctx, r)
            if kind == "dynamic":
                for row in report.times:
                    record_observation(
                        histories[row.client_id],
                        table,
                        row.tier,
                        row.total,
                        row.bandwidth,
                    )
        reports.append(report)
        rows.append(
            {
                "round": report.round_index,
                "clients": [
                    {
                        "client": t.client_id,
                        "tier": t.tier,
                        "t_client_s": t.client_s,
                        "t_comm_s": t.comm_s,
                        "t_server_s": t.server_s,
                    }
                    for t in report.times
                ],
            }
        )
    return ExperimentResult(mode, reports, rows, _summarize(cfg, reports), table)


def _summarize(cfg: RunConfig, reports: list[RoundReport]) -> dict:
    occupancy: dict[str, int] = {}
    for report in reports:
        for t in report.times:
            key = str(t.tier)
            occupancy[key] = occupancy.get(key, 0) + 1
    time_to_target = None
    if cfg.target_accuracy is not None:
        for report in reports:
            if (
                report.test_accuracy is not None
                and report.test_accuracy >= cfg.target_accuracy
            ):
                time_to_target = report.cumulative_seconds
                break
    last = reports[-1] if reports else None
    return {
        "rounds_run": len(reports),
        "final_test_accuracy": last.test_accuracy if last else None,
        "final_train_accuracy": last.train_accuracy if last else None,
        "target_accuracy": cfg.target_accuracy,
        "time_to_target_s": time_to_target,
        "cumulative_virtual_s": last.cumulative_seconds if last else 0.0,
        "tier_occupancy": occupancy,
    }


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_profile_json(table: TierProfileTable, path: Path) -> None:
    _write_json(
        {
            "batch_size": table.batch_size,
            "full_seconds_per_batch": table.full_seconds_per_batch,
            "full_model_bytes": table.full_model_bytes,
            "tiers": [
                {
                    "tier": i + 1,
                    "transfer_bytes_per_batch": t.transfer_bytes_per_batch,
                    "client_model_bytes": t.client_model_bytes,
                    "client_seconds_per_batch": t.client_seconds_per_batch,
                    "server_seconds_per_batch": t.server_seconds_per_batch,
                }
                for i, t in enumerate(table.tiers)
            ],
        },
        path,
    )


def write_rounds_csv(reports: list[RoundReport], num_tiers: int, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["round", "makespan_s", "cum_virtual_s", "train_loss", "test_acc", "tier_histogram"]
        )
        for report in reports:
            counts = [0] * num_tiers
            for t in report.times:
                if 1 <= t.tier <= num_tiers:
                    counts[t.tier - 1] += 1
            writer.writerow(
                [
                    report.round_index,
                    _fmt(report.makespan),
                    _fmt(report.cumulative_seconds),
                    _fmt(report.train_loss),
                    _fmt(report.test_accuracy),
                    "|".join(str(c) for c in counts),
                ]
            )


def write_assignments_jsonl(rows: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            handle.write("\n")


def write_sweep_csv(results: list[ExperimentResult], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["mode", "cumulative_virtual_s", "final_test_accuracy"])
        for res in results:
            writer.writerow(
                [
                    res.mode,
                    _fmt(res.summary["cumulative_virtual_s"]),
                    _fmt(res.summary["final_test_accuracy"]),
                ]
            )


def write_run_outputs(result: ExperimentResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_profile_json(result.table, out / "profile.json")
    write_rounds_csv(result.reports, result.table.num_tiers, out / "rounds.csv")
    write_assignments_jsonl(result.assignment_rows, out / "assignments.jsonl")
    _write_json(result.summary, out / "summary.json")


def cmd_profile(cfg: RunConfig, jobs: int) -> None:
    full = build_dataset(cfg)
    stack = build_stack(
        full.dim, cfg.model.block_widths, full.num_classes, derive_rng(cfg.seed, "init")
    )
    table = profile_tiers(
        stack, cfg.model.cuts, cfg.batch_size, cfg.scheduler.reference_flops
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_profile_json(table, out / "profile.json")


def cmd_run(cfg: RunConfig, jobs: int) -> None:
    result = run_experiment(cfg, jobs=jobs)
    write_run_outputs(result, Path(cfg.output_dir))


def cmd_sweep(cfg: RunConfig, jobs: int) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = (
        ["dynamic"]
        + [f"static:{m}" for m in range(1, cfg.model.tiers + 1)]
        + ["fedavg"]
    )
    results = []
    for mode in modes:
        result = run_experiment(cfg, mode, jobs)
        write_run_outputs(result, out / mode.replace(":", "-"))
        results.append(result)
    write_sweep_csv(results, out / "sweep.csv")


def cmd_partition(cfg: RunConfig, jobs: int) -> None:
    full = build_dataset(cfg)
    train, _ = split_train_test(full, cfg.dataset.test_fraction, cfg.seed)
    if cfg.partition.kind == "iid":
        parts = partition_iid(train, cfg.clients, cfg.seed)
    else:
        parts = partition_dirichlet(train, cfg.clients, cfg.partition.beta, cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        {
            "kind": cfg.partition.kind,
            "clients": cfg.clients,
            "train_samples": len(train),
            "sizes": [len(p) for p in parts],
            "label_histograms": [
                [int(c) for c in label_histogram(train, p)] for p in parts
            ],
        },
        out / "partition.json",
    )


_COMMANDS = {
    "profile": cmd_profile,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "partition": cmd_partition,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtfl",
        description="Simulate split federated learning with dynamic tier scheduling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("profile", "write the per-tier cost table"),
        ("run", "run one experiment in the configured mode"),
        ("sweep", "compare dynamic, static, and full-model modes"),
        ("partition", "write per-client partition statistics"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="client update workers")
        p.add_argument("--out", help="override the config output directory")
        p.add_argument(
            "--print-config",
            action="store_true",
            help="print the effective config and exit",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        _COMMANDS[args.command](cfg, max(1, args.jobs))
    except (ConfigError, ParseError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0
