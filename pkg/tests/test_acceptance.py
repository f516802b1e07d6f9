"""System-level acceptance checks.

Each test verifies one end-to-end guarantee of the library at a fixed
tolerance, prints a single PASS or FAIL line (visible with pytest -s), and
enforces a wall-clock budget. The per-module suites cover the fine-grained
behavior; these tests check that the assembled system delivers.
"""

from __future__ import annotations

import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from dtfl.cli import run_experiment
from dtfl.config import RunConfig
from dtfl.numerics import (
    Activation,
    clone_layer,
    dense_backward,
    dense_forward,
    init_dense,
    sequence_backward,
    sequence_forward,
    sequence_params,
    softmax_xent,
)
from dtfl.privacy import dcor, dcor_backward
from dtfl.protocol import AggregationMode, Contribution, GlobalModelState, aggregate
from dtfl.rng import derive_rng
from dtfl.scheduler import minmax_assign, profile_tiers
from dtfl.simulator import simulate_client_compute
from dtfl.split_model import (
    BlockStack,
    build_stack,
    client_layers,
    forward_client,
    forward_server,
    forward_stack,
    server_layers,
    split,
    stack_layers,
)

from .oracles import brute_force_minmax, finite_difference


def report(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)
    return float((np.abs(analytic - fd) / denom).max())


def test_01_split_composition_matches_full_model():
    t0 = time.time()
    widths = [48, 40, 36, 32, 28, 24, 20, 16]
    stack = build_stack(12, widths, 5, derive_rng(41, "stack"))
    cuts = list(range(1, 8))
    x = derive_rng(41, "inputs").standard_normal((100, 12))
    direct = forward_stack(stack, x)
    worst = 0.0
    for tier in range(1, 8):
        part = split(stack, tier, cuts, rng=derive_rng(41, "aux", tier))
        composed = forward_server(part, forward_client(part, x))
        worst = max(worst, float(np.abs(composed - direct).max()))
    elapsed = time.time() - t0
    report(
        "split equivalence",
        worst < 1e-10 and elapsed < 1.0,
        f"7 tiers x 100 inputs, max abs deviation {worst:.2e} (< 1e-10), "
        f"{elapsed:.2f}s (budget 1s)",
    )


def test_02_backward_passes_match_finite_differences():
    t0 = time.time()
    tol = 1e-4
    worst: dict[str, float] = {}

    def track(path: str, err: float) -> None:
        worst[path] = max(worst.get(path, 0.0), err)

    for i in range(20):
        rng = derive_rng(57, "grad", i)

        for activation in (Activation.RELU, Activation.IDENTITY):
            b = int(rng.integers(2, 5))
            din = int(rng.integers(2, 6))
            dout = int(rng.integers(2, 6))
            layer = init_dense(din, dout, activation, rng)
            x = rng.standard_normal((b, din))
            probe = rng.standard_normal((b, dout))

            def layer_loss(_ignored: np.ndarray) -> float:
                return float((dense_forward(layer, x) * probe).sum())

            dense_forward(layer, x)
            gx, gw, gb = dense_backward(layer, probe)
            tag = f"layer-{activation.name.lower()}"
            track(tag, rel_err(gx, finite_difference(lambda v: float((dense_forward(layer, v) * probe).sum()), x)))
            track(tag, rel_err(gw, finite_difference(layer_loss, layer.weights)))
            track(tag, rel_err(gb, finite_difference(layer_loss, layer.bias)))

        stack = build_stack(5, [6, 5, 4], 3, rng)
        cuts = [1, 2, 3]
        part = split(stack, 2, cuts, rng=rng)
        n = int(rng.integers(3, 7))
        x = rng.standard_normal((n, 5))
        y = rng.integers(0, 3, size=n)

        for tag, chain, inp in (
            ("aux-path", client_layers(part) + [part.aux_head], x),
            ("server-path", server_layers(part), rng.standard_normal((n, 5))),
        ):

            def chain_loss(_ignored: np.ndarray) -> float:
                return softmax_xent(sequence_forward(chain, inp), y)[0]

            logits = sequence_forward(chain, inp)
            _, dlogits = softmax_xent(logits, y)
            ginp, grads = sequence_backward(chain, dlogits)
            track(tag, rel_err(ginp, finite_difference(lambda v: softmax_xent(sequence_forward(chain, v), y)[0], inp)))
            for param, grad in zip(sequence_params(chain), grads):
                track(tag, rel_err(grad, finite_difference(chain_loss, param)))

        xz = rng.standard_normal((6, 3))
        z = rng.standard_normal((6, 4))
        gz = dcor_backward(xz, z)
        track("dcor", rel_err(gz, finite_difference(lambda v: dcor(xz, v), z)))

    elapsed = time.time() - t0
    detail = ", ".join(f"{k} {v:.2e}" for k, v in sorted(worst.items()))
    report(
        "gradient correctness",
        all(v < tol for v in worst.values()) and elapsed < 30.0,
        f"20 instances per path, worst rel err [{detail}] (< 1e-4), "
        f"{elapsed:.1f}s (budget 30s)",
    )


def test_03_tier_assignment_matches_exhaustive_search():
    t0 = time.time()
    rng = np.random.default_rng(7)
    n_exact = 0
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        m = int(rng.integers(1, 5))
        times = rng.uniform(0.1, 10.0, size=(k, m))
        tiers, t_max = minmax_assign(times)
        assert t_max == brute_force_minmax(times)
        chosen = times[np.arange(k), tiers - 1]
        assert chosen.max() == t_max
        assert (tiers >= 1).all() and (tiers <= m).all()
        n_exact += 1
    elapsed = time.time() - t0
    report(
        "scheduler optimality",
        n_exact == 1000 and elapsed < 5.0,
        f"{n_exact}/1000 random instances bitwise equal to brute force, "
        f"all assignments feasible, {elapsed:.1f}s (budget 5s)",
    )


MAKESPAN_CFG = {
    "seed": 375,
    "rounds": 100,
    "clients": 10,
    "batch_size": 100,
    "local_epochs": 1,
    "aggregation": "data_weighted",
    "dataset": {
        "kind": "blobs",
        "classes": 3,
        "dim": 8,
        "samples": 1250,
        "test_fraction": 0.2,
    },
    "model": {"block_widths": [2048, 4, 2, 2, 2, 2, 2], "tiers": 7},
    "optimizer": {"kind": "adam", "learning_rate": 0.001},
    "profiles": {
        "assignment": "round_robin",
        "churn": {"period": 20, "fraction": 0.3},
    },
    "scheduler": {"mode": "dynamic", "noise_sigma": 0.0, "reference_flops": 1.1e7},
}


def test_04_dynamic_schedule_beats_static_and_full_model():
    t0 = time.time()
    modes = ["dynamic"] + [f"static:{m}" for m in range(1, 8)] + ["fedavg"]
    cums = {}
    for mode in modes:
        res = run_experiment(RunConfig.from_dict(MAKESPAN_CFG), mode)
        cums[mode] = res.summary["cumulative_virtual_s"]
    dyn = cums["dynamic"]
    statics = {m: cums[f"static:{m}"] for m in range(1, 8)}
    best_m = min(statics, key=statics.get)
    elapsed = time.time() - t0
    ok = (
        dyn <= statics[best_m]
        and dyn <= cums["fedavg"]
        and best_m not in (1, 7)
        and elapsed < 120.0
    )
    report(
        "dynamic beats baselines",
        ok,
        f"100 rounds with churn: dynamic {dyn:.2f}s <= best static "
        f"(tier {best_m}) {statics[best_m]:.2f}s and <= fedavg "
        f"{cums['fedavg']:.2f}s, best static is interior, "
        f"{elapsed:.0f}s (budget 120s)",
    )


def test_05_compute_time_ratios_invariant_to_cpu_factor():
    t0 = time.time()
    stack = build_stack(
        8, MAKESPAN_CFG["model"]["block_widths"], 3, derive_rng(0, "init")
    )
    table = profile_tiers(stack, list(range(1, 8)), 100, 1.1e7)
    tiers = range(1, 8)
    cpus = [0.2, 1.0, 4.0]

    exact = []
    for c in cpus:
        t = np.array([simulate_client_compute(table, m, 7, c) for m in tiers])
        exact.append(t / t.sum())
    worst_exact = max(float(np.abs(v - exact[0]).max()) for v in exact[1:])

    sigma = 0.05
    noisy = []
    for i, c in enumerate(cpus):
        t = np.array(
            [
                simulate_client_compute(
                    table, m, 7, c, noise_sigma=sigma, rng=derive_rng(0, "noise", i, m)
                )
                for m in tiers
            ]
        )
        noisy.append(t / t.sum())
    # a normalized entry v_m has relative std sigma * sqrt(1 - 2 w_m + sum w^2);
    # comparing two independent noisy vectors doubles the variance
    w = exact[0]
    sd = sigma * np.sqrt(np.maximum(1.0 - 2.0 * w + float((w**2).sum()), 0.0))
    bound = 3.0 * np.sqrt(2.0) * sd
    worst_ratio = 0.0
    for a in range(len(cpus)):
        for b in range(a + 1, len(cpus)):
            rel = np.abs(noisy[a] - noisy[b]) / w
            worst_ratio = max(worst_ratio, float((rel / bound).max()))
    elapsed = time.time() - t0
    report(
        "cpu ratio invariance",
        worst_exact < 1e-12 and worst_ratio <= 1.0 and elapsed < 10.0,
        f"sigma=0 max deviation {worst_exact:.2e} (< 1e-12), sigma=0.05 worst "
        f"deviation at {worst_ratio:.2f} of the 3-sigma bound, "
        f"{elapsed:.1f}s (budget 10s)",
    )


def _convergence_cfg(rounds: int, partition: dict, alpha=0.0, shuffle=False) -> RunConfig:
    return RunConfig.from_dict(
        {
            "seed": 1,
            "rounds": rounds,
            "clients": 10,
            "batch_size": 100,
            "local_epochs": 1,
            "aggregation": "data_weighted",
            "dataset": {
                "kind": "blobs",
                "classes": 3,
                "dim": 20,
                "samples": 6000,
                "test_fraction": 0.2,
            },
            "model": {"block_widths": [32, 24, 16, 12], "tiers": 4},
            "optimizer": {"kind": "adam", "learning_rate": 0.001},
            "profiles": {"pool": [{"cpu_factor": 1.0, "mbps": 30}]},
            "scheduler": {"mode": "dynamic"},
            "partition": partition,
            "privacy": {"alpha": alpha, "patch_shuffle": shuffle, "patch_size": 16},
        }
    )


@pytest.fixture(scope="module")
def convergence_runs():
    runs = {}
    for tag, rounds, partition, alpha, shuffle in [
        ("iid", 50, {"kind": "iid"}, 0.0, False),
        ("dirichlet", 100, {"kind": "dirichlet", "beta": 0.5}, 0.0, False),
        ("alpha25", 50, {"kind": "iid"}, 0.25, False),
        ("alpha75", 50, {"kind": "iid"}, 0.75, False),
        ("shuffle", 50, {"kind": "iid"}, 0.0, True),
    ]:
        t0 = time.time()
        res = run_experiment(_convergence_cfg(rounds, partition, alpha, shuffle))
        accs = [r.train_accuracy for r in res.reports]
        runs[tag] = (accs, time.time() - t0)
    return runs


def test_06_training_converges_iid_and_dirichlet(convergence_runs):
    iid, t_iid = convergence_runs["iid"]
    dirichlet, t_dir = convergence_runs["dirichlet"]
    best_iid = max(iid)
    best_dir = max(dirichlet)
    elapsed = t_iid + t_dir
    report(
        "convergence",
        best_iid >= 0.95 and best_dir >= 0.85 and elapsed < 180.0,
        f"iid train acc {best_iid:.4f} within 50 rounds (>= 0.95), "
        f"dirichlet(0.5) train acc {best_dir:.4f} within 100 rounds (>= 0.85), "
        f"{elapsed:.0f}s (budget 180s)",
    )


def test_07_privacy_penalty_and_shuffle_cost_little_accuracy(convergence_runs):
    a0, t0s = convergence_runs["iid"]
    a25, t25 = convergence_runs["alpha25"]
    a75, t75 = convergence_runs["alpha75"]
    ash, tsh = convergence_runs["shuffle"]
    f0, f25, f75, fsh = a0[-1], a25[-1], a75[-1], ash[-1]
    elapsed = t0s + t25 + t75 + tsh
    ok = (
        f0 >= f25 >= f75
        and f0 - f25 <= 0.03
        and abs(fsh - f0) <= 0.03
        and elapsed < 300.0
    )
    report(
        "privacy cost",
        ok,
        f"final train acc alpha 0/0.25/0.75 = {f0:.4f}/{f25:.4f}/{f75:.4f} "
        f"(non-increasing, first step <= 3 points), patch shuffle {fsh:.4f} "
        f"(within 3 points), {elapsed:.0f}s (budget 300s)",
    )


def _clone_stack(stack: BlockStack) -> BlockStack:
    return BlockStack(
        [[clone_layer(l) for l in block] for block in stack.blocks],
        clone_layer(stack.classifier),
    )


def _fill_stack(stack: BlockStack, value: float) -> BlockStack:
    out = _clone_stack(stack)
    for layer in stack_layers(out):
        layer.weights[:] = value
        layer.bias[:] = value
    return out


def _shift_stack(stack: BlockStack, delta: float) -> BlockStack:
    out = _clone_stack(stack)
    for layer in stack_layers(out):
        layer.weights += delta
        layer.bias += delta
    return out


def _stack_params(stack: BlockStack) -> np.ndarray:
    return np.concatenate([p.ravel() for p in sequence_params(stack_layers(stack))])


def test_08_aggregation_algebra():
    t0 = time.time()
    cuts = [1, 2]
    base = build_stack(4, [5, 4], 3, derive_rng(9, "init"))

    state = GlobalModelState(_clone_stack(base), cuts, 9)
    contribs = [
        Contribution(cid, 1, _clone_stack(base), None, 7) for cid in range(3)
    ]
    aggregate(state, contribs, AggregationMode.DATA_WEIGHTED)
    identity_dev = float(np.abs(_stack_params(state.stack) - _stack_params(base)).max())

    state = GlobalModelState(_clone_stack(base), cuts, 9)
    aggregate(
        state,
        [
            Contribution(0, 1, _fill_stack(base, 0.0), None, 1),
            Contribution(1, 1, _fill_stack(base, 4.0), None, 3),
        ],
        AggregationMode.DATA_WEIGHTED,
    )
    weighted_dev = float(np.abs(_stack_params(state.stack) - 3.0).max())

    rng = derive_rng(9, "pair")
    s1 = build_stack(4, [5, 4], 3, rng)
    s2 = build_stack(4, [5, 4], 3, rng)
    shift = 0.625

    def run_agg(a: BlockStack, b: BlockStack) -> np.ndarray:
        state = GlobalModelState(_clone_stack(base), cuts, 9)
        aggregate(
            state,
            [Contribution(0, 1, a, None, 2), Contribution(1, 1, b, None, 5)],
            AggregationMode.DATA_WEIGHTED,
        )
        return _stack_params(state.stack)

    plain = run_agg(_clone_stack(s1), _clone_stack(s2))
    shifted = run_agg(_shift_stack(s1, shift), _shift_stack(s2, shift))
    commute_dev = float(np.abs(shifted - (plain + shift)).max())

    elapsed = time.time() - t0
    ok = (
        identity_dev <= 1e-12
        and weighted_dev <= 1e-12
        and commute_dev <= 1e-12
        and elapsed < 1.0
    )
    report(
        "aggregation algebra",
        ok,
        f"identical inputs deviate {identity_dev:.2e}, weighted (0,4) at "
        f"counts (1,3) off 3.0 by {weighted_dev:.2e}, constant shift commutes "
        f"to {commute_dev:.2e} (all <= 1e-12), {elapsed:.2f}s (budget 1s)",
    )


def test_09_cli_runs_are_byte_identical(tmp_path):
    t0 = time.time()
    cfg = {
        "seed": 19,
        "rounds": 3,
        "clients": 4,
        "batch_size": 20,
        "dataset": {
            "kind": "blobs",
            "classes": 3,
            "dim": 5,
            "samples": 200,
            "test_fraction": 0.2,
        },
        "model": {"block_widths": [16, 8], "tiers": 2},
        "optimizer": {"kind": "adam", "learning_rate": 0.01},
        "scheduler": {"mode": "dynamic", "noise_sigma": 0.1},
    }
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))

    def run_cli(out: str, jobs: int | None = None):
        cmd = [
            sys.executable,
            "-m",
            "dtfl",
            "run",
            "--config",
            str(cfg_path),
            "--out",
            str(tmp_path / out),
        ]
        if jobs is not None:
            cmd += ["--jobs", str(jobs)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr

    run_cli("a")
    run_cli("b")
    run_cli("c", jobs=3)

    files = ["rounds.csv", "assignments.jsonl", "summary.json"]
    rerun_same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in files
    )
    jobs_same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()
        for f in files
    )
    elapsed = time.time() - t0
    report(
        "run determinism",
        rerun_same and jobs_same and elapsed < 60.0,
        f"two runs byte-identical across {', '.join(files)}; --jobs 3 matches "
        f"single worker, {elapsed:.1f}s (budget 60s)",
    )
