"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every test records its verdict before asserting, so the summary block at the
end of the run lists all ten criteria even when some fail.
"""

import json
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

from fitfaas.agent import EndpointConfig, scaling_decision
from fitfaas.agent.functions import execute_function
from fitfaas.bench.local import LocalStack
from fitfaas.bench.pallet import gen_fixture
from fitfaas.bench.runner import BenchmarkReport, TaskSpec, compare_results, run_fanout, run_serial, run_specs_fanout
from fitfaas.cli import cli
from fitfaas.inference import fit, hypotest_asymptotic, hypotest_toys, profile_tstat
from fitfaas.model import asimov_data, build_model, gradient, nll, observed_data
from fitfaas.workspace import (
    apply_patch,
    parse_workspace,
    serialize_workspace,
    validate,
    verify_pallet,
)

import builders
from broker_sim import run_state_machine
from conftest import ACCEPTANCE
from oracles import grid_refine, small_fixture
from scaling_cases import CASES, materialize


def record(number, ok, text):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def compiled(ws):
    model = build_model(ws)
    return model, observed_data(model, ws)


# 1 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_01_pallet_fanout():
    pallet = gen_fixture(125, 3, 5, seed=7)
    cfg = EndpointConfig(max_blocks=4, nodes_per_block=1)
    start = time.monotonic()
    with LocalStack(cfg) as stack:
        report = run_fanout(pallet, stack.client, stack.endpoint_id, mu=1.0, trials=1)
    elapsed = time.monotonic() - start
    serial = run_serial(pallet, mu=1.0)
    differ = compare_results(serial.results(), report.results())
    ok = report.n_patches == 125 and not report.failures and elapsed < 300 and not differ and len(report.results()) == 126
    record(
        1, ok,
        f"125 patches, {len(report.failures)} failures, fan-out {report.mean_wall:.1f}s (stack total {elapsed:.1f}s < 300s), "
        f"{len(differ)} results differ from serial",
    )
    assert ok


# 2 ---------------------------------------------------------------------------


def _uniform_task():
    # toy-based hypotest on the counting fixture: identical payloads, about 0.3 s each
    payload = {"workspace": builders.counting_doc(sigma_b=5.0), "mu": 1.0, "method": "toys", "n_toys": 100, "seed": 1}
    return TaskSpec("uniform", "hypotest_workspace", payload)


@pytest.mark.slow
def test_criterion_02_speedup():
    spec = _uniform_task()
    specs = [TaskSpec(f"t{i}", spec.function, spec.payload) for i in range(64)]
    costs = []
    serial_start = time.perf_counter()
    for s in specs:
        t0 = time.perf_counter()
        execute_function(s.function, s.payload)
        costs.append(time.perf_counter() - t0)
    serial_wall = time.perf_counter() - serial_start

    cfg = EndpointConfig(max_blocks=1, nodes_per_block=1, workers_per_node=8, parallelism=1.0)
    with LocalStack(cfg, warm=True) as stack:
        stack.wait_for_workers(8)
        rec = run_specs_fanout(specs, stack.client, stack.endpoint_id)
    ok = min(costs) >= 0.2 and not rec.failures and rec.wall_seconds <= serial_wall / 4
    record(
        2, ok,
        f"64 tasks (min serial cost {min(costs) * 1e3:.0f} ms), 8 workers on {os.cpu_count()} CPU(s): "
        f"distributed {rec.wall_seconds:.1f}s vs serial {serial_wall:.1f}s / 4 = {serial_wall / 4:.1f}s",
    )
    assert min(costs) >= 0.2
    assert not rec.failures
    assert rec.wall_seconds <= serial_wall / 4


# 3 ---------------------------------------------------------------------------


def test_criterion_03_mle_oracle():
    worst_nll, worst_dist = 0.0, 0.0
    for seed in range(1000, 1050):
        ws, names, oracle, lower, upper = small_fixture(np.random.default_rng(seed))
        model, data = compiled(ws)
        result = fit(model, data)
        best, best_value = grid_refine(oracle, lower, upper)
        fitted = np.array([result.point[model.par_slices[k]][0] for k in names])
        worst_nll = max(worst_nll, abs(result.nll_min - best_value))
        worst_dist = max(worst_dist, float(np.linalg.norm(fitted - best)))
    ok = worst_nll < 1e-4 and worst_dist < 1e-3
    record(3, ok, f"50 fixtures: max |dNLL| {worst_nll:.2e} < 1e-4, max parameter distance {worst_dist:.2e} < 1e-3")
    assert ok


# 4 ---------------------------------------------------------------------------


def _five_point(f, x, i, h):
    def at(k):
        y = x.copy()
        y[i] += k * h
        return f(y)

    return (at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * h)


def test_criterion_04_gradient():
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_evals = 0
    while n_evals < 100:
        d = builders.random_rich_doc(rng)
        ws = parse_workspace(json.dumps(d))
        model, data = compiled(ws)
        for _ in range(5):
            x = builders.random_point(model, rng)
            g = gradient(model, x, data)
            for i in np.flatnonzero(~model.fixed_mask):
                fd = _five_point(lambda y: nll(model, y, data), x, i, 1e-4 * max(1.0, abs(x[i])))
                scale = max(abs(fd), abs(g[i]))
                if scale > 0:
                    worst = max(worst, abs(fd - g[i]) / scale)
            n_evals += 1
    ok = worst < 1e-5
    record(4, ok, f"{n_evals} random evaluations: max relative error {worst:.2e} < 1e-5")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_05_asymptotic_vs_toys():
    model, data = compiled(builders.counting(b=50, s=10, n=50))
    start = time.perf_counter()
    asym = hypotest_asymptotic(model, data, 1.0).cls_obs
    toys = hypotest_toys(model, data, 1.0, n_toys=200_000, seed=0).cls_obs
    elapsed = time.perf_counter() - start
    diff = abs(asym - toys)
    ok = diff < 0.02 and elapsed < 180
    record(5, ok, f"cls asymptotic {asym:.4f} vs toys(200k, seed 0) {toys:.4f}: |diff| {diff:.4f} < 0.02 in {elapsed:.1f}s")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_06_asimov_identity():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(20):
        model, _ = compiled(parse_workspace(json.dumps(builders.random_rich_doc(rng))))
        mu = float(rng.uniform(0.2, 2.0))
        data = asimov_data(model, model.point(mu=mu))
        worst = max(worst, abs(profile_tstat(model, data, mu)))
    ok = worst <= 1e-8
    record(6, ok, f"20 random models: max |qtilde(asimov(mu), mu)| {worst:.2e} <= 1e-8")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_criterion_07_scaling_table():
    wrong = []
    for name, snapshot, overrides, expected in CASES:
        s, cfg = materialize(snapshot, overrides)
        if scaling_decision(s, cfg) != expected:
            wrong.append(name)
    ok = len(CASES) == 20 and not wrong
    record(7, ok, f"{len(CASES)} hand-evaluated cases, mismatches: {wrong or 'none'}")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_08_broker_state_machine():
    totals = {}
    broker = None
    for seed in range(3):
        counts, broker = run_state_machine(seed, n_ops=500)
        for k, v in counts.items():
            totals[k] = totals.get(k, 0) + v
    # run_state_machine asserts FIFO, single terminal outcome and transition legality as it goes
    terminal = all(t.status in ("success", "failed") for t in broker.tasks.values())
    ok = terminal and totals.get("crash", 0) > 0 and totals.get("expire", 0) > 0
    record(8, ok, f"3 x 500 operations incl. {totals.get('crash', 0)} crashes, {totals.get('expire', 0)} expiries; all tasks terminal")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_09_round_trip_and_digests():
    rng = np.random.default_rng(909)
    round_trips = 0
    for _ in range(200):
        ws = parse_workspace(json.dumps(builders.random_workspace_doc(rng)))
        again = parse_workspace(serialize_workspace(ws))
        assert again == ws and serialize_workspace(again) == serialize_workspace(ws)
        round_trips += 1

    pallet = gen_fixture(30, 2, 3, seed=9)
    base = parse_workspace(pallet.workspace_text)
    applied = 0
    for patch in pallet.patchset.patches:
        assert validate(apply_patch(base, patch)) == []
        applied += 1

    small = gen_fixture(1, 1, 2, seed=7)
    text = small.workspace_text.encode("utf-8")
    genuine = verify_pallet(text, small.patchset) and verify_pallet(pallet.workspace_text, pallet.patchset)

    # every byte flipped (XOR 0x01) must be rejected
    flips_accepted = sum(
        verify_pallet(text[:i] + bytes([text[i] ^ 0x01]) + text[i + 1:], small.patchset) for i in range(len(text))
    )
    # exhaustive substitutions, every one of which must be rejected; the report separates
    # rewrites that leave the parsed content unchanged, since a canonical-form digest cannot see them
    base_small = parse_workspace(text)
    content_changes_accepted = 0
    equivalent = 0
    for i in range(len(text)):
        for v in range(256):
            if v == text[i]:
                continue
            mutated = text[:i] + bytes([v]) + text[i + 1:]
            if verify_pallet(mutated, small.patchset):
                if parse_workspace(mutated) == base_small:
                    equivalent += 1
                else:
                    content_changes_accepted += 1
    accepted = content_changes_accepted + equivalent
    ok = round_trips == 200 and applied == 30 and genuine and flips_accepted == 0 and accepted == 0
    record(
        9, ok,
        f"200 round trips, {applied} patches valid, genuine pallets verify; {len(text)} byte flips: {flips_accepted} accepted; "
        f"{len(text) * 255} substitutions: {accepted} accepted ({content_changes_accepted} change the content, "
        f"{equivalent} are content-preserving rewrites such as whitespace swaps)",
    )
    assert ok


# 10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    gen_fixture(10, 2, 3, seed=21, out_dir=tmp_path / "pallet")
    runner = CliRunner()
    reports = []
    for run in ("a", "b"):
        out = tmp_path / f"{run}.json"
        res = runner.invoke(
            cli,
            ["fit-fanout", str(tmp_path / "pallet"), "--local", "--max-blocks", "2", "--workers-per-node", "2",
             "--trials", "2", "--seed", "5", "--save", str(out)],
        )
        assert res.exit_code == 0, res.output
        reports.append(BenchmarkReport.from_dict(json.loads(out.read_text())))
    a, b = reports
    per_patch = all(
        compare_results(a.results(t), b.results(t)) == [] and compare_results(a.results(0), a.results(t)) == []
        for t in range(a.trials)
    )
    raw = a.without_timing() == b.without_timing()
    timing_only = len(a.wall_times_seconds) == len(b.wall_times_seconds) == 2
    ok = per_patch and raw and timing_only
    record(10, ok, f"two fit-fanout runs x 2 trials: per-patch documents identical={per_patch}, reports equal up to timing={raw}")
    assert ok
