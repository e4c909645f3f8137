"""Serial and distributed execution of a pallet, and the benchmark report."""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from ..agent.functions import error_report, execute_function, strip_timing
from ..workspace import named_patch_to_document
from .pallet import Pallet

BACKGROUND = "background-only"
POLL_CONCURRENCY = 16


@dataclass(frozen=True)
class TaskSpec:
    name: str
    function: str
    payload: dict


def task_specs(pallet: Pallet, mu=1.0, method="asymptotic", n_toys=None, seed=None) -> list[TaskSpec]:
    """One hypotest per patch plus one background-only fit, in patchset order."""
    specs = []
    for patch in pallet.patchset.patches:
        payload = {"workspace": pallet.workspace_doc, "patch": named_patch_to_document(patch), "mu": float(mu), "method": method}
        if method == "toys":
            payload["n_toys"] = int(n_toys or 1000)
            payload["seed"] = int(seed or 0)
        specs.append(TaskSpec(patch.name, "hypotest_workspace", payload))
    specs.append(TaskSpec(BACKGROUND, "fit_workspace", {"workspace": pallet.workspace_doc}))
    return specs


@dataclass
class TrialRecord:
    trial: int
    wall_seconds: float
    results: dict  # name -> result document
    failures: list  # [(name, code)]


@dataclass
class BenchmarkReport:
    label: str
    n_patches: int
    trials: int
    wall_times_seconds: list
    mean_wall: float
    std_wall: float
    serial_wall: float | None
    fit_seconds: dict  # min / median / max over successful tasks
    failures: list
    records: list = field(default_factory=list)
    mode: str = "fanout"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["failures"] = [list(f) for f in self.failures]
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkReport":
        doc = dict(doc)
        doc["failures"] = [tuple(f) for f in doc.get("failures", [])]
        doc["records"] = [
            TrialRecord(r["trial"], r["wall_seconds"], r["results"], [tuple(f) for f in r["failures"]])
            for r in doc.get("records", [])
        ]
        return cls(**doc)

    def results(self, trial=0) -> dict:
        return self.records[trial].results

    def without_timing(self) -> dict:
        """Report content with every wall-clock field removed."""
        doc = self.to_dict()
        for key in ("wall_times_seconds", "mean_wall", "std_wall", "serial_wall", "fit_seconds"):
            doc.pop(key)
        for rec in doc["records"]:
            rec.pop("wall_seconds")
            rec["results"] = {k: strip_timing(v) for k, v in rec["results"].items()}
        return doc


def wall_stats(walls) -> tuple[float, float]:
    """Mean and sample standard deviation (0.0 for a single trial)."""
    mean = statistics.fmean(walls)
    std = statistics.stdev(walls) if len(walls) > 1 else 0.0
    return mean, std


def _fit_summary(records) -> dict:
    secs = [
        r["timing"]["fit_seconds"]
        for rec in records
        for r in rec.results.values()
        if isinstance(r, dict) and "timing" in r
    ]
    if not secs:
        return {"min": math.nan, "median": math.nan, "max": math.nan}
    return {"min": min(secs), "median": statistics.median(secs), "max": max(secs)}


def _report(pallet, records, serial_wall, mode):
    walls = [r.wall_seconds for r in records]
    mean, std = wall_stats(walls)
    failures = [f for r in records for f in r.failures]
    return BenchmarkReport(
        label=pallet.label,
        n_patches=pallet.n_patches,
        trials=len(records),
        wall_times_seconds=walls,
        mean_wall=mean,
        std_wall=std,
        serial_wall=serial_wall,
        fit_seconds=_fit_summary(records),
        failures=failures,
        records=records,
        mode=mode,
    )


def run_specs_serial(specs) -> TrialRecord:
    results, failures = {}, []
    start = time.perf_counter()
    for spec in specs:
        try:
            results[spec.name] = execute_function(spec.function, spec.payload)
        except Exception as exc:  # noqa: BLE001 - recorded per patch, run continues
            report = error_report(exc)
            results[spec.name] = {"error": report}
            failures.append((spec.name, report["code"]))
    return TrialRecord(0, time.perf_counter() - start, results, failures)


def run_serial(pallet: Pallet, mu=1.0, method="asymptotic", n_toys=None, seed=None) -> BenchmarkReport:
    """Execute every task in-process, one at a time. ``serial_wall`` is the total."""
    record = run_specs_serial(task_specs(pallet, mu, method, n_toys, seed))
    return _report(pallet, [record], record.wall_seconds, "serial")


def _wait_all(client, ids, poll_interval, timeout, concurrency):
    """Poll until every task is terminal; returns (snapshots by id, time the last one was seen)."""
    outstanding = list(ids)
    done = {}
    deadline = time.monotonic() + timeout
    last = time.perf_counter()
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        while outstanding:
            snaps = list(pool.map(client.poll_result, outstanding))
            seen = time.perf_counter()
            still = []
            for task_id, snap in zip(outstanding, snaps):
                if snap["status"] in ("success", "failed"):
                    done[task_id] = snap
                    last = seen
                else:
                    still.append(task_id)
            outstanding = still
            if outstanding:
                if time.monotonic() > deadline:
                    raise TimeoutError(f"{len(outstanding)} tasks still outstanding after {timeout}s")
                time.sleep(poll_interval)
    return done, last


def run_specs_fanout(specs, client, endpoint_id, trial=0, poll_interval=0.05, timeout=3600.0,
                     concurrency=POLL_CONCURRENCY, function_ids=None) -> TrialRecord:
    if function_ids is None:
        function_ids = {}
    for spec in specs:
        if spec.function not in function_ids:
            function_ids[spec.function] = client.register_function(spec.function)
    start = time.perf_counter()
    by_function: dict[str, list] = {}
    for i, spec in enumerate(specs):
        by_function.setdefault(spec.function, []).append(i)
    ids = [None] * len(specs)
    for function, idx in by_function.items():
        for i, task_id in zip(idx, client.submit_tasks(function_ids[function], endpoint_id, [specs[i].payload for i in idx])):
            ids[i] = task_id
    done, last = _wait_all(client, ids, poll_interval, timeout, concurrency)
    results, failures = {}, []
    for spec, task_id in zip(specs, ids):
        snap = done[task_id]
        if snap["status"] == "success":
            results[spec.name] = snap["result"]
        else:
            results[spec.name] = {"error": snap["error"]}
            failures.append((spec.name, snap["error"]["code"]))
    return TrialRecord(trial, last - start, results, failures)


def run_fanout(pallet: Pallet, client, endpoint_id, mu=1.0, trials=1, method="asymptotic", n_toys=None, seed=None,
               serial_wall=None, poll_interval=0.05, timeout=3600.0, concurrency=POLL_CONCURRENCY) -> BenchmarkReport:
    """Submit every task through the coordinator ``trials`` times; wall time is first submit to last terminal.

    Raises:
        CoordinatorUnreachable: before any submission if the coordinator does not answer.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    client.health()
    specs = task_specs(pallet, mu, method, n_toys, seed)
    function_ids: dict[str, str] = {}
    records = [
        run_specs_fanout(specs, client, endpoint_id, t, poll_interval, timeout, concurrency, function_ids)
        for t in range(trials)
    ]
    return _report(pallet, records, serial_wall, "fanout")


def compare_results(a: dict, b: dict) -> list[str]:
    """Names whose result documents differ once timing is removed."""
    names = sorted(set(a) | set(b))
    return [n for n in names if strip_timing(a.get(n)) != strip_timing(b.get(n))]


__all__ = [
    "BACKGROUND",
    "BenchmarkReport",
    "TaskSpec",
    "TrialRecord",
    "compare_results",
    "run_fanout",
    "run_serial",
    "run_specs_fanout",
    "run_specs_serial",
    "task_specs",
    "wall_stats",
]
