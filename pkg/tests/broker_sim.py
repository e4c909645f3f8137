"""Randomized state-machine driver for the broker with crashing workers and a fake clock."""

import numpy as np

from fitfaas import errors
from fitfaas.coordinator.broker import FAILED, LEASED, PENDING, RUNNING, SUCCESS, TERMINAL, Broker

ALLOWED = {
    PENDING: {PENDING, LEASED, SUCCESS, FAILED},
    LEASED: {LEASED, RUNNING, PENDING, SUCCESS, FAILED},
    RUNNING: {RUNNING, PENDING, SUCCESS, FAILED},
    SUCCESS: {SUCCESS},
    FAILED: {FAILED},
}


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def run_state_machine(seed, n_ops=500, n_workers=4, lease_ttl=10.0, journal=None):
    """Drive ``n_ops`` random operations, then drain; assert every safety property.

    Returns a dict of counters describing what happened.
    """
    rng = np.random.default_rng(seed)
    clock = FakeClock()
    broker = Broker(lease_ttl=lease_ttl, clock=clock, journal=journal)
    fid = broker.register_function("echo")
    eid = broker.register_endpoint("sim")
    order = []  # submission order
    held = {w: {} for w in range(n_workers)}  # worker -> {task_id: lease_id}
    stale = []  # (task_id, lease_id) from crashed workers
    first_result = {}
    last_status = {}
    counts = dict(submit=0, lease=0, crash=0, expire=0, stale_rejected=0, duplicate=0, success=0, failure=0)

    def observe():
        for task_id in order:
            status = broker.tasks[task_id].status
            prev = last_status.get(task_id, PENDING)
            assert status in ALLOWED[prev], f"{task_id}: {prev} -> {status}"
            last_status[task_id] = status
            rec = broker.tasks[task_id]
            assert (rec.result is not None) == (status == SUCCESS)
            assert (rec.error is not None) == (status == FAILED)
            if task_id in first_result:
                assert (rec.result, rec.error) == first_result[task_id], "terminal outcome changed"

    def pending_in_order():
        return [t for t in order if broker.tasks[t].status == PENDING]

    def do_lease(w, max_n):
        expected_pool = None
        # FIFO: the leased tasks are exactly the oldest pending ones (after expiry sweep)
        broker._expire(clock())
        expected_pool = pending_in_order()
        got = broker.lease_tasks(eid, max_n)
        ids = [g["task_id"] for g in got]
        assert ids == expected_pool[: len(ids)], "lease order is not FIFO"
        assert len(ids) == min(max_n, len(expected_pool))
        # mutual exclusion: no live holder keeps a task that was just re-leased
        for other in held.values():
            for t in ids:
                if t in other:
                    stale.append((t, other.pop(t)))
        for g in got:
            held[w][g["task_id"]] = g["lease_id"]
        counts["lease"] += 1

    def finish(w, task_id, lease_id, fail):
        outcome = (None, {"code": "DidNotConverge", "message": "sim", "retriable": False}) if fail else (
            {"task": task_id, "worker": w},
            None,
        )
        try:
            status = broker.post_result(task_id, result=outcome[0], error=outcome[1], lease_id=lease_id)
        except errors.StaleLease:
            counts["stale_rejected"] += 1
            return
        if task_id not in first_result:
            rec = broker.tasks[task_id]
            first_result[task_id] = (rec.result, rec.error)
            counts["failure" if status == FAILED else "success"] += 1
        else:
            counts["duplicate"] += 1

    for _ in range(n_ops):
        op = rng.choice(["submit", "lease", "run", "finish", "crash", "tick", "stale", "dup"], p=[0.16, 0.2, 0.12, 0.2, 0.05, 0.15, 0.06, 0.06])
        w = int(rng.integers(n_workers))
        if op == "submit":
            n = int(rng.integers(0, 5))
            ids = broker.submit_tasks(fid, eid, [{"i": len(order) + k} for k in range(n)])
            order.extend(ids)
            counts["submit"] += n
        elif op == "lease":
            do_lease(w, int(rng.integers(1, 4)))
        elif op == "run" and held[w]:
            task_id = list(held[w])[int(rng.integers(len(held[w])))]
            try:
                broker.mark_running(task_id, held[w][task_id])
            except errors.StaleLease:
                held[w].pop(task_id)
        elif op == "finish" and held[w]:
            task_id = list(held[w])[0]
            finish(w, task_id, held[w].pop(task_id), fail=bool(rng.random() < 0.2))
        elif op == "crash":
            stale.extend(held[w].items())
            held[w] = {}
            counts["crash"] += 1
        elif op == "tick":
            dt = lease_ttl * (1.5 if rng.random() < 0.3 else rng.uniform(0, 0.3))
            before = sum(broker.tasks[t].status == PENDING for t in order)
            clock.advance(dt)
            broker._expire(clock())
            counts["expire"] += sum(broker.tasks[t].status == PENDING for t in order) - before
        elif op == "stale" and stale:
            task_id, lease_id = stale.pop(int(rng.integers(len(stale))))
            finish(w, task_id, lease_id, fail=False)
        elif op == "dup" and first_result:
            keys = list(first_result)
            task_id = keys[int(rng.integers(len(keys)))]
            finish(w, task_id, None, fail=bool(rng.random() < 0.5))
        observe()

    # drain with a single surviving worker: expire everything, then complete in order
    clock.advance(lease_ttl * 2)
    for w in held:
        stale.extend(held[w].items())
        held[w] = {}
    while True:
        do_lease(0, 8)
        if not held[0]:
            break
        for task_id, lease_id in list(held[0].items()):
            broker.mark_running(task_id, lease_id)
            finish(0, task_id, lease_id, fail=False)
        held[0] = {}
        observe()
    observe()
    assert all(broker.tasks[t].status in TERMINAL for t in order), "task left non-terminal"
    assert set(first_result) == set(order)
    broker.close()
    counts["tasks"] = len(order)
    return counts, broker
