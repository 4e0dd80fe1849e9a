import pytest
from hypothesis import given
from hypothesis import strategies as st

from mhm.errors import RegistrationError, RunFailedError
from mhm.orchestrator.registry import (BR, BS, NS, S, Assignment, Done, Registry, TaskKind,
                                       Wait)


def _split_done(reg, wid, n_local):
    a = reg.request_task(wid)
    assert a.kind is TaskKind.SPLIT
    assert reg.complete_task(wid, a.task_id, TaskKind.SPLIT, {t: f"p{t}" for t in range(n_local)})


def _fresh(workers=("w0",), n_local=2, max_attempts=10):
    reg = Registry(max_attempts)
    for w in workers:
        reg.register_worker(w)
    reg.add_global_task()
    return reg


def test_full_lifecycle_n1():
    reg = _fresh()
    _split_done(reg, "w0", 2)
    assert [t.state for t in reg.local_tasks()] == [NS, NS]
    for expected in (1, 2):
        a = reg.request_task("w0")
        assert a.task_id == expected and a.kind is TaskKind.SOLVE_LOCAL
        assert reg.complete_task("w0", a.task_id, TaskKind.SOLVE_LOCAL, expected)
    a = reg.request_task("w0")
    assert a.kind is TaskKind.REDUCE and reg.global_task.state is BR
    reg.complete_task("w0", 0, TaskKind.REDUCE, "g")
    assert reg.global_task.kind is TaskKind.COMPUTE_SOLUTION
    reg.mark_solution_computed()
    assert reg.finished and isinstance(reg.request_task("w0"), Done)
    assert reg.summary() == {"total": 4, "retries": 0, "attempts": 4, "failures": 0}
    assert not reg.illegal_transitions() and not reg.ledger_violations()


def test_split_creates_notsolved_tasks():
    reg = _fresh()
    _split_done(reg, "w0", 8)
    tasks = reg.local_tasks()
    assert len(tasks) == 8 and all(t.state is NS for t in tasks)
    assert [t.id for t in tasks] == list(range(1, 9))


def test_fifo_by_id():
    reg = Registry()
    reg.register_worker("w")
    reg.add_global_task(restored_split=True)
    for t in (4, 1, 8):  # task ids 5, 2, 9
        reg.add_task(TaskKind.SOLVE_LOCAL, None, t + 1, element=t)
    assert reg.request_task("w").task_id == 2


def test_wait_while_tasks_in_flight():
    reg = _fresh(("a", "b"))
    assert isinstance(reg.request_task("b"), Assignment)
    assert isinstance(reg.request_task("a"), Wait)  # split in flight
    reg.complete_task("b", 0, TaskKind.SPLIT, {0: None})
    reg.request_task("a")
    assert isinstance(reg.request_task("b"), Wait)  # only local held by a
    assert reg.global_task.state is BS


def test_reduce_only_after_all_locals():
    reg = _fresh(("a", "b"))
    _split_done(reg, "a", 2)
    reg.request_task("a")
    reg.request_task("b")
    reg.complete_task("a", 1, TaskKind.SOLVE_LOCAL, 1)
    assert isinstance(reg.request_task("a"), Wait)
    with pytest.raises(RunFailedError):
        reg.assign_reduce("a")
    reg.complete_task("b", 2, TaskKind.SOLVE_LOCAL, 2)
    assert reg.request_task("a").kind is TaskKind.REDUCE


def test_request_repeats_current_assignment():
    reg = _fresh()
    a = reg.request_task("w0")
    b = reg.request_task("w0")
    assert a == b and reg.assignments == 1


def test_stale_results_dropped():
    reg = _fresh(("a", "b"))
    _split_done(reg, "a", 2)
    reg.request_task("a")
    reg.handle_worker_failure("a")
    assert reg.tasks[1].state is NS and reg.tasks[1].failures == 1
    n_acc = len(reg.accepted)
    assert not reg.complete_task("a", 1, TaskKind.SOLVE_LOCAL, "late")
    assert not reg.complete_task("b", 1, TaskKind.SOLVE_LOCAL, "not held")
    assert not reg.complete_task("ghost", 1, TaskKind.SOLVE_LOCAL, "unknown")
    assert len(reg.accepted) == n_acc
    assert sum(ev.kind == "stale" for ev in reg.events) == 3
    a = reg.request_task("b")
    assert a.task_id == 1 and a.attempt == 2
    reg.complete_task("b", 1, TaskKind.SOLVE_LOCAL, "ok")
    assert not reg.complete_task("b", 1, TaskKind.SOLVE_LOCAL, "dup")
    assert reg.results[0] == "ok" and not reg.ledger_violations()


def test_idle_failure_changes_nothing():
    reg = _fresh(("a", "b"))
    _split_done(reg, "a", 2)
    before = [(t.id, t.state, t.attempts) for t in reg.tasks.values()]
    assert reg.handle_worker_failure("b") is None
    assert [(t.id, t.state, t.attempts) for t in reg.tasks.values()] == before
    assert reg.live_workers() == ["a"]
    assert reg.handle_worker_failure("b") is None


def test_reduce_failure_returns_to_being_solved():
    reg = _fresh(("a", "b"))
    _split_done(reg, "a", 1)
    reg.request_task("a")
    reg.complete_task("a", 1, TaskKind.SOLVE_LOCAL, 1)
    reg.request_task("a")
    assert reg.global_task.state is BR
    reg.handle_worker_failure("a")
    assert reg.global_task.state is BS
    a = reg.request_task("b")
    assert a.kind is TaskKind.REDUCE and a.attempt == 2
    assert not reg.illegal_transitions()


def test_max_attempts():
    workers = [f"w{i}" for i in range(3)]
    reg = _fresh(workers, max_attempts=2)
    _split_done(reg, "w0", 1)
    reg.request_task("w1")
    reg.handle_worker_failure("w1")
    reg.request_task("w2")
    with pytest.raises(RunFailedError):
        reg.handle_worker_failure("w2")


def test_registration_errors():
    reg = _fresh(("a",))
    with pytest.raises(RegistrationError):
        reg.register_worker("a")
    with pytest.raises(RegistrationError):
        reg.request_task("nobody")
    reg.handle_worker_failure("a")
    with pytest.raises(RegistrationError):
        reg.request_task("a")


def test_static_start_task():
    reg = _fresh(("a",))
    _split_done(reg, "a", 3)
    a = reg.start_task("a", 3)
    assert a.task_id == 3
    with pytest.raises(RunFailedError):
        reg.start_task("a", 2)  # already holds a task


def test_restored_locals():
    reg = Registry()
    reg.register_worker("a")
    reg.add_global_task(restored_split=True)
    reg.add_local_tasks({0: "p0", 1: "p1", 2: "p2"}, solved={1: "s1"})
    assert [t.state for t in reg.local_tasks()] == [NS, S, NS]
    assert reg.request_task("a").task_id == 1
    assert reg.results[1] == "s1"


@given(st.integers(1, 6), st.integers(1, 4),
       st.lists(st.tuples(st.sampled_from(["req", "done", "fail", "dup"]), st.integers(0, 3)), max_size=80))
def test_random_event_sequences(n_local, n_workers, script):
    """Any interleaving of requests, completions, failures and replays keeps the FSM legal."""
    workers = [f"w{i}" for i in range(n_workers)]
    reg = _fresh(workers, max_attempts=1000)
    held = {}
    spare = 0
    for action, idx in script:
        live = reg.live_workers()
        if not live:
            spare += 1
            reg.register_worker(f"x{spare}")
            continue
        wid = live[idx % len(live)]
        if action == "req":
            a = reg.request_task(wid)
            if isinstance(a, Assignment):
                held[wid] = a
        elif action == "done" and wid in held:
            a = held.pop(wid)
            result = {t: t for t in range(n_local)} if a.kind is TaskKind.SPLIT else a.task_id
            if reg.complete_task(wid, a.task_id, a.kind, result) and a.kind is TaskKind.REDUCE:
                reg.mark_solution_computed()
        elif action == "fail":
            reg.handle_worker_failure(wid)
            held.pop(wid, None)
        elif action == "dup":
            reg.complete_task(wid, idx, TaskKind.SOLVE_LOCAL, "dup")
        for info in reg.workers.values():
            assert info.task is None or reg.tasks[info.task].worker == info.id
    assert not reg.illegal_transitions()
    assert not reg.ledger_violations()
    for t in reg.tasks.values():
        assert t.attempts >= t.failures
    # liveness: a fresh worker finishes whatever is left
    reg.register_worker("finisher")
    for _ in range(3 * n_local + 10):
        a = reg.request_task("finisher")
        if isinstance(a, Done):
            break
        if isinstance(a, Wait):
            for w in reg.live_workers():
                if w != "finisher":
                    reg.handle_worker_failure(w)
            continue
        result = {t: t for t in range(n_local)} if a.kind is TaskKind.SPLIT else a.task_id
        reg.complete_task("finisher", a.task_id, a.kind, result)
        if a.kind is TaskKind.REDUCE:
            reg.mark_solution_computed()
    assert reg.finished
    assert not reg.illegal_transitions() and not reg.ledger_violations()
    assert all(t.state is S for t in reg.tasks.values())
