"""Task registry kept by the master: task table, worker table, event log.

The registry is a pure state machine with no I/O, so every scheduling rule
can be exercised directly in tests.  There is one global task (id 0) that is
first a Split, stays "being solved" while the local problems are worked on,
becomes "being reduced" once every local task is solved, and is marked
solved after the solution has been computed.  Local tasks have ids
``t + 1`` for element ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from ..errors import RegistrationError, RunFailedError

GLOBAL_TASK = 0


class TaskState(str, Enum):
    NOT_SOLVED = "not solved"
    BEING_SOLVED = "being solved"
    BEING_REDUCED = "being reduced"
    SOLVED = "solved"


class TaskKind(str, Enum):
    SPLIT = "Split"
    SOLVE_LOCAL = "SolveLocal"
    REDUCE = "Reduce"
    COMPUTE_SOLUTION = "ComputeSolution"


NS, BS, BR, S = TaskState.NOT_SOLVED, TaskState.BEING_SOLVED, TaskState.BEING_REDUCED, TaskState.SOLVED

# (BR, BS) is the retry edge of the global task: a failed reduction goes back
# to "being solved", i.e. waiting for the next reduce assignment.
LEGAL_TRANSITIONS = frozenset({(NS, BS), (BS, S), (BS, NS), (BS, BR), (BR, S), (BR, BS)})
GLOBAL_ONLY = frozenset({(BS, BR), (BR, S), (BR, BS)})


@dataclass
class Task:
    id: int
    kind: TaskKind
    state: TaskState = NS
    worker: str | None = None
    attempts: int = 0
    failures: int = 0
    element: int | None = None
    payload: Any = field(default=None, repr=False)

    @property
    def is_global(self) -> bool:
        return self.id == GLOBAL_TASK


@dataclass
class WorkerInfo:
    id: str
    alive: bool = True
    task: int | None = None
    completed: int = 0


@dataclass(frozen=True)
class Event:
    seq: int
    task: int | None
    kind: str
    src: TaskState | None
    dst: TaskState | None
    worker: str | None = None
    note: str = ""


@dataclass(frozen=True)
class Assignment:
    task_id: int
    kind: TaskKind
    attempt: int
    payload: Any = None


@dataclass(frozen=True)
class Wait:
    delay: float = 0.005


@dataclass(frozen=True)
class Done:
    pass


@dataclass(frozen=True)
class Accepted:
    seq: int
    task: int
    kind: TaskKind
    worker: str


class Registry:
    def __init__(self, max_attempts: int = 10):
        self.max_attempts = max_attempts
        self.tasks: dict[int, Task] = {}
        self.workers: dict[str, WorkerInfo] = {}
        self.events: list[Event] = []
        self.accepted: list[Accepted] = []
        self.results: dict[int, Any] = {}
        self.assignments = 0
        self.failures = 0

    # ------------------------------------------------------------ logging

    def _log(self, task, kind, src, dst, worker=None, note=""):
        ev = Event(len(self.events), task, str(kind), src, dst, worker, note)
        self.events.append(ev)
        return ev

    def _move(self, task: Task, dst: TaskState, worker=None, note=""):
        src = task.state
        if (src, dst) not in LEGAL_TRANSITIONS or ((src, dst) in GLOBAL_ONLY and not task.is_global):
            raise AssertionError(f"illegal transition {src} -> {dst} for task {task.id}")
        task.state = dst
        self._log(task.id, task.kind.value, src, dst, worker, note)

    def note(self, text: str, task=None, worker=None):
        self._log(task, "note", None, None, worker, text)

    # ------------------------------------------------------------ tasks

    def add_task(self, kind: TaskKind, payload=None, task_id: int | None = None,
                 element: int | None = None, state: TaskState = NS, note: str = "created") -> Task:
        if task_id is None:
            task_id = max(self.tasks, default=-1) + 1
        if task_id in self.tasks:
            raise ValueError(f"task {task_id} already exists")
        task = Task(task_id, kind, state=state, element=element, payload=payload)
        self.tasks[task_id] = task
        self._log(task_id, kind.value, None, state, None, note)
        return task

    def add_global_task(self, payload=None, restored_split: bool = False) -> Task:
        if restored_split:
            return self.add_task(TaskKind.REDUCE, payload, GLOBAL_TASK, state=BS, note="restored after split")
        return self.add_task(TaskKind.SPLIT, payload, GLOBAL_TASK)

    def add_local_tasks(self, payloads: dict[int, Any], solved: dict[int, Any] | None = None) -> list[Task]:
        """One SolveLocal task per element; elements in ``solved`` start solved."""
        solved = solved or {}
        out = []
        for t in sorted(set(payloads) | set(solved)):
            if t in solved:
                task = self.add_task(TaskKind.SOLVE_LOCAL, payloads.get(t), t + 1, element=t,
                                     state=S, note="restored")
                self.results[t] = solved[t]
            else:
                task = self.add_task(TaskKind.SOLVE_LOCAL, payloads[t], t + 1, element=t)
            out.append(task)
        return out

    @property
    def global_task(self) -> Task:
        return self.tasks[GLOBAL_TASK]

    def local_tasks(self) -> list[Task]:
        return [self.tasks[i] for i in sorted(self.tasks) if i != GLOBAL_TASK]

    @property
    def all_locals_solved(self) -> bool:
        locs = self.local_tasks()
        return bool(locs) and all(t.state is S for t in locs)

    @property
    def finished(self) -> bool:
        return GLOBAL_TASK in self.tasks and self.global_task.state is S

    @property
    def phase(self) -> str:
        g = self.tasks.get(GLOBAL_TASK)
        if g is None:
            return "init"
        if g.state is S:
            return "done"
        if g.kind is TaskKind.SPLIT:
            return "split"
        if not self.all_locals_solved:
            return "locals"
        return "reduce"

    # ------------------------------------------------------------ workers

    def register_worker(self, wid: str) -> WorkerInfo:
        if wid in self.workers:
            raise RegistrationError(f"worker {wid} already registered")
        info = WorkerInfo(wid)
        self.workers[wid] = info
        self._log(None, "worker", None, None, wid, "registered")
        return info

    def live_workers(self) -> list[str]:
        return [w for w, info in self.workers.items() if info.alive]

    def _live(self, wid: str) -> WorkerInfo:
        info = self.workers.get(wid)
        if info is None:
            raise RegistrationError(f"unknown worker {wid!r}")
        if not info.alive:
            raise RegistrationError(f"worker {wid!r} is marked dead")
        return info

    def _assign(self, info: WorkerInfo, task: Task, dst: TaskState) -> Assignment:
        if task.attempts >= self.max_attempts:
            raise RunFailedError(f"task {task.id} ({task.kind.value}) exceeded {self.max_attempts} attempts")
        task.attempts += 1
        task.worker = info.id
        info.task = task.id
        self.assignments += 1
        self._move(task, dst, info.id, f"attempt {task.attempts}")
        return Assignment(task.id, task.kind, task.attempts, task.payload)

    def request_task(self, wid: str):
        """Pick work for ``wid``: an Assignment, Wait or Done."""
        info = self._live(wid)
        if info.task is not None:
            task = self.tasks[info.task]
            return Assignment(task.id, task.kind, task.attempts, task.payload)
        if self.finished:
            return Done()
        g = self.tasks.get(GLOBAL_TASK)
        if g is None:
            return Wait()
        if g.kind is TaskKind.SPLIT:
            if g.state is NS:
                return self._assign(info, g, BS)
            return Wait()
        for task in self.local_tasks():
            if task.state is NS:
                return self._assign(info, task, BS)
        if self.all_locals_solved and g.kind is TaskKind.REDUCE and g.state is BS and g.worker is None:
            return self._assign(info, g, BR)
        return Wait()

    def start_task(self, wid: str, task_id: int) -> Assignment:
        """Static assignment: ``wid`` owns ``task_id`` by partition, no choice involved."""
        info = self._live(wid)
        task = self.tasks[task_id]
        if task.state is not NS or info.task is not None:
            raise RunFailedError(f"cannot start task {task_id} on {wid}: state {task.state.value}")
        return self._assign(info, task, BS)

    def assign_reduce(self, wid: str) -> Assignment:
        """Hand the reduction to ``wid`` (static mode: the master itself)."""
        info = self._live(wid)
        g = self.global_task
        if not (self.all_locals_solved and g.state is BS and g.worker is None):
            raise RunFailedError("reduction requested before all local problems are solved")
        g.kind = TaskKind.REDUCE
        return self._assign(info, g, BR)

    def complete_task(self, wid: str, task_id: int, kind: TaskKind, result=None) -> bool:
        """Accept a result; stale or duplicate results are dropped and logged."""
        info = self.workers.get(wid)
        task = self.tasks.get(task_id)
        kind = TaskKind(kind)
        reason = None
        if info is None:
            reason = "unknown worker"
        elif not info.alive:
            reason = "worker presumed dead"
        elif task is None:
            reason = "unknown task"
        elif task.worker != wid or info.task != task_id:
            reason = "task not held by worker"
        elif task.kind is not kind:
            reason = f"kind mismatch ({kind.value} vs {task.kind.value})"
        if reason:
            self._log(task_id, "stale", None, None, wid, f"dropped {kind.value} result: {reason}")
            return False

        info.task = None
        info.completed += 1
        task.worker = None
        seq = len(self.events)
        if kind is TaskKind.SPLIT:
            self.accepted.append(Accepted(seq, task_id, kind, wid))
            # attempts are counted per stage of the global task
            task.kind = TaskKind.REDUCE
            task.attempts = task.failures = 0
            self._log(task_id, kind.value, BS, BS, wid, "split done; global task waits for reduction")
            self.add_local_tasks(dict(result or {}))
        elif kind is TaskKind.SOLVE_LOCAL:
            self.accepted.append(Accepted(seq, task_id, kind, wid))
            self._move(task, S, wid, "result accepted")
            self.results[task.element] = result
        elif kind is TaskKind.REDUCE:
            self.accepted.append(Accepted(seq, task_id, kind, wid))
            task.kind = TaskKind.COMPUTE_SOLUTION
            self.results["global"] = result
            self._log(task_id, kind.value, BR, BR, wid, "reduced; computing solution")
        else:
            raise RunFailedError(f"unexpected completion kind {kind}")
        return True

    def mark_solution_computed(self) -> None:
        g = self.global_task
        if g.kind is not TaskKind.COMPUTE_SOLUTION or g.state is not BR:
            raise RunFailedError("solution computed before reduction finished")
        self._move(g, S, None, "solution computed")

    def handle_worker_failure(self, wid: str, cause: str = "crash") -> Task | None:
        """Mark ``wid`` dead and return its task (if any) to the pool."""
        info = self.workers.get(wid)
        if info is None or not info.alive:
            return None
        info.alive = False
        self._log(None, "worker", None, None, wid, f"dead ({cause})")
        if info.task is None:
            return None
        task = self.tasks[info.task]
        info.task = None
        task.worker = None
        task.failures += 1
        self.failures += 1
        back = BS if task.state is BR else NS
        self._move(task, back, wid, f"released after {cause}")
        if task.attempts >= self.max_attempts:
            raise RunFailedError(f"task {task.id} failed {task.attempts} times; giving up")
        return task

    # ------------------------------------------------------------ audits

    def illegal_transitions(self) -> list[Event]:
        bad = []
        for ev in self.events:
            if ev.src is None or ev.dst is None or ev.src == ev.dst:
                continue
            pair = (ev.src, ev.dst)
            if pair not in LEGAL_TRANSITIONS or (pair in GLOBAL_ONLY and ev.task != GLOBAL_TASK):
                bad.append(ev)
        return bad

    def ledger_violations(self) -> list[str]:
        """Work units accepted more or less than once, and late results from dead workers."""
        problems = []
        seen = {}
        for a in self.accepted:
            key = (a.task, a.kind)
            seen[key] = seen.get(key, 0) + 1
        for key, count in seen.items():
            if count != 1:
                problems.append(f"{key} accepted {count} times")
        died = {ev.worker: ev.seq for ev in self.events if ev.kind == "worker" and ev.note.startswith("dead")}
        for a in self.accepted:
            if a.worker in died and a.seq > died[a.worker]:
                problems.append(f"result for task {a.task} accepted from dead worker {a.worker}")
        for task in self.local_tasks():
            if task.state is S and task.element not in self.results:
                problems.append(f"solved task {task.id} has no result")
        return problems

    def summary(self) -> dict:
        units = len(self.accepted)
        return {
            "total": units,
            "retries": self.assignments - units if self.finished else self.failures,
            "attempts": self.assignments,
            "failures": self.failures,
        }
