"""Master event loop, worker processes and the three execution modes.

``dynamic``
    Workers pull tasks from the master's registry (lowest id first).  A
    worker that exits or misses its heartbeats is declared dead and its task
    goes back to the pool.
``static``
    Elements are split into contiguous shares, one per worker, solved with
    no stealing.  The master waits for every share (the barrier) and then
    reduces.  Any worker death aborts the run.
``sequential``
    Same registry, driven in-process by a single loop.  This is the
    reference for the other two.

Workers talk to the master only through a duplex pipe.  Messages are
tuples whose first item names them:

    worker -> master   hello, heartbeat, request, factorized, result, error
                       (static: split, start, finished)
    master -> worker   assign, wait, done
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from multiprocessing.connection import wait as wait_ready
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..errors import (CheckpointError, ConfigurationError, MHMError, PartialFailureError,
                      RunFailedError, SimulatedCrash)
from ..femcore import get_problem
from ..global_reducer import (GlobalSolution, Model, ReconstructedSolution, build_model,
                              compute_solution, dof_counts, l2_error, reduce_local_problems,
                              split_problem, write_global_csv, write_solution_vtk)
from ..local_solver import (factorization_count, record_factorizations,
                            reset_factorization_count, solve_local_problem)
from .checkpoint import CheckpointStore, ResumePoint
from .failures import FailurePlan, FailureRule, FailureTrigger
from .registry import GLOBAL_TASK, Assignment, Done, Registry, TaskKind, Wait

log = logging.getLogger(__name__)

MASTER = "master"
CRASH_EXIT_CODE = 17


# ---------------------------------------------------------------- primitives

def execute_primitive(model: Model, kind: TaskKind, payload):
    """Run one task body.  Pure: the result depends only on the payload."""
    kind = TaskKind(kind)
    if kind is TaskKind.SPLIT:
        return {p.t: p for p in split_problem(model, payload)}
    if kind is TaskKind.SOLVE_LOCAL:
        return solve_local_problem(payload, model.skeleton).without_factorization()
    if kind is TaskKind.REDUCE:
        return reduce_local_problems(payload, model.skeleton, model.v0)
    raise RunFailedError(f"{kind.value} is not executed by workers")


def model_from_config(config: RunConfig) -> Model:
    return build_model(config.discretization, get_problem(config.problem))


# ---------------------------------------------------------------- report

@dataclass
class RunReport:
    status: str
    config: dict
    phases: list
    tasks: dict
    factorizations: int
    l2_error: float | None
    wall_times: dict
    dof_counts: dict
    nullity: int
    workers: dict
    resumed_from: str | None = None
    error: str | None = None
    global_solution: GlobalSolution | None = field(default=None, repr=False)
    solution: ReconstructedSolution | None = field(default=None, repr=False)
    registry: Registry | None = field(default=None, repr=False)
    local_solutions: list = field(default_factory=list, repr=False)

    @property
    def galerkin_equivalent_dofs(self) -> int | None:
        return self.dof_counts.get("galerkin_equivalent_dofs")

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "resumed_from": self.resumed_from,
            "phases": self.phases,
            "tasks": self.tasks,
            "factorizations": self.factorizations,
            "l2_error": self.l2_error,
            "nullity": self.nullity,
            "dof_counts": self.dof_counts,
            "galerkin_equivalent_dofs": self.galerkin_equivalent_dofs,
            "workers": self.workers,
            "wall_times": self.wall_times,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


# ---------------------------------------------------------------- master-side bookkeeping

def _parse_crash(spec: str | None):
    if not spec:
        return None
    if spec in ("post_split", "post_locals"):
        return (spec, None)
    name, _, count = spec.partition(":")
    if name == "locals" and count.isdigit():
        return ("locals", int(count))
    raise ConfigurationError(f"bad master crash hook {spec!r}")


class _Coordinator:
    """Registry, checkpoints and phase timing shared by all modes."""

    def __init__(self, config: RunConfig, model: Model, store: CheckpointStore | None,
                 resume: ResumePoint | None):
        self.config = config
        self.model = model
        self.store = store
        self.resume = resume
        self.registry = Registry(config.max_attempts)
        self.crash = _parse_crash(config.inject_master_crash)
        self.accepted_locals = 0
        self.phases: list[dict] = []
        self.wall_times: dict[str, float] = {}
        self.t_start = self._t = time.perf_counter()
        self.global_solution: GlobalSolution | None = None
        self.solution: ReconstructedSolution | None = None

        if resume is None:
            self.registry.add_global_task()
        else:
            self.registry.add_global_task(restored_split=True)
            self.registry.add_local_tasks({p.t: p for p in resume.problems}, solved=resume.solutions)
            self._phase("split", "restored")
            if self.registry.all_locals_solved:
                self._phase("locals", "restored")

    def _phase(self, name: str, status: str = "run") -> None:
        now = time.perf_counter()
        self.wall_times[name] = now - self._t if status == "run" else 0.0
        self._t = now
        self.phases.append({"name": name, "status": status})

    def _maybe_crash(self, point: str) -> None:
        if self.crash is None or self.crash[0] != point:
            return
        if point == "locals" and self.accepted_locals != self.crash[1]:
            return
        self.registry.note(f"injected master crash at {point}")
        raise SimulatedCrash(f"injected master crash ({self.config.inject_master_crash})")

    @property
    def solutions(self) -> list:
        res = self.registry.results
        return [res[t] for t in sorted(k for k in res if isinstance(k, int))]

    def payload_for(self, a: Assignment):
        if a.kind is TaskKind.REDUCE:
            return self.solutions
        return a.payload

    def split_done(self, problems) -> None:
        self._phase("split")
        if self.store is not None:
            self.store.write_split(list(problems))
        self._maybe_crash("post_split")

    def on_result(self, wid: str, task_id: int, kind, result) -> bool:
        kind = TaskKind(kind)
        if not self.registry.complete_task(wid, task_id, kind, result):
            return False
        if kind is TaskKind.SPLIT:
            self.split_done(result.values())
        elif kind is TaskKind.SOLVE_LOCAL:
            self.accepted_locals += 1
            if self.store is not None and self.store.mode == "fine":
                self.store.write_local(result)
            self._maybe_crash("locals")
            if self.registry.all_locals_solved and self.registry.global_task.kind is not TaskKind.SPLIT:
                self.locals_done()
        elif kind is TaskKind.REDUCE:
            self._phase("reduce")
        return True

    def locals_done(self) -> None:
        self._phase("locals")
        if self.store is not None:
            if self.store.mode == "coarse":
                self.store.write_locals(self.solutions)
            else:
                self.store.mark("PostLocals")
        self._maybe_crash("post_locals")

    @property
    def reduced(self) -> bool:
        return self.registry.global_task.kind is TaskKind.COMPUTE_SOLUTION and not self.registry.finished

    def finish(self) -> None:
        """ComputeSolution, run at the master right after the reduction arrives."""
        g = self.registry.results["global"]
        self.solution = compute_solution(g, self.solutions, self.model)
        self.global_solution = g
        self.registry.mark_solution_computed()
        self._phase("compute_solution")
        if self.store is not None:
            self.store.write_global(g)

    def report(self, status: str = "ok", error: str | None = None, workers: dict | None = None) -> RunReport:
        self.wall_times["total"] = time.perf_counter() - self.t_start
        err = None
        if self.solution is not None and self.model.data.exact is not None:
            err = l2_error(self.solution, self.model.data.exact)
        g = self.global_solution
        return RunReport(
            status=status,
            config=self.config.to_dict(),
            phases=list(self.phases),
            tasks=self.registry.summary(),
            factorizations=factorization_count(),
            l2_error=err,
            wall_times=dict(self.wall_times),
            dof_counts=dof_counts(self.model),
            nullity=g.nullity if g is not None else 0,
            workers=workers or {"count": 1, "died": 0},
            resumed_from=self.resume.marker if self.resume else None,
            error=error,
            global_solution=g,
            solution=self.solution,
            registry=self.registry,
            local_solutions=self.solutions,
        )


# ---------------------------------------------------------------- worker process

class _Link:
    """Worker end of the pipe with a lock so the heartbeat thread can share it."""

    def __init__(self, conn, wid: str, interval: float):
        self.conn = conn
        self.wid = wid
        self.lock = threading.Lock()
        self.beating = threading.Event()
        self.beating.set()
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._beat, args=(interval,), daemon=True)
        self.thread.start()

    def _beat(self, interval: float) -> None:
        while not self.stop.wait(interval):
            if self.beating.is_set():
                try:
                    self.send("heartbeat")
                except OSError:
                    return

    def send(self, *msg) -> None:
        with self.lock:
            self.conn.send((msg[0], self.wid) + msg[1:])

    def fail(self, rule: FailureRule) -> None:
        if rule.action == "crash":
            os._exit(CRASH_EXIT_CODE)
        # hang: go silent, then carry on as a zombie whose results must be ignored
        self.beating.clear()
        time.sleep(rule.hang_seconds)


def _worker_main(wid: str, conn, config: RunConfig, rules, share=None, skip=()) -> None:
    link = _Link(conn, wid, config.heartbeat_interval)
    trigger = FailureTrigger(rules)
    try:
        model = model_from_config(config)
        link.send("hello")
        if share is None:
            _dynamic_worker(link, model, trigger)
        else:
            _static_worker(link, model, trigger, share, set(skip))
    except (EOFError, OSError):
        pass
    finally:
        link.stop.set()


def _run_task(link: _Link, model: Model, trigger: FailureTrigger, task_id: int, kind: str, payload):
    rule = trigger.during(kind)
    try:
        result = execute_primitive(model, kind, payload)
    except Exception:
        link.send("error", task_id, kind, traceback.format_exc())
        raise _WorkerAbort() from None
    if kind == TaskKind.SOLVE_LOCAL.value:
        link.send("factorized", task_id)
    if rule is not None:
        link.fail(rule)
    return result


class _WorkerAbort(Exception):
    pass


def _dynamic_worker(link: _Link, model: Model, trigger: FailureTrigger) -> None:
    while True:
        rule = trigger.idle()
        if rule is not None:
            link.fail(rule)
        link.send("request")
        msg = link.conn.recv()
        if msg[0] == "done":
            return
        if msg[0] == "wait":
            time.sleep(msg[1])
            continue
        _, task_id, kind, attempt, payload = msg
        try:
            result = _run_task(link, model, trigger, task_id, kind, payload)
        except _WorkerAbort:
            link.conn.recv()
            return
        link.send("result", task_id, kind, attempt, result)
        trigger.record(kind)


def _static_worker(link: _Link, model: Model, trigger: FailureTrigger, share, skip) -> None:
    try:
        problems = _run_task(link, model, trigger, GLOBAL_TASK, TaskKind.SPLIT.value, list(share))
        link.send("split", problems)
        trigger.record(TaskKind.SPLIT.value)
        # barrier: the master replies once every share is split and journaled
        if link.conn.recv()[0] != "go":
            return
        for t in sorted(problems):
            if t in skip:
                continue
            link.send("start", t + 1)
            sol = _run_task(link, model, trigger, t + 1, TaskKind.SOLVE_LOCAL.value, problems[t])
            link.send("result", t + 1, TaskKind.SOLVE_LOCAL.value, 1, sol)
            trigger.record(TaskKind.SOLVE_LOCAL.value)
    except _WorkerAbort:
        pass
    link.send("finished")
    link.conn.recv()


# ---------------------------------------------------------------- master side of the pool

@dataclass
class _Handle:
    wid: str
    proc: mp.Process
    conn: object
    last_seen: float
    alive: bool = True
    open: bool = True
    finished: bool = False


class _Pool:
    """Worker processes plus liveness tracking."""

    def __init__(self, config: RunConfig, plan: FailurePlan, shares=None, skip=()):
        self.config = config
        ctx = mp.get_context("fork")
        self.handles: dict[str, _Handle] = {}
        self.died: list[str] = []
        for i in range(config.workers):
            wid = f"w{i}"
            parent, child = ctx.Pipe(duplex=True)
            share = None if shares is None else shares[i]
            proc = ctx.Process(target=_worker_main, name=f"mhm-{wid}", daemon=True,
                               args=(wid, child, config, plan.for_worker(i), share, tuple(skip)))
            proc.start()
            child.close()
            self.handles[wid] = _Handle(wid, proc, parent, time.monotonic())

    @property
    def timeout(self) -> float:
        return self.config.heartbeat_interval * self.config.missed_heartbeats

    def live(self) -> list[_Handle]:
        return [h for h in self.handles.values() if h.alive]

    def poll(self, handler, timeout: float) -> None:
        """Dispatch every pending message to ``handler(handle, msg)``."""
        conns = {h.conn: h for h in self.handles.values() if h.open}
        sentinels = [h.proc.sentinel for h in self.handles.values() if h.alive]
        if not conns and not sentinels:
            time.sleep(timeout)
            return
        for obj in wait_ready(list(conns) + sentinels, timeout):
            if obj in conns:
                self.drain(conns[obj], handler)

    def drain(self, h: _Handle, handler) -> None:
        while h.open:
            try:
                if not h.conn.poll():
                    return
                msg = h.conn.recv()
            except (EOFError, OSError):
                h.open = False
                return
            if h.alive:
                h.last_seen = time.monotonic()
            handler(h, msg)

    def reap(self, handler, on_death) -> None:
        """Detect exited processes and silent workers."""
        now = time.monotonic()
        for h in self.live():
            if not h.proc.is_alive():
                self.drain(h, handler)
                if h.alive:
                    self.mark_dead(h, f"exit code {h.proc.exitcode}", on_death)
            elif now - h.last_seen > self.timeout:
                self.mark_dead(h, "missed heartbeats", on_death)

    def mark_dead(self, h: _Handle, cause: str, on_death) -> None:
        h.alive = False
        self.died.append(h.wid)
        log.warning("worker %s declared dead: %s", h.wid, cause)
        on_death(h, cause)

    def send(self, h: _Handle, *msg) -> bool:
        try:
            h.conn.send(msg)
            return True
        except (OSError, ValueError):
            return False

    def shutdown(self) -> None:
        for h in self.handles.values():
            if h.alive and h.proc.is_alive():
                self.send(h, "done")
        deadline = time.monotonic() + 1.0
        for h in self.handles.values():
            h.proc.join(max(0.0, deadline - time.monotonic()))
            if h.proc.is_alive():
                h.proc.terminate()
                h.proc.join(1.0)
            h.conn.close()

    def summary(self) -> dict:
        return {"count": len(self.handles), "died": len(self.died)}


# ---------------------------------------------------------------- modes

def _run_sequential(coord: _Coordinator, model: Model) -> dict:
    reg = coord.registry
    reg.register_worker(MASTER)
    while True:
        a = reg.request_task(MASTER)
        if isinstance(a, Done):
            break
        if isinstance(a, Wait):
            raise RunFailedError("sequential scheduler has nothing to run")
        result = execute_primitive(model, a.kind, coord.payload_for(a))
        coord.on_result(MASTER, a.task_id, a.kind, result)
        if coord.reduced:
            coord.finish()
    return {"count": 1, "died": 0}


def _run_dynamic(coord: _Coordinator, config: RunConfig, plan: FailurePlan) -> dict:
    reg = coord.registry
    pool = _Pool(config, plan)
    for wid in pool.handles:
        reg.register_worker(wid)

    def on_message(h: _Handle, msg) -> None:
        tag = msg[0]
        if tag == "factorized":
            record_factorizations(1)
        elif tag == "result":
            _, _, task_id, kind, _attempt, result = msg
            coord.on_result(h.wid, task_id, kind, result)
        elif tag == "request" and h.alive:
            a = reg.request_task(h.wid)
            if isinstance(a, Assignment):
                reply = ("assign", a.task_id, a.kind.value, a.attempt, coord.payload_for(a))
            elif isinstance(a, Wait):
                reply = ("wait", a.delay)
            else:
                reply = ("done",)
            if not pool.send(h, *reply):
                pool.mark_dead(h, "broken pipe", on_death)
        elif tag == "error":
            _, _, task_id, kind, tb = msg
            raise RunFailedError(f"worker {h.wid} failed in {kind} task {task_id}:\n{tb}")

    def on_death(h: _Handle, cause: str) -> None:
        reg.handle_worker_failure(h.wid, cause)

    try:
        stalled_since = None
        while not reg.finished:
            pool.poll(on_message, config.heartbeat_interval / 2)
            if coord.reduced:
                coord.finish()
                break
            pool.reap(on_message, on_death)
            if not pool.live():
                stalled_since = stalled_since or time.monotonic()
                if time.monotonic() - stalled_since > config.grace_period:
                    raise RunFailedError("all workers are dead and tasks are pending")
        return pool.summary()
    finally:
        pool.shutdown()


def _run_static(coord: _Coordinator, config: RunConfig, model: Model, plan: FailurePlan) -> dict:
    reg = coord.registry
    n_t = model.mesh.n_elements
    shares = [s.tolist() for s in np.array_split(np.arange(n_t), config.workers)]
    skip = sorted(coord.resume.solutions) if coord.resume else ()
    reg.register_worker(MASTER)
    resumed_split = coord.resume is not None
    if not resumed_split:
        reg.start_task(MASTER, GLOBAL_TASK)
    pool = _Pool(config, plan, shares, skip)
    for wid in pool.handles:
        reg.register_worker(wid)
    collected: dict = {}
    split_from: set[str] = set()

    def on_message(h: _Handle, msg) -> None:
        tag = msg[0]
        if tag == "factorized":
            record_factorizations(1)
        elif tag == "split":
            split_from.add(h.wid)
            if resumed_split:
                pool.send(h, "go")
                return
            reg.add_local_tasks(msg[2])
            collected.update(msg[2])
            if len(split_from) == len(pool.handles):
                reg.complete_task(MASTER, GLOBAL_TASK, TaskKind.SPLIT, {})
                coord.split_done(collected.values())
                for other in pool.live():
                    pool.send(other, "go")
        elif tag == "start":
            reg.start_task(h.wid, msg[2])
        elif tag == "result":
            _, _, task_id, kind, _attempt, result = msg
            coord.on_result(h.wid, task_id, kind, result)
        elif tag == "finished":
            h.finished = True
        elif tag == "error":
            _, _, task_id, kind, tb = msg
            raise RunFailedError(f"worker {h.wid} failed in {kind} task {task_id}:\n{tb}")

    def on_death(h: _Handle, cause: str) -> None:
        reg.handle_worker_failure(h.wid, cause)
        raise PartialFailureError(f"worker {h.wid} died in static mode ({cause}); run aborted")

    try:
        # barrier: every share reported and every local solved
        while not (all(h.finished for h in pool.handles.values()) and reg.all_locals_solved):
            pool.poll(on_message, config.heartbeat_interval / 2)
            for h in pool.live():
                if h.finished:
                    h.last_seen = time.monotonic()
            pool.reap(on_message, on_death)
        a = reg.assign_reduce(MASTER)
        g = execute_primitive(model, TaskKind.REDUCE, coord.payload_for(a))
        coord.on_result(MASTER, GLOBAL_TASK, TaskKind.REDUCE, g)
        coord.finish()
        return pool.summary()
    finally:
        pool.shutdown()


# ---------------------------------------------------------------- entry points

def open_store(config: RunConfig) -> CheckpointStore | None:
    if config.checkpoint_mode == "off":
        return None
    return CheckpointStore(config.checkpoint_dir, config.config_hash(), config.checkpoint_mode)


def run_pipeline(config: RunConfig, failure_plan: FailurePlan | None = None,
                 resume: bool = False) -> RunReport:
    """Split, solve all local problems, reduce, and reconstruct the solution.

    Raises
    ------
    RunFailedError
        The run could not complete (``PartialFailureError`` in static mode,
        ``SimulatedCrash`` for the injected master crash).  The exception
        carries the partial report as ``exc.report``.
    CheckpointError
        ``resume`` was requested but no usable checkpoint matches ``config``.
    """
    config.validate()
    if failure_plan is None:
        failure_plan = FailurePlan.parse(config.failure_plan, config.workers, config.seed) if config.failure_plan else FailurePlan()
    if failure_plan.rules and config.mode == "sequential":
        raise ConfigurationError("failure plans need worker processes (dynamic or static mode)")
    if any(r.worker >= config.workers for r in failure_plan.rules):
        raise ConfigurationError("failure plan names a worker that does not exist")

    model = model_from_config(config)
    store = open_store(config)
    point = None
    if resume:
        if store is None:
            raise CheckpointError("resuming requires a checkpoint directory and mode")
        point = store.load(model)
        if point is None:
            raise CheckpointError(f"no checkpoint for config {config.config_hash()} in {config.checkpoint_dir}")
    elif store is not None:
        store.reset()

    reset_factorization_count()
    coord = _Coordinator(config, model, store, point)
    workers = None
    try:
        if config.mode == "sequential":
            workers = _run_sequential(coord, model)
        elif config.mode == "dynamic":
            workers = _run_dynamic(coord, config, failure_plan)
        else:
            workers = _run_static(coord, config, model, failure_plan)
    except MHMError as exc:
        exc.report = coord.report("failed", f"{type(exc).__name__}: {exc}", workers)
        raise
    return coord.report("ok", None, workers)


def static_partition_mode(config: RunConfig, R: int, failure_plan: FailurePlan | None = None) -> RunReport:
    """Run with ``R`` statically partitioned worker processes."""
    if R < 1:
        raise ConfigurationError("static mode needs at least one process")
    return run_pipeline(config.with_(mode="static", workers=R), failure_plan)


def write_outputs(report: RunReport, out_dir, exact=None) -> dict:
    """Write report.json and, for successful runs, solution.vtk and global.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json"}
    report.to_json(paths["report"])
    if report.solution is not None:
        paths["vtk"] = out / "solution.vtk"
        write_solution_vtk(report.solution, paths["vtk"], exact)
        paths["csv"] = out / "global.csv"
        write_global_csv(report.global_solution, paths["csv"])
    return paths
