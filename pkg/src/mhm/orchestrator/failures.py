"""Deterministic failure injection for worker processes."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..errors import ConfigurationError

ACTIONS = ("crash", "hang")


@dataclass(frozen=True)
class FailureRule:
    """Kill (or freeze) worker ``worker``.

    With ``kind`` set the failure fires while executing the ``(after + 1)``-th
    task of that kind, i.e. after ``after`` completions of it.  Without a kind
    it fires once the worker has completed ``after`` tasks of any kind, before
    it asks for the next one.
    """

    worker: int
    after: int = 0
    kind: str | None = None
    action: str = "crash"
    hang_seconds: float = 3.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ConfigurationError(f"unknown failure action {self.action!r}")
        if self.after < 0 or self.worker < 0:
            raise ConfigurationError("failure rule fields must be non-negative")


@dataclass(frozen=True)
class FailurePlan:
    seed: int = 0
    rules: tuple[FailureRule, ...] = field(default_factory=tuple)

    def for_worker(self, worker: int) -> tuple[FailureRule, ...]:
        return tuple(r for r in self.rules if r.worker == worker)

    @property
    def victims(self) -> set[int]:
        return {r.worker for r in self.rules}

    @classmethod
    def random(cls, seed: int, workers: int, kills: int, kind: str | None = "SolveLocal",
               max_after: int = 1, action: str = "crash") -> "FailurePlan":
        """Pick ``kills`` distinct victims and trigger points from ``seed``."""
        if kills > workers:
            raise ConfigurationError(f"cannot kill {kills} of {workers} workers")
        rng = random.Random(seed)
        victims = sorted(rng.sample(range(workers), kills))
        rules = tuple(FailureRule(w, rng.randint(0, max_after), kind, action) for w in victims)
        return cls(seed, rules)

    @classmethod
    def parse(cls, text: str, workers: int = 1, default_seed: int = 0) -> "FailurePlan":
        """Parse a plan from a command-line string.

        Two forms are accepted::

            random:seed=3,kills=2[,kind=SolveLocal][,max_after=1]
            0:after=1:kind=SolveLocal:crash;2:after=0:hang
        """
        text = text.strip()
        if not text or text == "none":
            return cls()
        if text.startswith("random"):
            opts = dict(_pairs(text.partition(":")[2]))
            try:
                return cls.random(int(opts.get("seed", default_seed)), workers, int(opts.get("kills", 1)),
                                  opts.get("kind", "SolveLocal") or None, int(opts.get("max_after", 1)))
            except ValueError as exc:
                raise ConfigurationError(f"bad failure plan {text!r}: {exc}") from exc
        rules = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            head, *parts = chunk.split(":")
            kw: dict = {}
            try:
                worker = int(head)
                for p in parts:
                    if p in ACTIONS:
                        kw["action"] = p
                    else:
                        key, _, val = p.partition("=")
                        if key == "after":
                            kw["after"] = int(val)
                        elif key == "kind":
                            kw["kind"] = val or None
                        elif key == "hang":
                            kw["hang_seconds"] = float(val)
                        else:
                            raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ConfigurationError(f"bad failure rule {chunk!r}: {exc}") from exc
            if worker >= workers:
                raise ConfigurationError(f"failure rule names worker {worker} but only {workers} exist")
            rules.append(FailureRule(worker, **kw))
        return cls(0, tuple(rules))


def _pairs(text: str):
    for item in filter(None, text.split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        yield key.strip(), val.strip()


class FailureTrigger:
    """Worker-side bookkeeping that decides when a rule fires."""

    def __init__(self, rules):
        self.rules = list(rules)
        self.completed: dict[str, int] = {}
        self.total = 0
        self.fired: set[int] = set()

    def _fire(self, match) -> FailureRule | None:
        for i, r in enumerate(self.rules):
            if i not in self.fired and match(r):
                self.fired.add(i)
                return r
        return None

    def during(self, kind: str) -> FailureRule | None:
        done = self.completed.get(kind, 0)
        return self._fire(lambda r: r.kind == kind and r.after == done)

    def idle(self) -> FailureRule | None:
        return self._fire(lambda r: r.kind is None and r.after == self.total)

    def record(self, kind: str) -> None:
        self.completed[kind] = self.completed.get(kind, 0) + 1
        self.total += 1
