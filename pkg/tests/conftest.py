import functools
import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mhm.config import Discretization
from mhm.femcore import get_problem
from mhm.global_reducer import build_model, reduce_local_problems, split_problem
from mhm.local_solver import solve_local_problem

settings.register_profile("mhm", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mhm")

logging.getLogger("mhm").setLevel(logging.ERROR)


@functools.lru_cache(maxsize=None)
def cached_model(n, r, l, m, k=2, problem="sine"):
    return build_model(Discretization(n, r, l, m, k), get_problem(problem))


@functools.lru_cache(maxsize=None)
def cached_pipeline(n, r, l, m, k=2, problem="sine"):
    """(model, local solutions, global solution) for a configuration."""
    model = cached_model(n, r, l, m, k, problem)
    sols = [solve_local_problem(p, model.skeleton) for p in split_problem(model)]
    g = reduce_local_problems(sols, model.skeleton, model.v0)
    return model, sols, g


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict for the terminal summary.

    Usage: ``with criterion(3, "convergence") as note: ...; note("rate 2.98")``.
    """
    import contextlib

    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    @contextlib.contextmanager
    def record(number, title):
        details = []
        try:
            yield details.append
        except pytest.skip.Exception as exc:
            store[number] = ("SKIP", title, str(exc))
            raise
        except BaseException as exc:
            store[number] = ("FAIL", title, "; ".join(details + [f"{type(exc).__name__}: {exc}".splitlines()[0]]))
            raise
        store[number] = ("PASS", title, "; ".join(details))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        verdict, title, detail = store[number]
        terminalreporter.write_line(f"criterion {number} {verdict}: {title}" + (f" ({detail})" if detail else ""))
