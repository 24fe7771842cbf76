"""Shared fixtures.

The desk-benchmark training run takes a few minutes, and several test
modules (trainer contract, attention-vs-BLUE report, end-to-end metric
ordering) all need the same trained model, so it runs once per session.
"""

import time

import pytest

_DESK_TIMING: dict[str, float] = {}


@pytest.fixture(scope="session")
def desk_run():
    from queryemb import theory

    t0 = time.perf_counter()
    result = theory.figure1_report(theory.DESK_SEED)
    _DESK_TIMING["seconds"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def desk_seconds(desk_run):
    """Wall-clock seconds the session's desk training run took."""
    return _DESK_TIMING["seconds"]
