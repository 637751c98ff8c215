from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lightdot import kernels  # noqa: E402
from lightdot.synth import SynthConfig, generate_corpus  # noqa: E402


@pytest.fixture(params=kernels.available_backends())
def scan_backend(request, monkeypatch):
    """Run a test once per available kernel backend, with that backend active."""
    mod = kernels.backend(request.param)
    monkeypatch.setattr(kernels, "_active", mod)
    return request.param


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SynthConfig(pairs=60, concepts=8, vocab=40, classes=4, feat_dim=6, split=(40, 10, 10),
                                       seed=3))


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_corpus()


def pytest_terminal_summary(terminalreporter):
    from _util import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {title}: {detail}")
