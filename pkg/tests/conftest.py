import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two generated rooms at 32x64, four yaws each; returns the manifest path."""
    from panodepth.geometry import SphereDims
    from panodepth.renderer import generated_scenes, render_dataset

    out = tmp_path_factory.mktemp("tiny")
    render_dataset(generated_scenes(2, seed=3), SphereDims(64, 32), out)
    return str(out / "manifest.csv")


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, title, ok, detail)``; asserts ``ok``."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(n, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    yield record
    rep = getattr(request.node, "rep_call", None)
    n = request.node.get_closest_marker("criterion").args[0]
    if n not in lines and rep is not None and rep.failed:
        lines[n] = f"[FAIL] {n:2d}. {request.node.name}: {rep.longrepr.reprcrash.message}"


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
