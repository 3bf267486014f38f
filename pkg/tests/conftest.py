import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def full_scale() -> bool:
    """Full-scale acceptance experiments run only when explicitly requested."""
    return os.environ.get("ORBITGRASP_FULL", "") not in ("", "0")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """One three-object multi-view scene with 16 labelled points per object."""
    from orbitgrasp.scenegen.dataset import DataConfig, generate_dataset

    out = tmp_path_factory.mktemp("tiny")
    cfg = DataConfig(n_scenes=1, n_objects=3, views="multi", cloud_points=(1500, 2000), points_per_object=16, seed=0)
    generate_dataset(cfg, out)
    return out


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Recorder for acceptance results: ``criterion(n, part, ok, detail)``; ``ok=None`` marks a skipped part."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, part: str, ok, detail: str):
        store.setdefault(n, []).append((part, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        parts = store[n]
        oks = [ok for _, ok, _ in parts]
        status = "FAIL" if False in oks else ("PASS" if True in oks else "SKIP")
        detail = "; ".join(f"{part}: {d}" for part, _, d in parts)
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
