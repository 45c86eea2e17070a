import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedcase.config import RunConfig  # noqa: E402
from fedcase.data import SiteSpec  # noqa: E402
from fedcase.federated import ClientDataset, assign_scaling  # noqa: E402
from fedcase.model import LabeledImage  # noqa: E402

ACCEPTANCE_NEGATIVES = 5
ACCEPTANCE_POSITIVES = 20


def random_images(rng, n, shape=(4, 4), positive_rate=0.5, id0=0):
    out = []
    for i in range(n):
        label = int(rng.random() < positive_rate) if i > 1 else i  # first two cover both classes
        px = rng.integers(0, 256, shape, dtype=np.uint8)
        out.append(LabeledImage(px, label, float(rng.uniform(0.1, 1.0)) if label else 0.0, id0 + i))
    return out


def make_client(rng, client_id, n_train, n_val, shape=(4, 4)):
    base = client_id << 32
    return ClientDataset(client_id, random_images(rng, n_train, shape, id0=base),
                         random_images(rng, n_val, shape, id0=base + n_train))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_clients():
    rng = np.random.default_rng(99)
    return assign_scaling([make_client(rng, k, n, 6) for k, n in ((0, 24), (1, 16), (2, 12))])


def small_sites(seed=7):
    return (
        SiteSpec(0, 90.0, 6.0, 0.40, (0.0, 0.0), 0.10, 120, seed * 1000 + 0, 30.0),
        SiteSpec(1, 115.0, 8.0, 0.30, (2.0, -1.0), 0.20, 100, seed * 1000 + 1, 35.0),
        SiteSpec(2, 70.0, 5.0, 0.30, (-2.0, 1.0), 0.05, 80, seed * 1000 + 2, 25.0),
        SiteSpec(3, 100.0, 9.0, 0.35, (1.0, 1.0), 0.15, 60, seed * 1000 + 3, 32.0),
    )


def small_config(out, **kw):
    """A fast end-to-end configuration on a reduced corpus."""
    cfg = RunConfig(out=str(out), sites=small_sites(), per_label=20, steps=10)
    return replace(cfg, fed=replace(cfg.fed, rounds=2, t_ft=1, local_epochs=1), **kw)


def acceptance_config(out):
    return RunConfig(out=str(out), n_negative=ACCEPTANCE_NEGATIVES, n_positive=ACCEPTANCE_POSITIVES)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    from fedcase import pipeline
    cfg = small_config(tmp_path_factory.mktemp("small_run"))
    pipeline.run_all(cfg)
    return cfg


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
