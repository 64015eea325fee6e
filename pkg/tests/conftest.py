import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aiskin.dataset import GeneratorConfig, generate  # noqa: E402
from aiskin.edge import Snapshot  # noqa: E402
from aiskin.harness import train_models  # noqa: E402
from aiskin.neuralnet import TINY_LENET, build_model  # noqa: E402


@pytest.fixture(scope="session")
def trained():
    """{disease: (snapshot, test accuracy)} for all five tasks; about a minute on CPU."""
    return train_models(samples_per_class=600, epochs=10, seed=0)


@pytest.fixture(scope="session")
def trained_snapshots(trained):
    return {d: snap for d, (snap, _) in trained.items()}


@pytest.fixture
def untrained_snapshots():
    from aiskin.core import DISEASE_TYPES

    out = {}
    for d in DISEASE_TYPES:
        model = build_model(TINY_LENET, int(d))
        model.version = 1
        out[d] = Snapshot(d, model)
    return out


@pytest.fixture(scope="session")
def small_labeled():
    from aiskin.core import DiseaseType

    return generate(GeneratorConfig(seed=3, samples_per_class=20), DiseaseType.ACNES)


def pytest_terminal_summary(terminalreporter):
    import criteria_log

    if criteria_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(criteria_log.LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
