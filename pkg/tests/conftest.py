import numpy as np
import pytest

from gazeattend.dataset import SyntheticSceneConfig, generate_synthetic, load_manifest
from gazeattend.model import ClassifierSpec, TrainConfig, train_patch_classifier

SMALL_SCENE = dict(
    image_size=(256, 192),
    num_classes=3,
    object_size=(64, 96),
    objects_per_frame=(1, 2),
    frames_per_split={"train": 48, "test": 12},
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_synth")
    path = generate_synthetic(SyntheticSceneConfig(**SMALL_SCENE), seed=3, out_dir=out)
    return load_manifest(path)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    spec = ClassifierSpec("tiny", small_dataset.num_classes, 64)
    return train_patch_classifier(small_dataset, "train", spec, TrainConfig(max_epochs=8, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion

_criteria = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        marker = dict(report.user_properties).get("criterion")
        if marker:
            number, title = marker
            status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
            prev = _criteria.get(number)
            if prev is None or prev[0] == "PASS":
                _criteria[number] = (status, title)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title = _criteria[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
