import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_faces():
    """Small rendered synthetic family split into training and held-out identities."""
    from utaam.dataio import SyntheticSpec, generate_synthetic
    from utaam.features import HogSpec
    from utaam.pipeline import build_from_samples

    spec = SyntheticSpec(extents=(20, 3, 2, 2), image_size=64, seed=5)
    data = generate_synthetic(spec)
    n_train = 15
    train = [c for c in np.ndindex(*spec.extents) if c[0] < n_train]
    held = [c for c in np.ndindex(*spec.extents) if c[0] >= n_train]
    built = build_from_samples((n_train,) + spec.extents[1:], spec.frontal_pose, train,
                               np.array([data.shapes[c] for c in train]),
                               [data.images[c] for c in train], mesh_height=24,
                               hog=HogSpec(16, 4, 9), orientation=(0, spec.n_points // 2 - 1))
    return {
        "data": data, "model": built.model, "train_cells": train, "held_cells": held,
        "train_images": np.array([data.images[c] for c in train]),
        "train_shapes": np.array([data.shapes[c] for c in train]),
        "held_images": np.array([data.images[c] for c in held]),
        "held_shapes": np.array([data.shapes[c] for c in held]),
    }


@pytest.fixture(scope="session")
def small_cascade(small_faces):
    from utaam.fitting import train_cascade
    f = small_faces
    return train_cascade(f["model"], f["train_images"], f["train_shapes"], n_stages=5,
                         n_perturbations=3, cells=f["train_cells"])


_CRITERIA = []


def pytest_runtest_logreport(report):
    for name, value in report.user_properties:
        if name == "criterion" and (report.when == "call" or report.outcome != "passed"):
            _CRITERIA.append((value, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in sorted(set(_CRITERIA)):
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {label}")
