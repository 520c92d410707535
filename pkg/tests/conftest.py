import numpy as np
import pytest

from midefense.core import Dataset, Feature, FeatureSchema, LabelSpec


def binary_schema(d: int, sensitive: int = 0, classes: int = 2) -> FeatureSchema:
    feats = tuple(Feature.categorical(f"f{j}", 2) for j in range(d))
    return FeatureSchema(feats, sensitive, LabelSpec("classification", classes))


def regression_data(n: int, rng: np.random.Generator, noise: float = 0.5) -> Dataset:
    """Three-valued sensitive code, one binary and one continuous feature, linear label."""
    schema = FeatureSchema(
        (
            Feature.categorical("s", 3),
            Feature.categorical("b", 2),
            Feature.continuous("x", -5.0, 5.0),
        ),
        0,
        LabelSpec("regression"),
    )
    s = rng.integers(0, 3, n)
    b = rng.integers(0, 2, n)
    x = np.clip(rng.normal(size=n), -5, 5)
    y = 0.3 - 1.0 * (s == 1) - 2.0 * (s == 2) + 0.5 * b + 0.8 * x + noise * rng.normal(size=n)
    return Dataset(schema, np.column_stack([s, b, x]), y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
