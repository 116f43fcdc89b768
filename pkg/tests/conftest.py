import numpy as np
import pytest

from labelaid.aggregation import AnnotationMatrix
from labelaid.corpus import Corpus, Document
from labelaid.labels import LabelCategory
from labelaid.orchestrator import StudyConfig
from labelaid.suggester import FeatureConfig, TrainConfig


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """One visible PASS/FAIL line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and "test_acceptance" in item.nodeid:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        name = item.name.replace("test_criterion_", "")
        print(f"\nACCEPTANCE {status}: {name} ({report.duration:.1f}s)")


def make_matrix(votes: list[list[int]]) -> AnnotationMatrix:
    """Rows are items, columns annotators, entries label codes."""
    items = tuple(f"it{i}" for i in range(len(votes)))
    annotators = tuple(f"a{j}" for j in range(len(votes[0])))
    labels = {
        (items[i], annotators[j]): LabelCategory(code)
        for i, row in enumerate(votes)
        for j, code in enumerate(row)
        if code is not None
    }
    return AnnotationMatrix(items=items, annotators=annotators, labels=labels)


def make_docs(texts: list[str], prefix: str = "d") -> list[Document]:
    return [Document(id=f"{prefix}{i}", text=t) for i, t in enumerate(texts)]


@pytest.fixture
def small_fcfg() -> FeatureConfig:
    return FeatureConfig(n_buckets=2**12)


@pytest.fixture
def fast_tcfg() -> TrainConfig:
    return TrainConfig(epochs=5, seed=13)


def small_study_config(**overrides) -> StudyConfig:
    """A compact study that exercises all the machinery quickly."""
    defaults = dict(
        annotators_per_group=2,
        rounds=2,
        new_per_round=6,
        control_per_round=4,
        retrain_batch=3,
        seed=99,
        tcfg=TrainConfig(epochs=3, seed=7),
        fcfg=FeatureConfig(n_buckets=2**10),
    )
    defaults.update(overrides)
    return StudyConfig(**defaults)
