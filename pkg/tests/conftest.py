import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def movie_fixture():
    from fedtrek.fixtures import load_movie_fixture

    return load_movie_fixture()


@pytest.fixture(scope="session")
def movie_dataset(movie_fixture):
    from fedtrek.dataset_builder import build_movie_dataset

    corpus, _ = movie_fixture
    return build_movie_dataset(corpus, 0.1, 0)


@pytest.fixture(scope="session")
def movie_model(movie_fixture):
    from fedtrek.dataset_builder import corpus_entities
    from fedtrek.learner import BaseModel, Catalog

    corpus, _ = movie_fixture
    return BaseModel(Catalog(corpus_entities(corpus), 16, 0))
