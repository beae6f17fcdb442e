import pytest

from knnadapt import toy
from knnadapt.trainer import precompute_examples


@pytest.fixture(scope="session")
def fixture():
    """The default pinned end-to-end fixture; built once per session."""
    return toy.build_fixture()


@pytest.fixture(scope="session")
def val_examples(fixture):
    return precompute_examples(fixture.val_trace, fixture.datastore, fixture.k)


@pytest.fixture(scope="session")
def test_examples(fixture):
    return precompute_examples(fixture.test_trace, fixture.datastore, fixture.k)


@pytest.fixture(scope="session")
def test_neighbors(test_examples):
    return [ex.neighbors for ex in test_examples]
