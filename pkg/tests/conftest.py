import pytest

import gwainet.tensor as T


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.active_tape().clear()
    yield
    T.active_tape().clear()
