import pytest

from flatlora.validation import overfit_rows


@pytest.fixture(scope="session")
def overfit():
    """Overfit-task rows per setting, trained once and shared."""
    cache = {}

    def get(method, sigma=None):
        key = (method, sigma)
        if key not in cache:
            cache[key] = overfit_rows(method, sigma)
        return cache[key]

    return get
