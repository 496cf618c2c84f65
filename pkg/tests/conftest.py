import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def report(capsys):
    """Print a line straight to the terminal, bypassing output capture."""

    def _print(line):
        with capsys.disabled():
            print(line)

    return _print
