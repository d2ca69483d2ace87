import pytest
from hypothesis import settings

from serialline import load_config_file

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def config1():
    return load_config_file("config1")


@pytest.fixture(scope="session")
def config2():
    return load_config_file("config2")


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
