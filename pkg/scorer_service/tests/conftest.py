import pytest
from fastapi.testclient import TestClient

import svchelpers

from scorer_service.app import create_app
from scorer_service.config import ServiceConfig


def pytest_terminal_summary(terminalreporter):
    if svchelpers.SERVICE_ACCEPTANCE_LINES:
        terminalreporter.section("service acceptance")
        for line in svchelpers.SERVICE_ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def client():
    app = create_app(ServiceConfig())
    with TestClient(app) as c:
        yield c
