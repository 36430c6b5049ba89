import threading
from http.server import HTTPServer

import numpy as np
import pytest

import trhelpers


def pytest_terminal_summary(terminalreporter):
    if trhelpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in trhelpers.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def stub_server():
    state = trhelpers.StubState()
    handler = type("Handler", (trhelpers.StubHandler,), {"state": state})
    server = HTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield state, f"http://127.0.0.1:{server.server_port}"
    finally:
        server.shutdown()
        thread.join(timeout=5)
