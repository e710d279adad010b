import pytest

from farview.server import FarviewServer, ServerConfig


DESK_CONFIG = dict(
    channel_capacity_bytes=96 * 1024 * 1024,
    regions=6,
    channels=2,
)


@pytest.fixture
def server():
    srv = FarviewServer(ServerConfig(**DESK_CONFIG)).start()
    yield srv
    srv.stop()


@pytest.fixture
def server_factory():
    started = []

    def make(**overrides):
        cfg = {**DESK_CONFIG, **overrides}
        srv = FarviewServer(ServerConfig(**cfg)).start()
        started.append(srv)
        return srv

    yield make
    for srv in started:
        srv.stop()
