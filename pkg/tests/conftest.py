import io
import os
import sys
from pathlib import Path

import hypothesis
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import PASSWORD, PASSWORD_ENV, USER, generate_pki  # noqa: E402

from mqware.broker import Broker, BrokerConfig  # noqa: E402
from mqware.manager import ConnectionManager  # noqa: E402

hypothesis.settings.register_profile("default", deadline=None, max_examples=100)
hypothesis.settings.register_profile("ci", deadline=None, max_examples=300)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

os.environ.setdefault(PASSWORD_ENV, PASSWORD)


@pytest.fixture(scope="session")
def pki(tmp_path_factory):
    return generate_pki(tmp_path_factory.mktemp("pki"))


@pytest.fixture
def event_log():
    return io.StringIO()


@pytest.fixture
def broker_factory(event_log):
    started = []

    def make(**overrides) -> Broker:
        cfg = BrokerConfig(port=0, users={USER: PASSWORD}, heartbeat=(0, 0))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        b = Broker(cfg, event_log=event_log).start()
        started.append(b)
        return b

    yield make
    for b in started:
        b.stop()


@pytest.fixture
def broker(broker_factory):
    return broker_factory()


@pytest.fixture
def manager():
    m = ConnectionManager(jitter=False)
    yield m
    m.stop_all()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
