import random
import threading

import pytest

import loopback
from helpers import service, tree, wait_for
from mqware.config import validate
from mqware.errors import ConnectionRefused, UnknownToken
from mqware.manager import ConnectionManager, ReleaseResult, Role


@pytest.fixture
def hub():
    h = loopback.install()
    yield h
    loopback.uninstall()


def lb_tree(*names):
    return tree(**{n: service(1, queues=["Q1", "Q2"], topics=[f"T-{n}"], host=n, MQType="loopback") for n in names})


def test_validate_knows_registered_connectors(hub):
    t = lb_tree("a")
    assert validate(t) == []
    loopback.uninstall()
    assert any("unknown connector type 'loopback'" in p for p in validate(t))
    loopback.install()


def test_shared_connection_and_release(hub):
    m = ConnectionManager()
    t = lb_tree("svc")
    s1, tok1, d1 = m.acquire(t, "svc::Queue::Q1", Role.PRODUCER)
    s2, tok2, d2 = m.acquire(t, "svc::Topic::T-svc", "consumer")
    assert s1 is s2 and hub.opened == 1
    assert tok1.token == "svc/Queue/Q1/producer1" and tok2.token == "svc/Topic/T-svc/consumer2"
    assert d2.wire_path == "/topic/T-svc"
    (info,) = m.active_connections()
    assert (info.key, info.users, info.connected) == ("svc", 2, True)
    assert m.release(tok1) is ReleaseResult.STILL_SHARED
    assert m.release(tok2) is ReleaseResult.CLOSED
    assert m.active_connections() == [] and hub.live["svc"] == 0
    with pytest.raises(UnknownToken):
        m.release(tok2)
    # a later acquire opens a fresh connection
    s3, tok3, _ = m.acquire(t, "svc::Queue::Q2", Role.PRODUCER)
    assert s3 is not s1 and hub.opened == 2
    m.release(tok3)


def test_failed_open_leaves_no_record(broker):
    port = broker.port
    broker.kill()
    m = ConnectionManager(jitter=False)
    t = tree(svc=service(port, queues=["Q"]))
    with pytest.raises(ConnectionRefused):
        m.acquire(t, "Q", Role.PRODUCER)
    assert m.active_connections() == []
    broker.start()
    s, tok, _ = m.acquire(t, "Q", Role.PRODUCER)
    assert s.is_connected
    m.release(tok)


def test_concurrent_acquire_release(hub):
    m = ConnectionManager()
    names = ["s1", "s2", "s3"]
    t = lb_tree(*names)
    queries = [f"{n}::Queue::{q}" for n in names for q in ("Q1", "Q2")] + [f"T-{n}" for n in names]
    errors = []

    def worker(seed):
        rng = random.Random(seed)
        try:
            for _ in range(50):
                _, tok, _ = m.acquire(t, rng.choice(queries), rng.choice(list(Role)))
                m.release(tok)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(16)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors
    assert all(v <= 1 for v in hub.peak.values()) and set(hub.peak) <= set(names)
    assert m.active_connections() == [] and all(v == 0 for v in hub.live.values())


def test_stop_all(broker):
    m = ConnectionManager(jitter=False)
    t = tree(a=service(broker.port, queues=["Q"], vhost="a"), b=service(broker.port, topics=["T"], vhost="b"))
    toks = [m.acquire(t, q, Role.CONSUMER)[1] for q in ("Q", "T", "Q")]
    assert broker.session_count() == 2
    assert m.stop_all() == 2
    assert wait_for(lambda: broker.session_count() == 0)
    with pytest.raises(UnknownToken):
        m.release(toks[0])
