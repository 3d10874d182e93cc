import random
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import service, tree, wait_for
from mqware.config import ReconnectPolicy, resolve
from mqware.connector import (
    AckMode,
    Backoff,
    ConnectorParams,
    DisconnectReason,
    EventKind,
    StompSession,
    SubscriptionSpec,
    SupervisedSession,
    registered_protocols,
)
from mqware.errors import AuthFailed, ConnectionRefused, NotConnected, SendFailed, TlsHandshakeFailed
from mqware.message import make_envelope


def params(port, **kw):
    t = tree(svc=service(port, queues=["Q"], topics=["T"], **kw))
    return ConnectorParams.from_service(resolve(t, "Q").service)


def envelope(i=0, dest="/queue/Q"):
    return make_envelope({"i": i}, "test", dest)


class Recorder:
    def __init__(self):
        self.events = []
        self.lock = threading.Lock()

    def __call__(self, ev):
        with self.lock:
            self.events.append((time.monotonic(), ev))

    def kinds(self):
        return [e.kind for _, e in self.events]


def test_backoff_sequence_without_jitter():
    b = Backoff(ReconnectPolicy(500, 30000, 2.0), jitter=False)
    assert [b.next_delay_ms() for _ in range(8)] == [500, 1000, 2000, 4000, 8000, 16000, 30000, 30000]
    b.reset()
    assert b.next_delay_ms() == 500


@given(st.integers(1, 1000), st.integers(0, 10), st.floats(1.0, 4.0), st.integers(0, 2**32))
def test_backoff_jitter_bounds(initial, extra, mult, seed):
    policy = ReconnectPolicy(initial, initial * (1 + extra), mult)
    b = Backoff(policy, jitter=True, rng=random.Random(seed))
    for n in range(12):
        base = min(initial * mult ** n, policy.max_backoff_ms)
        d = b.next_delay_ms()
        assert 0.5 * base <= d <= 1.5 * base


def test_stomp_is_registered():
    assert "stomp" in registered_protocols()


def test_put_subscribe_receipt(broker):
    s = StompSession(params(broker.port))
    rec = Recorder()
    s.add_listener(rec)
    s.connect()
    got = []
    s.subscribe(SubscriptionSpec("/queue/Q", got.append))
    for i in range(5):
        s.put("/queue/Q", envelope(i), confirm=True)
    assert wait_for(lambda: len(got) == 5)
    assert [e.payload["i"] for e in got] == list(range(5))
    assert all(len(e.message_id) == 32 for e in got)
    assert wait_for(lambda: broker.stats()["acked"] == 5)
    s.disconnect()
    kinds = rec.kinds()
    assert kinds[0] is EventKind.CONNECTED
    assert kinds.count(EventKind.DISCONNECTED) == 1
    assert rec.events[-1][1].reason is DisconnectReason.REQUESTED
    with pytest.raises(NotConnected):
        s.put("/queue/Q", envelope())


def test_rejected_send(broker):
    s = StompSession(params(broker.port))
    s.connect()
    with pytest.raises(SendFailed) as ei:
        s.put("/nowhere/x", envelope(), confirm=True)
    assert ei.value.reason == "rejected"
    assert s.is_connected
    s.disconnect()


def test_handler_failure_nacks(broker):
    s = StompSession(params(broker.port))
    s.connect()
    seen = []

    def flaky(env):
        seen.append(env.redelivered)
        if len(seen) == 1:
            raise RuntimeError("first attempt fails")

    s.subscribe(SubscriptionSpec("/queue/Q", flaky))
    s.put("/queue/Q", envelope(), confirm=True)
    assert wait_for(lambda: len(seen) == 2)
    assert seen == [False, True]
    s.disconnect()


def test_auth_failed_and_refused(broker, monkeypatch):
    monkeypatch.setenv("NOT_THE_PASSWORD_VAR", "wrong")
    s = StompSession(params(broker.port, password_env="NOT_THE_PASSWORD_VAR"))
    with pytest.raises(AuthFailed):
        s.connect()
    assert not s.is_connected
    assert wait_for(lambda: broker.session_count() == 0)
    port = broker.port
    broker.kill()
    with pytest.raises(ConnectionRefused):
        StompSession(params(port)).connect()


def test_peer_close_event(broker):
    s = StompSession(params(broker.port))
    rec = Recorder()
    s.add_listener(rec)
    s.connect()
    broker.kill()
    assert wait_for(lambda: EventKind.DISCONNECTED in rec.kinds())
    assert rec.events[-1][1].reason is DisconnectReason.PEER_CLOSE


def test_heartbeat_timeout(broker_factory):
    b = broker_factory(heartbeat=(1000, 1000))
    s = StompSession(params(b.port, heartbeat=(1000, 1000)))
    rec = Recorder()
    s.add_listener(rec)
    s.connect()
    assert (s.plan.send_interval_ms, s.plan.recv_timeout_ms) == (1000, 1000)
    time.sleep(1.5)
    assert s.is_connected  # heart-beats keep it alive
    b.suppress_heartbeats = True
    assert wait_for(lambda: EventKind.DISCONNECTED in rec.kinds(), timeout=5)
    at, ev = rec.events[-1]
    assert ev.reason is DisconnectReason.HEARTBEAT_TIMEOUT
    assert 2.0 <= at - s.last_rx <= 3.0


def test_supervised_reconnect_restores_subscriptions(broker):
    p = params(broker.port)
    sup = SupervisedSession(lambda: StompSession(p), p.reconnect, jitter=False, name="svc")
    rec = Recorder()
    sup.add_listener(rec)
    sup.start()
    got = []
    sid = sup.subscribe(SubscriptionSpec("/queue/Q", got.append))
    sup.put("/queue/Q", envelope(1), confirm=True)
    assert wait_for(lambda: len(got) == 1)
    broker.kill()
    assert wait_for(lambda: not sup.is_connected)
    with pytest.raises(NotConnected):
        sup.put("/queue/Q", envelope())
    broker.start()
    assert wait_for(lambda: sup.is_connected, timeout=5)
    assert sup.reconnects == 1
    sup.put("/queue/Q", envelope(2), confirm=True)
    assert wait_for(lambda: len(got) == 2)
    assert sup.subscriptions.keys() == {sid}
    msgs = [e for _, e in rec.events if e.kind is EventKind.MESSAGE_ARRIVED]
    assert {e.subscription_id for e in msgs} == {sid}
    sup.disconnect()


def test_supervised_start_tolerates_down_broker(broker):
    port = broker.port
    broker.kill()
    p = params(port)
    sup = SupervisedSession(lambda: StompSession(p), p.reconnect, jitter=False)
    with pytest.raises(ConnectionRefused):
        sup.start(fail_fast=True)
    sup = SupervisedSession(lambda: StompSession(p), p.reconnect, jitter=False)
    sup.start(fail_fast=False)
    got = []
    sup.subscribe(SubscriptionSpec("/topic/T", got.append, AckMode.AUTO))
    broker.start()
    assert wait_for(lambda: sup.is_connected, timeout=5)
    sup.put("/topic/T", envelope(dest="/topic/T"), confirm=True)
    assert wait_for(lambda: len(got) == 1)
    sup.disconnect()


# TLS


@pytest.fixture
def tls_broker(broker_factory, pki):
    return broker_factory(cert_path=str(pki.server_cert), key_path=str(pki.server_key),
                          ca_path=str(pki.ca), tls_port=0, cert_allow_list=["pilot-client"])


def test_tls_with_password(tls_broker, pki):
    s = StompSession(params(tls_broker.tls_port, UseTls=True,
                            Auth={"Mode": "UserPass", "User": "alice", "PasswordRef": "env:MQWARE_TEST_PASSWORD",
                                  "CaPath": str(pki.ca)}))
    s.connect()
    s.put("/queue/Q", envelope(), confirm=True)
    s.disconnect()


def cert_auth(pki, cert, key, ca=None):
    return {"Mode": "TlsClientCert", "CertPath": str(cert), "KeyPath": str(key), "CaPath": str(ca or pki.ca)}


def test_tls_client_cert(tls_broker, pki, event_log):
    s = StompSession(params(tls_broker.tls_port, Auth=cert_auth(pki, pki.client_cert, pki.client_key)))
    s.connect()
    s.put("/queue/Q", envelope(), confirm=True)
    s.disconnect()
    from mqware.broker import read_event_log
    connected = [e for e in read_event_log(event_log) if e["event"] == "session_connected"]
    assert connected[-1]["principal"] == "CN=pilot-client" and connected[-1]["tls"]


def test_tls_untrusted_client_cert(tls_broker, pki):
    s = StompSession(params(tls_broker.tls_port, Auth=cert_auth(pki, pki.rogue_cert, pki.rogue_key)))
    with pytest.raises(TlsHandshakeFailed):
        s.connect()
    assert wait_for(lambda: tls_broker.session_count() == 0)


def test_tls_untrusted_server(tls_broker, pki):
    s = StompSession(params(tls_broker.tls_port, Auth=cert_auth(pki, pki.client_cert, pki.client_key,
                                                                ca=pki.rogue_ca)))
    with pytest.raises(TlsHandshakeFailed):
        s.connect()
