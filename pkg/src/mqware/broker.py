"""In-memory STOMP 1.2 broker.

Queues are competing-consumer buffers (round-robin among ready subscribers,
prefetch 1 for client-individual subscriptions, redelivery on NACK, dead-letter
after ``max_redeliveries``).  Topics fan out to current subscribers and retain
nothing.

Every connection gets a reader and a writer thread; all destination state is
owned by one core thread that receives work items from the readers, so
destination mutations never race.  Session events are written as JSON lines to
the event log.
"""

from __future__ import annotations

import collections
import itertools
import json
import logging
import queue
import select
import socket
import ssl
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Callable

from mqware import stomp
from mqware.config import resolve_secret
from mqware.errors import ProtocolViolation, SchemaError

log = logging.getLogger(__name__)

DEFAULT_PORT = 61613
DEFAULT_TLS_PORT = 61614
_TICK = 0.05
_FORWARDED = {"destination", "receipt", "content-length", "transaction", "ack", "subscription"}


@dataclass
class BrokerConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    tls_port: int | None = None
    users: dict[str, str] = field(default_factory=dict)
    cert_allow_list: list[str] = field(default_factory=list)
    cert_path: str | None = None
    key_path: str | None = None
    ca_path: str | None = None
    heartbeat: tuple[int, int] = (10000, 10000)
    max_queue_depth: int = 100000
    max_redeliveries: int = 5
    allow_anonymous: bool = False
    log_path: str | None = None

    @classmethod
    def from_document(cls, doc: dict) -> "BrokerConfig":
        raw = doc.get("Broker", {})
        if not isinstance(raw, dict):
            raise SchemaError("Broker", "expected an object")
        users = {}
        for name, entry in raw.get("Users", {}).items():
            if isinstance(entry, str):
                users[name] = entry
            elif "PasswordRef" in entry:
                users[name] = resolve_secret(entry["PasswordRef"])
            elif "Password" in entry:
                users[name] = entry["Password"]
            else:
                raise SchemaError(f"Broker.Users.{name}", "needs Password or PasswordRef")
        hb = raw.get("HeartbeatMs", [10000, 10000])
        if not (isinstance(hb, list) and len(hb) == 2 and all(isinstance(x, int) and x >= 0 for x in hb)):
            raise SchemaError("Broker.HeartbeatMs", "expected [send_ms, recv_ms]")
        tls_port = raw.get("TlsPort")
        if tls_port is None and raw.get("CertPath"):
            tls_port = DEFAULT_TLS_PORT
        return cls(
            host=raw.get("Host", "127.0.0.1"),
            port=raw.get("Port", DEFAULT_PORT),
            tls_port=tls_port,
            users=users,
            cert_allow_list=list(raw.get("CertAllowList", [])),
            cert_path=raw.get("CertPath"),
            key_path=raw.get("KeyPath"),
            ca_path=raw.get("CaPath"),
            heartbeat=(hb[0], hb[1]),
            max_queue_depth=raw.get("MaxQueueDepth", 100000),
            max_redeliveries=raw.get("MaxRedeliveries", 5),
            allow_anonymous=raw.get("AllowAnonymous", False),
            log_path=raw.get("LogPath"),
        )


# -- core data ---------------------------------------------------------------


@dataclass(eq=False)
class _Msg:
    seq: int
    destination: str
    headers: list[tuple[str, str]]
    body: bytes
    nacks: int = 0
    redelivered: bool = False
    dead: bool = False


@dataclass(eq=False)
class _Sub:
    conn: "_Conn"
    id: str
    destination: str
    ack_mode: str
    inflight: set = field(default_factory=set)

    @property
    def client_ack(self) -> bool:
        return self.ack_mode != "auto"

    def ready(self) -> bool:
        return not self.client_ack or not self.inflight


@dataclass(eq=False)
class QueueDestination:
    name: str
    pending: collections.deque = field(default_factory=collections.deque)
    subscribers: list[_Sub] = field(default_factory=list)
    cursor: int = 0
    unacked: int = 0


@dataclass(eq=False)
class TopicDestination:
    name: str
    subscribers: list[_Sub] = field(default_factory=list)


@dataclass
class BrokerStats:
    published: int = 0
    acked: int = 0
    dead_lettered: int = 0
    depth_dropped: int = 0
    topic_published: int = 0
    topic_delivered: int = 0
    topic_dropped: int = 0
    redelivered: int = 0
    sessions_total: int = 0


# -- connections ---------------------------------------------------------------


class _Conn:
    NEW, CONNECTED, CLOSED = "new", "connected", "closed"

    def __init__(self, broker: "Broker", sock: socket.socket, peer, tls: bool, sid: str):
        self.broker = broker
        self.sock = sock
        self.peer = f"{peer[0]}:{peer[1]}"
        self.tls = tls
        self.id = sid
        self.state = self.NEW
        self.principal: str | None = None
        self.vhost: str | None = None
        self.subs: dict[str, _Sub] = {}
        # ack id -> (queue destination or None for topics, message, subscription)
        self.unacked: dict[str, tuple[QueueDestination | None, _Msg, _Sub]] = {}
        self.plan = stomp.HeartbeatPlan()
        self.peer_cert: dict | None = None
        self.last_rx = time.monotonic()
        self._out: queue.SimpleQueue = queue.SimpleQueue()
        self._ack_ids = itertools.count(1)
        self._dead = threading.Event()

    def next_ack_id(self) -> str:
        return f"{self.id}-{next(self._ack_ids)}"

    def send(self, f: stomp.StompFrame) -> None:
        self._out.put(stomp.encode_frame(f))

    def close_after_flush(self) -> None:
        self._out.put(None)

    def abort(self) -> None:
        self.broker._forget(self)
        self._dead.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._out.put(None)

    # threads

    def start(self) -> None:
        threading.Thread(target=self._read_loop, name=f"broker-rd-{self.id}", daemon=True).start()

    def _read_loop(self) -> None:
        broker = self.broker
        if self.tls:
            try:
                self.sock.settimeout(10)
                self.sock.do_handshake()
                self.sock.settimeout(None)
                self.peer_cert = self.sock.getpeercert() or None
            except (OSError, ssl.SSLError) as exc:
                broker._log_event("tls_handshake_failed", session=self.id, peer=self.peer, error=str(exc))
                self.abort()
                return
        threading.Thread(target=self._write_loop, name=f"broker-wr-{self.id}", daemon=True).start()
        decoder = stomp.StompDecoder()
        sock = self.sock
        reason = "peer-close"
        while not self._dead.is_set():
            try:
                if not (self.tls and sock.pending()):
                    readable, _, _ = select.select([sock], [], [], _TICK)
                    if not readable:
                        window = 2 * self.plan.recv_timeout_ms / 1000
                        if window and time.monotonic() - self.last_rx > window:
                            reason = "heartbeat-timeout"
                            break
                        continue
                data = sock.recv(65536)
            except ssl.SSLWantReadError:
                continue
            except (OSError, ValueError):
                break
            if not data:
                break
            self.last_rx = time.monotonic()
            try:
                frames = decoder.feed(data)
            except ProtocolViolation as exc:
                broker.submit(lambda c=self, e=exc: broker.core.protocol_violation(c, str(e)))
                return
            for f in frames:
                if f.command != stomp.HEARTBEAT:
                    broker.submit(lambda c=self, f=f: broker.core.on_frame(c, f))
        broker.submit(lambda c=self, r=reason: broker.core.on_closed(c, r))
        self.abort()

    def _write_loop(self) -> None:
        broker = self.broker
        last_tx = time.monotonic()
        while True:
            interval = self.plan.send_interval_ms / 1000
            try:
                data = self._out.get(timeout=min(interval / 4, 0.5) if interval else 0.5)
            except queue.Empty:
                if self._dead.is_set():
                    return
                if interval and time.monotonic() - last_tx >= interval / 2 and not broker.suppress_heartbeats:
                    data = b"\n"
                else:
                    continue
            if data is None:
                if not self._dead.is_set():
                    # half-close, let the reader drain until the peer hangs up
                    try:
                        self.sock.shutdown(socket.SHUT_WR)
                    except OSError:
                        pass
                    if not self._dead.wait(2.0):
                        self.abort()
                return
            try:
                self.sock.sendall(data)
            except (OSError, ValueError):
                self._dead.set()
                return
            last_tx = time.monotonic()


# -- core ------------------------------------------------------------------------


class BrokerCore:
    """Destination state; only ever touched from the broker's core thread."""

    def __init__(self, broker: "Broker"):
        self.broker = broker
        self.config = broker.config
        self.queues: dict[str, QueueDestination] = {}
        self.topics: dict[str, TopicDestination] = {}
        self.conns: dict[str, _Conn] = {}
        self.stats = BrokerStats()
        self._seq = itertools.count(1)

    # handshake

    def on_frame(self, conn: _Conn, f: stomp.StompFrame) -> None:
        if conn.state == _Conn.CLOSED:
            return
        if conn.state == _Conn.NEW:
            if f.command not in ("CONNECT", "STOMP"):
                self._fatal(conn, "expected CONNECT", "protocol_error")
                return
            self._connect(conn, f)
            return
        handler = getattr(self, f"_on_{f.command.lower()}", None)
        if handler is None:
            self._fatal(conn, f"unexpected {f.command} frame", "protocol_error")
            return
        handler(conn, f)

    def _connect(self, conn: _Conn, f: stomp.StompFrame) -> None:
        versions = (f.get("accept-version") or "1.0").split(",")
        if stomp.VERSION not in versions:
            self._fatal(conn, "version mismatch", "version_mismatch", supported=stomp.VERSION)
            return
        principal = self._authenticate(conn, f)
        if principal is None:
            self._fatal(conn, "authentication failed", "auth_failed", login=f.get("login"))
            return
        try:
            client_decl = stomp.parse_heartbeat_header(f.get("heart-beat"))
        except ProtocolViolation as exc:
            self._fatal(conn, str(exc), "protocol_error")
            return
        conn.plan = stomp.negotiate_heartbeat(self.config.heartbeat, client_decl)
        conn.principal = principal
        conn.vhost = f.get("host")
        conn.state = _Conn.CONNECTED
        self.conns[conn.id] = conn
        self.stats.sessions_total += 1
        conn.send(stomp.frame("CONNECTED", [
            ("version", stomp.VERSION),
            ("heart-beat", stomp.format_heartbeat_header(self.config.heartbeat)),
            ("session", conn.id),
            ("server", "mqware-broker/1"),
        ]))
        self.broker._log_event("session_connected", session=conn.id, host=conn.vhost,
                               principal=principal, peer=conn.peer, tls=conn.tls)

    def _authenticate(self, conn: _Conn, f: stomp.StompFrame) -> str | None:
        login = f.get("login")
        if login is not None:
            expected = self.config.users.get(login)
            if expected is not None and expected == f.get("passcode", ""):
                return login
            return None
        if conn.peer_cert:
            subject = dict(x[0] for x in conn.peer_cert.get("subject", ()))
            cn = subject.get("commonName")
            rfc = ",".join(f"{k}={v}" for k, v in subject.items())
            for allowed in self.config.cert_allow_list:
                if allowed in (cn, f"CN={cn}", rfc):
                    return f"CN={cn}"
            return None
        if self.config.allow_anonymous:
            return "anonymous"
        return None

    def _fatal(self, conn: _Conn, message: str, event: str, **extra) -> None:
        self.broker._log_event(event, session=conn.id, peer=conn.peer, message=message, **extra)
        conn.send(stomp.frame("ERROR", [("message", message)]))
        self._teardown(conn, event)
        conn.close_after_flush()

    def _error(self, conn: _Conn, f: stomp.StompFrame, message: str) -> None:
        headers = [("message", message)]
        if "receipt" in f:
            headers.append(("receipt-id", f["receipt"]))
        conn.send(stomp.frame("ERROR", headers))

    def _receipt(self, conn: _Conn, f: stomp.StompFrame) -> None:
        rid = f.get("receipt")
        if rid is not None:
            conn.send(stomp.frame("RECEIPT", [("receipt-id", rid)]))

    def protocol_violation(self, conn: _Conn, text: str) -> None:
        if conn.state != _Conn.CLOSED:
            self._fatal(conn, f"malformed frame: {text}", "protocol_error")

    # routing

    def _on_send(self, conn: _Conn, f: stomp.StompFrame) -> None:
        if "transaction" in f:
            self._error(conn, f, "transactions unsupported")
            return
        dest = f.get("destination", "")
        if dest.startswith("/queue/") and len(dest) > 7:
            q = self._queue(dest[7:])
            self.stats.published += 1
            if len(q.pending) >= self.config.max_queue_depth:
                self.stats.depth_dropped += 1
                self._error(conn, f, f"queue depth exceeded for {dest}")
                return
            q.pending.append(self._message(dest, f))
            self._receipt(conn, f)
            self.dispatch(q)
        elif dest.startswith("/topic/") and len(dest) > 7:
            t = self.topics.get(dest[7:])
            msg = self._message(dest, f)
            self.stats.topic_published += 1
            if t is None or not t.subscribers:
                self.stats.topic_dropped += 1
            else:
                for sub in t.subscribers:
                    self._deliver(sub, msg, None)
                    self.stats.topic_delivered += 1
            self._receipt(conn, f)
        else:
            self._error(conn, f, f"unknown destination {dest!r}")

    def _message(self, dest: str, f: stomp.StompFrame) -> _Msg:
        seq = next(self._seq)
        headers = [(k, v) for k, v in f.headers if k not in _FORWARDED]
        if not any(k == "message-id" for k, _ in headers):
            headers.insert(0, ("message-id", f"broker-{seq}"))
        return _Msg(seq, dest, headers, f.body)

    def _queue(self, name: str) -> QueueDestination:
        q = self.queues.get(name)
        if q is None:
            q = self.queues[name] = QueueDestination(name)
        return q

    def dispatch(self, q: QueueDestination) -> int:
        delivered = 0
        while q.pending and q.subscribers:
            n = len(q.subscribers)
            chosen = None
            for i in range(n):
                idx = (q.cursor + i) % n
                if q.subscribers[idx].ready():
                    chosen = q.subscribers[idx]
                    break
            if chosen is None:
                break
            q.cursor = (idx + 1) % n
            msg = q.pending.popleft()
            self._deliver(chosen, msg, q)
            delivered += 1
        return delivered

    def _deliver(self, sub: _Sub, msg: _Msg, q: QueueDestination | None) -> None:
        headers = [("subscription", sub.id), ("destination", msg.destination)] + msg.headers
        if msg.redelivered:
            headers.append(("redelivered", "true"))
        if sub.client_ack:
            ack_id = sub.conn.next_ack_id()
            headers.append(("ack", ack_id))
            sub.conn.unacked[ack_id] = (q, msg, sub)
            sub.inflight.add(ack_id)
            if q is not None:
                q.unacked += 1
        elif q is not None and not msg.dead:
            self.stats.acked += 1
        sub.conn.send(stomp.StompFrame("MESSAGE", tuple(headers), msg.body))

    # subscriptions

    def _on_subscribe(self, conn: _Conn, f: stomp.StompFrame) -> None:
        sub_id, dest = f.get("id"), f.get("destination", "")
        ack = f.get("ack", "auto")
        if sub_id is None or sub_id in conn.subs:
            self._error(conn, f, "missing or duplicate subscription id")
            return
        if ack not in ("auto", "client", "client-individual"):
            self._error(conn, f, f"unsupported ack mode {ack!r}")
            return
        sub = _Sub(conn, sub_id, dest, ack)
        if dest.startswith("/queue/") and len(dest) > 7:
            q = self._queue(dest[7:])
            q.subscribers.append(sub)
            conn.subs[sub_id] = sub
            self._receipt(conn, f)
            self.dispatch(q)
        elif dest.startswith("/topic/") and len(dest) > 7:
            t = self.topics.setdefault(dest[7:], TopicDestination(dest[7:]))
            t.subscribers.append(sub)
            conn.subs[sub_id] = sub
            self._receipt(conn, f)
        else:
            self._error(conn, f, f"unknown destination {dest!r}")

    def _on_unsubscribe(self, conn: _Conn, f: stomp.StompFrame) -> None:
        sub = conn.subs.pop(f.get("id", ""), None)
        if sub is None:
            self._error(conn, f, "unknown subscription id")
            return
        touched = self._drop_sub(sub)
        self._requeue([k for k, v in conn.unacked.items() if v[2] is sub], conn)
        self._receipt(conn, f)
        for q in touched:
            self.dispatch(q)

    def _drop_sub(self, sub: _Sub) -> list[QueueDestination]:
        dest = sub.destination
        if dest.startswith("/topic/"):
            t = self.topics.get(dest[7:])
            if t is not None and sub in t.subscribers:
                t.subscribers.remove(sub)
            return []
        q = self.queues.get(dest[7:])
        if q is None or sub not in q.subscribers:
            return []
        idx = q.subscribers.index(sub)
        q.subscribers.pop(idx)
        if idx < q.cursor:
            q.cursor -= 1
        if q.cursor >= len(q.subscribers):
            q.cursor = 0
        return [q]

    # acknowledgement

    def _on_ack(self, conn: _Conn, f: stomp.StompFrame) -> None:
        self._ack(conn, f, nack=False)

    def _on_nack(self, conn: _Conn, f: stomp.StompFrame) -> None:
        self._ack(conn, f, nack=True)

    def _ack(self, conn: _Conn, f: stomp.StompFrame, nack: bool) -> None:
        if "transaction" in f:
            self._error(conn, f, "transactions unsupported")
            return
        ack_id = f.get("id", "")
        entry = conn.unacked.pop(ack_id, None)
        if entry is None:
            self._error(conn, f, f"unknown ack id {ack_id!r}")
            return
        q, msg, sub = entry
        sub.inflight.discard(ack_id)
        if q is not None:
            q.unacked -= 1
            if not nack:
                if not msg.dead:
                    self.stats.acked += 1
            else:
                msg.nacks += 1
                msg.redelivered = True
                if msg.nacks > self.config.max_redeliveries and not msg.dead:
                    self._dead_letter(q, msg)
                else:
                    self.stats.redelivered += 1
                    q.pending.appendleft(msg)
        self._receipt(conn, f)
        if q is not None:
            self.dispatch(q)

    def _dead_letter(self, q: QueueDestination, msg: _Msg) -> None:
        dlq = self._queue(f"DLQ.{q.name}")
        msg.dead = True
        msg.destination = f"/queue/{dlq.name}"
        self.stats.dead_lettered += 1
        dlq.pending.append(msg)
        self.dispatch(dlq)

    def _requeue(self, ack_ids: list[str], conn: _Conn) -> int:
        by_queue: dict[int, tuple[QueueDestination, list[_Msg]]] = {}
        for ack_id in ack_ids:
            q, msg, sub = conn.unacked.pop(ack_id)
            sub.inflight.discard(ack_id)
            if q is None:
                continue
            q.unacked -= 1
            msg.redelivered = True
            by_queue.setdefault(id(q), (q, []))[1].append(msg)
        count = 0
        for q, msgs in by_queue.values():
            msgs.sort(key=lambda m: m.seq)
            q.pending.extendleft(reversed(msgs))
            count += len(msgs)
            self.stats.redelivered += len(msgs)
        return count

    def _on_begin(self, conn, f):
        self._error(conn, f, "transactions unsupported")

    _on_commit = _on_abort = _on_begin

    # teardown

    def _on_disconnect(self, conn: _Conn, f: stomp.StompFrame) -> None:
        self._teardown(conn, "requested")
        if not self.broker.withhold_receipts:
            self._receipt(conn, f)
        conn.close_after_flush()

    def on_closed(self, conn: _Conn, reason: str) -> None:
        self._teardown(conn, reason)

    def _teardown(self, conn: _Conn, reason: str) -> int:
        if conn.state == _Conn.CLOSED:
            return 0
        was_connected = conn.state == _Conn.CONNECTED
        conn.state = _Conn.CLOSED
        touched = {}
        for sub in conn.subs.values():
            for q in self._drop_sub(sub):
                touched[id(q)] = q
        conn.subs.clear()
        for q, _, _ in conn.unacked.values():
            if q is not None:
                touched[id(q)] = q
        requeued = self._requeue(list(conn.unacked), conn)
        self.conns.pop(conn.id, None)
        if was_connected:
            self.broker._log_event("session_closed", session=conn.id, host=conn.vhost,
                                   principal=conn.principal, reason=reason, requeued=requeued)
        for q in touched.values():
            self.dispatch(q)
        return requeued

    # inspection

    def depth(self, name: str) -> int:
        q = self.queues.get(name)
        return len(q.pending) if q else 0

    def snapshot(self) -> dict[str, Any]:
        pending = sum(1 for q in self.queues.values() for m in q.pending if not m.dead)
        unacked = sum(1 for c in self.conns.values() for q, m, _ in c.unacked.values() if q is not None and not m.dead)
        return {
            **self.stats.__dict__,
            "pending": pending,
            "unacked": unacked,
            "sessions": len(self.conns),
            "queues": {n: len(q.pending) for n, q in self.queues.items()},
        }


# -- broker ----------------------------------------------------------------------


class Broker:
    """Embeddable broker; ``start()`` binds listeners and returns self.

    ``kill()`` drops every connection and listener abruptly but keeps the
    in-memory destination state, so a later ``start()`` resumes with it (a
    network-level crash/restart).  ``stop()`` is the final shutdown.
    """

    def __init__(self, config: BrokerConfig | None = None, event_log: str | IO[str] | None = None):
        self.config = config or BrokerConfig(port=0, allow_anonymous=True)
        self.core = BrokerCore(self)
        self.suppress_heartbeats = False
        self.withhold_receipts = False
        self.port: int | None = None
        self.tls_port: int | None = None
        self._work: queue.SimpleQueue = queue.SimpleQueue()
        self._core_thread: threading.Thread | None = None
        self._listeners: list[socket.socket] = []
        self._acceptors: list[threading.Thread] = []
        self._stop_listen = threading.Event()
        self._session_ids = itertools.count(1)
        self._conns: set[_Conn] = set()
        self._conns_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._log_close = False
        event_log = event_log or self.config.log_path
        if isinstance(event_log, (str, Path)):
            self._log = open(event_log, "a", encoding="utf-8")
            self._log_close = True
        else:
            self._log = event_log
        self.running = False

    # lifecycle

    def start(self) -> "Broker":
        if self._core_thread is None:
            self._core_thread = threading.Thread(target=self._core_loop, name="broker-core", daemon=True)
            self._core_thread.start()
        self._stop_listen.clear()
        plain = self._listen(self.config.host, self.port if self.port is not None else self.config.port)
        self.port = plain.getsockname()[1]
        self._spawn_accept(plain, None)
        if self.config.tls_port is not None and self.config.cert_path:
            ctx = self.server_tls_context()
            tls = self._listen(self.config.host, self.tls_port if self.tls_port is not None else self.config.tls_port)
            self.tls_port = tls.getsockname()[1]
            self._spawn_accept(tls, ctx)
        self.running = True
        self._log_event("listening", host=self.config.host, port=self.port, tls_port=self.tls_port)
        return self

    def server_tls_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(self.config.cert_path, self.config.key_path)
        if self.config.ca_path:
            ctx.load_verify_locations(self.config.ca_path)
            # clients without a certificate may still log in with a password
            ctx.verify_mode = ssl.CERT_OPTIONAL
        return ctx

    def _listen(self, host: str, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        s.listen(256)
        self._listeners.append(s)
        return s

    def _spawn_accept(self, sock: socket.socket, ctx: ssl.SSLContext | None) -> None:
        t = threading.Thread(target=self._accept_loop, args=(sock, ctx), name="broker-accept", daemon=True)
        self._acceptors.append(t)
        t.start()

    def _accept_loop(self, lsock: socket.socket, ctx: ssl.SSLContext | None) -> None:
        while not self._stop_listen.is_set():
            try:
                readable, _, _ = select.select([lsock], [], [], 0.1)
                if not readable:
                    continue
                sock, peer = lsock.accept()
            except (OSError, ValueError):
                return
            if self._stop_listen.is_set():
                sock.close()
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if ctx is not None:
                sock = ctx.wrap_socket(sock, server_side=True, do_handshake_on_connect=False)
            conn = _Conn(self, sock, peer, ctx is not None, f"sess-{next(self._session_ids)}")
            with self._conns_lock:
                self._conns.add(conn)
            self._log_event("tcp_accept", session=conn.id, peer=conn.peer, tls=ctx is not None)
            conn.start()

    def _close_listeners(self) -> None:
        self._stop_listen.set()
        for s in self._listeners:
            # shutdown stops listening at once; close alone waits for the select to return
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in self._acceptors:
            if t is not threading.current_thread():
                t.join(timeout=2)
        for s in self._listeners:
            s.close()
        self._listeners.clear()
        self._acceptors.clear()

    def _forget(self, conn: _Conn) -> None:
        with self._conns_lock:
            self._conns.discard(conn)

    def _abort_all(self) -> None:
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            c.abort()

    def kill(self) -> None:
        """Abruptly drop all listeners and connections (no receipts, no goodbyes)."""
        self._close_listeners()
        self._abort_all()
        # wait until the core has torn every session down
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline and self.call(lambda core: len(core.conns)):
            time.sleep(0.01)
        self.running = False
        self._log_event("killed")

    def stop(self) -> None:
        if self._core_thread is None:
            return
        self._close_listeners()
        self._abort_all()
        self._work.put(None)
        self._core_thread.join(timeout=5)
        self._core_thread = None
        self.running = False
        self._log_event("stopped")
        if self._log_close and self._log:
            self._log.close()
            self._log = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # core thread

    def submit(self, fn: Callable[[], Any]) -> None:
        self._work.put(fn)

    def call(self, fn: Callable[[BrokerCore], Any], timeout: float = 10.0) -> Any:
        """Run ``fn(core)`` on the core thread and return its result."""
        fut: Future = Future()

        def run():
            try:
                fut.set_result(fn(self.core))
            except BaseException as exc:
                fut.set_exception(exc)

        self._work.put(run)
        return fut.result(timeout)

    def _core_loop(self) -> None:
        while True:
            item = self._work.get()
            if item is None:
                return
            try:
                item()
            except Exception:
                log.exception("broker core task failed")

    # inspection helpers

    def stats(self) -> dict[str, Any]:
        return self.call(lambda core: core.snapshot())

    def depth(self, queue_name: str) -> int:
        return self.call(lambda core: core.depth(queue_name))

    def session_count(self) -> int:
        return self.call(lambda core: len(core.conns))

    # event log

    def _log_event(self, event: str, **fields) -> None:
        line = json.dumps({"ts_ms": time.time_ns() // 1_000_000, "event": event, **fields}, sort_keys=True)
        log.debug(line)
        with self._log_lock:
            if self._log is not None:
                self._log.write(line + "\n")
                self._log.flush()


def read_event_log(source: str | Path | IO[str]) -> list[dict]:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text("utf-8")
    else:
        source.seek(0)
        text = source.read()
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def max_live_sessions(events: list[dict], key: str = "host") -> dict[str, int]:
    """Peak number of simultaneously connected sessions per ``key`` value."""
    live: dict[str, set] = collections.defaultdict(set)
    peak: dict[str, int] = collections.defaultdict(int)
    for ev in events:
        if ev["event"] == "session_connected":
            k = ev.get(key)
            live[k].add(ev["session"])
            peak[k] = max(peak[k], len(live[k]))
        elif ev["event"] == "session_closed":
            live[ev.get(key)].discard(ev["session"])
    return dict(peak)


def conservation_holds(snapshot: dict) -> bool:
    s = snapshot
    return s["published"] == (
        s["acked"] + s["pending"] + s["unacked"] + s["dead_lettered"] + s["depth_dropped"]
    )
