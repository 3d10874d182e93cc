"""Protocol connectors.

A connector type is a factory ``params -> session``; sessions expose
connect/put/send_batch/subscribe/unsubscribe/disconnect plus an event stream.
``stomp`` is the built-in type; :func:`register_connector` adds others without
touching callers.

Concurrency: a STOMP session runs one reader thread (socket, receipts,
heart-beat checks) and one dispatch thread that runs subscription handlers
serially in arrival order.  ``put`` may be called from any thread.  Handlers
must not call ``disconnect`` on their own session.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import random
import select
import socket
import ssl
import threading
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from mqware.config import AuthConfig, AuthMode, MQServiceConfig, ReconnectPolicy
from mqware.errors import (
    AuthFailed,
    ConnectError,
    ConnectionRefused,
    ConnectTimeout,
    NotConnected,
    ProtocolViolation,
    SendFailed,
    TlsHandshakeFailed,
)
from mqware.message import MessageEnvelope, decode_message, encode_message, DESTINATION
from mqware import stomp

log = logging.getLogger(__name__)

RECEIPT_TIMEOUT = 5.0
DISCONNECT_TIMEOUT = 2.0
_TICK = 0.05


class EventKind(enum.Enum):
    CONNECTED = "connected"
    DISCONNECTED = "disconnected"
    MESSAGE_ARRIVED = "message-arrived"
    RECEIPT_CONFIRMED = "receipt-confirmed"
    PROTOCOL_ERROR = "protocol-error"


class DisconnectReason(str, enum.Enum):
    PEER_CLOSE = "peer-close"
    HEARTBEAT_TIMEOUT = "heartbeat-timeout"
    PROTOCOL_ERROR = "protocol-error"
    REQUESTED = "requested"


class AckMode(str, enum.Enum):
    AUTO = "auto"
    CLIENT_INDIVIDUAL = "client-individual"


class PutResult(str, enum.Enum):
    DELIVERED = "delivered"
    SPOOLED = "spooled"


@dataclass(frozen=True)
class ConnectorEvent:
    kind: EventKind
    reason: DisconnectReason | None = None
    subscription_id: str | None = None
    envelope: MessageEnvelope | None = None
    receipt_id: str | None = None
    text: str | None = None


@dataclass(frozen=True)
class SubscriptionSpec:
    wire_path: str
    handler: Callable[[MessageEnvelope], object]
    ack_mode: AckMode = AckMode.CLIENT_INDIVIDUAL

    def __post_init__(self):
        if not self.wire_path.startswith(("/queue/", "/topic/")):
            raise ValueError(f"wire path must start with /queue/ or /topic/: {self.wire_path!r}")


@dataclass(frozen=True)
class ConnectorParams:
    host: str
    port: int
    auth: AuthConfig
    virtual_host: str | None = None
    heartbeat: tuple[int, int] = (10000, 10000)
    reconnect: ReconnectPolicy = ReconnectPolicy()
    tls: bool = False
    verify_hostname: bool = True
    connect_timeout: float = 10.0

    @classmethod
    def from_service(cls, svc: MQServiceConfig) -> "ConnectorParams":
        return cls(
            host=svc.host,
            port=svc.port,
            auth=svc.auth,
            virtual_host=svc.virtual_host,
            heartbeat=(svc.heartbeat_out_ms, svc.heartbeat_in_ms),
            reconnect=svc.reconnect,
            tls=svc.tls,
            verify_hostname=svc.verify_hostname,
            connect_timeout=svc.connect_timeout_ms / 1000,
        )


class Session(Protocol):
    @property
    def is_connected(self) -> bool: ...
    def connect(self) -> None: ...
    def disconnect(self, timeout: float = DISCONNECT_TIMEOUT) -> None: ...
    def put(self, wire_path: str, env: MessageEnvelope, confirm: bool = False,
            timeout: float = RECEIPT_TIMEOUT) -> PutResult: ...
    def send_batch(self, items: list[tuple[str, MessageEnvelope]],
                   timeout: float = RECEIPT_TIMEOUT) -> int: ...
    def subscribe(self, spec: SubscriptionSpec) -> str: ...
    def unsubscribe(self, sub_id: str) -> None: ...
    def add_listener(self, fn: Callable[[ConnectorEvent], None]) -> None: ...
    def remove_listener(self, fn: Callable[[ConnectorEvent], None]) -> None: ...


class EventSource:
    """Listener bookkeeping shared by sessions."""

    def __init__(self):
        self._listeners: list[Callable[[ConnectorEvent], None]] = []

    def add_listener(self, fn):
        self._listeners.append(fn)

    def remove_listener(self, fn):
        try:
            self._listeners.remove(fn)
        except ValueError:
            pass

    def _emit(self, event: ConnectorEvent) -> None:
        for fn in list(self._listeners):
            try:
                fn(event)
            except Exception:
                log.exception("event listener failed on %s", event.kind)


# -- registry ------------------------------------------------------------------

_REGISTRY: dict[str, Callable[[ConnectorParams], Session]] = {}


def register_connector(name: str, factory: Callable[[ConnectorParams], Session]) -> None:
    _REGISTRY[name] = factory


def unregister_connector(name: str) -> None:
    _REGISTRY.pop(name, None)


def registered_protocols() -> frozenset[str]:
    return frozenset(_REGISTRY)


def connector_factory(name: str) -> Callable[[ConnectorParams], Session]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConnectError(f"no connector registered for protocol {name!r}") from None


# -- TLS -----------------------------------------------------------------------


def client_tls_context(params: ConnectorParams) -> ssl.SSLContext:
    auth = params.auth
    ctx = ssl.create_default_context(ssl.Purpose.SERVER_AUTH, cafile=auth.ca_path)
    ctx.check_hostname = params.verify_hostname
    if auth.mode is AuthMode.TLS_CLIENT_CERT:
        ctx.load_cert_chain(auth.cert_path, auth.key_path)
    return ctx


# -- STOMP session -------------------------------------------------------------


class _Waiter:
    __slots__ = ("event", "error")

    def __init__(self):
        self.event = threading.Event()
        self.error: str | None = None


class StompSession(EventSource):
    """One STOMP 1.2 connection."""

    def __init__(self, params: ConnectorParams):
        super().__init__()
        self.params = params
        self.plan = stomp.HeartbeatPlan()
        self.server_headers: dict[str, str] = {}
        self._sock: socket.socket | None = None
        self._decoder = stomp.StompDecoder()
        self._write_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._connected = False
        self._terminated = False
        self._closing = False
        self._receipts: dict[str, _Waiter] = {}
        self._subs: dict[str, SubscriptionSpec] = {}
        self._ids = itertools.count(1)
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self._stop = threading.Event()
        self.last_rx = 0.0
        self._last_tx = 0.0
        self._threads: list[threading.Thread] = []
        self._pending_frames: list[stomp.StompFrame] = []

    @property
    def is_connected(self) -> bool:
        return self._connected and not self._terminated

    # connection setup

    def connect(self) -> None:
        p = self.params
        deadline = time.monotonic() + p.connect_timeout
        try:
            sock = socket.create_connection((p.host, p.port), timeout=p.connect_timeout)
        except socket.timeout as exc:
            raise ConnectTimeout(f"{p.host}:{p.port}: {exc}") from exc
        except OSError as exc:
            raise ConnectionRefused(f"{p.host}:{p.port}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            if p.tls:
                try:
                    sock = client_tls_context(p).wrap_socket(sock, server_hostname=p.host)
                except (ssl.SSLError, ssl.CertificateError) as exc:
                    raise TlsHandshakeFailed(str(exc)) from exc
                except socket.timeout as exc:
                    raise ConnectTimeout(f"TLS handshake: {exc}") from exc
                except OSError as exc:
                    raise TlsHandshakeFailed(str(exc)) from exc
            self._sock = sock
            self._handshake(deadline)
        except BaseException:
            sock.close()
            self._sock = None
            raise
        sock.settimeout(None)
        self.last_rx = self._last_tx = time.monotonic()
        self._connected = True
        self._spawn(self._read_loop, "reader")
        self._spawn(self._dispatch_loop, "dispatch")
        if self.plan.send_interval_ms:
            self._spawn(self._heartbeat_loop, "heartbeat")
        self._emit(ConnectorEvent(EventKind.CONNECTED))

    def _spawn(self, target, name):
        t = threading.Thread(target=target, name=f"stomp-{name}-{self.params.port}", daemon=True)
        self._threads.append(t)
        t.start()

    def _handshake(self, deadline: float) -> None:
        p = self.params
        headers = [
            ("accept-version", stomp.VERSION),
            ("host", p.virtual_host or p.host),
            ("heart-beat", stomp.format_heartbeat_header(p.heartbeat)),
        ]
        if p.auth.mode is AuthMode.USER_PASS:
            headers += [("login", p.auth.user), ("passcode", p.auth.password())]
        try:
            self._sock.sendall(stomp.encode_frame(stomp.frame("CONNECT", headers)))
            reply = self._await_first_frame(deadline)
        except (ssl.SSLError, ssl.CertificateError) as exc:
            raise TlsHandshakeFailed(str(exc)) from exc
        except socket.timeout as exc:
            raise ConnectTimeout("no CONNECTED frame before timeout") from exc
        except ConnectionResetError as exc:
            if p.tls:
                raise TlsHandshakeFailed(f"connection reset during TLS session setup: {exc}") from exc
            raise ConnectionRefused(str(exc)) from exc
        except OSError as exc:
            raise ConnectionRefused(str(exc)) from exc
        if reply.command == "ERROR":
            detail = reply.get("message", "") or reply.body.decode("utf-8", "replace")
            raise AuthFailed(detail)
        if reply.command != "CONNECTED":
            raise ConnectError(f"unexpected {reply.command} during handshake")
        self.server_headers = {k: v for k, v in reversed(reply.headers)}
        server_decl = stomp.parse_heartbeat_header(reply.get("heart-beat"))
        self.plan = stomp.negotiate_heartbeat(p.heartbeat, server_decl)

    def _await_first_frame(self, deadline: float) -> stomp.StompFrame:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout("handshake timed out")
            self._sock.settimeout(remaining)
            data = self._sock.recv(65536)
            if not data:
                if self.params.tls:
                    raise TlsHandshakeFailed("peer closed the TLS session before CONNECTED")
                raise ConnectionRefused("peer closed the connection before CONNECTED")
            try:
                frames = self._decoder.feed(data)
            except ProtocolViolation as exc:
                raise ConnectError(f"bad handshake reply: {exc}") from exc
            for f in frames:
                if f.command != stomp.HEARTBEAT:
                    # any frames after the reply stay queued for the reader
                    self._pending_frames = frames[frames.index(f) + 1:]
                    return f

    # reader / dispatcher

    def _read_loop(self) -> None:
        for f in self._pending_frames:
            self._handle(f)
        sock = self._sock
        recv_window = 2 * self.plan.recv_timeout_ms / 1000
        tls = isinstance(sock, ssl.SSLSocket)
        while not self._terminated:
            try:
                if not (tls and sock.pending()):
                    readable, _, _ = select.select([sock], [], [], _TICK)
                    if not readable:
                        if recv_window and time.monotonic() - self.last_rx > recv_window:
                            self._terminate(DisconnectReason.HEARTBEAT_TIMEOUT)
                            return
                        continue
                data = sock.recv(65536)
            except ssl.SSLWantReadError:
                continue
            except (OSError, ValueError):
                self._terminate(DisconnectReason.PEER_CLOSE)
                return
            if not data:
                self._terminate(DisconnectReason.PEER_CLOSE)
                return
            self.last_rx = time.monotonic()
            try:
                frames = self._decoder.feed(data)
            except ProtocolViolation as exc:
                log.warning("protocol violation from %s:%s: %s", self.params.host, self.params.port, exc)
                self._terminate(DisconnectReason.PROTOCOL_ERROR)
                return
            for f in frames:
                self._handle(f)

    def _handle(self, f: stomp.StompFrame) -> None:
        cmd = f.command
        if cmd == "MESSAGE":
            self._inbox.put(f)
        elif cmd == "RECEIPT":
            rid = f.get("receipt-id")
            waiter = self._receipts.pop(rid, None)
            if waiter is not None:
                waiter.event.set()
            self._emit(ConnectorEvent(EventKind.RECEIPT_CONFIRMED, receipt_id=rid))
        elif cmd == "ERROR":
            text = f.get("message", "") or f.body.decode("utf-8", "replace")
            rid = f.get("receipt-id")
            waiter = self._receipts.pop(rid, None) if rid else None
            if waiter is not None:
                waiter.error = text
                waiter.event.set()
            self._emit(ConnectorEvent(EventKind.PROTOCOL_ERROR, text=text, receipt_id=rid))

    def _dispatch_loop(self) -> None:
        while True:
            f = self._inbox.get()
            if f is None or self._terminated:
                return
            sub_id = f.get("subscription")
            spec = self._subs.get(sub_id)
            ack_id = f.get("ack")
            if spec is None:
                if ack_id:
                    self._send_quiet(stomp.frame("NACK", [("id", ack_id)]))
                continue
            ok = True
            try:
                env = decode_message(f.body, dict(f.headers))
            except ValueError as exc:
                log.warning("undecodable message on %s: %s", spec.wire_path, exc)
                ok = False
            else:
                self._emit(ConnectorEvent(EventKind.MESSAGE_ARRIVED, subscription_id=sub_id, envelope=env))
                try:
                    spec.handler(env)
                except Exception:
                    log.exception("handler for %s failed", spec.wire_path)
                    ok = False
            if spec.ack_mode is AckMode.CLIENT_INDIVIDUAL and ack_id:
                self._send_quiet(stomp.frame("ACK" if ok else "NACK", [("id", ack_id)]))

    def _heartbeat_loop(self) -> None:
        interval = self.plan.send_interval_ms / 1000
        while not self._stop.wait(min(interval / 4, 0.5)):
            if time.monotonic() - self._last_tx >= interval / 2:
                self._send_quiet(stomp.HEARTBEAT_FRAME)

    # writing

    def _write(self, data: bytes) -> None:
        with self._write_lock:
            if self._terminated or self._sock is None:
                raise NotConnected()
            self._sock.sendall(data)
            self._last_tx = time.monotonic()

    def _send_quiet(self, f: stomp.StompFrame) -> None:
        try:
            self._write(stomp.encode_frame(f))
        except (OSError, SendFailed):
            pass

    def _send_frame_bytes(self, path: str, env: MessageEnvelope, receipt: str | None) -> bytes:
        headers = [("destination", path), ("content-type", "application/json")]
        headers += [(k, v) for k, v in env.headers.items() if k != DESTINATION]
        if receipt:
            headers.append(("receipt", receipt))
        return stomp.encode_frame(stomp.frame("SEND", headers, encode_message(env)))

    def put(self, wire_path, env, confirm=False, timeout=RECEIPT_TIMEOUT) -> PutResult:
        if not self.is_connected:
            raise NotConnected(f"{self.params.host}:{self.params.port}")
        if not confirm:
            self._checked_write(self._send_frame_bytes(wire_path, env, None))
            return PutResult.DELIVERED
        self.send_batch([(wire_path, env)], timeout)
        return PutResult.DELIVERED

    def send_batch(self, items, timeout=RECEIPT_TIMEOUT) -> int:
        """Send with receipts, pipelined; returns once every receipt arrived."""
        if not self.is_connected:
            raise NotConnected(f"{self.params.host}:{self.params.port}")
        waiters, chunks = [], []
        for path, env in items:
            rid = f"rcpt-{next(self._ids)}"
            w = _Waiter()
            self._receipts[rid] = w
            waiters.append((rid, w))
            chunks.append(self._send_frame_bytes(path, env, rid))
        try:
            self._checked_write(b"".join(chunks))
            deadline = time.monotonic() + timeout
            for rid, w in waiters:
                if not w.event.wait(max(0.0, deadline - time.monotonic())):
                    raise SendFailed("timeout", f"no receipt {rid} within {timeout}s")
                if w.error is not None:
                    raise SendFailed("rejected", w.error)
        finally:
            for rid, _ in waiters:
                self._receipts.pop(rid, None)
        return len(items)

    def _checked_write(self, data: bytes) -> None:
        try:
            self._write(data)
        except SendFailed:
            raise
        except OSError as exc:
            self._terminate(DisconnectReason.PEER_CLOSE)
            raise SendFailed("io", str(exc)) from exc

    # subscriptions

    def subscribe(self, spec: SubscriptionSpec) -> str:
        if not self.is_connected:
            raise NotConnected()
        sub_id = f"sub-{next(self._ids)}"
        self._subs[sub_id] = spec
        f = stomp.frame("SUBSCRIBE", [("id", sub_id), ("destination", spec.wire_path), ("ack", spec.ack_mode.value)])
        try:
            self._checked_write(stomp.encode_frame(f))
        except SendFailed:
            self._subs.pop(sub_id, None)
            raise NotConnected("lost connection while subscribing") from None
        return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        if self._subs.pop(sub_id, None) is not None:
            self._send_quiet(stomp.frame("UNSUBSCRIBE", [("id", sub_id)]))

    @property
    def subscriptions(self) -> dict[str, SubscriptionSpec]:
        return dict(self._subs)

    # teardown

    def disconnect(self, timeout: float = DISCONNECT_TIMEOUT) -> None:
        with self._state_lock:
            if self._terminated or self._closing or not self._connected:
                return
            self._closing = True
        rid = f"disc-{next(self._ids)}"
        w = _Waiter()
        self._receipts[rid] = w
        try:
            self._write(stomp.encode_frame(stomp.frame("DISCONNECT", [("receipt", rid)])))
            w.event.wait(timeout)
        except (OSError, SendFailed):
            pass
        self._terminate(DisconnectReason.REQUESTED)
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=1.0)

    def _terminate(self, reason: DisconnectReason) -> None:
        with self._state_lock:
            if self._terminated:
                return
            self._terminated = True
            if self._closing:
                reason = DisconnectReason.REQUESTED
        self._stop.set()
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for w in list(self._receipts.values()):
            w.error = "connection lost"
            w.event.set()
        self._receipts.clear()
        self._subs.clear()
        self._inbox.put(None)
        log.info("session %s:%s closed (%s)", self.params.host, self.params.port, reason.value)
        self._emit(ConnectorEvent(EventKind.DISCONNECTED, reason=reason))


register_connector("stomp", StompSession)


# -- backoff and supervision ---------------------------------------------------


class Backoff:
    """Exponential backoff, ``initial * multiplier**n`` capped at ``max``.

    With jitter each delay is scaled by a uniform factor in [0.5, 1.5].
    """

    def __init__(self, policy: ReconnectPolicy, jitter: bool = True, rng: random.Random | None = None):
        self.policy = policy
        self.jitter = jitter
        self.rng = rng or random.Random()
        self.attempt = 0

    def next_delay_ms(self) -> float:
        p = self.policy
        base = min(p.initial_backoff_ms * p.multiplier ** self.attempt, p.max_backoff_ms)
        self.attempt += 1
        if self.jitter:
            return base * self.rng.uniform(0.5, 1.5)
        return base

    def reset(self) -> None:
        self.attempt = 0


class SupervisedSession(EventSource):
    """Session wrapper that reconnects after unsolicited drops.

    Subscription ids handed out here are stable across reconnects; after a
    reconnect every active subscription is re-issued on the new session.
    Subscriptions requested while disconnected are issued on the next
    successful connect.
    """

    def __init__(self, factory: Callable[[], Session], policy: ReconnectPolicy,
                 jitter: bool = True, rng: random.Random | None = None, name: str = ""):
        super().__init__()
        self.factory = factory
        self.policy = policy
        self.name = name
        self._backoff = Backoff(policy, jitter, rng)
        self._lock = threading.RLock()
        self._session: Session | None = None
        self._subs: dict[str, SubscriptionSpec] = {}
        self._inner_ids: dict[str, str] = {}
        self._ids = itertools.count(1)
        self._stopped = threading.Event()
        self._loop: threading.Thread | None = None
        self.reconnects = 0

    @property
    def is_connected(self) -> bool:
        s = self._session
        return s is not None and s.is_connected

    @property
    def session(self) -> Session | None:
        return self._session

    def start(self, fail_fast: bool = True) -> "SupervisedSession":
        try:
            self._open()
        except AuthFailed:
            raise
        except ConnectError:
            if fail_fast:
                raise
            self._schedule_reconnect()
        return self

    connect = start

    def _open(self) -> None:
        s = self.factory()
        s.add_listener(self._on_inner)
        s.connect()
        with self._lock:
            if self._stopped.is_set():
                s.disconnect()
                return
            self._session = s
            self._inner_ids.clear()
            for sid, spec in self._subs.items():
                self._inner_ids[sid] = s.subscribe(spec)
        self._backoff.reset()
        self._emit(ConnectorEvent(EventKind.CONNECTED))

    def _on_inner(self, ev: ConnectorEvent) -> None:
        if ev.kind is EventKind.CONNECTED:
            return
        if ev.kind is EventKind.MESSAGE_ARRIVED:
            ev = ConnectorEvent(ev.kind, subscription_id=self._outer_id(ev.subscription_id), envelope=ev.envelope)
        self._emit(ev)
        if ev.kind is EventKind.DISCONNECTED and ev.reason is not DisconnectReason.REQUESTED:
            self._schedule_reconnect()

    def _outer_id(self, inner: str | None) -> str | None:
        for outer, i in self._inner_ids.items():
            if i == inner:
                return outer
        return inner

    def _schedule_reconnect(self) -> None:
        with self._lock:
            if self._stopped.is_set() or (self._loop and self._loop.is_alive()):
                return
            self._loop = threading.Thread(target=self._reconnect_loop, name=f"reconnect-{self.name}", daemon=True)
            self._loop.start()

    def _reconnect_loop(self) -> None:
        while not self._stopped.is_set():
            delay = self._backoff.next_delay_ms() / 1000
            if self._stopped.wait(delay):
                return
            try:
                self._open()
            except ConnectError as exc:
                log.info("reconnect to %s failed: %s", self.name, exc)
                continue
            except NotConnected:
                continue
            self.reconnects += 1
            return

    def delays(self, n: int) -> list[float]:
        """The next ``n`` backoff delays in ms (advances the backoff state)."""
        return [self._backoff.next_delay_ms() for _ in range(n)]

    def _current(self) -> Session:
        s = self._session
        if s is None or not s.is_connected:
            raise NotConnected(self.name)
        return s

    def put(self, wire_path, env, confirm=False, timeout=RECEIPT_TIMEOUT) -> PutResult:
        return self._current().put(wire_path, env, confirm, timeout)

    def send_batch(self, items, timeout=RECEIPT_TIMEOUT) -> int:
        return self._current().send_batch(items, timeout)

    def subscribe(self, spec: SubscriptionSpec) -> str:
        with self._lock:
            sid = f"ssub-{next(self._ids)}"
            self._subs[sid] = spec
            s = self._session
            if s is not None and s.is_connected:
                try:
                    self._inner_ids[sid] = s.subscribe(spec)
                except NotConnected:
                    pass  # re-issued on reconnect
            return sid

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            self._subs.pop(sub_id, None)
            inner = self._inner_ids.pop(sub_id, None)
            s = self._session
        if inner is not None and s is not None and s.is_connected:
            s.unsubscribe(inner)

    @property
    def subscriptions(self) -> dict[str, SubscriptionSpec]:
        return dict(self._subs)

    def disconnect(self, timeout: float = DISCONNECT_TIMEOUT) -> None:
        self._stopped.set()
        with self._lock:
            s = self._session
        if s is not None:
            s.disconnect(timeout)
        loop = self._loop
        if loop is not None and loop is not threading.current_thread():
            loop.join(timeout=5)

    stop = disconnect


def run_reconnect_loop(factory: Callable[[], Session], policy: ReconnectPolicy,
                       fail_fast: bool = True, jitter: bool = True, name: str = "") -> SupervisedSession:
    return SupervisedSession(factory, policy, jitter=jitter, name=name).start(fail_fast)


def open_session(params: ConnectorParams, protocol: str = "stomp") -> Session:
    s = connector_factory(protocol)(params)
    s.connect()
    return s

