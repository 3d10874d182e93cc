"""Producer/consumer factories addressed by pseudo-URL.

    tree = load_config_file("mq.json")
    producer = create_producer(tree, "mq.example.org::Queue::Q2")
    producer.put({"job": 42})
    consumer = create_consumer(tree, "Q2")   # buffered; pass a handler for callbacks
    env = consumer.get(timeout=1.0)

All producers and consumers of one service share a single connection through
the connection manager (the process-wide default unless one is passed in).
"""

from __future__ import annotations

import collections
import logging
import os
import queue
import threading
from typing import Any, Callable

from mqware.config import ConfigTree, ResolvedDestination
from mqware.connector import AckMode, PutResult, SubscriptionSpec
from mqware.errors import ConsumerClosed, NotConnected, ProducerClosed, SendFailed, WrongMode
from mqware.manager import ConnectionManager, Role, UserToken
from mqware.message import MessageEnvelope, make_envelope
from mqware.spool import FailoverSender, Spool

log = logging.getLogger(__name__)

DEFAULT_BUFFER_CAPACITY = 10000
Empty = queue.Empty

_default_manager: ConnectionManager | None = None
_default_lock = threading.Lock()


def default_manager() -> ConnectionManager:
    global _default_manager
    with _default_lock:
        if _default_manager is None:
            _default_manager = ConnectionManager()
        return _default_manager


class Producer:
    def __init__(self, manager: ConnectionManager, session, token: UserToken,
                 destination: ResolvedDestination, confirm: bool = False,
                 spool: Spool | None = None, origin: str | None = None):
        self.manager = manager
        self.session = session
        self.token = token
        self.destination = destination
        self.confirm = confirm
        self.spool = spool
        self.origin = origin or token.token
        self._failover = FailoverSender(session, spool, confirm=confirm) if spool is not None else None
        self._lock = threading.Lock()
        self._closed = False

    @property
    def wire_path(self) -> str:
        return self.destination.wire_path

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, payload: Any) -> PutResult:
        """Send one JSON document.

        Without a spool a failed send raises :class:`SendFailed`; with one the
        message is spooled and ``PutResult.SPOOLED`` returned instead.
        """
        if self._closed:
            raise ProducerClosed(self.token.token)
        env = make_envelope(payload, self.origin, self.wire_path)
        return self.put_envelope(env)

    def put_envelope(self, env: MessageEnvelope) -> PutResult:
        if self._closed:
            raise ProducerClosed(self.token.token)
        if self._failover is not None:
            return self._failover.put(self.wire_path, env)
        with self._lock:
            try:
                return self.session.put(self.wire_path, env, confirm=self.confirm)
            except NotConnected as exc:
                raise SendFailed("not-connected", str(exc)) from exc

    def drain(self) -> int:
        """Replay spooled messages now (no-op without a spool)."""
        return self._failover.drain() if self._failover is not None else 0

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        if self._failover is not None:
            self._failover.close()
        self.manager.release(self.token)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Consumer:
    """Receives messages either through a callback or a bounded buffer.

    The buffer drops its oldest entry when full (``dropped`` counts them) so
    a slow reader never stalls the shared connection.
    """

    def __init__(self, manager: ConnectionManager, session, token: UserToken,
                 destination: ResolvedDestination, handler: Callable[[MessageEnvelope], Any] | None,
                 capacity: int = DEFAULT_BUFFER_CAPACITY, ack_mode: AckMode = AckMode.CLIENT_INDIVIDUAL):
        self.manager = manager
        self.session = session
        self.token = token
        self.destination = destination
        self.handler = handler
        self.capacity = capacity
        self.dropped = 0
        self._buf: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        target = handler if handler is not None else self._enqueue
        self.subscription_id = session.subscribe(SubscriptionSpec(destination.wire_path, target, AckMode(ack_mode)))

    @property
    def buffered(self) -> bool:
        return self.handler is None

    @property
    def closed(self) -> bool:
        return self._closed

    def _enqueue(self, env: MessageEnvelope) -> None:
        with self._cond:
            if len(self._buf) >= self.capacity:
                self._buf.popleft()
                self.dropped += 1
            self._buf.append(env)
            self._cond.notify()

    def get(self, timeout: float | None = None) -> MessageEnvelope:
        """Next buffered envelope in delivery order; raises ``Empty`` on timeout."""
        if self.handler is not None:
            raise WrongMode("get() needs a buffered consumer")
        with self._cond:
            if self._closed:
                raise ConsumerClosed(self.token.token)
            if not self._cond.wait_for(lambda: self._buf or self._closed, timeout):
                raise Empty
            if self._closed:
                raise ConsumerClosed(self.token.token)
            return self._buf.popleft()

    def pending(self) -> int:
        with self._cond:
            return len(self._buf)

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        self.session.unsubscribe(self.subscription_id)
        self.manager.release(self.token)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_producer(tree: ConfigTree, query: str, *, confirm: bool = False,
                    spool: Spool | str | os.PathLike | None = None,
                    manager: ConnectionManager | None = None, origin: str | None = None,
                    fail_fast: bool | None = None) -> Producer:
    """Producer for ``query``; nothing is sent until the first ``put``.

    ``spool`` (a :class:`Spool` or a directory) enables failover.  When a
    spool is attached a refused first connection is tolerated by default.
    """
    manager = manager or default_manager()
    if spool is not None and not isinstance(spool, Spool):
        spool = Spool(spool)
    if fail_fast is None:
        fail_fast = spool is None
    session, token, dest = manager.acquire(tree, query, Role.PRODUCER, fail_fast=fail_fast)
    return Producer(manager, session, token, dest, confirm=confirm, spool=spool, origin=origin)


def create_consumer(tree: ConfigTree, query: str, handler: Callable[[MessageEnvelope], Any] | None = None,
                    *, capacity: int = DEFAULT_BUFFER_CAPACITY, ack_mode: AckMode | str = AckMode.CLIENT_INDIVIDUAL,
                    manager: ConnectionManager | None = None, fail_fast: bool = True) -> Consumer:
    """Consumer for ``query``: callback mode when ``handler`` is given, else buffered."""
    manager = manager or default_manager()
    session, token, dest = manager.acquire(tree, query, Role.CONSUMER, fail_fast=fail_fast)
    try:
        return Consumer(manager, session, token, dest, handler, capacity=capacity, ack_mode=AckMode(ack_mode))
    except BaseException:
        manager.release(token)
        raise


def close(endpoint: Producer | Consumer) -> None:
    endpoint.close()


def put_with_failover(producer: Producer, payload: Any) -> PutResult:
    """Live send, falling back to the producer's spool; only ``DiskFull`` is lossy."""
    if producer.spool is None:
        raise ValueError("put_with_failover needs a producer created with a spool")
    return producer.put(payload)
