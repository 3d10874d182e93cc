"""Shared connections: one physical connection per MQ service.

Every producer/consumer acquires a token against its service's connection
record; the connection is opened by the first acquire and closed when the last
token is released.  One lock guards the record map and user sets; connection
establishment and teardown happen outside it.  Records move through
OPENING -> LIVE -> DRAINING, and an acquire that finds a record OPENING or
DRAINING waits for it to settle, so at most one connection per service ever
exists.
"""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable

from mqware.config import ConfigTree, DestinationSpec, MQServiceConfig, ResolvedDestination, resolve
from mqware.connector import ConnectorParams, SupervisedSession, connector_factory
from mqware.errors import UnknownToken


class Role(str, enum.Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"


class ReleaseResult(str, enum.Enum):
    CLOSED = "closed"
    STILL_SHARED = "still-shared"


class _State(enum.Enum):
    OPENING = 1
    LIVE = 2
    DRAINING = 3


@dataclass(frozen=True)
class UserToken:
    token: str
    role: Role
    service_id: str

    def __str__(self) -> str:
        return self.token


@dataclass
class ConnectionRecord:
    key: str
    session: SupervisedSession | None = None
    users: dict[UserToken, DestinationSpec] = field(default_factory=dict)
    state: _State = _State.OPENING


@dataclass(frozen=True)
class ConnectionInfo:
    key: str
    users: int
    connected: bool


def default_session_factory(service: MQServiceConfig, jitter: bool = True) -> SupervisedSession:
    params = ConnectorParams.from_service(service)
    factory = connector_factory(service.protocol)
    return SupervisedSession(lambda: factory(params), service.reconnect, jitter=jitter, name=service.service_id)


class ConnectionManager:
    def __init__(self, session_factory: Callable[[MQServiceConfig], SupervisedSession] | None = None,
                 jitter: bool = True):
        self._make_session = session_factory or (lambda svc: default_session_factory(svc, jitter))
        self._cond = threading.Condition(threading.Lock())
        self._records: dict[str, ConnectionRecord] = {}
        self._owner: dict[UserToken, str] = {}
        self._counter = itertools.count(1)

    def acquire(self, tree: ConfigTree, query: str, role: Role | str,
                fail_fast: bool = True) -> tuple[SupervisedSession, UserToken, ResolvedDestination]:
        """Register a user of ``query``'s service, connecting if needed.

        With ``fail_fast=False`` a refused first connection does not raise;
        the session keeps retrying in the background instead.
        """
        role = Role(role)
        dest = resolve(tree, query)
        key = dest.service.service_id
        with self._cond:
            n = next(self._counter)
            token = UserToken(f"{key}/{dest.spec.kind.value}/{dest.spec.name}/{role.value}{n}", role, key)
            while True:
                rec = self._records.get(key)
                if rec is None:
                    rec = self._records[key] = ConnectionRecord(key)
                    break
                if rec.state is _State.LIVE:
                    rec.users[token] = dest.spec
                    self._owner[token] = key
                    return rec.session, token, dest
                self._cond.wait()

        # this thread opens the connection, outside the lock
        try:
            session = self._make_session(dest.service)
            session.start(fail_fast=fail_fast)
        except BaseException:
            with self._cond:
                del self._records[key]
                self._cond.notify_all()
            raise
        with self._cond:
            rec.session = session
            rec.state = _State.LIVE
            rec.users[token] = dest.spec
            self._owner[token] = key
            self._cond.notify_all()
        return session, token, dest

    def release(self, token: UserToken) -> ReleaseResult:
        with self._cond:
            key = self._owner.pop(token, None)
            if key is None:
                raise UnknownToken(str(token))
            rec = self._records[key]
            del rec.users[token]
            if rec.users:
                return ReleaseResult.STILL_SHARED
            rec.state = _State.DRAINING
        try:
            rec.session.disconnect()
        finally:
            with self._cond:
                if self._records.get(key) is rec:
                    del self._records[key]
                self._cond.notify_all()
        return ReleaseResult.CLOSED

    def active_connections(self) -> list[ConnectionInfo]:
        with self._cond:
            return [
                ConnectionInfo(key, len(rec.users), rec.session.is_connected)
                for key, rec in sorted(self._records.items())
                if rec.state is _State.LIVE
            ]

    def outstanding_tokens(self) -> list[UserToken]:
        """Tokens handed out by ``acquire`` and not yet released."""
        with self._cond:
            return sorted(self._owner, key=lambda t: t.token)

    def session_for(self, service_id: str) -> SupervisedSession | None:
        with self._cond:
            rec = self._records.get(service_id)
            return rec.session if rec is not None and rec.state is _State.LIVE else None

    def stop_all(self) -> int:
        with self._cond:
            while any(r.state is not _State.LIVE for r in self._records.values()):
                self._cond.wait()
            records = list(self._records.values())
            for rec in records:
                rec.state = _State.DRAINING
                for token in rec.users:
                    self._owner.pop(token, None)
                rec.users.clear()
        for rec in records:
            rec.session.disconnect()
        with self._cond:
            for rec in records:
                if self._records.get(rec.key) is rec:
                    del self._records[rec.key]
            self._cond.notify_all()
        return len(records)
