"""Pilot-side log shipper: tail a file, wrap lines as records, send in batches."""

from __future__ import annotations

import io
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from typing import Callable, Iterable, TextIO

from mqware.errors import MQError, SendFailed
from mqware.message import now_ms
from mqware.pipeline.records import PilotLogRecord, parse_line

log = logging.getLogger(__name__)

BATCH_SIZE = 50
BATCH_INTERVAL = 2.0
RETRY_BUDGET = 5


class SourceUnreadable(MQError, OSError):
    pass


class DeliveryFailed(MQError):
    def __init__(self, msg: str, shipped: int):
        super().__init__(msg)
        self.shipped = shipped


def http_sender(url: str, token: str, timeout: float = 10.0) -> Callable[[list[PilotLogRecord]], None]:
    """Batch sender posting to a gateway's ``/v1/logs``.

    Raises ``DeliveryFailed`` for a 4xx reply (not retried) and
    ``ConnectionError`` for anything worth retrying.
    """
    endpoint = url.rstrip("/") + "/v1/logs"

    def send(batch: list[PilotLogRecord]) -> None:
        body = json.dumps([r.to_dict() for r in batch]).encode("utf-8")
        req = urllib.request.Request(endpoint, data=body, method="POST", headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {token}",
        })
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                resp.read()
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            if 400 <= exc.code < 500:
                raise DeliveryFailed(f"gateway rejected batch: {exc.code} {detail}", 0) from exc
            raise ConnectionError(f"gateway error {exc.code}: {detail}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise ConnectionError(f"gateway unreachable: {exc}") from exc

    return send


def producer_sender(producer, principal: str | None = None, clock=now_ms) -> Callable[[list[PilotLogRecord]], None]:
    """Batch sender putting records straight onto the MQ (stamped like the gateway does)."""
    principal = principal or producer.origin

    def send(batch: list[PilotLogRecord]) -> None:
        received = int(clock())
        for rec in batch:
            try:
                producer.put({**rec.to_dict(), "received-at-ms": received, "principal": principal})
            except SendFailed as exc:
                raise ConnectionError(str(exc)) from exc

    return send


def _lines(stream: TextIO, follow: bool, stop: threading.Event, poll: float) -> Iterable[str | None]:
    """Complete lines from ``stream``; yields None while idle in follow mode."""
    partial = ""
    while True:
        chunk = stream.readline()
        if chunk:
            partial += chunk
            if partial.endswith("\n"):
                yield partial
                partial = ""
            continue
        if not follow or stop.is_set():
            if partial:
                yield partial
            return
        yield None
        stop.wait(poll)


def ship_logs(source: str | os.PathLike | TextIO, send: Callable[[list[PilotLogRecord]], None], *,
              pilot_uuid: str, source_label: str = "", batch_size: int = BATCH_SIZE,
              batch_interval: float = BATCH_INTERVAL, follow: bool = False,
              stop: threading.Event | None = None, retries: int = RETRY_BUDGET,
              retry_delay: float = 0.5, poll: float = 0.2, clock=time.monotonic) -> int:
    """Ship every line of ``source``; returns the number of records delivered.

    A batch goes out at ``batch_size`` records or ``batch_interval`` seconds,
    whichever comes first.  Each batch gets ``retries`` further attempts with
    doubling delays before ``DeliveryFailed`` is raised.
    """
    PilotLogRecord.from_dict({"pilot_uuid": pilot_uuid, "timestamp": "1970-01-01T00:00:00Z", "message": ""})
    stop = stop or threading.Event()
    own = None
    if isinstance(source, (str, os.PathLike)):
        try:
            own = stream = open(source, "r", encoding="utf-8", errors="replace", newline="")
        except OSError as exc:
            raise SourceUnreadable(f"cannot read {source}: {exc}") from exc
    else:
        stream = source
        if isinstance(stream, io.IOBase) and not stream.readable():
            raise SourceUnreadable(f"{stream!r} is not readable")

    shipped = 0
    batch: list[PilotLogRecord] = []
    started = clock()

    def flush() -> None:
        nonlocal shipped, batch
        if not batch:
            return
        delay = retry_delay
        for attempt in range(retries + 1):
            try:
                send(batch)
                break
            except ConnectionError as exc:
                if attempt == retries:
                    raise DeliveryFailed(f"giving up after {retries + 1} attempts: {exc}", shipped) from exc
                log.info("batch send failed (%s); retrying in %.1fs", exc, delay)
                time.sleep(delay)
                delay *= 2
            except DeliveryFailed as exc:
                exc.shipped = shipped
                raise
        shipped += len(batch)
        batch = []

    try:
        for line in _lines(stream, follow, stop, poll):
            if line is not None:
                if not batch:
                    started = clock()
                batch.append(parse_line(line, pilot_uuid, source_label))
            if len(batch) >= batch_size or (batch and clock() - started >= batch_interval):
                flush()
        flush()
    finally:
        if own is not None:
            own.close()
    return shipped
