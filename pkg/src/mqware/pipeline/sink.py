"""Storage end of the log pipeline: one JSON-lines file per pilot.

Records are written (and flushed to the OS) before the message is acked, so a
crash between write and ack produces a redelivery that the message-id window
then suppresses.  A failed write raises, which NACKs the message; the broker
dead-letters it after repeated failures.
"""

from __future__ import annotations

import collections
import logging
import os
import threading
import time
from pathlib import Path

from mqware.api import Consumer, create_consumer
from mqware.config import ConfigTree
from mqware.connector import AckMode
from mqware.message import MessageEnvelope, canonical_json
from mqware.pipeline.records import MALFORMED_FILE, PilotLogRecord, RecordError

log = logging.getLogger(__name__)

DEDUP_WINDOW = 100_000
FSYNC_EVERY = 100
FSYNC_INTERVAL = 1.0


class DedupWindow:
    """Sliding set of the most recent ``size`` ids."""

    def __init__(self, size: int = DEDUP_WINDOW):
        self.size = size
        self._ids: collections.OrderedDict[str, None] = collections.OrderedDict()

    def __contains__(self, key: str) -> bool:
        return key in self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def add(self, key: str) -> None:
        self._ids[key] = None
        self._ids.move_to_end(key)
        while len(self._ids) > self.size:
            self._ids.popitem(last=False)


class LogSink:
    def __init__(self, output_dir: str | os.PathLike, dedup_window: int = DEDUP_WINDOW,
                 fsync_every: int = FSYNC_EVERY, fsync_interval: float = FSYNC_INTERVAL,
                 clock=time.monotonic):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.seen = DedupWindow(dedup_window)
        self.fsync_every = fsync_every
        self.fsync_interval = fsync_interval
        self.clock = clock
        self.written = 0
        self.duplicates = 0
        self.quarantined = 0
        self.consumer: Consumer | None = None
        self._files: dict[str, object] = {}
        self._unsynced = 0
        self._last_sync = clock()
        self._lock = threading.Lock()

    def handle(self, env: MessageEnvelope) -> None:
        """Consumer callback; raising here NACKs the message."""
        with self._lock:
            mid = env.message_id
            if mid in self.seen:
                self.duplicates += 1
                return
            payload = env.payload
            try:
                rec = PilotLogRecord.from_dict(payload, allow_stamps=True)
            except RecordError as exc:
                log.warning("quarantining message %s: %s", mid, exc)
                self._append(MALFORMED_FILE, {"message-id": mid, "error": str(exc), "payload": payload})
                self.quarantined += 1
            else:
                self._append(f"{rec.pilot_uuid}.log", payload)
                self.written += 1
            self.seen.add(mid)

    def _append(self, name: str, doc) -> None:
        fh = self._files.get(name)
        if fh is None:
            fh = self._files[name] = open(self.output_dir / name, "ab")
        try:
            fh.write(canonical_json(doc) + b"\n")
            fh.flush()
        except OSError:
            # reopen next time; a partial line may remain but the message is redelivered
            self._files.pop(name, None)
            fh.close()
            raise
        self._unsynced += 1
        now = self.clock()
        if self._unsynced >= self.fsync_every or now - self._last_sync >= self.fsync_interval:
            self._sync()

    def _sync(self) -> None:
        for fh in self._files.values():
            os.fsync(fh.fileno())
        self._unsynced = 0
        self._last_sync = self.clock()

    def start(self, tree: ConfigTree, query: str, manager=None, fail_fast: bool = True) -> "LogSink":
        self.consumer = create_consumer(tree, query, self.handle, ack_mode=AckMode.CLIENT_INDIVIDUAL,
                                        manager=manager, fail_fast=fail_fast)
        return self

    def stop(self) -> None:
        if self.consumer is not None:
            self.consumer.close()
            self.consumer = None
        with self._lock:
            if self._files:
                self._sync()
            for fh in self._files.values():
                fh.close()
            self._files.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def sink_run(tree: ConfigTree, query: str, output_dir: str | os.PathLike,
             stop: threading.Event | None = None, manager=None, fail_fast: bool = True) -> LogSink:
    """Consume ``query`` into ``output_dir`` until ``stop`` is set (or forever)."""
    sink = LogSink(output_dir).start(tree, query, manager=manager, fail_fast=fail_fast)
    stop = stop or threading.Event()
    try:
        while not stop.wait(0.5):
            pass
    finally:
        sink.stop()
    return sink
