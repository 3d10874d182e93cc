"""Disk-backed failover spool.

Messages that cannot be sent are appended to segment files and replayed in
sequence order once the broker is reachable again.  Record layout
(little-endian)::

    "MQSP" | version u8 | seq u64 | enqueued_at_ms u64 | path_len u16 | path
           | body_len u32 | body | crc32c u32 (over everything before it)

Segments are named ``spool-<first seq, 20 digits>.dat``; ``cursor.json``
holds ``{"last_replayed_seq": n}`` and is replaced atomically after each
receipt-confirmed replay batch, so a crash re-sends at most one batch.
"""

from __future__ import annotations

import errno
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import crc32c

from mqware.connector import EventKind, PutResult
from mqware.errors import DiskFull, SendFailed, SpoolError
from mqware.message import MessageEnvelope, envelope_from_bytes, envelope_to_bytes, now_ms

log = logging.getLogger(__name__)

MAGIC = b"MQSP"
FORMAT_VERSION = 1
SEGMENT_BYTES = 64 << 20
REPLAY_BATCH = 100
CURSOR_FILE = "cursor.json"

_HEAD = struct.Struct("<4sBQQH")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class SpoolEntry:
    seq: int
    enqueued_at_ms: int
    wire_path: str
    body: bytes

    def envelope(self) -> MessageEnvelope:
        return envelope_from_bytes(self.body)


def encode_record(entry: SpoolEntry) -> bytes:
    path = entry.wire_path.encode("utf-8")
    data = (
        _HEAD.pack(MAGIC, FORMAT_VERSION, entry.seq, entry.enqueued_at_ms, len(path))
        + path
        + _U32.pack(len(entry.body))
        + entry.body
    )
    return data + _U32.pack(crc32c.crc32c(data))


def decode_records(data: bytes) -> tuple[list[tuple[SpoolEntry, int]], int, bool]:
    """Parse records from the front of ``data``.

    Returns ``(entries with their byte offsets, length of the valid prefix,
    whether a torn/corrupt tail followed)``.
    """
    out = []
    pos, n = 0, len(data)
    while pos < n:
        start = pos
        if n - pos < _HEAD.size:
            return out, start, True
        magic, version, seq, enq, path_len = _HEAD.unpack_from(data, pos)
        if magic != MAGIC or version != FORMAT_VERSION:
            return out, start, True
        pos += _HEAD.size
        if n - pos < path_len + _U32.size:
            return out, start, True
        path = data[pos:pos + path_len]
        pos += path_len
        (body_len,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        if n - pos < body_len + _U32.size:
            return out, start, True
        body = data[pos:pos + body_len]
        pos += body_len
        (crc,) = _U32.unpack_from(data, pos)
        if crc != crc32c.crc32c(data[start:pos]):
            return out, start, True
        pos += _U32.size
        try:
            wire_path = path.decode("utf-8")
        except UnicodeDecodeError:
            return out, start, True
        out.append((SpoolEntry(seq, enq, wire_path, bytes(body)), start))
    return out, pos, False


def segment_name(first_seq: int) -> str:
    return f"spool-{first_seq:020d}.dat"


@dataclass
class _Segment:
    path: Path
    first_seq: int
    last_seq: int
    size: int


class Spool:
    """Spool state for one directory; opening it runs crash recovery."""

    def __init__(self, directory: str | os.PathLike, segment_bytes: int = SEGMENT_BYTES,
                 fsync: bool = False, clock=now_ms):
        self.directory = Path(directory)
        self.segment_bytes = segment_bytes
        self.fsync = fsync
        self.clock = clock
        self.appended = 0
        self.replayed = 0
        self.dropped_corrupt = 0
        self._lock = threading.RLock()
        self._segments: list[_Segment] = []
        # pending index: seq -> (segment path, offset, record length)
        self._index: dict[int, tuple[Path, int, int]] = {}
        self._fd: int | None = None
        self.directory.mkdir(parents=True, exist_ok=True)
        self._recover()

    # recovery

    def _recover(self) -> None:
        self.last_replayed = self._read_cursor()
        prev_seq = 0
        for path in sorted(self.directory.glob("spool-*.dat")):
            data = path.read_bytes()
            records, good, corrupt = decode_records(data)
            kept = []
            for entry, offset in records:
                if entry.seq <= prev_seq:
                    # seq must strictly increase across the whole spool
                    corrupt, good = True, offset
                    break
                kept.append((entry, offset))
                prev_seq = entry.seq
            if corrupt:
                self.dropped_corrupt += 1
                log.warning("spool segment %s: discarding corrupt tail at byte %d", path, good)
                with open(path, "r+b") as fh:
                    fh.truncate(good)
            if not kept:
                path.unlink()
                continue
            for entry, offset in kept:
                if entry.seq > self.last_replayed:
                    length = len(encode_record(entry))
                    self._index[entry.seq] = (path, offset, length)
            self._segments.append(_Segment(path, kept[0][0].seq, kept[-1][0].seq, good))
        self._next_seq = max(prev_seq, self.last_replayed) + 1
        self._gc_segments()

    def _read_cursor(self) -> int:
        path = self.directory / CURSOR_FILE
        try:
            return int(json.loads(path.read_text("utf-8"))["last_replayed_seq"])
        except FileNotFoundError:
            return 0
        except (ValueError, KeyError, TypeError) as exc:
            raise SpoolError(f"unreadable cursor file {path}: {exc}") from exc

    def _write_cursor(self, seq: int) -> None:
        path = self.directory / CURSOR_FILE
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"last_replayed_seq": seq}), encoding="utf-8")
        os.replace(tmp, path)

    # state

    @property
    def cursor(self) -> int:
        """Sequence number of the next entry to replay."""
        with self._lock:
            return min(self._index) if self._index else self.last_replayed + 1

    @property
    def depth(self) -> int:
        return len(self._index)

    def __len__(self) -> int:
        return self.depth

    @property
    def segments(self) -> list[Path]:
        with self._lock:
            return [s.path for s in self._segments]

    def entries(self, start: int | None = None, limit: int | None = None) -> list[SpoolEntry]:
        """Pending entries in sequence order."""
        with self._lock:
            seqs = sorted(s for s in self._index if start is None or s >= start)
            if limit is not None:
                seqs = seqs[:limit]
            locs = [self._index[s] for s in seqs]
        out = []
        handles = {}
        try:
            for path, offset, length in locs:
                fh = handles.get(path) or handles.setdefault(path, open(path, "rb"))
                fh.seek(offset)
                records, _, corrupt = decode_records(fh.read(length))
                if corrupt or not records:
                    raise SpoolError(f"{path}: record at {offset} changed on disk")
                out.append(records[0][0])
        finally:
            for fh in handles.values():
                fh.close()
        return out

    # append

    def append(self, wire_path: str, env: MessageEnvelope) -> int:
        body = envelope_to_bytes(env)
        with self._lock:
            seq = self._next_seq
            record = encode_record(SpoolEntry(seq, int(self.clock()), wire_path, body))
            seg = self._active_segment(seq)
            try:
                _write_all(self._fd, record)
                if self.fsync:
                    os.fsync(self._fd)
            except OSError as exc:
                # drop any torn bytes so later records stay readable
                try:
                    os.ftruncate(self._fd, seg.size)
                except OSError:
                    pass
                if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                    raise DiskFull(f"spool {self.directory}: {exc}") from exc
                raise SpoolError(f"spool {self.directory}: {exc}") from exc
            self._index[seq] = (seg.path, seg.size, len(record))
            seg.size += len(record)
            seg.last_seq = seq
            self._next_seq = seq + 1
            self.appended += 1
            return seq

    def _active_segment(self, seq: int) -> _Segment:
        seg = self._segments[-1] if self._segments else None
        if seg is None or seg.size >= self.segment_bytes:
            self._close_fd()
            seg = _Segment(self.directory / segment_name(seq), seq, seq - 1, 0)
            self._segments.append(seg)
        if self._fd is None:
            self._fd = os.open(seg.path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        return seg

    def _close_fd(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    # replay

    def mark_replayed(self, seq: int) -> None:
        with self._lock:
            for s in [s for s in self._index if s <= seq]:
                del self._index[s]
            self.last_replayed = max(self.last_replayed, seq)
            self._write_cursor(self.last_replayed)
            self._gc_segments()

    def _gc_segments(self) -> None:
        keep = []
        for seg in self._segments:
            if seg.last_seq <= self.last_replayed:
                if self._segments and seg is self._segments[-1]:
                    self._close_fd()
                seg.path.unlink(missing_ok=True)
            else:
                keep.append(seg)
        self._segments = keep

    def replay(self, session, batch_size: int = REPLAY_BATCH) -> int:
        """Send pending entries in order, ``batch_size`` per receipt round.

        The cursor only advances after a whole batch is confirmed.  On failure
        raises :class:`SendFailed` with ``replayed`` set to the count sent so
        far.
        """
        total = 0
        while True:
            batch = self.entries(limit=batch_size)
            if not batch:
                return total
            items = [(e.wire_path, e.envelope()) for e in batch]
            try:
                session.send_batch(items)
            except SendFailed as exc:
                exc.replayed = total
                raise
            self.mark_replayed(batch[-1].seq)
            self.replayed += len(batch)
            total += len(batch)

    def close(self) -> None:
        with self._lock:
            self._close_fd()


def recover(directory: str | os.PathLike, **kwargs) -> Spool:
    return Spool(directory, **kwargs)


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        n = os.write(fd, view)
        view = view[n:]


class FailoverSender:
    """Live send with spool fallback and background drain.

    Live sends wait while the spool drains, so per-destination order holds
    across the spooled/live boundary.
    """

    def __init__(self, session, spool: Spool, confirm: bool = True, drain_interval: float = 1.0):
        self.session = session
        self.spool = spool
        self.confirm = confirm
        self.drain_interval = drain_interval
        self._lock = threading.RLock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        session.add_listener(self._on_event)
        self._thread = threading.Thread(target=self._drain_loop, name="spool-drain", daemon=True)
        self._thread.start()

    def put(self, wire_path: str, env: MessageEnvelope) -> PutResult:
        with self._lock:
            if self.spool.depth:
                self._drain_locked()
            if not self.spool.depth:
                try:
                    self.session.put(wire_path, env, confirm=self.confirm)
                    return PutResult.DELIVERED
                except SendFailed as exc:
                    log.info("live send failed (%s), spooling", exc)
            self.spool.append(wire_path, env)
            self._wake.set()
            return PutResult.SPOOLED

    def drain(self) -> int:
        with self._lock:
            return self._drain_locked()

    def _drain_locked(self) -> int:
        if not self.spool.depth or not self.session.is_connected:
            return 0
        try:
            return self.spool.replay(self.session)
        except SendFailed as exc:
            log.info("spool replay stopped after %d: %s", getattr(exc, "replayed", 0), exc)
            return getattr(exc, "replayed", 0)

    def _on_event(self, ev) -> None:
        if ev.kind is EventKind.CONNECTED:
            self._wake.set()

    def _drain_loop(self) -> None:
        while not self._stop.is_set():
            self._wake.wait(self.drain_interval)
            self._wake.clear()
            if self._stop.is_set():
                return
            if self.spool.depth and self.session.is_connected:
                self.drain()

    def close(self) -> None:
        self._stop.set()
        self._wake.set()
        self.session.remove_listener(self._on_event)
        if self._thread is not threading.current_thread():
            self._thread.join(timeout=5)
