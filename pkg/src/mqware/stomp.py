"""STOMP 1.2 frame encoding, incremental decoding and heart-beat negotiation."""

from __future__ import annotations

from dataclasses import dataclass, field

from mqware.errors import IllegalHeaderCharacter, ProtocolViolation

VERSION = "1.2"
MAX_FRAME_SIZE = 1 << 20

HEARTBEAT = "HEARTBEAT"
CLIENT_COMMANDS = frozenset({
    "CONNECT", "STOMP", "SEND", "SUBSCRIBE", "UNSUBSCRIBE", "ACK", "NACK",
    "BEGIN", "COMMIT", "ABORT", "DISCONNECT",
})
SERVER_COMMANDS = frozenset({"CONNECTED", "MESSAGE", "RECEIPT", "ERROR"})
COMMANDS = CLIENT_COMMANDS | SERVER_COMMANDS | {HEARTBEAT}
BODY_COMMANDS = frozenset({"SEND", "MESSAGE", "ERROR"})
# header values in these frames are sent verbatim
UNESCAPED_COMMANDS = frozenset({"CONNECT", "CONNECTED"})

_ESCAPE = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", ":": "\\c"}
_UNESCAPE = {"\\": "\\", "n": "\n", "r": "\r", "c": ":"}


@dataclass(frozen=True)
class StompFrame:
    command: str
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    def __post_init__(self):
        if not isinstance(self.headers, tuple):
            object.__setattr__(self, "headers", tuple((k, v) for k, v in self.headers))

    def get(self, key: str, default: str | None = None) -> str | None:
        # first occurrence of a repeated header wins
        for k, v in self.headers:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> str:
        value = self.get(key)
        if value is None:
            raise KeyError(key)
        return value

    def __contains__(self, key: str) -> bool:
        return self.get(key) is not None

    def canonical(self) -> "StompFrame":
        """The frame exactly as ``decode_stream(encode_frame(self))`` returns it."""
        if self.command not in BODY_COMMANDS:
            return self
        return StompFrame(self.command, _with_content_length(self.headers, len(self.body)), self.body)


def frame(command: str, headers=None, body: bytes = b"") -> StompFrame:
    items = headers.items() if isinstance(headers, dict) else (headers or ())
    return StompFrame(command, tuple((str(k), str(v)) for k, v in items), body)


HEARTBEAT_FRAME = StompFrame(HEARTBEAT)


def escape(s: str) -> str:
    if "\0" in s:
        raise IllegalHeaderCharacter(f"NUL in header {s!r}")
    return "".join(_ESCAPE.get(ch, ch) for ch in s)


def unescape(s: str) -> str:
    if "\\" not in s:
        return s
    out = []
    it = iter(s)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        if nxt not in _UNESCAPE:
            raise ProtocolViolation(f"undefined escape sequence \\{nxt or ''} in {s!r}")
        out.append(_UNESCAPE[nxt])
    return "".join(out)


def _with_content_length(headers, length: int) -> tuple[tuple[str, str], ...]:
    out, seen = [], False
    for k, v in headers:
        if k == "content-length":
            if seen:
                continue
            v, seen = str(length), True
        out.append((k, v))
    if not seen:
        out.append(("content-length", str(length)))
    return tuple(out)


def encode_frame(f: StompFrame) -> bytes:
    if f.command == HEARTBEAT:
        return b"\n"
    if f.command not in COMMANDS:
        raise ProtocolViolation(f"unknown command {f.command!r}")
    if f.body and f.command not in BODY_COMMANDS:
        raise ProtocolViolation(f"{f.command} frames carry no body")
    headers = f.headers
    if f.command in BODY_COMMANDS:
        headers = _with_content_length(headers, len(f.body))
    lines = [f.command]
    if f.command in UNESCAPED_COMMANDS:
        for k, v in headers:
            for part in (k, v):
                if any(c in part for c in "\0\r\n"):
                    raise IllegalHeaderCharacter(f"illegal character in {f.command} header {part!r}")
            if ":" in k:
                raise IllegalHeaderCharacter(f"colon in {f.command} header name {k!r}")
            lines.append(f"{k}:{v}")
    else:
        lines.extend(f"{escape(k)}:{escape(v)}" for k, v in headers)
    head = "\n".join(lines).encode("utf-8")
    return head + b"\n\n" + f.body + b"\0"


class StompDecoder:
    """Incremental frame decoder; feed it arbitrary byte chunks.

    One instance per connection, not thread-safe.
    """

    def __init__(self, max_frame_size: int = MAX_FRAME_SIZE):
        self.max_frame_size = max_frame_size
        self._buf = bytearray()
        # bytes of the current partial frame already scanned for the header end
        self._scanned = 0

    @property
    def remainder(self) -> bytes:
        return bytes(self._buf)

    def feed(self, data: bytes) -> list[StompFrame]:
        self._buf += data
        frames = []
        while True:
            f = self._next()
            if f is None:
                return frames
            frames.append(f)

    def _next(self) -> StompFrame | None:
        buf = self._buf
        if not buf:
            return None
        if buf[0] == 0x0A:
            del buf[:1]
            return HEARTBEAT_FRAME
        if buf[0] == 0x0D:
            if len(buf) < 2:
                return None
            if buf[1] != 0x0A:
                raise ProtocolViolation("bare carriage return between frames")
            del buf[:2]
            return HEARTBEAT_FRAME

        end = buf.find(b"\n\n", max(0, self._scanned - 1))
        end_crlf = buf.find(b"\n\r\n", max(0, self._scanned - 2))
        candidates = [(e, 2) for e in (end,) if e >= 0] + [(e, 3) for e in (end_crlf,) if e >= 0]
        if not candidates:
            self._scanned = len(buf)
            if len(buf) > self.max_frame_size:
                raise ProtocolViolation("frame exceeds max frame size")
            return None
        head_end, sep = min(candidates)
        body_start = head_end + sep
        command, headers = self._parse_head(bytes(buf[:head_end]))

        length = None
        for k, v in headers:
            if k == "content-length":
                if not v.isascii() or not v.isdigit():
                    raise ProtocolViolation(f"bad content-length {v!r}")
                length = int(v)
                break
        if length is not None:
            if body_start + length + 1 > self.max_frame_size:
                raise ProtocolViolation("frame exceeds max frame size")
            if len(buf) < body_start + length + 1:
                self._scanned = head_end
                return None
            if buf[body_start + length] != 0:
                raise ProtocolViolation("frame body not NUL-terminated at content-length")
            nul = body_start + length
        else:
            nul = buf.find(b"\0", body_start)
            if nul < 0:
                if len(buf) > self.max_frame_size:
                    raise ProtocolViolation("frame exceeds max frame size")
                self._scanned = head_end
                return None
        if nul + 1 > self.max_frame_size:
            raise ProtocolViolation("frame exceeds max frame size")
        body = bytes(buf[body_start:nul])
        del buf[: nul + 1]
        self._scanned = 0
        return StompFrame(command, headers, body)

    @staticmethod
    def _parse_head(raw: bytes) -> tuple[str, tuple[tuple[str, str], ...]]:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolViolation(f"frame head is not UTF-8: {exc}") from exc
        lines = text.split("\n")
        lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
        command = lines[0]
        if command not in COMMANDS or command == HEARTBEAT:
            raise ProtocolViolation(f"unknown command {command!r}")
        verbatim = command in UNESCAPED_COMMANDS
        headers = []
        for line in lines[1:]:
            key, colon, value = line.partition(":")
            if not colon:
                raise ProtocolViolation(f"header line without colon: {line!r}")
            if not verbatim:
                key, value = unescape(key), unescape(value)
            headers.append((key, value))
        return command, tuple(headers)


def decode_stream(buffer: bytes, max_frame_size: int = MAX_FRAME_SIZE) -> tuple[list[StompFrame], bytes]:
    decoder = StompDecoder(max_frame_size)
    frames = decoder.feed(buffer)
    return frames, decoder.remainder


# -- heart-beating -----------------------------------------------------------


@dataclass(frozen=True)
class HeartbeatPlan:
    send_interval_ms: int = 0
    recv_timeout_ms: int = 0


def negotiate_heartbeat(client: tuple[int, int], server: tuple[int, int]) -> HeartbeatPlan:
    """Plan from the perspective of the side declaring ``client``.

    Symmetric: the server computes its own plan by swapping the arguments.
    """
    cx, cy = client
    sx, sy = server
    if min(cx, cy, sx, sy) < 0:
        raise ValueError("heart-beat values must be non-negative")
    send = 0 if cx == 0 or sy == 0 else max(cx, sy)
    recv = 0 if sx == 0 or cy == 0 else max(sx, cy)
    return HeartbeatPlan(send, recv)


def parse_heartbeat_header(value: str | None) -> tuple[int, int]:
    if not value:
        return 0, 0
    try:
        a, b = value.split(",")
        x, y = int(a), int(b)
    except ValueError:
        raise ProtocolViolation(f"bad heart-beat header {value!r}") from None
    if x < 0 or y < 0:
        raise ProtocolViolation(f"bad heart-beat header {value!r}")
    return x, y


def format_heartbeat_header(decl: tuple[int, int]) -> str:
    return f"{decl[0]},{decl[1]}"
