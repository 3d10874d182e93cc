"""JSON message envelope.

The payload travels as the frame body in canonical JSON (sorted keys, no
insignificant whitespace, UTF-8).  Transport metadata travels as protocol
headers, never inside the body.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from mqware.errors import InvalidJson, InvalidUtf8

MESSAGE_ID = "message-id"
TIMESTAMP_MS = "timestamp-ms"
DESTINATION = "destination"
ORIGIN = "origin"
ENVELOPE_HEADERS = (MESSAGE_ID, TIMESTAMP_MS, DESTINATION, ORIGIN)

# flags set by decode_message when a header had to be synthesized
SYNTHESIZED_ID = "synthesized-message-id"
SYNTHESIZED_TIMESTAMP = "synthesized-timestamp"


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def new_message_id() -> str:
    return os.urandom(16).hex()


def canonical_json(value: Any) -> bytes:
    try:
        text = json.dumps(
            value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
        )
    except (TypeError, ValueError) as exc:
        raise InvalidJson(f"payload is not a JSON document: {exc}") from exc
    return text.encode("utf-8")


def parse_json(body: bytes) -> Any:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8(str(exc)) from exc
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise InvalidJson(f"{exc.msg} at position {exc.pos}") from exc


def _reject_constant(name):
    raise InvalidJson(f"{name} is not valid JSON")


@dataclass(frozen=True)
class MessageEnvelope:
    payload: Any
    headers: Mapping[str, str]
    redelivered: bool = False
    flags: frozenset = field(default_factory=frozenset)

    @property
    def message_id(self) -> str:
        return self.headers[MESSAGE_ID]

    @property
    def timestamp_ms(self) -> int:
        return int(self.headers[TIMESTAMP_MS])

    @property
    def destination(self) -> str:
        return self.headers.get(DESTINATION, "")

    @property
    def origin(self) -> str:
        return self.headers.get(ORIGIN, "")


def make_envelope(
    payload: Any,
    origin: str,
    destination: str,
    clock: Callable[[], int] = now_ms,
) -> MessageEnvelope:
    canonical_json(payload)  # validates
    headers = {
        MESSAGE_ID: new_message_id(),
        TIMESTAMP_MS: str(int(clock())),
        DESTINATION: destination,
        ORIGIN: origin,
    }
    return MessageEnvelope(payload, headers)


def encode_message(env: MessageEnvelope) -> bytes:
    """Body bytes for ``env``; send ``env.headers`` alongside as frame headers."""
    return canonical_json(env.payload)


def decode_message(
    body: bytes, headers: Mapping[str, str], clock: Callable[[], int] = now_ms
) -> MessageEnvelope:
    payload = parse_json(body)
    out = {k: headers[k] for k in ENVELOPE_HEADERS if k in headers}
    flags = set()
    if not out.get(MESSAGE_ID):
        out[MESSAGE_ID] = new_message_id()
        flags.add(SYNTHESIZED_ID)
    ts = out.get(TIMESTAMP_MS, "")
    if not (ts.isascii() and ts.isdigit()):
        out[TIMESTAMP_MS] = str(int(clock()))
        flags.add(SYNTHESIZED_TIMESTAMP)
    return MessageEnvelope(
        payload,
        out,
        redelivered=headers.get("redelivered") == "true",
        flags=frozenset(flags),
    )


def envelope_to_bytes(env: MessageEnvelope) -> bytes:
    """Self-contained canonical form (headers + payload), used by the spool."""
    return canonical_json({"headers": dict(env.headers), "payload": env.payload})


def envelope_from_bytes(data: bytes) -> MessageEnvelope:
    doc = parse_json(data)
    return MessageEnvelope(doc["payload"], doc["headers"])
