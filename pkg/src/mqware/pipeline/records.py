"""Pilot log records and the shipper's line grammar."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

SEVERITIES = ("DEBUG", "INFO", "WARNING", "ERROR")
DEFAULT_PHASE = "unknown"
FIELDS = ("pilot_uuid", "timestamp", "phase", "severity", "message", "source")
STAMP_FIELDS = ("received-at-ms", "principal")
MALFORMED_FILE = "_malformed.log"

_UUID = re.compile(r"^[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$")


class RecordError(ValueError):
    def __init__(self, field: str, msg: str):
        self.field = field
        super().__init__(f"{field}: {msg}")


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _check_timestamp(value: str) -> None:
    text = value[:-1] + "+00:00" if value.endswith("Z") else value
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise RecordError("timestamp", f"not ISO-8601: {value!r}") from None
    if ts.utcoffset() is None or ts.utcoffset().total_seconds() != 0:
        raise RecordError("timestamp", f"not UTC: {value!r}")


@dataclass(frozen=True)
class PilotLogRecord:
    pilot_uuid: str
    timestamp: str
    message: str
    phase: str = DEFAULT_PHASE
    severity: str = "INFO"
    source: str = ""

    @classmethod
    def from_dict(cls, raw, allow_stamps: bool = False) -> "PilotLogRecord":
        """Validate a decoded JSON object; the error names the first bad field."""
        if not isinstance(raw, dict):
            raise RecordError("<record>", "expected a JSON object")
        allowed = set(FIELDS) | (set(STAMP_FIELDS) if allow_stamps else set())
        for key in raw:
            if key not in allowed:
                raise RecordError(key, "unknown field")
        for name in FIELDS:
            mandatory = name in ("pilot_uuid", "timestamp", "message")
            if name not in raw:
                if mandatory:
                    raise RecordError(name, "missing")
                continue
            if not isinstance(raw[name], str):
                raise RecordError(name, "must be a string")
            if name == "pilot_uuid" and not _UUID.match(raw[name]):
                raise RecordError(name, f"not an RFC-4122 UUID: {raw[name]!r}")
            if name == "timestamp":
                _check_timestamp(raw[name])
            if name == "severity" and raw[name] not in SEVERITIES:
                raise RecordError(name, f"must be one of {', '.join(SEVERITIES)}")
        return cls(**{k: raw[k] for k in FIELDS if k in raw})

    def to_dict(self) -> dict:
        return asdict(self)


def parse_line(line: str, pilot_uuid: str, source: str = "", timestamp: str | None = None) -> PilotLogRecord:
    """Wrap one log line, honouring an optional ``PHASE|SEVERITY|message`` prefix."""
    text = line.rstrip("\r\n")
    phase, severity, message = DEFAULT_PHASE, "INFO", text
    parts = text.split("|", 2)
    if len(parts) == 3 and parts[1].strip().upper() in SEVERITIES and parts[0].strip():
        phase, severity, message = parts[0].strip(), parts[1].strip().upper(), parts[2]
    return PilotLogRecord(
        pilot_uuid=pilot_uuid,
        timestamp=timestamp or utc_now_iso(),
        message=message,
        phase=phase,
        severity=severity,
        source=source,
    )
