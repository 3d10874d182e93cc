"""Pilot log pipeline: shipper -> HTTP gateway -> MQ -> sink."""

from mqware.pipeline.gateway import Gateway, GatewayConfig, hash_token, verify_token
from mqware.pipeline.records import PilotLogRecord, RecordError, parse_line
from mqware.pipeline.shipper import (
    DeliveryFailed,
    SourceUnreadable,
    http_sender,
    producer_sender,
    ship_logs,
)
from mqware.pipeline.sink import LogSink, sink_run

__all__ = [
    "DeliveryFailed",
    "Gateway",
    "GatewayConfig",
    "LogSink",
    "PilotLogRecord",
    "RecordError",
    "SourceUnreadable",
    "hash_token",
    "http_sender",
    "parse_line",
    "producer_sender",
    "ship_logs",
    "sink_run",
    "verify_token",
]
