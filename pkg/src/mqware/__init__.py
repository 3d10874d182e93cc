"""Message-queue toolkit: pseudo-URL destinations, shared STOMP connections,
failover spooling, an embeddable broker and a pilot-log pipeline."""

from mqware.api import (
    Consumer,
    Empty,
    Producer,
    close,
    create_consumer,
    create_producer,
    default_manager,
    put_with_failover,
)
from mqware.broker import Broker, BrokerConfig
from mqware.config import (
    ConfigTree,
    DestinationSpec,
    Kind,
    MQServiceConfig,
    load_config,
    load_config_file,
    parse_pseudo_url,
    resolve,
    validate,
)
from mqware.connector import AckMode, DisconnectReason, EventKind, PutResult
from mqware.manager import ConnectionManager, ReleaseResult, Role
from mqware.message import MessageEnvelope, decode_message, encode_message, make_envelope
from mqware.spool import Spool, recover

__all__ = [
    "AckMode",
    "Broker",
    "BrokerConfig",
    "ConfigTree",
    "ConnectionManager",
    "Consumer",
    "DestinationSpec",
    "DisconnectReason",
    "Empty",
    "EventKind",
    "Kind",
    "MQServiceConfig",
    "MessageEnvelope",
    "Producer",
    "PutResult",
    "ReleaseResult",
    "Role",
    "Spool",
    "close",
    "create_consumer",
    "create_producer",
    "decode_message",
    "default_manager",
    "encode_message",
    "load_config",
    "load_config_file",
    "make_envelope",
    "parse_pseudo_url",
    "put_with_failover",
    "recover",
    "resolve",
    "validate",
]
