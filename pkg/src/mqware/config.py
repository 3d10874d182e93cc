"""MQ resource configuration and pseudo-URL resolution.

A pseudo-URL names one configured destination as ``service::Kind::Name``,
e.g. ``mq.example.org::Queue::Q2``.  Destinations must be declared under
their service's ``Queues`` or ``Topics`` section before they can be resolved.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mqware.errors import (
    AmbiguousShorthand,
    ConfigError,
    InvalidKind,
    MalformedPseudoUrl,
    ParseError,
    SchemaError,
    UndeclaredDestination,
    UnknownService,
)

SEPARATOR = "::"
DEFAULT_PORT = 61613
DEFAULT_HEARTBEAT_MS = 10000
DEFAULT_INITIAL_BACKOFF_MS = 500
DEFAULT_MAX_BACKOFF_MS = 30000
DEFAULT_MULTIPLIER = 2.0
DEFAULT_CONNECT_TIMEOUT_MS = 10000
CONFIG_ENV_VAR = "MQCONFIG"


class Kind(str, enum.Enum):
    QUEUE = "Queue"
    TOPIC = "Topic"

    @property
    def prefix(self) -> str:
        return "/queue/" if self is Kind.QUEUE else "/topic/"


class AuthMode(str, enum.Enum):
    USER_PASS = "UserPass"
    TLS_CLIENT_CERT = "TlsClientCert"


@dataclass(frozen=True)
class DestinationSpec:
    service_id: str
    kind: Kind
    name: str

    def __post_init__(self):
        for label, value in (("service_id", self.service_id), ("name", self.name)):
            if not value or SEPARATOR in value:
                raise MalformedPseudoUrl(f"bad {label} {value!r}")
        if not isinstance(self.kind, Kind):
            raise InvalidKind(f"kind must be Queue or Topic, got {self.kind!r}")

    def __str__(self) -> str:
        return format_pseudo_url(self)


def format_pseudo_url(spec: DestinationSpec) -> str:
    return SEPARATOR.join((spec.service_id, spec.kind.value, spec.name))


def _parse_kind(segment: str) -> Kind:
    try:
        return Kind(segment)
    except ValueError:
        raise InvalidKind(f"kind must be 'Queue' or 'Topic', got {segment!r}") from None


def parse_pseudo_url(s: str) -> DestinationSpec:
    parts = s.split(SEPARATOR)
    if len(parts) != 3:
        raise MalformedPseudoUrl(f"{s!r}: expected service::Kind::Name")
    if any(not p for p in parts):
        raise MalformedPseudoUrl(f"{s!r}: empty segment")
    service_id, kind, name = parts
    return DestinationSpec(service_id, _parse_kind(kind), name)


@dataclass(frozen=True)
class AuthConfig:
    mode: AuthMode
    user: str = ""
    password_ref: str | None = None
    cert_path: str | None = None
    key_path: str | None = None
    # trust anchor for the broker certificate; usable in both modes when TLS is on
    ca_path: str | None = None

    def password(self) -> str:
        if self.password_ref is None:
            return ""
        return resolve_secret(self.password_ref)


def resolve_secret(ref: str) -> str:
    """Look up a secret reference.

    ``env:NAME`` (or a bare ``NAME``) reads an environment variable;
    ``file:/path/secrets.json#key`` reads a key from a JSON secrets file.
    """
    if ref.startswith("file:"):
        path, _, key = ref[5:].partition("#")
        try:
            secrets = json.loads(Path(path).read_text("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read secrets file {path}: {exc}") from exc
        if key not in secrets:
            raise ConfigError(f"secret {key!r} not in {path}")
        return str(secrets[key])
    name = ref[4:] if ref.startswith("env:") else ref
    try:
        return os.environ[name]
    except KeyError:
        raise ConfigError(f"environment variable {name} is not set") from None


@dataclass(frozen=True)
class ReconnectPolicy:
    initial_backoff_ms: int = DEFAULT_INITIAL_BACKOFF_MS
    max_backoff_ms: int = DEFAULT_MAX_BACKOFF_MS
    multiplier: float = DEFAULT_MULTIPLIER


@dataclass(frozen=True)
class MQServiceConfig:
    service_id: str
    protocol: str
    host: str
    port: int
    auth: AuthConfig
    heartbeat_out_ms: int = DEFAULT_HEARTBEAT_MS
    heartbeat_in_ms: int = DEFAULT_HEARTBEAT_MS
    reconnect: ReconnectPolicy = field(default_factory=ReconnectPolicy)
    queues: dict[str, dict] = field(default_factory=dict)
    topics: dict[str, dict] = field(default_factory=dict)
    use_tls: bool = False
    verify_hostname: bool = True
    virtual_host: str | None = None
    connect_timeout_ms: int = DEFAULT_CONNECT_TIMEOUT_MS

    @property
    def tls(self) -> bool:
        return self.use_tls or self.auth.mode is AuthMode.TLS_CLIENT_CERT


@dataclass(frozen=True)
class ConfigTree:
    services: dict[str, MQServiceConfig] = field(default_factory=dict)


@dataclass(frozen=True)
class ResolvedDestination:
    service: MQServiceConfig
    spec: DestinationSpec
    wire_path: str

    @property
    def pseudo_url(self) -> str:
        return format_pseudo_url(self.spec)


# -- resolution --------------------------------------------------------------


def _declared(service: MQServiceConfig, kind: Kind) -> dict[str, dict]:
    return service.queues if kind is Kind.QUEUE else service.topics


def _wire_path(params: dict, spec: DestinationSpec) -> str:
    override = params.get("Path", params.get("path"))
    return override if override else spec.kind.prefix + spec.name


def _resolved(service: MQServiceConfig, kind: Kind, name: str) -> ResolvedDestination:
    spec = DestinationSpec(service.service_id, kind, name)
    return ResolvedDestination(service, spec, _wire_path(_declared(service, kind)[name], spec))


def resolve(tree: ConfigTree, query: str) -> ResolvedDestination:
    """Resolve a full pseudo-URL, or the shorthand ``Kind::Name`` / ``Name``.

    Shorthand only resolves when exactly one declared destination in the
    whole tree matches it.
    """
    parts = query.split(SEPARATOR)
    if len(parts) == 3:
        spec = parse_pseudo_url(query)
        service = tree.services.get(spec.service_id)
        if service is None:
            raise UnknownService(spec.service_id)
        if spec.name not in _declared(service, spec.kind):
            raise UndeclaredDestination(
                f"{query}: {spec.name!r} is not declared under "
                f"{spec.service_id}/{spec.kind.value}s"
            )
        return _resolved(service, spec.kind, spec.name)

    if len(parts) == 2:
        kind_s, name = parts
        kinds = [_parse_kind(kind_s)]
    elif len(parts) == 1:
        name = parts[0]
        kinds = [Kind.QUEUE, Kind.TOPIC]
    else:
        raise MalformedPseudoUrl(f"{query!r}: too many segments")
    if not name:
        raise MalformedPseudoUrl(f"{query!r}: empty name")

    matches = [
        (service, kind)
        for service in tree.services.values()
        for kind in kinds
        if name in _declared(service, kind)
    ]
    if not matches:
        raise UndeclaredDestination(f"{query}: no declared destination matches")
    if len(matches) > 1:
        raise AmbiguousShorthand(
            query, [SEPARATOR.join((s.service_id, k.value, name)) for s, k in matches]
        )
    service, kind = matches[0]
    return _resolved(service, kind, name)


# -- loading -----------------------------------------------------------------

_SERVICE_KEYS = {
    "MQType", "Host", "Port", "Auth", "HeartbeatOutMs", "HeartbeatInMs",
    "Reconnect", "Queues", "Topics", "UseTls", "VerifyHostname", "VirtualHost",
    "ConnectTimeoutMs",
}
_AUTH_KEYS = {"Mode", "User", "PasswordRef", "CertPath", "KeyPath", "CaPath"}
_RECONNECT_KEYS = {"InitialBackoffMs", "MaxBackoffMs", "Multiplier"}


def read_document(data: bytes | str) -> dict:
    """Parse the raw JSON config document (all sections)."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"config is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc
    if not isinstance(doc, dict):
        raise SchemaError("<root>", "expected a JSON object")
    return doc


def _get(obj: dict, key: str, path: str, typ, default=...):
    if key not in obj:
        if default is ...:
            raise SchemaError(f"{path}.{key}", "missing required key")
        return default
    value = obj[key]
    # bool is an int subclass; keep them apart
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        names = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise SchemaError(f"{path}.{key}", f"expected {names}, got {type(value).__name__}")
    return value


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}", "unknown key")


def _non_negative(value: int, key: str) -> int:
    if value < 0:
        raise SchemaError(key, "must be non-negative")
    return value


def _load_auth(raw: dict, path: str) -> AuthConfig:
    _check_keys(raw, _AUTH_KEYS, path)
    mode_s = _get(raw, "Mode", path, str)
    try:
        mode = AuthMode(mode_s)
    except ValueError:
        raise SchemaError(f"{path}.Mode", f"unknown auth mode {mode_s!r}") from None
    return AuthConfig(
        mode=mode,
        user=_get(raw, "User", path, str, ""),
        password_ref=_get(raw, "PasswordRef", path, str, None),
        cert_path=_get(raw, "CertPath", path, str, None),
        key_path=_get(raw, "KeyPath", path, str, None),
        ca_path=_get(raw, "CaPath", path, str, None),
    )


def _load_destinations(raw: dict, path: str) -> dict[str, dict]:
    out = {}
    for name, params in raw.items():
        if not isinstance(params, dict):
            raise SchemaError(f"{path}.{name}", "destination params must be an object")
        out[name] = dict(params)
    return out


def _load_service(service_id: str, raw: Any, path: str) -> MQServiceConfig:
    if not isinstance(raw, dict):
        raise SchemaError(path, "service section must be an object")
    _check_keys(raw, _SERVICE_KEYS, path)
    port = _get(raw, "Port", path, int, DEFAULT_PORT)
    if not 1 <= port <= 65535:
        raise SchemaError(f"{path}.Port", "port out of range")
    rc = _get(raw, "Reconnect", path, dict, {})
    _check_keys(rc, _RECONNECT_KEYS, f"{path}.Reconnect")
    reconnect = ReconnectPolicy(
        initial_backoff_ms=_get(rc, "InitialBackoffMs", f"{path}.Reconnect", int, DEFAULT_INITIAL_BACKOFF_MS),
        max_backoff_ms=_get(rc, "MaxBackoffMs", f"{path}.Reconnect", int, DEFAULT_MAX_BACKOFF_MS),
        multiplier=float(_get(rc, "Multiplier", f"{path}.Reconnect", (int, float), DEFAULT_MULTIPLIER)),
    )
    return MQServiceConfig(
        service_id=service_id,
        protocol=_get(raw, "MQType", path, str, "stomp"),
        host=_get(raw, "Host", path, str, service_id),
        port=port,
        auth=_load_auth(_get(raw, "Auth", path, dict), f"{path}.Auth"),
        heartbeat_out_ms=_non_negative(
            _get(raw, "HeartbeatOutMs", path, int, DEFAULT_HEARTBEAT_MS), f"{path}.HeartbeatOutMs"),
        heartbeat_in_ms=_non_negative(
            _get(raw, "HeartbeatInMs", path, int, DEFAULT_HEARTBEAT_MS), f"{path}.HeartbeatInMs"),
        reconnect=reconnect,
        queues=_load_destinations(_get(raw, "Queues", path, dict, {}), f"{path}.Queues"),
        topics=_load_destinations(_get(raw, "Topics", path, dict, {}), f"{path}.Topics"),
        use_tls=_get(raw, "UseTls", path, bool, False),
        verify_hostname=_get(raw, "VerifyHostname", path, bool, True),
        virtual_host=_get(raw, "VirtualHost", path, str, None),
        connect_timeout_ms=_get(raw, "ConnectTimeoutMs", path, int, DEFAULT_CONNECT_TIMEOUT_MS),
    )


def tree_from_document(doc: dict) -> ConfigTree:
    resources = _get(doc, "Resources", "<root>", dict, {})
    services_raw = _get(resources, "MQServices", "Resources", dict, {})
    services = {
        sid: _load_service(sid, raw, f"Resources.MQServices.{sid}")
        for sid, raw in services_raw.items()
    }
    return ConfigTree(services)


def load_config(data: bytes | str) -> ConfigTree:
    return tree_from_document(read_document(data))


def config_path(cli_path: str | None = None) -> str | None:
    return cli_path or os.environ.get(CONFIG_ENV_VAR)


def load_config_file(path: str | os.PathLike) -> ConfigTree:
    return load_config(Path(path).read_bytes())


# -- validation --------------------------------------------------------------


def validate(tree: ConfigTree, protocols=None) -> list[str]:
    """Return every invariant violation in ``tree`` (empty list when valid)."""
    if protocols is None:
        from mqware.connector import registered_protocols

        protocols = registered_protocols()
    problems = []
    for sid, svc in tree.services.items():
        path = f"Resources.MQServices.{sid}"
        if svc.service_id != sid:
            problems.append(f"{path}: record service_id {svc.service_id!r} != key")
        if not sid or SEPARATOR in sid:
            problems.append(f"{path}: service id must be non-empty and contain no '::'")
        if svc.protocol not in protocols:
            problems.append(f"{path}.MQType: unknown connector type {svc.protocol!r}")
        if not 1 <= svc.port <= 65535:
            problems.append(f"{path}.Port: port out of range")
        if svc.heartbeat_in_ms < 0 or svc.heartbeat_out_ms < 0:
            problems.append(f"{path}: heartbeats must be non-negative")
        rc = svc.reconnect
        if rc.initial_backoff_ms < 1:
            problems.append(f"{path}.Reconnect.InitialBackoffMs: must be >= 1")
        if rc.max_backoff_ms < rc.initial_backoff_ms:
            problems.append(f"{path}.Reconnect.MaxBackoffMs: must be >= InitialBackoffMs")
        if rc.multiplier < 1.0:
            problems.append(f"{path}.Reconnect.Multiplier: must be >= 1.0")
        for name in sorted(set(svc.queues) & set(svc.topics)):
            problems.append(f"{path}: {name!r} declared as both queue and topic")
        for section, names in (("Queues", svc.queues), ("Topics", svc.topics)):
            for name in names:
                if not name or SEPARATOR in name:
                    problems.append(f"{path}.{section}.{name}: invalid destination name")
        problems.extend(_auth_problems(svc.auth, f"{path}.Auth"))
    return problems


def _auth_problems(auth: AuthConfig, path: str) -> list[str]:
    problems = []
    if auth.mode is AuthMode.USER_PASS:
        if not auth.user:
            problems.append(f"{path}.User: required for UserPass")
        if auth.cert_path or auth.key_path:
            problems.append(f"{path}: CertPath/KeyPath not allowed for UserPass")
        if auth.password_ref and auth.password_ref.startswith("file:"):
            secrets = auth.password_ref[5:].partition("#")[0]
            if not Path(secrets).is_file():
                problems.append(f"{path}.PasswordRef: secrets file {secrets} not found")
    else:
        if auth.user or auth.password_ref:
            problems.append(f"{path}: User/PasswordRef not allowed for TlsClientCert")
        for key in ("cert_path", "key_path", "ca_path"):
            if not getattr(auth, key):
                problems.append(f"{path}.{_camel(key)}: required for TlsClientCert")
    for key in ("cert_path", "key_path", "ca_path"):
        value = getattr(auth, key)
        if value and not Path(value).is_file():
            problems.append(f"{path}.{_camel(key)}: file {value} not found")
    return problems


def _camel(key: str) -> str:
    return "".join(p.capitalize() for p in key.split("_"))
