"""Exception hierarchy shared across the package."""


class MQError(Exception):
    pass


# configuration / resolution

class ConfigError(MQError):
    pass


class MalformedPseudoUrl(ConfigError):
    pass


class InvalidKind(ConfigError):
    pass


class UnknownService(ConfigError):
    pass


class UndeclaredDestination(ConfigError):
    pass


class AmbiguousShorthand(ConfigError):
    def __init__(self, query, candidates):
        self.query = query
        self.candidates = list(candidates)
        super().__init__(
            f"{query!r} is ambiguous, candidates: {', '.join(self.candidates)}"
        )


class ParseError(ConfigError):
    def __init__(self, msg, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            msg = f"{msg} (line {line}, column {column})"
        super().__init__(msg)


class SchemaError(ConfigError):
    def __init__(self, key, msg):
        self.key = key
        super().__init__(f"{key}: {msg}")


# message model

class InvalidJson(MQError, ValueError):
    pass


class InvalidUtf8(MQError, ValueError):
    pass


# wire protocol

class ProtocolViolation(MQError):
    pass


class IllegalHeaderCharacter(ProtocolViolation, ValueError):
    pass


# connector

class ConnectError(MQError):
    pass


class ConnectionRefused(ConnectError):
    pass


class AuthFailed(ConnectError):
    pass


class TlsHandshakeFailed(ConnectError):
    pass


class ConnectTimeout(ConnectError):
    pass


class SendFailed(MQError):
    def __init__(self, reason, detail=""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class NotConnected(SendFailed):
    def __init__(self, detail=""):
        super().__init__("not-connected", detail)


# connection manager / api

class UnknownToken(MQError):
    pass


class ProducerClosed(MQError):
    pass


class ConsumerClosed(MQError):
    pass


class WrongMode(MQError):
    pass


# spool

class SpoolError(MQError):
    pass


class DiskFull(SpoolError):
    pass
