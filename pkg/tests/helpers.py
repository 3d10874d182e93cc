"""Shared test utilities: config builders, polling, throwaway PKI."""

from __future__ import annotations

import datetime
import ipaddress
import time
from dataclasses import dataclass
from pathlib import Path

from mqware.config import ConfigTree, tree_from_document

PASSWORD_ENV = "MQWARE_TEST_PASSWORD"
PASSWORD = "s3cret-pw"
USER = "alice"

FAST_RECONNECT = {"InitialBackoffMs": 50, "MaxBackoffMs": 400, "Multiplier": 2.0}


def service(port: int, queues=(), topics=(), *, host="127.0.0.1", user=USER, password_env=PASSWORD_ENV,
            heartbeat=(0, 0), vhost=None, reconnect=None, **extra) -> dict:
    doc = {
        "Host": host,
        "Port": port,
        "Auth": {"Mode": "UserPass", "User": user, "PasswordRef": f"env:{password_env}"},
        "HeartbeatOutMs": heartbeat[0],
        "HeartbeatInMs": heartbeat[1],
        "Reconnect": dict(reconnect or FAST_RECONNECT),
        "Queues": {q: {} for q in queues},
        "Topics": {t: {} for t in topics},
    }
    if vhost:
        doc["VirtualHost"] = vhost
    doc.update(extra)
    return doc


def tree(**services: dict) -> ConfigTree:
    return tree_from_document({"Resources": {"MQServices": services}})


def wait_for(pred, timeout: float = 5.0, interval: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(interval)
    return bool(pred())


# -- PKI ---------------------------------------------------------------------


@dataclass(frozen=True)
class TestPki:
    ca: Path
    server_cert: Path
    server_key: Path
    client_cert: Path
    client_key: Path
    rogue_ca: Path
    rogue_cert: Path
    rogue_key: Path

    __test__ = False


def generate_pki(out: Path, client_cn: str = "pilot-client") -> TestPki:
    """CA, a server cert for 127.0.0.1/localhost, a trusted client cert and a
    client cert signed by an unrelated CA."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    now = datetime.datetime.now(datetime.timezone.utc)

    def key():
        return ec.generate_private_key(ec.SECP256R1())

    def name(cn):
        return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])

    def write(stem, cert, k):
        c = out / f"{stem}.crt"
        c.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        if k is None:
            return c, None
        kp = out / f"{stem}.key"
        kp.write_bytes(k.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                       serialization.NoEncryption()))
        return c, kp

    def ca(cn):
        k = key()
        cert = (
            x509.CertificateBuilder()
            .subject_name(name(cn)).issuer_name(name(cn))
            .public_key(k.public_key()).serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=30))
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .add_extension(x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True)
            .sign(k, hashes.SHA256())
        )
        return cert, k

    def leaf(cn, issuer, issuer_key, server):
        k = key()
        b = (
            x509.CertificateBuilder()
            .subject_name(name(cn)).issuer_name(issuer.subject)
            .public_key(k.public_key()).serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=30))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        )
        if server:
            b = b.add_extension(x509.SubjectAlternativeName([
                x509.DNSName("localhost"), x509.IPAddress(ipaddress.ip_address("127.0.0.1")),
            ]), critical=False).add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
        else:
            b = b.add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH]), critical=False)
        return b.sign(issuer_key, hashes.SHA256()), k

    ca_cert, ca_key = ca("mqware test CA")
    rogue_cert, rogue_key = ca("untrusted CA")
    srv, srv_key = leaf("localhost", ca_cert, ca_key, server=True)
    cli, cli_key = leaf(client_cn, ca_cert, ca_key, server=False)
    bad, bad_key = leaf(client_cn, rogue_cert, rogue_key, server=False)

    ca_path, _ = write("ca", ca_cert, None)
    rogue_ca_path, _ = write("rogue-ca", rogue_cert, None)
    s_c, s_k = write("server", srv, srv_key)
    c_c, c_k = write("client", cli, cli_key)
    r_c, r_k = write("rogue-client", bad, bad_key)
    return TestPki(ca_path, s_c, s_k, c_c, c_k, rogue_ca_path, r_c, r_k)


# -- raw STOMP client ----------------------------------------------------------


class RawClient:
    """Bare socket speaking frames, for asserting exact broker behavior."""

    def __init__(self, port: int, host: str = "127.0.0.1", ssl_context=None):
        import socket

        from mqware.stomp import StompDecoder

        sock = socket.create_connection((host, port), timeout=5)
        if ssl_context is not None:
            sock = ssl_context.wrap_socket(sock, server_hostname=host)
        self.sock = sock
        self.decoder = StompDecoder()
        self.inbox: list = []

    def send(self, command: str, headers=None, body: bytes = b"") -> None:
        from mqware.stomp import encode_frame, frame

        self.sock.sendall(encode_frame(frame(command, headers or {}, body)))

    def recv(self, timeout: float = 5.0, skip_heartbeats: bool = True):
        """Next frame, or None when the peer closed."""
        import socket

        from mqware.stomp import HEARTBEAT

        deadline = time.monotonic() + timeout
        while True:
            while self.inbox:
                f = self.inbox.pop(0)
                if not (skip_heartbeats and f.command == HEARTBEAT):
                    return f
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no frame")
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                raise TimeoutError("no frame") from None
            except ConnectionError:
                return None
            if not data:
                return None
            self.inbox.extend(self.decoder.feed(data))

    def connect(self, login: str = USER, passcode: str = PASSWORD, version: str = "1.2", heartbeat: str = "0,0"):
        self.send("CONNECT", {"accept-version": version, "host": "127.0.0.1", "login": login,
                              "passcode": passcode, "heart-beat": heartbeat})
        return self.recv()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


class criterion:
    """Times a block, records one PASS/FAIL line and fails when over budget."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.monotonic() - self.t0
        over = elapsed >= self.limit_s
        ok = exc_type is None and not over
        detail = f"{elapsed:.2f}s (limit {self.limit_s:g}s)"
        if exc_type is not None:
            detail += f" {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        elif over:
            detail += " over time budget"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number:>2}: {self.title} [{detail}]"
        ACCEPTANCE_RESULTS[self.number] = line
        print(line)
        if exc_type is None and over:
            raise AssertionError(line)
        return False

    def skip(self, reason: str) -> None:
        line = f"SKIP criterion {self.number:>2}: {self.title} [{reason}]"
        ACCEPTANCE_RESULTS[self.number] = line
        print(line)
