"""HTTP ingestion gateway: authenticated log posts forwarded to the MQ.

``POST /v1/logs`` with ``Authorization: Bearer <token>`` accepts one record or
an array of up to 1000; each is stamped with ``received-at-ms`` and the
caller's principal and forwarded through one spooling producer.
``GET /v1/health`` reports broker connectivity and spool depth.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from mqware.api import Producer, create_producer
from mqware.config import ConfigTree
from mqware.errors import DiskFull, SchemaError, SpoolError
from mqware.message import now_ms
from mqware.pipeline.records import PilotLogRecord, RecordError

log = logging.getLogger(__name__)

MAX_RECORDS = 1000
MAX_BODY_BYTES = 16 << 20


def hash_token(token: str, salt: str | None = None) -> str:
    salt = salt or os.urandom(16).hex()
    digest = hashlib.sha256(bytes.fromhex(salt) + token.encode("utf-8")).hexdigest()
    return f"sha256${salt}${digest}"


def verify_token(token: str, table: dict[str, str]) -> str | None:
    """Principal owning ``token``, or None.  ``table`` maps salted hash -> principal."""
    found = None
    for stored, principal in table.items():
        try:
            scheme, salt, _ = stored.split("$")
        except ValueError:
            continue
        if scheme == "sha256" and hmac.compare_digest(hash_token(token, salt), stored):
            found = principal
    return found


@dataclass
class GatewayConfig:
    target: str
    spool_dir: str
    tokens: dict[str, str] = field(default_factory=dict)
    host: str = "127.0.0.1"
    port: int = 8080

    @classmethod
    def from_document(cls, doc: dict) -> "GatewayConfig":
        raw = doc.get("Gateway")
        if not isinstance(raw, dict):
            raise SchemaError("Gateway", "missing gateway section")
        for key in ("Target", "SpoolDir"):
            if not isinstance(raw.get(key), str):
                raise SchemaError(f"Gateway.{key}", "missing required key")
        host, _, port = raw.get("Listen", "127.0.0.1:8080").rpartition(":")
        return cls(
            target=raw["Target"],
            spool_dir=raw["SpoolDir"],
            tokens=dict(raw.get("Tokens", {})),
            host=host or "127.0.0.1",
            port=int(port),
        )


class Gateway:
    def __init__(self, config: GatewayConfig, tree: ConfigTree, manager=None, clock=now_ms):
        self.config = config
        self.tree = tree
        self.manager = manager
        self.clock = clock
        self.producer: Producer | None = None
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self.forwarded = 0
        self.rejected = 0

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "Gateway":
        self.producer = create_producer(
            self.tree, self.config.target, confirm=True, spool=self.config.spool_dir,
            manager=self.manager, origin="gateway",
        )
        self._server = ThreadingHTTPServer((self.config.host, self.config.port), _make_handler(self))
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, name="gateway-http", daemon=True)
        self._thread.start()
        log.info("gateway listening on %s -> %s", self.url, self.config.target)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self.producer is not None:
            self.producer.close()
            self.producer.spool.close()
            self.producer = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # request handling

    def handle(self, method: str, path: str, headers: dict[str, str], body: bytes) -> tuple[int, dict]:
        path = path.split("?", 1)[0]
        if path == "/v1/health":
            if method != "GET":
                return 405, {"error": "method not allowed"}
            return 200, {
                "broker_connected": bool(self.producer and self.producer.session.is_connected),
                "spool_depth": self.producer.spool.depth if self.producer else 0,
            }
        if path != "/v1/logs":
            return 404, {"error": "not found"}
        if method != "POST":
            return 405, {"error": "method not allowed"}

        auth = headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        principal = verify_token(token.strip(), self.config.tokens) if scheme.lower() == "bearer" else None
        if principal is None:
            self.rejected += 1
            return 401, {"error": "unknown or missing bearer token"}

        try:
            doc = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            return 400, {"error": f"invalid JSON: {exc}"}
        items = doc if isinstance(doc, list) else [doc]
        if len(items) > MAX_RECORDS:
            return 413, {"error": f"at most {MAX_RECORDS} records per request"}
        records = []
        for i, item in enumerate(items):
            try:
                records.append(PilotLogRecord.from_dict(item))
            except RecordError as exc:
                where = f"[{i}]." if isinstance(doc, list) else ""
                return 400, {"error": str(exc), "field": f"{where}{exc.field}"}

        accepted = spooled = 0
        received = int(self.clock())
        for rec in records:
            payload = {**rec.to_dict(), "received-at-ms": received, "principal": principal}
            try:
                result = self.producer.put(payload)
            except DiskFull as exc:
                return 507, {"error": str(exc), "accepted": accepted, "spooled": spooled}
            except SpoolError as exc:
                return 500, {"error": str(exc), "accepted": accepted, "spooled": spooled}
            accepted += 1
            spooled += result == "spooled"
        self.forwarded += accepted
        return 202, {"accepted": accepted, "spooled": spooled}


def _make_handler(gateway: Gateway):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _serve(self, method: str) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY_BYTES:
                status, doc = 413, {"error": "request body too large"}
                self.close_connection = True
            else:
                body = self.rfile.read(length) if length else b""
                headers = {k.lower(): v for k, v in self.headers.items()}
                try:
                    status, doc = gateway.handle(method, self.path, headers, body)
                except Exception as exc:
                    log.exception("gateway request failed")
                    status, doc = 500, {"error": str(exc)}
            out = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            if status == 401:
                self.send_header("WWW-Authenticate", "Bearer")
            self.end_headers()
            self.wfile.write(out)

        def do_GET(self):
            self._serve("GET")

        def do_POST(self):
            self._serve("POST")

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler
