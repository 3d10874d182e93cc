"""``mqctl``: command-line front end.

Exit codes: 0 success, 1 incomplete (e.g. consume timed out), 2 configuration
or input error, 3 connection or delivery error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
import threading
import uuid
from pathlib import Path

from mqware.api import create_consumer, create_producer, default_manager
from mqware.broker import Broker, BrokerConfig
from mqware.config import ConfigTree, config_path, read_document, tree_from_document, validate
from mqware.connector import AckMode
from mqware.errors import ConfigError, ConnectError, InvalidJson, SendFailed
from mqware.message import canonical_json, parse_json

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_CONFIG = 2
EXIT_CONNECT = 3
EXIT_INTERRUPTED = 130

log = logging.getLogger("mqctl")


class _Usage(Exception):
    """Bad input that is not a config-file problem; still exit code 2."""


def _load_document(args) -> dict:
    path = config_path(args.config)
    if not path:
        raise _Usage("no configuration: pass --config or set MQCONFIG")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise _Usage(f"cannot read config {path}: {exc}") from exc
    return read_document(data)


def _load_tree(args) -> tuple[dict, ConfigTree]:
    doc = _load_document(args)
    return doc, tree_from_document(doc)


def _require_dest(args) -> str:
    if not args.dest:
        raise _Usage("--dest is required")
    return args.dest


def _stop_event() -> threading.Event:
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    return stop


def _emit(doc) -> None:
    sys.stdout.write(canonical_json(doc).decode("utf-8") + "\n")
    sys.stdout.flush()


# subcommands


def cmd_produce(args) -> int:
    _, tree = _load_tree(args)
    dest = _require_dest(args)
    text = args.message if args.message is not None else sys.stdin.read()
    try:
        payload = parse_json(text.encode("utf-8"))
    except InvalidJson as exc:
        raise _Usage(f"message is not valid JSON: {exc}") from exc
    producer = create_producer(tree, dest, confirm=not args.no_confirm, spool=args.spool,
                               fail_fast=args.spool is None)
    try:
        for _ in range(args.count):
            result = producer.put(payload)
            log.info("%s -> %s", result.value, producer.wire_path)
    finally:
        producer.close()
        if producer.spool is not None:
            producer.spool.close()
    return EXIT_OK


def cmd_consume(args) -> int:
    _, tree = _load_tree(args)
    dest = _require_dest(args)
    stop = _stop_event()
    remaining = [args.count]
    lock = threading.Lock()

    def handler(env) -> None:
        with lock:
            if remaining[0] == 0:
                # over quota: NACK so another consumer gets it
                raise RuntimeError("count reached")
            _emit(env.payload)
            if remaining[0] is not None:
                remaining[0] -= 1
                if remaining[0] == 0:
                    stop.set()

    consumer = create_consumer(tree, dest, handler, ack_mode=AckMode(args.ack),
                               fail_fast=args.no_retry)
    try:
        finished = stop.wait(args.timeout) if args.timeout else stop.wait()
    finally:
        consumer.close()
    if remaining[0] == 0:
        return EXIT_OK
    if not finished:
        print(f"mqctl: timed out with {remaining[0]} message(s) outstanding", file=sys.stderr)
        return EXIT_INCOMPLETE
    return EXIT_OK if args.count is None else EXIT_INTERRUPTED


def cmd_broker(args) -> int:
    doc = _load_document(args) if config_path(args.config) else {}
    cfg = BrokerConfig.from_document(doc)
    if args.host:
        cfg.host = args.host
    if args.port is not None:
        cfg.port = args.port
    if args.tls_port is not None:
        cfg.tls_port = args.tls_port
    if args.anonymous:
        cfg.allow_anonymous = True
    stop = _stop_event()
    broker = Broker(cfg, event_log=args.log).start()
    print(f"broker listening on {cfg.host}:{broker.port}"
          + (f" (tls {broker.tls_port})" if broker.tls_port else ""), file=sys.stderr, flush=True)
    try:
        stop.wait()
    finally:
        broker.stop()
    return EXIT_OK


def cmd_gateway(args) -> int:
    from mqware.pipeline.gateway import Gateway, GatewayConfig

    doc, tree = _load_tree(args)
    cfg = GatewayConfig.from_document(doc)
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        cfg.host, cfg.port = host or cfg.host, int(port)
    if args.dest:
        cfg.target = args.dest
    stop = _stop_event()
    gw = Gateway(cfg, tree).start()
    print(f"gateway listening on {gw.url}", file=sys.stderr, flush=True)
    try:
        stop.wait()
    finally:
        gw.stop()
    return EXIT_OK


def cmd_ship_logs(args) -> int:
    from mqware.pipeline.shipper import http_sender, producer_sender, ship_logs

    producer = None
    if args.gateway:
        token = args.token or os.environ.get("MQ_GATEWAY_TOKEN")
        if not token:
            raise _Usage("--gateway needs --token or MQ_GATEWAY_TOKEN")
        send = http_sender(args.gateway, token)
    else:
        _, tree = _load_tree(args)
        producer = create_producer(tree, _require_dest(args), confirm=True, spool=args.spool,
                                   fail_fast=args.spool is None)
        send = producer_sender(producer)
    source = sys.stdin if args.source == "-" else args.source
    stop = _stop_event() if args.follow else None
    try:
        n = ship_logs(source, send, pilot_uuid=args.pilot_uuid, source_label=args.source_label,
                      batch_size=args.batch_size, batch_interval=args.batch_interval,
                      follow=args.follow, stop=stop, retries=args.retries)
    finally:
        if producer is not None:
            producer.close()
            if producer.spool is not None:
                producer.spool.close()
    _emit({"shipped": n, "pilot_uuid": args.pilot_uuid})
    return EXIT_OK


def cmd_sink(args) -> int:
    from mqware.pipeline.sink import LogSink

    _, tree = _load_tree(args)
    stop = _stop_event()
    sink = LogSink(args.output).start(tree, _require_dest(args), fail_fast=args.no_retry)
    try:
        stop.wait()
    finally:
        sink.stop()
    print(f"sink: written={sink.written} duplicates={sink.duplicates} quarantined={sink.quarantined}",
          file=sys.stderr)
    return EXIT_OK


def cmd_hash_token(args) -> int:
    from mqware.pipeline.gateway import hash_token

    token = args.token if args.token is not None else sys.stdin.readline().strip()
    if not token:
        raise _Usage("empty token")
    print(hash_token(token))
    return EXIT_OK


def cmd_validate(args) -> int:
    _, tree = _load_tree(args)
    problems = validate(tree)
    for p in problems:
        print(p)
    return EXIT_CONFIG if problems else EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $MQCONFIG)")
    common.add_argument("--dest", help="destination pseudo-url (service::Kind::Name or a unique shorthand)")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = argparse.ArgumentParser(prog="mqctl", description="Message-queue toolkit command line.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("produce", parents=[common], help="send one JSON message")
    sp.add_argument("--message", "-m", help="JSON payload (default: read standard input)")
    sp.add_argument("--count", type=int, default=1, help="send the message N times")
    sp.add_argument("--spool", help="failover spool directory")
    sp.add_argument("--no-confirm", action="store_true", help="do not wait for broker receipts")
    sp.set_defaults(func=cmd_produce)

    sp = sub.add_parser("consume", parents=[common], help="print messages as JSON lines")
    sp.add_argument("--count", type=int, help="stop after N messages")
    sp.add_argument("--timeout", type=float, help="give up after this many seconds")
    sp.add_argument("--no-retry", action="store_true", help="fail if the broker is unreachable")
    sp.add_argument("--ack", choices=[m.value for m in AckMode], default=AckMode.CLIENT_INDIVIDUAL.value)
    sp.set_defaults(func=cmd_consume)

    sp = sub.add_parser("broker", parents=[common], help="run the embedded broker")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--tls-port", type=int)
    sp.add_argument("--log", help="JSON-lines session event log")
    sp.add_argument("--anonymous", action="store_true", help="accept unauthenticated clients")
    sp.set_defaults(func=cmd_broker)

    sp = sub.add_parser("gateway", parents=[common], help="run the HTTP log gateway")
    sp.add_argument("--listen", help="HOST:PORT (overrides Gateway.Listen)")
    sp.set_defaults(func=cmd_gateway)

    sp = sub.add_parser("ship-logs", parents=[common], help="ship a pilot log file")
    sp.add_argument("--source", required=True, help="log file, or - for standard input")
    sp.add_argument("--pilot-uuid", default=str(uuid.uuid4()))
    sp.add_argument("--source-label", default=socket.gethostname())
    sp.add_argument("--gateway", help="gateway base URL (otherwise send directly to --dest)")
    sp.add_argument("--token", help="gateway bearer token (default: $MQ_GATEWAY_TOKEN)")
    sp.add_argument("--spool", help="failover spool directory for direct mode")
    sp.add_argument("--follow", "-f", action="store_true", help="keep tailing until interrupted")
    sp.add_argument("--batch-size", type=int, default=50)
    sp.add_argument("--batch-interval", type=float, default=2.0)
    sp.add_argument("--retries", type=int, default=5)
    sp.set_defaults(func=cmd_ship_logs)

    sp = sub.add_parser("sink", parents=[common], help="store pilot logs from the MQ")
    sp.add_argument("--output", required=True, help="output directory")
    sp.add_argument("--no-retry", action="store_true")
    sp.set_defaults(func=cmd_sink)

    sp = sub.add_parser("hash-token", parents=[common], help="print the salted hash for a gateway token")
    sp.add_argument("token", nargs="?")
    sp.set_defaults(func=cmd_hash_token)

    sp = sub.add_parser("validate", parents=[common], help="check a config file")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from mqware.pipeline.shipper import DeliveryFailed, SourceUnreadable

    try:
        return args.func(args)
    except (ConfigError, _Usage, SourceUnreadable, ValueError) as exc:
        print(f"mqctl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConnectError, SendFailed, DeliveryFailed, OSError) as exc:
        print(f"mqctl: {exc}", file=sys.stderr)
        return EXIT_CONNECT
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    finally:
        default_manager().stop_all()


if __name__ == "__main__":
    sys.exit(main())
