"""Stream messages through a spooling producer while the broker goes away.

The broker is killed after ``kill_at`` puts and restarted after
``restart_at``; the script then waits for the spool to drain and reports
gaps and duplicates seen by a consumer.

    python3 scripts/failover_demo.py --messages 20000 --kill-at 5000 --restart-at 12000
"""

from __future__ import annotations

import argparse
import collections
import json
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass

from mqware.api import create_consumer, create_producer, put_with_failover
from mqware.broker import Broker, BrokerConfig
from mqware.config import tree_from_document
from mqware.manager import ConnectionManager


@dataclass
class FailoverConfig:
    messages: int = 10000
    kill_at: int = 3000
    restart_at: int = 6000
    confirm: bool = True
    drain_timeout: float = 60.0


def run(cfg: FailoverConfig) -> dict:
    os.environ.setdefault("MQWARE_DEMO_PASSWORD", "demo")
    broker = Broker(BrokerConfig(port=0, users={"demo": os.environ["MQWARE_DEMO_PASSWORD"]}, heartbeat=(0, 0))).start()
    tree = tree_from_document({"Resources": {"MQServices": {"local": {
        "Host": "127.0.0.1", "Port": broker.port,
        "Auth": {"Mode": "UserPass", "User": "demo", "PasswordRef": "env:MQWARE_DEMO_PASSWORD"},
        "Reconnect": {"InitialBackoffMs": 50, "MaxBackoffMs": 500, "Multiplier": 2.0},
        "Queues": {"orders": {}},
    }}}})
    seen: collections.Counter = collections.Counter()
    lock = threading.Lock()

    def on_message(env):
        with lock:
            seen[env.payload["i"]] += 1

    pm, cm = ConnectionManager(), ConnectionManager()
    consumer = create_consumer(tree, "orders", on_message, manager=cm)
    producer = create_producer(tree, "orders", confirm=cfg.confirm, spool=tempfile.mkdtemp(prefix="spool-"),
                               manager=pm)
    outcomes: collections.Counter = collections.Counter()
    t0 = time.monotonic()
    for i in range(cfg.messages):
        if i == cfg.kill_at:
            broker.kill()
        elif i == cfg.restart_at:
            broker.start()
        outcomes[put_with_failover(producer, {"i": i}).value] += 1
    put_s = time.monotonic() - t0

    deadline = time.monotonic() + cfg.drain_timeout
    while time.monotonic() < deadline:
        with lock:
            if producer.spool.depth == 0 and len(seen) >= cfg.messages:
                break
        time.sleep(0.05)
    with lock:
        missing = cfg.messages - len(seen)
        duplicates = sum(seen.values()) - len(seen)
    report = {
        "config": asdict(cfg),
        "outcomes": dict(outcomes),
        "put_seconds": round(put_s, 3),
        "total_seconds": round(time.monotonic() - t0, 3),
        "missing": missing,
        "duplicates": duplicates,
        "spool_depth": producer.spool.depth,
    }
    producer.close()
    consumer.close()
    pm.stop_all()
    cm.stop_all()
    broker.stop()
    return report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--messages", type=int, default=10000)
    ap.add_argument("--kill-at", type=int, default=3000)
    ap.add_argument("--restart-at", type=int, default=6000)
    ap.add_argument("--no-confirm", action="store_true")
    ap.add_argument("--drain-timeout", type=float, default=60.0)
    a = ap.parse_args()
    cfg = FailoverConfig(a.messages, a.kill_at, a.restart_at, not a.no_confirm, a.drain_timeout)
    print(json.dumps(run(cfg), indent=2))


if __name__ == "__main__":
    main()
