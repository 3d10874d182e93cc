"""Run the pilot log pipeline end to end on localhost.

Starts a broker, a gateway and a sink in-process, ships synthetic pilot logs
through the gateway and reports what landed on disk.

    python3 scripts/demo_pipeline.py --pilots 20 --lines 200 --out /tmp/pilot-logs
"""

from __future__ import annotations

import argparse
import json
import os
import random
import tempfile
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from mqware.broker import Broker, BrokerConfig, conservation_holds
from mqware.config import tree_from_document
from mqware.manager import ConnectionManager
from mqware.pipeline import Gateway, GatewayConfig, LogSink, hash_token, http_sender, ship_logs

PHASES = ["bootstrap", "install", "configure", "run", "cleanup"]
SEVERITIES = ["DEBUG", "INFO", "INFO", "INFO", "WARNING", "ERROR"]


@dataclass
class DemoConfig:
    pilots: int = 20
    lines: int = 100
    workers: int = 8
    batch_size: int = 50
    out: str | None = None
    seed: int = 7


def synth_log(rng: random.Random, n: int) -> str:
    rows = []
    for i in range(n):
        phase = PHASES[min(i * len(PHASES) // n, len(PHASES) - 1)]
        rows.append(f"{phase}|{rng.choice(SEVERITIES)}|step {i}: {rng.getrandbits(32):08x}\n")
    return "".join(rows)


def run(cfg: DemoConfig) -> dict:
    rng = random.Random(cfg.seed)
    work = Path(tempfile.mkdtemp(prefix="mqware-demo-"))
    out = Path(cfg.out) if cfg.out else work / "sink"
    os.environ.setdefault("MQWARE_DEMO_PASSWORD", "demo")

    broker = Broker(BrokerConfig(port=0, users={"demo": os.environ["MQWARE_DEMO_PASSWORD"]}, heartbeat=(0, 0))).start()
    tree = tree_from_document({"Resources": {"MQServices": {"local": {
        "Host": "127.0.0.1", "Port": broker.port,
        "Auth": {"Mode": "UserPass", "User": "demo", "PasswordRef": "env:MQWARE_DEMO_PASSWORD"},
        "Queues": {"pilotlogs": {}},
    }}}})
    mgr = ConnectionManager()
    token = uuid.uuid4().hex
    gw = Gateway(GatewayConfig("pilotlogs", str(work / "gw-spool"), {hash_token(token): "demo-factory"}, port=0),
                 tree, manager=mgr).start()
    sink = LogSink(out)
    sink.start(tree, "pilotlogs", manager=mgr)

    pilots = [str(uuid.UUID(int=rng.getrandbits(128), version=4)) for _ in range(cfg.pilots)]
    sources = []
    for p in pilots:
        path = work / "pilots" / f"{p}.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(synth_log(rng, cfg.lines))
        sources.append((p, path))

    t0 = time.monotonic()
    with ThreadPoolExecutor(cfg.workers) as pool:
        shipped = sum(pool.map(lambda s: ship_logs(s[1], http_sender(gw.url, token), pilot_uuid=s[0],
                                                   batch_size=cfg.batch_size), sources))
    expected = cfg.pilots * cfg.lines
    deadline = time.monotonic() + 60
    while sink.written < expected and time.monotonic() < deadline:
        time.sleep(0.05)
    elapsed = time.monotonic() - t0

    snap = broker.stats()
    report = {
        "config": asdict(cfg),
        "shipped": shipped,
        "written": sink.written,
        "duplicates": sink.duplicates,
        "quarantined": sink.quarantined,
        "files": len(list(out.glob("*-*-*-*-*.log"))),
        "seconds": round(elapsed, 3),
        "records_per_s": round(sink.written / elapsed, 1) if elapsed else None,
        "conservation": conservation_holds(snap),
        "output": str(out),
    }
    sink.stop()
    gw.stop()
    mgr.stop_all()
    broker.stop()
    return report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for name, default in asdict(DemoConfig()).items():
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(default) if default is not None else str,
                        default=default)
    cfg = DemoConfig(**vars(ap.parse_args()))
    print(json.dumps(run(cfg), indent=2))


if __name__ == "__main__":
    main()
