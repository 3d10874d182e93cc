import io
import json
import threading
import urllib.error
import urllib.request
import uuid

import pytest

from helpers import service, tree, wait_for
from mqware.api import create_producer
from mqware.errors import DiskFull
from mqware.message import make_envelope
from mqware.pipeline import (
    DeliveryFailed,
    Gateway,
    GatewayConfig,
    LogSink,
    PilotLogRecord,
    RecordError,
    SourceUnreadable,
    hash_token,
    http_sender,
    parse_line,
    ship_logs,
    verify_token,
)
from mqware.pipeline.records import MALFORMED_FILE

PILOT = "0f8fad5b-d9cb-469f-a165-70867728950e"
TS = "2024-05-01T12:00:00.000Z"


def record(**kw):
    return {"pilot_uuid": PILOT, "timestamp": TS, "message": "hi", **kw}


# records


def test_record_defaults():
    r = PilotLogRecord.from_dict(record())
    assert (r.severity, r.phase, r.source) == ("INFO", "unknown", "")


@pytest.mark.parametrize("raw, field", [
    ({"timestamp": TS, "message": "m"}, "pilot_uuid"),
    (record(pilot_uuid="not-a-uuid"), "pilot_uuid"),
    (record(timestamp="yesterday"), "timestamp"),
    (record(timestamp="2024-05-01T12:00:00+02:00"), "timestamp"),
    (record(severity="FATAL"), "severity"),
    (record(message=3), "message"),
    (record(extra=1), "extra"),
    ({"message": 1, "timestamp": "bad"}, "pilot_uuid"),
    ([], "<record>"),
])
def test_record_validation_names_first_bad_field(raw, field):
    with pytest.raises(RecordError) as ei:
        PilotLogRecord.from_dict(raw)
    assert ei.value.field == field


def test_parse_line_grammar():
    r = parse_line("install|ERROR|cvmfs mount failed\n", PILOT, "ce01")
    assert (r.phase, r.severity, r.message, r.source) == ("install", "ERROR", "cvmfs mount failed", "ce01")
    plain = parse_line("just text | with pipes\n", PILOT)
    assert (plain.phase, plain.severity, plain.message) == ("unknown", "INFO", "just text | with pipes")
    assert parse_line("run|warning|a|b", PILOT).message == "a|b"
    PilotLogRecord.from_dict(plain.to_dict())


def test_token_hashing():
    h1, h2 = hash_token("tok"), hash_token("tok")
    assert h1 != h2 and h1.startswith("sha256$") and "tok" not in h1
    table = {h1: "pilot-factory"}
    assert verify_token("tok", table) == "pilot-factory"
    assert verify_token("other", table) is None


# gateway


@pytest.fixture
def gateway(broker, manager, tmp_path):
    t = tree(svc=service(broker.port, queues=["logs"]))
    cfg = GatewayConfig(target="logs", spool_dir=str(tmp_path / "gw-spool"),
                        tokens={hash_token("good"): "factory-A"}, port=0)
    gw = Gateway(cfg, t, manager=manager).start()
    yield gw
    gw.stop()


def post(gw, body, token="good", path="/v1/logs"):
    data = body if isinstance(body, bytes) else json.dumps(body).encode()
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    req = urllib.request.Request(gw.url + path, data=data, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def health(gw):
    with urllib.request.urlopen(gw.url + "/v1/health", timeout=5) as resp:
        return json.loads(resp.read())


def test_gateway_accepts(gateway, broker):
    assert post(gateway, record()) == (202, {"accepted": 1, "spooled": 0})
    assert post(gateway, [record(), record(severity="DEBUG")]) == (202, {"accepted": 2, "spooled": 0})
    assert broker.depth("logs") == 3
    assert health(gateway) == {"broker_connected": True, "spool_depth": 0}


def test_gateway_stamps(gateway, manager, broker):
    from mqware.api import create_consumer

    post(gateway, record())
    c = create_consumer(gateway.tree, "logs", manager=manager)
    env = c.get(timeout=5)
    assert env.payload["principal"] == "factory-A" and isinstance(env.payload["received-at-ms"], int)
    c.close()


def test_gateway_spools_when_broker_down(gateway, broker):
    broker.kill()
    assert wait_for(lambda: not health(gateway)["broker_connected"])
    assert post(gateway, record()) == (202, {"accepted": 1, "spooled": 1})
    assert health(gateway)["spool_depth"] == 1
    broker.start()
    assert wait_for(lambda: health(gateway)["spool_depth"] == 0, timeout=10)
    assert broker.depth("logs") == 1


@pytest.mark.parametrize("token", [None, "bad"])
def test_gateway_rejects_unauthenticated(gateway, broker, token):
    status, _ = post(gateway, record(), token=token)
    assert status == 401
    assert broker.depth("logs") == 0


def test_gateway_bad_requests(gateway, broker):
    assert post(gateway, b"{nope")[0] == 400
    status, doc = post(gateway, [record(), record(severity="LOUD")])
    assert status == 400 and doc["field"] == "[1].severity"
    assert post(gateway, [record()] * 1001)[0] == 413
    assert broker.depth("logs") == 0


def test_gateway_disk_full(gateway, broker, monkeypatch):
    broker.kill()
    assert wait_for(lambda: not health(gateway)["broker_connected"])

    def full(*a, **k):
        raise DiskFull("no space")

    monkeypatch.setattr(gateway.producer.spool, "append", full)
    assert post(gateway, record())[0] == 507


def test_gateway_config_section():
    cfg = GatewayConfig.from_document({"Gateway": {"Listen": "0.0.0.0:9000", "Target": "logs", "SpoolDir": "/tmp/x",
                                                   "Tokens": {"sha256$00$ab": "p"}}})
    assert (cfg.host, cfg.port, cfg.target, cfg.tokens) == ("0.0.0.0", 9000, "logs", {"sha256$00$ab": "p"})


# shipper


def test_ship_50_lines_one_batch(tmp_path):
    src = tmp_path / "pilot.log"
    src.write_text("".join(f"line {i}\n" for i in range(50)))
    batches = []
    assert ship_logs(src, batches.append, pilot_uuid=PILOT) == 50
    assert len(batches) == 1 and [r.message for r in batches[0]] == [f"line {i}" for i in range(50)]


def test_ship_batches_and_empty(tmp_path):
    batches = []
    n = ship_logs(io.StringIO("".join(f"{i}\n" for i in range(120))), batches.append, pilot_uuid=PILOT)
    assert n == 120 and [len(b) for b in batches] == [50, 50, 20]
    empty = tmp_path / "empty.log"
    empty.write_text("")
    assert ship_logs(empty, batches.append, pilot_uuid=PILOT) == 0
    with pytest.raises(SourceUnreadable):
        ship_logs(tmp_path / "missing.log", batches.append, pilot_uuid=PILOT)


def test_ship_time_based_flush():
    now = [0.0]
    batches = []

    def clock():
        now[0] += 1.0
        return now[0]

    ship_logs(io.StringIO("a\nb\nc\nd\n"), batches.append, pilot_uuid=PILOT, clock=clock)
    assert sum(map(len, batches)) == 4 and len(batches) > 1


def test_ship_retry_budget():
    calls = []

    def flaky(batch):
        calls.append(len(batch))
        if len(calls) < 3:
            raise ConnectionError("down")

    assert ship_logs(io.StringIO("x\n"), flaky, pilot_uuid=PILOT, retry_delay=0.001) == 1
    assert len(calls) == 3

    def dead(batch):
        raise ConnectionError("down")

    with pytest.raises(DeliveryFailed):
        ship_logs(io.StringIO("x\n"), dead, pilot_uuid=PILOT, retries=2, retry_delay=0.001)


def test_ship_follow(tmp_path):
    src = tmp_path / "live.log"
    src.write_text("first\n")
    got = []
    stop = threading.Event()
    result = []
    t = threading.Thread(target=lambda: result.append(
        ship_logs(src, got.extend, pilot_uuid=PILOT, follow=True, stop=stop, batch_interval=0.1, poll=0.02)))
    t.start()
    assert wait_for(lambda: len(got) == 1)
    with open(src, "a") as fh:
        fh.write("second\npartial")
    assert wait_for(lambda: len(got) == 2)
    stop.set()
    t.join(5)
    assert result == [3] and got[-1].message == "partial"


def test_ship_http_rejects_bad_token(gateway):
    with pytest.raises(DeliveryFailed):
        ship_logs(io.StringIO("x\n"), http_sender(gateway.url, "wrong"), pilot_uuid=PILOT)


# sink


def sunk(env_payload, redelivered=False, mid=None):
    env = make_envelope(env_payload, "t", "/queue/logs")
    if mid:
        env = type(env)(env.payload, {**env.headers, "message-id": mid}, redelivered)
    return env


def test_sink_writes_and_dedups(tmp_path):
    sink = LogSink(tmp_path)
    payload = {**record(), "received-at-ms": 1, "principal": "p"}
    sink.handle(sunk(payload, mid="a" * 32))
    sink.handle(sunk(payload, redelivered=True, mid="a" * 32))
    sink.handle(sunk(record(message="second"), mid="b" * 32))
    sink.stop()
    lines = (tmp_path / f"{PILOT}.log").read_text().splitlines()
    assert [json.loads(x)["message"] for x in lines] == ["hi", "second"]
    assert json.loads(lines[0]) == payload
    assert (sink.written, sink.duplicates) == (2, 1)


def test_sink_quarantine(tmp_path):
    sink = LogSink(tmp_path)
    sink.handle(sunk({"timestamp": TS, "message": "orphan"}))
    sink.stop()
    (line,) = (tmp_path / MALFORMED_FILE).read_text().splitlines()
    assert json.loads(line)["payload"]["message"] == "orphan"
    assert sink.quarantined == 1 and not list(tmp_path.glob("*-*.log"))


def test_sink_dedup_window_slides(tmp_path):
    sink = LogSink(tmp_path, dedup_window=2)
    ids = ["1" * 32, "2" * 32, "3" * 32]
    for mid in ids + ids[:1]:
        sink.handle(sunk(record(), mid=mid))
    assert sink.written == 4  # id 1 fell out of the window
    sink.stop()


def test_sink_write_failure_nacks_to_dlq(broker, manager, tmp_path, monkeypatch):
    t = tree(svc=service(broker.port, queues=["logs"]))
    sink = LogSink(tmp_path)

    def broken(name, doc):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(sink, "_append", broken)
    sink.start(t, "logs", manager=manager)
    with create_producer(t, "logs", confirm=True, manager=manager) as p:
        p.put(record())
    assert wait_for(lambda: broker.depth("DLQ.logs") == 1, timeout=10)
    assert sink.written == 0
    sink.stop()


def test_uuid_files_are_per_pilot(tmp_path):
    sink = LogSink(tmp_path)
    pilots = [str(uuid.uuid4()) for _ in range(3)]
    for p in pilots:
        for i in range(2):
            sink.handle(sunk(record(pilot_uuid=p, message=str(i))))
    sink.stop()
    for p in pilots:
        assert len((tmp_path / f"{p}.log").read_text().splitlines()) == 2
