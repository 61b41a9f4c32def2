"""Acceptance suite: one PASS/FAIL line per criterion.

The lines are printed in the pytest terminal summary.
"""

import io
import json
import random
import time
from collections import Counter, defaultdict
from dataclasses import replace

import pytest

from trapforge import craft
from trapforge.attack_campaign import Simulation, label_from_filename, load_config
from trapforge.benign_pipeline import AnomalyDescriptor, LabelSet, filter_benign, sample_packets
from trapforge.capture_control import (
    STATUS_OK,
    STATUS_REFUSED,
    AppendFrame,
    CapturedFrame,
    CloseFile,
    ControlMessage,
    DaemonState,
    Datagram,
    Kind,
    OpenFile,
    SendDatagram,
    Shutdown,
    daemon_step,
    decode_message,
    encode_message,
)
from trapforge.dataset_ops import (
    benign_count_for_ratio,
    dataset_stats,
    export_csv,
    flows_to_dataset,
    import_csv,
    salt,
    to_stateful,
    to_stateless,
)
from trapforge.packet_model import (
    INTRINSIC_FIELDS,
    LINKTYPE_ETHERNET,
    PACKET_SCHEMA,
    PacketRecord,
    TidyDataset,
    extract_features,
)
from trapforge.pcap_io import CaptureFile, Frame, read_pcap, read_pcap_file, write_pcap

from .conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance


def verdict(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, detail


def _is_attacker_to_target(data, attacker, target):
    """Independent predicate: decode the frame and compare addresses."""
    rec = extract_features(data, LINKTYPE_ETHERNET, 0)
    return isinstance(rec, PacketRecord) and rec.ip_proto == 6 and (rec.src_ip, rec.dst_ip) == (attacker, target)


def _random_record(rng, ips, ports, label=None):
    return replace(
        _BASE,
        ts_epoch_us=rng.randrange(10**9),
        src_ip=rng.choice(ips),
        src_port=rng.choice(ports),
        dst_ip=rng.choice(ips),
        dst_port=rng.choice(ports),
        tcp_flag_syn=rng.randrange(2),
        tcp_flag_ack=rng.randrange(2),
        tcp_flag_fin=rng.randrange(2),
        tcp_flag_rst=rng.randrange(2),
        label=label,
    )


_BASE = extract_features(craft.tcp_frame("10.0.0.1", "10.0.0.2", 1, 2, 0x02), LINKTYPE_ETHERNET, 0)
IPS = [f"10.1.0.{i}" for i in range(1, 9)]
PORTS = [22, 80, 443, 1024, 40000]


def test_stats_arithmetic_reproduction():
    t0 = time.perf_counter()
    row_a = _BASE.with_label("attack").to_row()
    row_b = _BASE.with_label("benign").to_row()
    data = TidyDataset(PACKET_SCHEMA, [row_a] * 455_503 + [row_b] * 380_438)
    stats = dataset_stats(data)
    elapsed = time.perf_counter() - t0
    ok = (
        stats.total == 835_941
        and stats.counts == {"attack": 455_503, "benign": 380_438}
        and stats.percent == {"attack": 54, "benign": 46}
        and elapsed < 1.0
    )
    verdict(
        "stats arithmetic",
        ok,
        f"total {stats.total}, benign {stats.percent.get('benign')}%, attack {stats.percent.get('attack')}%, {elapsed:.3f}s (limit 1s)",
    )


def test_labeling_by_design(tmp_path):
    targets = ["10.0.0.2", "10.0.0.3"]
    config = load_config(json.dumps({"seed": 2020, "classes": {"count": 22, "targets": targets}}))
    classes = {a.label for a in config.attacks}
    t0 = time.perf_counter()
    sim = Simulation.build(config, tmp_path)
    result = sim.run()
    elapsed = time.perf_counter() - t0

    violations = 0
    frames_seen = 0
    recovered = Counter()
    per_class_probes = defaultdict(list)
    for run in result.runs:
        label, ts = label_from_filename(run.filename)
        recovered[(label, run.target)] += label == run.label and ts == run.start_ts
        cap = read_pcap_file(sim.path_of(run))
        frames_seen += len(cap.frames)
        violations += sum(not _is_attacker_to_target(f.data, config.attacker_ip, run.target) for f in cap.frames)
        violations += len(cap.frames) != run.probes
        per_class_probes[run.label].append(run.probes)
    expected = {(label, t) for label in classes for t in targets}
    ok = (
        len(classes) == 22
        and result.ok
        and set(recovered) == expected
        and all(v == 1 for v in recovered.values())
        and violations == 0
        and min(min(v) for v in per_class_probes.values()) >= 200
        and elapsed < 30
    )
    verdict(
        "labeling-by-design",
        ok,
        f"{len(result.runs)} captures ({len(classes)} classes x {len(targets)} targets), {frames_seen} frames, "
        f"{violations} violations, min {min(min(v) for v in per_class_probes.values())} probes/class, "
        f"{len(result.errors)} errors, {elapsed:.1f}s (limit 30s)",
    )


def test_filter_soundness():
    rng = random.Random(7)
    packets = [_random_record(rng, IPS, PORTS) for _ in range(12_000)]
    fields = ("src_ip", "src_port", "dst_ip", "dst_port", "proto")
    descriptors = []
    while len(descriptors) < 60:
        picks = {
            "src_ip": rng.choice(IPS),
            "src_port": rng.choice(PORTS),
            "dst_ip": rng.choice(IPS),
            "dst_port": rng.choice(PORTS),
            "proto": rng.choice([6, 6, 17]),
        }
        chosen = rng.sample(fields, rng.randint(2, 4))
        descriptors.append(
            AnomalyDescriptor(rng.choice(["anomalous", "suspicious", "notice", "benign"]), **{k: picks[k] for k in chosen})
        )
    labels = LabelSet(descriptors)

    def oracle(p, remove_notice):
        taxa = {"anomalous", "suspicious"} | ({"notice"} if remove_notice else set())
        view = {"src_ip": p.src_ip, "src_port": p.src_port, "dst_ip": p.dst_ip, "dst_port": p.dst_port, "proto": p.ip_proto}
        for d in descriptors:
            if d.taxonomy not in taxa:
                continue
            pattern = {k: getattr(d, k) for k in fields if getattr(d, k) is not None}
            if all(view[k] == v for k, v in pattern.items()):
                return True
        return False

    t0 = time.perf_counter()
    disagreements = 0
    removed_total = 0
    for remove_notice in (False, True):
        kept, removed, report = filter_benign(packets, labels, remove_notice=remove_notice)
        expect_removed = [p for p in packets if oracle(p, remove_notice)]
        expect_kept = [p for p in packets if not oracle(p, remove_notice)]
        disagreements += sum(a is not b for a, b in zip(kept, expect_kept)) + abs(len(kept) - len(expect_kept))
        disagreements += sum(a is not b for a, b in zip(removed, expect_removed)) + abs(len(removed) - len(expect_removed))
        disagreements += report.kept + report.removed != len(packets)
        disagreements += sum(n for _, n in report.per_descriptor) != report.removed
        removed_total += len(removed)
    elapsed = time.perf_counter() - t0
    ok = disagreements == 0 and elapsed < 10 and 0 < removed_total < 2 * len(packets)
    verdict(
        "filter soundness",
        ok,
        f"{len(packets)} packets x {len(descriptors)} descriptors, both notice modes, "
        f"{disagreements} disagreements, {removed_total} removals, {elapsed:.2f}s (limit 10s)",
    )


def _attack_sets(rng, n_classes):
    out = []
    for i in range(n_classes):
        size = rng.randint(0, 300)
        out.append((f"class{i}", TidyDataset.from_records(_random_record(rng, IPS, PORTS) for _ in range(size))))
    return out


def test_salting_conservation():
    rng = random.Random(11)
    failures = []
    checks = 0
    for trial in range(30):
        benign = [_random_record(rng, IPS, PORTS) for _ in range(rng.randint(0, 400))]
        attacks = _attack_sets(rng, rng.randint(1, 5))
        out = salt(TidyDataset.from_records(benign), attacks, seed=trial)
        expected = Counter({"benign": len(benign)}) + Counter({lbl: len(d) for lbl, d in attacks})
        got = Counter(out.labels())
        checks += 1
        if +expected != got:
            failures.append(f"trial {trial}: {dict(got)} != {dict(expected)}")

    worst = 0.0
    for r in (0.25, 0.46, 0.75):
        for trial in range(10):
            attacks = _attack_sets(rng, rng.randint(1, 4))
            n_attack = sum(len(d) for _, d in attacks)
            if n_attack == 0:
                continue
            want = benign_count_for_ratio(r, n_attack)
            pool = [_random_record(rng, IPS, PORTS) for _ in range(want + rng.randint(0, 200))]
            benign = sample_packets(pool, count=want, seed=trial)
            out = salt(TidyDataset.from_records(benign), attacks, seed=trial)
            n = len(out)
            achieved = Counter(out.labels())["benign"] / n
            worst = max(worst, abs(achieved - r) * n)
            checks += 1
            if abs(achieved - r) > 1 / n:
                failures.append(f"r={r} trial {trial}: achieved {achieved:.5f} with N={n}")
    ok = not failures
    verdict(
        "salting conservation",
        ok,
        f"{checks} randomized checks, worst ratio error {worst:.3f}/N (limit 1/N)"
        + (f"; first failure: {failures[0]}" if failures else ""),
    )


def _brute_groups(rows):
    groups = Counter()
    for r in rows:
        a = (tuple(int(x) for x in r.src_ip.split(".")), r.src_port)
        b = (tuple(int(x) for x in r.dst_ip.split(".")), r.dst_port)
        groups[(frozenset([a, b]), r.ip_proto)] += 1
    return groups


def test_reshape_consistency():
    rng = random.Random(5)
    bad = []
    instances = 40
    intrinsic_idx = [PACKET_SCHEMA.columns.index(c) for c in INTRINSIC_FIELDS]
    for trial in range(instances):
        benign = TidyDataset.from_records(_random_record(rng, IPS, PORTS) for _ in range(rng.randint(0, 500)))
        attacks = _attack_sets(rng, rng.randint(1, 3))
        data = salt(benign, attacks, seed=trial)
        if len(data) > 1000:
            data = TidyDataset(data.schema, data.rows[:1000])
        n = len(data)
        sl = to_stateless(data)
        projected = [tuple(row[i] for i in intrinsic_idx) + (row[-1],) for row in data.rows]
        if len(sl) != n or len(sl.schema.columns) != 36 or sl.rows != projected:
            bad.append(f"stateless trial {trial}")
        flows = to_stateful(data)
        groups = _brute_groups(data.records())
        mine = Counter()
        for f in flows:
            a = (tuple(int(x) for x in f.key.src_ip.split(".")), f.key.src_port)
            b = (tuple(int(x) for x in f.key.dst_ip.split(".")), f.key.dst_port)
            mine[(frozenset([a, b]), f.key.proto)] += f.pkt_count
        if sum(f.pkt_count for f in flows) != n or mine != groups or len(flows) != len(groups):
            bad.append(f"stateful trial {trial}")
    verdict("reshape consistency", not bad, f"{instances} salted instances of <=1000 packets, {len(bad)} mismatches")


def _random_label(rng):
    alphabet = "abcxyz_-.0123456789 ,\"'éß日本"
    while True:
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40)))
        if len(s.encode()) <= 255:
            return s


def test_format_round_trips(tmp_path):
    rng = random.Random(3)
    pcap_bad = 0
    for _ in range(1000):
        frames = []
        for _ in range(rng.randint(0, 6)):
            data = rng.randbytes(rng.randint(0, 200))
            orig = len(data) + rng.choice([0, 0, rng.randint(1, 1000)])
            frames.append(Frame.of(rng.randrange(2**32 * 1_000_000), data, orig))
        cap = CaptureFile(rng.choice([1, 101, 228]), frames)
        raw = write_pcap(cap)
        back = read_pcap(io.BytesIO(raw))
        pcap_bad += back != cap or write_pcap(back) != raw

    msg_bad = 0
    for _ in range(1000):
        pick = rng.randrange(3)
        if pick == 0:
            m = ControlMessage.start(_random_label(rng))
        elif pick == 1:
            m = ControlMessage.stop()
        else:
            m = ControlMessage.ack(rng.choice([Kind.START, Kind.STOP]), rng.choice([STATUS_OK, STATUS_REFUSED]))
        raw = encode_message(m)
        msg_bad += decode_message(raw) != m or encode_message(decode_message(raw)) != raw

    csv_bad = 0
    csv_cases = 0
    for trial in range(40):
        records = [_random_record(rng, IPS, PORTS, label=_random_label(rng)) for _ in range(rng.randint(0, 60))]
        data = TidyDataset.from_records(records)
        for kind, d in (("packets", data), ("stateless", to_stateless(data)), ("flows", flows_to_dataset(to_stateful(data)))):
            for suffix in (".csv", ".csv.gz"):
                path = tmp_path / f"{trial}_{kind}{suffix}"
                export_csv(d, path)
                csv_cases += 1
                csv_bad += import_csv(path) != d
    ok = pcap_bad == 0 and msg_bad == 0 and csv_bad == 0
    verdict(
        "format round-trips",
        ok,
        f"pcap {1000 - pcap_bad}/1000, ControlMessage {1000 - msg_bad}/1000, CSV {csv_cases - csv_bad}/{csv_cases} exact",
    )


TARGET = "10.9.0.2"
SENDERS = ["10.9.0.1", "10.9.0.3", TARGET]


def _random_event(rng):
    roll = rng.random()
    addr = (rng.choice(SENDERS), rng.randint(1024, 65535))
    if roll < 0.25:
        return Datagram(encode_message(ControlMessage.start(rng.choice(["syn", "fin", "x_y"]))), addr, rng.uniform(1e9, 2e9))
    if roll < 0.5:
        return Datagram(encode_message(ControlMessage.stop()), addr, 0)
    if roll < 0.55:
        return Datagram(b"ABTP\x01\x01\x00\x05a/b", addr, 0)
    if roll < 0.6:
        return Datagram(rng.randbytes(rng.randint(0, 12)), addr, 0)
    if roll < 0.97:
        src, dst = rng.choice(SENDERS), rng.choice(SENDERS)
        if rng.random() < 0.2:
            frame = craft.udp_frame(src, dst, 1, 2)
        else:
            frame = craft.tcp_frame(src, dst, rng.randint(1, 65535), rng.randint(1, 65535), rng.randrange(256))
        return CapturedFrame(rng.randrange(10**12), frame)
    return Shutdown()


def _request_kind(payload):
    """The request kind a well-formed header names, or None for garbage."""
    if len(payload) >= 8 and payload[:5] == b"ABTP\x01" and payload[5] in (1, 2):
        return Kind(payload[5])
    return None


def test_protocol_robustness():
    rng = random.Random(99)
    problems = Counter()
    requests = misordered = events = 0
    for _ in range(300):
        state = DaemonState(TARGET)
        open_files = set()
        attacker = None
        for _ in range(rng.randint(1, 80)):
            ev = _random_event(rng)
            events += 1
            before_open = set(open_files)
            state, actions = daemon_step(state, ev)
            for a in actions:
                if isinstance(a, OpenFile):
                    if open_files:
                        problems["two files open"] += 1
                    open_files.add(a.name)
                elif isinstance(a, CloseFile):
                    open_files.discard(a.name)
                elif isinstance(a, AppendFrame):
                    if a.name not in open_files or not _is_attacker_to_target(a.frame.data, attacker, TARGET):
                        problems["bad append"] += 1
            if len(open_files) > 1:
                problems["two files open"] += 1

            if isinstance(ev, Datagram):
                kind = _request_kind(ev.payload)
                replies = [decode_message(a.payload) for a in actions if isinstance(a, SendDatagram)]
                if kind is None:
                    if actions:
                        problems["answered garbage"] += 1
                    continue
                requests += 1
                if len(replies) != 1 or replies[0].kind != {Kind.START: Kind.ACK_START, Kind.STOP: Kind.ACK_STOP}[kind]:
                    problems["unanswered request"] += 1
                    continue
                sender = ev.addr[0]
                try:
                    decode_message(ev.payload)
                    well_formed = True
                except Exception:
                    well_formed = False
                if kind is Kind.START:
                    misplaced = bool(before_open) or sender == TARGET
                    if bool(before_open):
                        misordered += 1
                    expect_ok = well_formed and not misplaced
                    if expect_ok:
                        attacker = sender
                else:
                    if not before_open:
                        misordered += 1
                    expect_ok = well_formed and bool(before_open) and sender == attacker
                want = STATUS_OK if expect_ok else STATUS_REFUSED
                if replies[0].status != want:
                    problems["wrong status"] += 1
                if not expect_ok and (open_files != before_open):
                    problems["refusal changed state"] += 1
            elif isinstance(ev, Shutdown):
                if open_files:
                    problems["shutdown left file open"] += 1
    verdict(
        "protocol robustness",
        not problems and misordered > 0,
        f"{events} events in 300 random traces, {requests} requests answered, "
        f"{misordered} misordered commands refused, violations {dict(problems) or 0}",
    )
