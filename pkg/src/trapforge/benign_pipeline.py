"""Benign traffic from public backbone traces.

Packets matched by any anomalous or suspicious label are removed; the rest is
sampled down, either packet by packet or by whole conversations.

Canonical label file (CSV, ``#`` comments, empty field = wildcard)::

    taxonomy,src_ip,src_port,dst_ip,dst_port,proto
    anomalous,192.0.2.1,,,,6
"""

from __future__ import annotations

import csv
import ipaddress
import io
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .dataset_ops import FlowKey, record_flow_key
from .errors import ConfigError, DataError
from .packet_model import PacketRecord, SkipReason, extract_features
from .pcap_io import PcapReader

log = logging.getLogger(__name__)

TAXONOMIES = ("anomalous", "suspicious", "notice", "benign")
REMOVING = frozenset({"anomalous", "suspicious"})
LABEL_HEADER = ("taxonomy", "src_ip", "src_port", "dst_ip", "dst_port", "proto")


class BadLine(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class TargetTooLarge(DataError):
    pass


@dataclass(frozen=True)
class AnomalyDescriptor:
    """5-tuple pattern; ``None`` fields are wildcards."""

    taxonomy: str
    src_ip: str | None = None
    src_port: int | None = None
    dst_ip: str | None = None
    dst_port: int | None = None
    proto: int | None = None

    def __post_init__(self) -> None:
        if self.taxonomy not in TAXONOMIES:
            raise ValueError(f"taxonomy {self.taxonomy!r} not in {TAXONOMIES}")
        if all(v is None for v in self.pattern()):
            raise ValueError("descriptor has no non-wildcard field")

    def pattern(self) -> tuple:
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto)

    def to_line(self) -> str:
        return ",".join("" if v is None else str(v) for v in (self.taxonomy, *self.pattern()))


@dataclass
class LabelSet:
    descriptors: list[AnomalyDescriptor] = field(default_factory=list)
    source: str = ""

    def __len__(self) -> int:
        return len(self.descriptors)

    def __iter__(self) -> Iterator[AnomalyDescriptor]:
        return iter(self.descriptors)

    def to_text(self) -> str:
        lines = [",".join(LABEL_HEADER)] + [d.to_line() for d in self.descriptors]
        return "\n".join(lines) + "\n"


def _opt_ip(raw: str, line: int) -> str | None:
    raw = raw.strip()
    if not raw:
        return None
    try:
        return str(ipaddress.IPv4Address(raw))
    except ValueError:
        raise BadLine(line, f"invalid IP {raw!r}") from None


def _opt_int(raw: str, line: int, name: str, hi: int) -> int | None:
    raw = raw.strip()
    if not raw:
        return None
    if not raw.isdigit() or int(raw) > hi:
        raise BadLine(line, f"invalid {name} {raw!r}")
    return int(raw)


def parse_label_file(text: str, source: str = "") -> LabelSet:
    descriptors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = next(csv.reader([stripped]))
        if tuple(f.strip() for f in fields) == LABEL_HEADER:
            continue
        if len(fields) != len(LABEL_HEADER):
            raise BadLine(lineno, f"expected {len(LABEL_HEADER)} fields, got {len(fields)}")
        taxonomy = fields[0].strip()
        if taxonomy not in TAXONOMIES:
            raise BadLine(lineno, f"invalid taxonomy {taxonomy!r}")
        values = dict(
            src_ip=_opt_ip(fields[1], lineno),
            src_port=_opt_int(fields[2], lineno, "port", 0xFFFF),
            dst_ip=_opt_ip(fields[3], lineno),
            dst_port=_opt_int(fields[4], lineno, "port", 0xFFFF),
            proto=_opt_int(fields[5], lineno, "protocol", 0xFF),
        )
        if all(v is None for v in values.values()):
            raise BadLine(lineno, "all fields are wildcards")
        descriptors.append(AnomalyDescriptor(taxonomy, **values))
    return LabelSet(descriptors, source)


def convert_mawilab(text: str, source: str = "") -> LabelSet:
    """Convert a MAWILab ``*_anomalous_suspicious.csv`` / ``*_notice.csv`` file.

    Those files carry ``anomalyID,srcIP,srcPort,dstIP,dstPort,taxonomy,
    heuristic,distance,nbDetectors,label`` rows where ``label`` is the
    MAWILab class and empty fields are wildcards. They have no protocol
    column, so converted descriptors match any protocol.
    """
    reader = csv.reader(io.StringIO(text))
    out = []
    header: list[str] | None = None
    for lineno, fields in enumerate(reader, start=1):
        if not fields or fields[0].lstrip().startswith("#"):
            continue
        if header is None and "srcIP" in [f.strip() for f in fields]:
            header = [f.strip() for f in fields]
            continue
        cols = header or [
            "anomalyID", "srcIP", "srcPort", "dstIP", "dstPort",
            "taxonomy", "heuristic", "distance", "nbDetectors", "label",
        ]
        if len(fields) < len(cols):
            raise BadLine(lineno, f"expected {len(cols)} fields, got {len(fields)}")
        row = dict(zip(cols, (f.strip() for f in fields)))
        cls = row.get("label", "").lower()
        if cls not in TAXONOMIES:
            raise BadLine(lineno, f"invalid MAWILab label {cls!r}")
        values = dict(
            src_ip=_opt_ip(row.get("srcIP", ""), lineno),
            src_port=_opt_int(row.get("srcPort", ""), lineno, "port", 0xFFFF),
            dst_ip=_opt_ip(row.get("dstIP", ""), lineno),
            dst_port=_opt_int(row.get("dstPort", ""), lineno, "port", 0xFFFF),
        )
        if all(v is None for v in values.values()):
            log.warning("line %d: all-wildcard MAWILab anomaly skipped", lineno)
            continue
        out.append(AnomalyDescriptor(cls, **values))
    return LabelSet(out, source)


def matches(d: AnomalyDescriptor, p: PacketRecord) -> bool:
    return (
        (d.src_ip is None or d.src_ip == p.src_ip)
        and (d.src_port is None or d.src_port == p.src_port)
        and (d.dst_ip is None or d.dst_ip == p.dst_ip)
        and (d.dst_port is None or d.dst_port == p.dst_port)
        and (d.proto is None or d.proto == p.ip_proto)
    )


@dataclass
class FilterReport:
    total: int
    kept: int
    removed: int
    # removals attributed to the first removing descriptor that matched
    per_descriptor: list[tuple[AnomalyDescriptor, int]]

    def format(self) -> str:
        lines = [f"input {self.total}  kept {self.kept}  removed {self.removed}"]
        lines += [f"  {n:>8d}  {d.to_line()}" for d, n in self.per_descriptor if n]
        return "\n".join(lines)


def filter_benign(
    packets: Iterable[PacketRecord],
    labels: LabelSet,
    remove_notice: bool = False,
) -> tuple[list[PacketRecord], list[PacketRecord], FilterReport]:
    """Split packets into (kept, removed, report).

    A packet is removed iff some anomalous or suspicious descriptor matches
    it (``notice`` too, with ``remove_notice``).
    """
    removing = REMOVING | {"notice"} if remove_notice else REMOVING
    active = [(i, d) for i, d in enumerate(labels.descriptors) if d.taxonomy in removing]
    counts = [0] * len(labels.descriptors)
    kept: list[PacketRecord] = []
    removed: list[PacketRecord] = []
    for p in packets:
        for i, d in active:
            if matches(d, p):
                counts[i] += 1
                removed.append(p)
                break
        else:
            kept.append(p)
    report = FilterReport(
        total=len(kept) + len(removed),
        kept=len(kept),
        removed=len(removed),
        per_descriptor=list(zip(labels.descriptors, counts)),
    )
    return kept, removed, report


def resolve_target(n: int, count: int | None = None, ratio: float | None = None) -> int:
    if (count is None) == (ratio is None):
        raise ConfigError("give exactly one of a sample count or a sample ratio")
    if ratio is not None:
        if not 0 < ratio <= 1:
            raise ConfigError(f"sample ratio must be in (0, 1], got {ratio}")
        return round(ratio * n)
    if count < 0:
        raise ConfigError(f"sample count must be >= 0, got {count}")
    if count > n:
        raise TargetTooLarge(f"sample of {count} requested from a population of {n}")
    return count


def sample_packets(
    packets: Sequence[PacketRecord],
    *,
    count: int | None = None,
    ratio: float | None = None,
    seed: int = 0,
    mode: str = "stateless",
) -> list[PacketRecord]:
    """Seeded random sample, returned in population order.

    ``stateless`` draws exactly the target number of packets without
    replacement. ``stateful`` draws whole conversations in random order until
    the target is reached; the conversation that crosses it is kept whole.
    """
    target = resolve_target(len(packets), count, ratio)
    rng = random.Random(seed)
    if mode == "stateless":
        chosen = sorted(rng.sample(range(len(packets)), target))
        return [packets[i] for i in chosen]
    if mode != "stateful":
        raise ConfigError(f"unknown sampling mode {mode!r}; use 'stateless' or 'stateful'")
    groups: dict[FlowKey, list[int]] = defaultdict(list)
    for i, p in enumerate(packets):
        groups[record_flow_key(p)].append(i)
    keys = list(groups)
    rng.shuffle(keys)
    picked: list[int] = []
    for k in keys:
        if len(picked) >= target:
            break
        picked.extend(groups[k])
    return [packets[i] for i in sorted(picked)]


@dataclass
class TraceReport:
    frames: int = 0
    packets: int = 0
    skipped: dict[str, int] = field(default_factory=dict)

    def skip(self, reason: str) -> None:
        self.skipped[reason] = self.skipped.get(reason, 0) + 1


def records_from_pcap(stream, report: TraceReport | None = None) -> Iterator[PacketRecord]:
    """Yield IPv4/TCP records from a pcap stream, tallying what was skipped."""
    report = report if report is not None else TraceReport()
    reader = PcapReader(stream)
    for frame in reader:
        report.frames += 1
        try:
            rec = extract_features(frame.data, reader.link_type, frame.ts_us, frame.orig_len)
        except DataError as exc:
            report.skip(type(exc).__name__.lower())
            continue
        if isinstance(rec, SkipReason):
            report.skip(rec.value)
            continue
        report.packets += 1
        yield rec
