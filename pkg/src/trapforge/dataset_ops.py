"""Salting, reshaping and reporting on tidy packet datasets."""

from __future__ import annotations

import csv
import gzip
import io
import ipaddress
import math
import os
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence, TextIO, Union

from .errors import ConfigError, DataError, IoFailure, SchemaError
from .packet_model import (
    BENIGN,
    LABEL_FIELD,
    PACKET_SCHEMA,
    STATELESS_SCHEMA,
    FeatureSchema,
    PacketRecord,
    TidyDataset,
)


class SchemaMismatch(SchemaError):
    pass


class FlowKey(NamedTuple):
    """Direction-insensitive 5-tuple; the lower (ip, port) endpoint comes first."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: int

    def sort_key(self) -> tuple[int, int, int, int, int]:
        return (
            int(ipaddress.IPv4Address(self.src_ip)),
            self.src_port,
            int(ipaddress.IPv4Address(self.dst_ip)),
            self.dst_port,
            self.proto,
        )


def flow_key(src_ip: str, src_port: int, dst_ip: str, dst_port: int, proto: int) -> FlowKey:
    a = (int(ipaddress.IPv4Address(src_ip)), src_port)
    b = (int(ipaddress.IPv4Address(dst_ip)), dst_port)
    if b < a:
        return FlowKey(dst_ip, dst_port, src_ip, src_port, proto)
    return FlowKey(src_ip, src_port, dst_ip, dst_port, proto)


def record_flow_key(r: PacketRecord) -> FlowKey:
    return flow_key(r.src_ip, r.src_port, r.dst_ip, r.dst_port, r.ip_proto)


FLOW_KEY_FIELDS: tuple[str, ...] = ("src_ip", "src_port", "dst_ip", "dst_port", "ip_proto")
FLOW_AGGREGATES: tuple[str, ...] = (
    "pkt_count",
    "total_bytes",
    "duration_us",
    "mean_interarrival_us",
    "min_payload_len",
    "max_payload_len",
    "syn_count",
    "fin_count",
    "rst_count",
    "distinct_dst_ports",
)
FLOW_SCHEMA = FeatureSchema(FLOW_KEY_FIELDS, FLOW_AGGREGATES)

KNOWN_SCHEMAS: dict[str, FeatureSchema] = {
    "packet": PACKET_SCHEMA,
    "stateless": STATELESS_SCHEMA,
    "flow": FLOW_SCHEMA,
}

_STR_COLUMNS = frozenset({"src_ip", "dst_ip", LABEL_FIELD})
_FLOAT_COLUMNS = frozenset({"mean_interarrival_us"})


@dataclass(frozen=True)
class FlowRecord:
    key: FlowKey
    pkt_count: int
    total_bytes: int
    duration_us: int
    mean_interarrival_us: float
    min_payload_len: int
    max_payload_len: int
    syn_count: int
    fin_count: int
    rst_count: int
    distinct_dst_ports: int
    label: str | None

    def to_row(self) -> tuple[Any, ...]:
        return (
            *self.key,
            self.pkt_count,
            self.total_bytes,
            self.duration_us,
            self.mean_interarrival_us,
            self.min_payload_len,
            self.max_payload_len,
            self.syn_count,
            self.fin_count,
            self.rst_count,
            self.distinct_dst_ports,
            self.label,
        )


def _require_schema(d: TidyDataset, schema: FeatureSchema, what: str) -> None:
    if d.schema != schema:
        have, want = d.schema.columns, schema.columns
        diff = next(
            (f"column {i}: {a!r} vs expected {b!r}" for i, (a, b) in enumerate(zip(have, want)) if a != b),
            f"{len(have)} columns vs expected {len(want)}",
        )
        raise SchemaMismatch(f"{what}: schema mismatch at {diff}")


def _relabel(rows: Iterable[tuple[Any, ...]], label: str) -> list[tuple[Any, ...]]:
    return [row[:-1] + (label,) for row in rows]


def salt(
    benign: TidyDataset,
    attacks: Sequence[tuple[str, TidyDataset]],
    seed: int,
) -> TidyDataset:
    """Merge benign rows with labeled attack rows and shuffle with ``seed``.

    Benign rows must be unlabeled or already labeled ``benign``. Each attack
    dataset's rows take the label paired with it.
    """
    schema = benign.schema
    for label, ds in attacks:
        _require_schema(ds, schema, f"attack set {label!r}")
        if not label or label == BENIGN:
            raise DataError(f"attack label {label!r} is not a valid attack class")
    stray = {row[-1] for row in benign.rows} - {None, BENIGN}
    if stray:
        raise DataError(f"benign input carries non-benign labels {sorted(map(str, stray))}")
    rows = _relabel(benign.rows, BENIGN)
    for label, ds in attacks:
        rows.extend(_relabel(ds.rows, label))
    random.Random(seed).shuffle(rows)
    return TidyDataset(schema, rows)


def benign_count_for_ratio(ratio: float, attack_rows: int) -> int:
    """Benign rows needed so that benign / (benign + attack) is nearest ``ratio``.

    Rounding keeps the achieved proportion within 1/(2N) of ``ratio`` where N
    is the salted size.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"benign ratio must be in (0, 1), got {ratio}")
    return int(math.floor(ratio * attack_rows / (1 - ratio) + 0.5))


def to_stateless(d: TidyDataset) -> TidyDataset:
    """Drop the context-aware columns; rows and their order are kept."""
    if d.schema == STATELESS_SCHEMA:
        return TidyDataset(STATELESS_SCHEMA, list(d.rows))
    _require_schema(d, PACKET_SCHEMA, "to_stateless")
    n_ctx = len(PACKET_SCHEMA.context)
    return TidyDataset(STATELESS_SCHEMA, [row[n_ctx:] for row in d.rows])


def _flow_label(labels: Iterable[str | None]) -> str | None:
    counts = Counter(lbl for lbl in labels if lbl is not None)
    attacks = [(-n, lbl) for lbl, n in counts.items() if lbl != BENIGN]
    if attacks:
        return min(attacks)[1]
    return BENIGN if counts else None


def aggregate_flow(key: FlowKey, members: Sequence[PacketRecord]) -> FlowRecord:
    ts = sorted(r.ts_epoch_us for r in members)
    n = len(members)
    duration = ts[-1] - ts[0]
    payloads = [r.payload_len for r in members]
    return FlowRecord(
        key=key,
        pkt_count=n,
        total_bytes=sum(r.frame_len for r in members),
        duration_us=duration,
        mean_interarrival_us=duration / (n - 1) if n > 1 else 0.0,
        min_payload_len=min(payloads),
        max_payload_len=max(payloads),
        syn_count=sum(r.tcp_flag_syn for r in members),
        fin_count=sum(r.tcp_flag_fin for r in members),
        rst_count=sum(r.tcp_flag_rst for r in members),
        distinct_dst_ports=len({r.dst_port for r in members}),
        label=_flow_label(r.label for r in members),
    )


def to_stateful(d: TidyDataset) -> list[FlowRecord]:
    """One FlowRecord per conversation, sorted by canonical flow key.

    A flow containing any attack packet takes the attack label (the most
    frequent one if several).
    """
    _require_schema(d, PACKET_SCHEMA, "to_stateful")
    groups: dict[FlowKey, list[PacketRecord]] = defaultdict(list)
    for r in d.records():
        groups[record_flow_key(r)].append(r)
    return [aggregate_flow(k, groups[k]) for k in sorted(groups, key=FlowKey.sort_key)]


def flows_to_dataset(flows: Iterable[FlowRecord]) -> TidyDataset:
    return TidyDataset(FLOW_SCHEMA, [f.to_row() for f in flows])


@dataclass(frozen=True)
class ClassStats:
    total: int
    counts: dict[str, int]
    proportions: dict[str, float]
    percent: dict[str, int]

    def rows(self) -> list[tuple[str, int, float, int]]:
        return [(k, self.counts[k], self.proportions[k], self.percent[k]) for k in self.counts]

    def format(self) -> str:
        if not self.total:
            return "(empty dataset)"
        width = max(len(k) for k in self.counts)
        lines = [f"{k:<{width}}  {n:>10,d}  {p * 100:7.3f}%  ~{pct}%" for k, n, p, pct in self.rows()]
        lines.append(f"{'total':<{width}}  {self.total:>10,d}")
        return "\n".join(lines)


def _stats_from_counts(counts: Counter) -> ClassStats:
    total = sum(counts.values())
    ordered = dict(sorted(counts.items(), key=lambda kv: (kv[0] != BENIGN, kv[0])))
    props = {k: n / total for k, n in ordered.items()}
    return ClassStats(total, ordered, props, {k: round(p * 100) for k, p in props.items()})


def _label_counts(d: TidyDataset | Iterable[Any]) -> Counter:
    labels = d.labels() if isinstance(d, TidyDataset) else d
    return Counter("unlabeled" if lbl is None else lbl for lbl in labels)


def dataset_stats(d: TidyDataset | Iterable[Any]) -> ClassStats:
    """Per-class counts and proportions (exact and rounded to whole percent)."""
    return _stats_from_counts(_label_counts(d))


def binary_stats(d: TidyDataset | Iterable[Any]) -> ClassStats:
    """Collapse every attack class into one ``attack`` class."""
    counts = Counter()
    for lbl, n in _label_counts(d).items():
        counts[lbl if lbl in (BENIGN, "unlabeled") else "attack"] += n
    return _stats_from_counts(counts)


# -- CSV --------------------------------------------------------------------

Exportable = Union[TidyDataset, Sequence[FlowRecord]]


def _as_dataset(data: Exportable) -> TidyDataset:
    if isinstance(data, TidyDataset):
        return data
    return flows_to_dataset(data)


def _format(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(data: Exportable, out: TextIO) -> None:
    d = _as_dataset(data)
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(d.schema.columns)
    for row in d.rows:
        writer.writerow([_format(v) for v in row])


def export_csv(data: Exportable, destination: str | os.PathLike | TextIO | None = None) -> bytes:
    """Render as RFC-4180 CSV; write it to ``destination`` if given.

    A path ending in ``.gz`` is gzip-compressed (with a zero mtime so the
    output is reproducible). Returns the uncompressed CSV bytes.
    """
    buf = io.StringIO()
    write_csv(data, buf)
    payload = buf.getvalue().encode("utf-8")
    if destination is None:
        return payload
    if hasattr(destination, "write"):
        destination.write(buf.getvalue())
        return payload
    path = Path(destination)
    try:
        if path.suffix == ".gz":
            with open(path, "wb") as fh, gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None
    return payload


def detect_schema(header: Sequence[str]) -> FeatureSchema:
    header = tuple(header)
    for schema in KNOWN_SCHEMAS.values():
        if header == schema.columns:
            return schema
    # report against the closest layout by column count
    best = min(KNOWN_SCHEMAS.values(), key=lambda s: abs(len(s.columns) - len(header)))
    for i, (have, want) in enumerate(zip(header, best.columns)):
        if have != want:
            raise SchemaMismatch(f"column {i + 1} is {have!r}, expected {want!r}")
    if len(header) < len(best.columns):
        raise SchemaMismatch(f"missing column {best.columns[len(header)]!r}")
    raise SchemaMismatch(f"unexpected column {header[len(best.columns)]!r}")


def _parse_value(column: str, raw: str, line: int) -> Any:
    if column == LABEL_FIELD:
        return raw or None
    if column in _STR_COLUMNS:
        return raw
    try:
        return float(raw) if column in _FLOAT_COLUMNS else int(raw)
    except ValueError:
        raise DataError(f"line {line}: column {column!r} has non-numeric value {raw!r}") from None


def read_csv(src: TextIO) -> TidyDataset:
    reader = csv.reader(src)
    header = next(reader, None)
    if header is None:
        raise SchemaMismatch("CSV is empty, no header row")
    schema = detect_schema(header)
    cols = schema.columns
    rows = []
    for line, raw in enumerate(reader, start=2):
        if len(raw) != len(cols):
            raise DataError(f"line {line}: {len(raw)} fields, expected {len(cols)}")
        rows.append(tuple(_parse_value(c, v, line) for c, v in zip(cols, raw)))
    return TidyDataset(schema, rows)


def import_csv(source: str | os.PathLike | TextIO) -> TidyDataset:
    if hasattr(source, "read"):
        return read_csv(source)
    path = Path(source)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rt", encoding="utf-8", newline="") as fh:
                return read_csv(fh)
        with open(path, encoding="utf-8", newline="") as fh:
            return read_csv(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
