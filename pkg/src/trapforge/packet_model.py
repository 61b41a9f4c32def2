"""Tidy packet schema and IPv4/TCP feature extraction.

One row per packet. The 41 feature columns split into 6 context-aware
columns (shared by every packet of a conversation) and 35 packet-intrinsic
columns (determined by the packet's own headers). The label lives in its own
column after the features.
"""

from __future__ import annotations

import enum
import ipaddress
import socket
import struct
from collections import Counter
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable, Iterator, Sequence

from .errors import DataError

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

ETHERTYPE_IPV4 = 0x0800
_VLAN_ETHERTYPES = (0x8100, 0x88A8)

IPPROTO_TCP = 6
IPPROTO_UDP = 17

BENIGN = "benign"

CONTEXT_FIELDS: tuple[str, ...] = (
    "ts_epoch_us",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "ip_proto",
)

INTRINSIC_FIELDS: tuple[str, ...] = (
    "frame_len",
    # IPv4 header
    "ip_version",
    "ip_ihl",
    "ip_dscp",
    "ip_ecn",
    "ip_total_len",
    "ip_id",
    "ip_flag_rf",
    "ip_flag_df",
    "ip_flag_mf",
    "ip_frag_offset",
    "ip_ttl",
    "ip_checksum",
    # TCP header
    "tcp_seq",
    "tcp_ack",
    "tcp_data_offset",
    "tcp_reserved",
    "tcp_flag_cwr",
    "tcp_flag_ece",
    "tcp_flag_urg",
    "tcp_flag_ack",
    "tcp_flag_psh",
    "tcp_flag_rst",
    "tcp_flag_syn",
    "tcp_flag_fin",
    "tcp_window",
    "tcp_checksum",
    "tcp_urgent_ptr",
    # TCP options
    "tcp_opt_mss_present",
    "tcp_opt_mss",
    "tcp_opt_wscale_present",
    "tcp_opt_wscale",
    "tcp_opt_sackok_present",
    "tcp_opt_ts_present",
    "payload_len",
)

LABEL_FIELD = "label"

FLAG_FIELDS: tuple[str, ...] = tuple(
    name for name in INTRINSIC_FIELDS if "_flag_" in name or name.endswith("_present")
)

IP_FIELDS = frozenset({"src_ip", "dst_ip"})

# TCP flag bits, byte 13 of the header
TCP_FLAG_BITS = {
    "cwr": 0x80,
    "ece": 0x40,
    "urg": 0x20,
    "ack": 0x10,
    "psh": 0x08,
    "rst": 0x04,
    "syn": 0x02,
    "fin": 0x01,
}


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered column layout of a tidy table."""

    context: tuple[str, ...]
    intrinsic: tuple[str, ...]
    label: str = LABEL_FIELD

    def __post_init__(self) -> None:
        cols = self.columns
        if len(set(cols)) != len(cols):
            dupes = sorted(c for c, n in Counter(cols).items() if n > 1)
            raise ValueError(f"duplicate column names: {dupes}")

    @property
    def features(self) -> tuple[str, ...]:
        return self.context + self.intrinsic

    @property
    def columns(self) -> tuple[str, ...]:
        return self.context + self.intrinsic + (self.label,)

    def index(self, column: str) -> int:
        return self.columns.index(column)


PACKET_SCHEMA = FeatureSchema(CONTEXT_FIELDS, INTRINSIC_FIELDS)
STATELESS_SCHEMA = FeatureSchema((), INTRINSIC_FIELDS)


@dataclass(frozen=True)
class PacketRecord:
    ts_epoch_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    ip_proto: int
    frame_len: int
    ip_version: int
    ip_ihl: int
    ip_dscp: int
    ip_ecn: int
    ip_total_len: int
    ip_id: int
    ip_flag_rf: int
    ip_flag_df: int
    ip_flag_mf: int
    ip_frag_offset: int
    ip_ttl: int
    ip_checksum: int
    tcp_seq: int
    tcp_ack: int
    tcp_data_offset: int
    tcp_reserved: int
    tcp_flag_cwr: int
    tcp_flag_ece: int
    tcp_flag_urg: int
    tcp_flag_ack: int
    tcp_flag_psh: int
    tcp_flag_rst: int
    tcp_flag_syn: int
    tcp_flag_fin: int
    tcp_window: int
    tcp_checksum: int
    tcp_urgent_ptr: int
    tcp_opt_mss_present: int
    tcp_opt_mss: int
    tcp_opt_wscale_present: int
    tcp_opt_wscale: int
    tcp_opt_sackok_present: int
    tcp_opt_ts_present: int
    payload_len: int
    label: str | None = None

    def to_row(self) -> tuple[Any, ...]:
        return tuple(self.__dict__.values())

    @classmethod
    def from_row(cls, row: Sequence[Any]) -> "PacketRecord":
        return cls(*row)

    def with_label(self, label: str | None) -> "PacketRecord":
        return replace(self, label=label)


assert tuple(f.name for f in fields(PacketRecord)) == PACKET_SCHEMA.columns


@dataclass
class TidyDataset:
    """Rows are plain tuples laid out as ``schema.columns`` (label last)."""

    schema: FeatureSchema
    rows: list[tuple[Any, ...]]

    def __post_init__(self) -> None:
        width = len(self.schema.columns)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(f"row {i} has {len(row)} values, schema has {width} columns")

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord]) -> "TidyDataset":
        return cls(PACKET_SCHEMA, [r.to_row() for r in records])

    def records(self) -> Iterator[PacketRecord]:
        if self.schema != PACKET_SCHEMA:
            raise ValueError("records() requires the full packet schema")
        for row in self.rows:
            yield PacketRecord(*row)

    def labels(self) -> list[Any]:
        return [row[-1] for row in self.rows]

    def column(self, name: str) -> list[Any]:
        i = self.schema.index(name)
        return [row[i] for row in self.rows]


class SkipReason(str, enum.Enum):
    NON_IPV4 = "non-ipv4"
    NON_TCP = "non-tcp"
    FRAGMENT = "non-first-fragment"


class Truncated(DataError):
    """Frame is shorter than the headers it declares."""


class MalformedHeader(DataError):
    pass


def _ip(raw: bytes) -> str:
    return socket.inet_ntoa(raw)


def _link_payload(frame: bytes, link_type: int) -> bytes | SkipReason:
    if link_type == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            raise Truncated(f"ethernet header needs 14 bytes, frame has {len(frame)}")
        offset = 12
        (ethertype,) = struct.unpack_from("!H", frame, offset)
        while ethertype in _VLAN_ETHERTYPES:
            offset += 4
            if len(frame) < offset + 2:
                raise Truncated("frame ends inside a VLAN tag")
            (ethertype,) = struct.unpack_from("!H", frame, offset)
        if ethertype != ETHERTYPE_IPV4:
            return SkipReason.NON_IPV4
        return frame[offset + 2 :]
    if link_type in (LINKTYPE_RAW, LINKTYPE_IPV4):
        if frame and frame[0] >> 4 != 4:
            return SkipReason.NON_IPV4
        return frame
    raise ValueError(f"unsupported link type {link_type}")


def _parse_tcp_options(opts: bytes) -> dict[str, int]:
    out = {
        "tcp_opt_mss_present": 0,
        "tcp_opt_mss": 0,
        "tcp_opt_wscale_present": 0,
        "tcp_opt_wscale": 0,
        "tcp_opt_sackok_present": 0,
        "tcp_opt_ts_present": 0,
    }
    i = 0
    while i < len(opts):
        kind = opts[i]
        if kind == 0:
            break
        if kind == 1:
            i += 1
            continue
        if i + 1 >= len(opts):
            break
        length = opts[i + 1]
        # a bad length poisons the rest of the option list
        if length < 2 or i + length > len(opts):
            break
        body = opts[i + 2 : i + length]
        if kind == 2 and length == 4:
            out["tcp_opt_mss_present"] = 1
            out["tcp_opt_mss"] = struct.unpack("!H", body)[0]
        elif kind == 3 and length == 3:
            out["tcp_opt_wscale_present"] = 1
            out["tcp_opt_wscale"] = body[0]
        elif kind == 4 and length == 2:
            out["tcp_opt_sackok_present"] = 1
        elif kind == 8 and length == 10:
            out["tcp_opt_ts_present"] = 1
        i += length
    return out


def extract_features(
    frame: bytes,
    link_type: int,
    ts: int,
    orig_len: int | None = None,
) -> PacketRecord | SkipReason:
    """Build an unlabeled PacketRecord from one captured frame.

    Returns a SkipReason for traffic outside the IPv4/TCP scope. ``orig_len``
    is the on-wire length when the capture was snapped; payload bytes may be
    missing from a snapped frame, headers may not.

    Raises:
        Truncated: the frame ends before the IPv4 or TCP header does.
        MalformedHeader: IHL or data offset below 5, or a total length too
            small to hold the declared headers.
    """
    if not frame:
        raise ValueError("empty frame")
    ip = _link_payload(frame, link_type)
    if isinstance(ip, SkipReason):
        return ip

    if len(ip) < 20:
        raise Truncated(f"IPv4 header needs 20 bytes, {len(ip)} available")
    ver_ihl, tos, total_len, ip_id, flags_frag, ttl, proto, ip_sum = struct.unpack_from(
        "!BBHHHBBH", ip, 0
    )
    version, ihl = ver_ihl >> 4, ver_ihl & 0x0F
    if version != 4:
        return SkipReason.NON_IPV4
    if ihl < 5:
        raise MalformedHeader(f"IPv4 IHL {ihl} < 5")
    ip_hlen = ihl * 4
    if len(ip) < ip_hlen:
        raise Truncated(f"IPv4 header declares {ip_hlen} bytes, {len(ip)} available")
    if proto != IPPROTO_TCP:
        return SkipReason.NON_TCP
    frag_offset = flags_frag & 0x1FFF
    if frag_offset:
        return SkipReason.FRAGMENT

    tcp = ip[ip_hlen:]
    if len(tcp) < 20:
        raise Truncated(f"TCP header needs 20 bytes, {len(tcp)} available")
    sport, dport, seq, ack, off_res, tcp_flags, window, tcp_sum, urg = struct.unpack_from(
        "!HHIIBBHHH", tcp, 0
    )
    data_offset = off_res >> 4
    if data_offset < 5:
        raise MalformedHeader(f"TCP data offset {data_offset} < 5")
    tcp_hlen = data_offset * 4
    if len(tcp) < tcp_hlen:
        raise Truncated(f"TCP header declares {tcp_hlen} bytes, {len(tcp)} available")
    payload_len = total_len - ip_hlen - tcp_hlen
    if payload_len < 0:
        raise MalformedHeader(
            f"IPv4 total length {total_len} cannot hold {ip_hlen}+{tcp_hlen} header bytes"
        )

    opts = _parse_tcp_options(tcp[20:tcp_hlen])
    return PacketRecord(
        ts_epoch_us=ts,
        src_ip=_ip(ip[12:16]),
        dst_ip=_ip(ip[16:20]),
        src_port=sport,
        dst_port=dport,
        ip_proto=proto,
        frame_len=orig_len if orig_len is not None else len(frame),
        ip_version=version,
        ip_ihl=ihl,
        ip_dscp=tos >> 2,
        ip_ecn=tos & 0x03,
        ip_total_len=total_len,
        ip_id=ip_id,
        ip_flag_rf=(flags_frag >> 15) & 1,
        ip_flag_df=(flags_frag >> 14) & 1,
        ip_flag_mf=(flags_frag >> 13) & 1,
        ip_frag_offset=frag_offset,
        ip_ttl=ttl,
        ip_checksum=ip_sum,
        tcp_seq=seq,
        tcp_ack=ack,
        tcp_data_offset=data_offset,
        tcp_reserved=off_res & 0x0F,
        tcp_flag_cwr=int(bool(tcp_flags & 0x80)),
        tcp_flag_ece=int(bool(tcp_flags & 0x40)),
        tcp_flag_urg=int(bool(tcp_flags & 0x20)),
        tcp_flag_ack=int(bool(tcp_flags & 0x10)),
        tcp_flag_psh=int(bool(tcp_flags & 0x08)),
        tcp_flag_rst=int(bool(tcp_flags & 0x04)),
        tcp_flag_syn=int(bool(tcp_flags & 0x02)),
        tcp_flag_fin=int(bool(tcp_flags & 0x01)),
        tcp_window=window,
        tcp_checksum=tcp_sum,
        tcp_urgent_ptr=urg,
        payload_len=payload_len,
        **opts,
    )


def _valid_ipv4(value: Any) -> bool:
    try:
        ipaddress.IPv4Address(value)
    except (ipaddress.AddressValueError, ValueError, TypeError):
        return False
    return True


def validate_record(r: PacketRecord) -> list[str]:
    """List every PacketRecord invariant that ``r`` violates (empty if none)."""
    problems: list[str] = []
    for name in FLAG_FIELDS:
        if getattr(r, name) not in (0, 1):
            problems.append(f"{name}={getattr(r, name)!r} is not 0/1")
    if r.ip_version != 4:
        problems.append(f"ip_version={r.ip_version!r}, expected 4")
    if not 5 <= r.ip_ihl <= 15:
        problems.append(f"ip_ihl={r.ip_ihl!r} outside [5, 15]")
    if not 5 <= r.tcp_data_offset <= 15:
        problems.append(f"tcp_data_offset={r.tcp_data_offset!r} outside [5, 15]")
    expected = r.ip_total_len - 4 * r.ip_ihl - 4 * r.tcp_data_offset
    if r.payload_len != expected:
        problems.append(
            f"payload_len={r.payload_len!r} != ip_total_len - 4*ip_ihl - 4*tcp_data_offset ({expected})"
        )
    elif r.payload_len < 0:
        problems.append(f"payload_len={r.payload_len!r} is negative")
    for name in IP_FIELDS:
        if not _valid_ipv4(getattr(r, name)):
            problems.append(f"{name}={getattr(r, name)!r} is not an IPv4 address")
    for name in ("src_port", "dst_port"):
        if not 0 <= getattr(r, name) <= 0xFFFF:
            problems.append(f"{name}={getattr(r, name)!r} outside [0, 65535]")
    if not 0 <= r.ip_proto <= 0xFF:
        problems.append(f"ip_proto={r.ip_proto!r} outside [0, 255]")
    return problems
