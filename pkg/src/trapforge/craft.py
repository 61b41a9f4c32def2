"""Synthesis of Ethernet/IPv4 frames with valid checksums."""

from __future__ import annotations

import ipaddress
import struct

from .packet_model import ETHERTYPE_IPV4, IPPROTO_TCP, IPPROTO_UDP, TCP_FLAG_BITS

ATTACKER_MAC = bytes.fromhex("02000000aa01")
TARGET_MAC = bytes.fromhex("02000000bb01")


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def flag_byte(*names: str) -> int:
    value = 0
    for name in names:
        value |= TCP_FLAG_BITS[name.lower()]
    return value


def _ipv4_header(src: str, dst: str, proto: int, body_len: int, *, ttl: int, ip_id: int, df: bool) -> bytes:
    hdr = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        0,
        20 + body_len,
        ip_id,
        0x4000 if df else 0,
        ttl,
        proto,
        0,
        ipaddress.IPv4Address(src).packed,
        ipaddress.IPv4Address(dst).packed,
    )
    return hdr[:10] + struct.pack("!H", internet_checksum(hdr)) + hdr[12:]


def _pseudo_header(src: str, dst: str, proto: int, length: int) -> bytes:
    return (
        ipaddress.IPv4Address(src).packed
        + ipaddress.IPv4Address(dst).packed
        + struct.pack("!BBH", 0, proto, length)
    )


def tcp_options(
    *,
    mss: int | None = None,
    wscale: int | None = None,
    sack_ok: bool = False,
    timestamp: tuple[int, int] | None = None,
) -> bytes:
    """Encode TCP options, NOP-padded to a 4-byte boundary."""
    out = b""
    if mss is not None:
        out += struct.pack("!BBH", 2, 4, mss)
    if sack_ok:
        out += b"\x04\x02"
    if timestamp is not None:
        out += struct.pack("!BBII", 8, 10, *timestamp)
    if wscale is not None:
        out += b"\x01" + struct.pack("!BBB", 3, 3, wscale)
    while len(out) % 4:
        out += b"\x01"
    return out


def ethernet(payload: bytes, src_mac: bytes = ATTACKER_MAC, dst_mac: bytes = TARGET_MAC) -> bytes:
    return dst_mac + src_mac + struct.pack("!H", ETHERTYPE_IPV4) + payload


def tcp_packet(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    flags: int,
    *,
    seq: int = 0,
    ack: int = 0,
    window: int = 1024,
    ttl: int = 64,
    ip_id: int = 0,
    df: bool = False,
    options: bytes = b"",
    payload: bytes = b"",
    urgent: int = 0,
) -> bytes:
    """Raw IPv4+TCP packet (no link header)."""
    if len(options) % 4:
        raise ValueError("TCP options must be padded to 4 bytes")
    offset = 5 + len(options) // 4
    seg = struct.pack(
        "!HHIIBBHHH",
        src_port,
        dst_port,
        seq & 0xFFFFFFFF,
        ack & 0xFFFFFFFF,
        offset << 4,
        flags,
        window,
        0,
        urgent,
    ) + options + payload
    csum = internet_checksum(_pseudo_header(src_ip, dst_ip, IPPROTO_TCP, len(seg)) + seg)
    seg = seg[:16] + struct.pack("!H", csum) + seg[18:]
    return _ipv4_header(src_ip, dst_ip, IPPROTO_TCP, len(seg), ttl=ttl, ip_id=ip_id, df=df) + seg


def udp_packet(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    payload: bytes = b"",
    *,
    ttl: int = 64,
    ip_id: int = 0,
) -> bytes:
    dgram = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0) + payload
    csum = internet_checksum(_pseudo_header(src_ip, dst_ip, IPPROTO_UDP, len(dgram)) + dgram) or 0xFFFF
    dgram = dgram[:6] + struct.pack("!H", csum) + dgram[8:]
    return _ipv4_header(src_ip, dst_ip, IPPROTO_UDP, len(dgram), ttl=ttl, ip_id=ip_id, df=False) + dgram


def tcp_frame(*args, **kwargs) -> bytes:
    """Ethernet-framed :func:`tcp_packet`."""
    return ethernet(tcp_packet(*args, **kwargs))


def udp_frame(*args, **kwargs) -> bytes:
    return ethernet(udp_packet(*args, **kwargs))
