from __future__ import annotations

import struct

import pytest


def ip_checksum(header: bytes) -> int:
    s = 0
    for i in range(0, len(header), 2):
        s += (header[i] << 8) | header[i + 1]
    while s > 0xFFFF:
        s = (s & 0xFFFF) + (s >> 16)
    return (~s) & 0xFFFF


def hand_syn_frame(proto: int = 6) -> bytes:
    """54-byte Ethernet/IPv4/TCP SYN, 10.0.0.1:40000 -> 10.0.0.2:80, laid out byte by byte."""
    eth = bytes.fromhex("020000000002") + bytes.fromhex("020000000001") + b"\x08\x00"
    ip = bytearray(20)
    ip[0] = 0x45                       # version 4, IHL 5
    ip[1] = 0x00                       # DSCP/ECN
    ip[2:4] = (40).to_bytes(2, "big")  # total length
    ip[4:6] = (0x1234).to_bytes(2, "big")
    ip[6:8] = b"\x00\x00"              # flags + fragment offset
    ip[8] = 64                         # TTL
    ip[9] = proto
    ip[12:16] = bytes([10, 0, 0, 1])
    ip[16:20] = bytes([10, 0, 0, 2])
    ip[10:12] = ip_checksum(bytes(ip)).to_bytes(2, "big")
    tcp = bytearray(20)
    tcp[0:2] = (40000).to_bytes(2, "big")
    tcp[2:4] = (80).to_bytes(2, "big")
    tcp[4:8] = (7).to_bytes(4, "big")  # seq
    tcp[8:12] = b"\x00\x00\x00\x00"
    tcp[12] = 5 << 4                   # data offset 5
    tcp[13] = 0x02                     # SYN
    tcp[14:16] = (1024).to_bytes(2, "big")
    return eth + bytes(ip) + bytes(tcp)


# filled by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def syn_frame() -> bytes:
    return hand_syn_frame()


def le_pcap(records: list[tuple[int, int, bytes]], link_type: int = 1) -> bytes:
    """Independent little-endian pcap writer: (sec, usec, data) records."""
    out = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, link_type)
    for sec, usec, data in records:
        out += struct.pack("<IIII", sec, usec, len(data), len(data)) + data
    return out


def make_record(src="10.0.0.1", sport=1000, dst="10.0.0.2", dport=80, flags=0x02, ts=0, label=None, payload=b""):
    from trapforge import craft
    from trapforge.packet_model import LINKTYPE_ETHERNET, extract_features

    frame = craft.tcp_frame(src, dst, sport, dport, flags, payload=payload)
    return extract_features(frame, LINKTYPE_ETHERNET, ts).with_label(label)
