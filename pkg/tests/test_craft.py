from trapforge import craft

from .conftest import ip_checksum


def _tcp_pseudo_sum(packet: bytes) -> int:
    ihl = (packet[0] & 0x0F) * 4
    seg = packet[ihl:]
    pseudo = packet[12:20] + bytes([0, packet[9]]) + len(seg).to_bytes(2, "big")
    data = pseudo + seg
    if len(data) % 2:
        data += b"\x00"
    return ip_checksum(data)


def test_ip_header_checksum_verifies():
    pkt = craft.tcp_packet("10.1.2.3", "10.4.5.6", 1234, 80, craft.flag_byte("syn"), ip_id=99)
    assert ip_checksum(pkt[:20]) == 0


def test_tcp_checksum_verifies_with_options_and_odd_payload():
    pkt = craft.tcp_packet(
        "10.1.2.3", "10.4.5.6", 1234, 80, 0x18,
        options=craft.tcp_options(mss=1460, wscale=3), payload=b"abc",
    )
    assert _tcp_pseudo_sum(pkt) == 0


def test_udp_checksum_verifies():
    pkt = craft.udp_packet("10.1.2.3", "10.4.5.6", 5000, 6060, b"hello")
    assert ip_checksum(pkt[:20]) == 0
    assert _tcp_pseudo_sum(pkt) == 0


def test_options_are_word_aligned():
    for kw in ({}, {"mss": 1}, {"wscale": 2}, {"sack_ok": True}, {"timestamp": (1, 2)}):
        assert len(craft.tcp_options(**kw)) % 4 == 0
