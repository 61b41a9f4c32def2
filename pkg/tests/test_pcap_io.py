import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapforge.pcap_io import (
    CaptureFile,
    CorruptRecord,
    Frame,
    FrameTooLarge,
    PcapWriter,
    UnsupportedFormat,
    read_pcap,
    write_pcap,
)

from .conftest import le_pcap


def test_reads_independently_written_file():
    raw = le_pcap([(10, 1, b"a" * 60), (10, 999_999, b"b" * 42), (11, 0, b"c")])
    cap = read_pcap(raw)
    assert cap.link_type == 1
    assert [f.ts_us for f in cap.frames] == [10_000_001, 10_999_999, 11_000_000]
    assert [f.data for f in cap.frames] == [b"a" * 60, b"b" * 42, b"c"]


def test_write_matches_independent_layout():
    data = b"\x01\x02\x03"
    out = write_pcap(CaptureFile(1, [Frame.of(10_000_001, data)]))
    assert len(out) == 24 + 16 + 3
    assert out == le_pcap([(10, 1, data)])


def test_big_endian_file():
    data = b"xyz"
    raw = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101)
    raw += struct.pack(">IIII", 5, 6, 3, 3) + data
    cap = read_pcap(raw)
    assert cap.link_type == 101
    assert cap.frames == [Frame(5_000_006, data, 3)]


def test_header_only():
    out = write_pcap(CaptureFile(1, []))
    assert len(out) == 24
    assert read_pcap(out).frames == []


def test_pcapng_rejected():
    with pytest.raises(UnsupportedFormat, match="pcapng"):
        read_pcap(b"\x0a\x0d\x0d\x0a" + b"\x00" * 40)


def test_nanosecond_rejected():
    raw = struct.pack("<IHHiIII", 0xA1B23C4D, 2, 4, 0, 0, 65535, 1)
    with pytest.raises(UnsupportedFormat, match="nanosecond"):
        read_pcap(raw)


def test_garbage_magic_rejected():
    with pytest.raises(UnsupportedFormat):
        read_pcap(b"\xde\xad\xbe\xef" + b"\x00" * 20)


def test_corrupt_record_reports_index():
    raw = le_pcap([(1, 0, b"ok"), (2, 0, b"truncated body")])[:-4]
    with pytest.raises(CorruptRecord) as exc:
        read_pcap(raw)
    assert exc.value.index == 1


def test_short_record_header():
    raw = le_pcap([(1, 0, b"ok")]) + b"\x00" * 7
    with pytest.raises(CorruptRecord) as exc:
        read_pcap(raw)
    assert exc.value.index == 1


def test_incl_len_above_orig_len_is_corrupt():
    raw = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    raw += struct.pack("<IIII", 1, 0, 4, 2) + b"abcd"
    with pytest.raises(CorruptRecord):
        read_pcap(raw)


def test_frame_too_large():
    with pytest.raises(FrameTooLarge):
        write_pcap(CaptureFile(1, [Frame.of(0, b"\x00" * 65536)]))


def test_snapped_frames_keep_orig_len():
    cap = CaptureFile(1, [Frame.of(1, b"abc", orig_len=1500)])
    assert read_pcap(write_pcap(cap)) == cap


def test_incremental_writer_matches_batch():
    frames = [Frame.of(i * 7, bytes([i]) * (i + 1)) for i in range(20)]
    buf = io.BytesIO()
    w = PcapWriter(buf, 1)
    w.write_all(frames)
    assert buf.getvalue() == write_pcap(CaptureFile(1, frames))
    assert w.count == 20


frames_st = st.lists(
    st.builds(
        Frame.of,
        st.integers(0, 2**32 * 1_000_000 - 1),
        st.binary(max_size=300),
    ),
    max_size=8,
)


@settings(max_examples=300, deadline=None)
@given(frames=frames_st, link=st.sampled_from([1, 101, 228]))
def test_round_trip(frames, link):
    cap = CaptureFile(link, frames)
    raw = write_pcap(cap)
    back = read_pcap(raw)
    assert back == cap
    assert write_pcap(back) == raw
