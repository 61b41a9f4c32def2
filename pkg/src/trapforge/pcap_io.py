"""Classic (microsecond) pcap reading and writing.

Only the original libpcap format is handled. pcapng and the nanosecond
variant are rejected with :class:`UnsupportedFormat`.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, NamedTuple

from .errors import DataError
from .packet_model import LINKTYPE_ETHERNET

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"

SNAPLEN = 65535
MAX_FRAME = 65535

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")


class UnsupportedFormat(DataError):
    pass


class CorruptRecord(DataError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index


class FrameTooLarge(DataError):
    pass


class Frame(NamedTuple):
    ts_us: int
    data: bytes
    # on-wire length; equals len(data) unless the capture was snapped
    orig_len: int

    @classmethod
    def of(cls, ts_us: int, data: bytes, orig_len: int | None = None) -> "Frame":
        return cls(ts_us, bytes(data), len(data) if orig_len is None else orig_len)


@dataclass
class CaptureFile:
    link_type: int = LINKTYPE_ETHERNET
    frames: list[Frame] = field(default_factory=list)
    snaplen: int = SNAPLEN

    # always microseconds; kept as a field for introspection only
    timestamp_resolution: str = "us"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CaptureFile):
            return NotImplemented
        return self.link_type == other.link_type and self.frames == other.frames


def _read_global_header(raw: bytes) -> tuple[str, int, int]:
    """Return (struct byte-order prefix, snaplen, link_type)."""
    if raw[:4] == PCAPNG_MAGIC:
        raise UnsupportedFormat("pcapng files are not supported; convert to classic pcap (editcap -F pcap)")
    if len(raw) < GLOBAL_HEADER_LEN:
        raise UnsupportedFormat(f"not a pcap file: global header is {len(raw)} bytes, expected 24")
    for order in ("<", ">"):
        (magic,) = struct.unpack(order + "I", raw[:4])
        if magic == MAGIC_USEC:
            break
        if magic == MAGIC_NSEC:
            raise UnsupportedFormat("nanosecond-resolution pcap is not supported")
    else:
        raise UnsupportedFormat(f"unknown magic number 0x{raw[:4].hex()}")
    _, major, minor, _, _, snaplen, link_type = struct.unpack(order + "IHHiIII", raw)
    if major != 2:
        raise UnsupportedFormat(f"unsupported pcap version {major}.{minor}")
    return order, snaplen, link_type


class PcapReader:
    """Streaming reader; iterate to get :class:`Frame` objects in file order."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self._order, self.snaplen, self.link_type = _read_global_header(stream.read(GLOBAL_HEADER_LEN))
        self._record = struct.Struct(self._order + "IIII")

    def __iter__(self) -> Iterator[Frame]:
        index = 0
        read = self._stream.read
        while True:
            hdr = read(RECORD_HEADER_LEN)
            if not hdr:
                return
            if len(hdr) < RECORD_HEADER_LEN:
                raise CorruptRecord(index, f"record header needs 16 bytes, {len(hdr)} remain")
            ts_sec, ts_usec, incl_len, orig_len = self._record.unpack(hdr)
            if incl_len > orig_len:
                raise CorruptRecord(index, f"captured length {incl_len} exceeds original length {orig_len}")
            if ts_usec >= 1_000_000:
                raise CorruptRecord(index, f"microsecond field {ts_usec} out of range")
            data = read(incl_len)
            if len(data) < incl_len:
                raise CorruptRecord(index, f"record declares {incl_len} bytes, {len(data)} remain")
            yield Frame(ts_sec * 1_000_000 + ts_usec, data, orig_len)
            index += 1


def read_pcap(data: bytes | BinaryIO) -> CaptureFile:
    stream = io.BytesIO(data) if isinstance(data, (bytes, bytearray, memoryview)) else data
    reader = PcapReader(stream)
    return CaptureFile(reader.link_type, list(reader), reader.snaplen)


def read_pcap_file(path: str | os.PathLike) -> CaptureFile:
    with open(path, "rb") as fh:
        return read_pcap(fh)


def global_header(link_type: int, snaplen: int = SNAPLEN) -> bytes:
    return _GLOBAL.pack(MAGIC_USEC, 2, 4, 0, 0, snaplen, link_type)


def record_bytes(frame: Frame) -> bytes:
    ts_us, data, orig_len = frame
    if len(data) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(data)} bytes exceeds {MAX_FRAME}")
    if ts_us < 0:
        raise ValueError(f"negative timestamp {ts_us}")
    if orig_len < len(data):
        raise ValueError(f"orig_len {orig_len} smaller than captured length {len(data)}")
    sec, usec = divmod(ts_us, 1_000_000)
    return _RECORD.pack(sec, usec, len(data), orig_len) + data


def write_pcap(capture: CaptureFile) -> bytes:
    """Serialize as little-endian microsecond pcap, snaplen 65535."""
    parts = [global_header(capture.link_type)]
    parts.extend(record_bytes(f) for f in capture.frames)
    return b"".join(parts)


class PcapWriter:
    """Incremental writer used by the capture daemon."""

    def __init__(self, stream: BinaryIO, link_type: int = LINKTYPE_ETHERNET):
        self._stream = stream
        self.count = 0
        stream.write(global_header(link_type))

    def write(self, ts_us: int, data: bytes, orig_len: int | None = None) -> None:
        self._stream.write(record_bytes(Frame.of(ts_us, data, orig_len)))
        self.count += 1

    def write_all(self, frames: Iterable[Frame]) -> None:
        for f in frames:
            self.write(*f)

    def flush(self) -> None:
        self._stream.flush()


def write_pcap_file(path: str | os.PathLike, capture: CaptureFile) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pcap(capture))
