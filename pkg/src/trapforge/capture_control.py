"""UDP start/stop protocol for labeled captures on target hosts.

The attacker sends START(label) to the daemon on a target, runs the attack,
then sends STOP. While recording, the daemon keeps only TCP packets going from
the START sender to the target itself, writing them to
``<label>_<unix_seconds>.pcap``. Control traffic is UDP, so it can never leak
into the capture.

Wire format (big-endian)::

    0      4        5       6         8
    +------+--------+-------+---------+-----------------+--------+
    | ABTP | ver=01 | kind  | lbl_len | label (START)   | status |
    +------+--------+-------+---------+-----------------+--------+
                                                          ACKs only

The daemon core (:func:`daemon_step`) is a pure state machine; the socket and
file handling live in :class:`CaptureDaemon` and :func:`serve`.
"""

from __future__ import annotations

import collections
import enum
import errno
import logging
import os
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Union

from .errors import ConfigError, DataError, IoFailure
from .packet_model import LINKTYPE_ETHERNET, PacketRecord, SkipReason, extract_features
from .pcap_io import Frame, PcapWriter

log = logging.getLogger(__name__)

MAGIC = b"ABTP"
VERSION = 0x01
HEADER = struct.Struct("!4sBBH")
HEADER_LEN = HEADER.size
MAX_LABEL = 255
DEFAULT_PORT = 6060

STATUS_OK = 0
STATUS_REFUSED = 1


class Kind(enum.IntEnum):
    START = 0x01
    STOP = 0x02
    ACK_START = 0x81
    ACK_STOP = 0x82

    @property
    def is_ack(self) -> bool:
        return bool(self & 0x80)


ACK_FOR = {Kind.START: Kind.ACK_START, Kind.STOP: Kind.ACK_STOP}


class ProtocolError(DataError):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class BadKind(ProtocolError):
    pass


class ShortDatagram(ProtocolError):
    pass


class LabelLengthMismatch(ProtocolError):
    pass


class InvalidLabel(ProtocolError):
    pass


class LabelTooLong(ProtocolError):
    pass


class SameAddress(ConfigError):
    pass


class NoAck(IoFailure):
    pass


class Refused(DataError):
    pass


class PortInUse(IoFailure):
    pass


def check_label(label: str) -> None:
    if not label:
        raise InvalidLabel("label is empty")
    bad = [c for c in ("/", "\\", "\x00") if c in label]
    if bad:
        raise InvalidLabel(f"label {label!r} contains forbidden characters {bad}")
    if len(label.encode("utf-8")) > MAX_LABEL:
        raise LabelTooLong(f"label is {len(label.encode('utf-8'))} bytes, max {MAX_LABEL}")


@dataclass(frozen=True)
class ControlMessage:
    kind: Kind
    label: str = ""
    status: int = STATUS_OK

    @classmethod
    def start(cls, label: str) -> "ControlMessage":
        return cls(Kind.START, label)

    @classmethod
    def stop(cls) -> "ControlMessage":
        return cls(Kind.STOP)

    @classmethod
    def ack(cls, request: Kind, status: int = STATUS_OK) -> "ControlMessage":
        return cls(ACK_FOR[request], status=status)


def encode_message(m: ControlMessage) -> bytes:
    kind = Kind(m.kind)
    if kind == Kind.START:
        check_label(m.label)
        label = m.label.encode("utf-8")
    elif m.label:
        raise InvalidLabel(f"{kind.name} carries no label")
    else:
        label = b""
    out = HEADER.pack(MAGIC, VERSION, kind, len(label)) + label
    if kind.is_ack:
        if m.status not in (STATUS_OK, STATUS_REFUSED):
            raise ValueError(f"bad ACK status {m.status}")
        out += bytes([m.status])
    return out


def _decode_header(data: bytes) -> tuple[Kind, int]:
    if len(data) < HEADER_LEN:
        raise ShortDatagram(f"datagram is {len(data)} bytes, header needs {HEADER_LEN}")
    magic, version, kind, label_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersion(f"version {version}, expected {VERSION}")
    try:
        return Kind(kind), label_len
    except ValueError:
        raise BadKind(f"unknown message kind 0x{kind:02x}") from None


def decode_message(data: bytes) -> ControlMessage:
    kind, label_len = _decode_header(data)
    body = data[HEADER_LEN:]
    if kind.is_ack:
        if label_len != 0:
            raise LabelLengthMismatch(f"{kind.name} declares label_len {label_len}, expected 0")
        if len(body) < 1:
            raise ShortDatagram(f"{kind.name} is missing its status byte")
        if len(body) > 1:
            raise LabelLengthMismatch(f"{kind.name} has {len(body) - 1} trailing bytes")
        if body[0] not in (STATUS_OK, STATUS_REFUSED):
            raise ProtocolError(f"bad ACK status {body[0]}")
        return ControlMessage(kind, status=body[0])
    if len(body) != label_len:
        raise LabelLengthMismatch(f"label_len is {label_len} but {len(body)} label bytes follow")
    if kind == Kind.STOP:
        if label_len:
            raise LabelLengthMismatch("STOP must carry label_len 0")
        return ControlMessage(kind)
    try:
        label = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidLabel(f"label is not UTF-8: {exc}") from None
    check_label(label)
    return ControlMessage(kind, label)


def output_name(label: str, start_ts: float) -> str:
    return f"{label}_{int(start_ts)}.pcap"


@dataclass(frozen=True)
class PacketPredicate:
    """True for TCP packets sent from ``attacker_ip`` to ``target_ip`` only."""

    attacker_ip: str
    target_ip: str

    def matches_record(self, r: PacketRecord) -> bool:
        return r.ip_proto == 6 and r.src_ip == self.attacker_ip and r.dst_ip == self.target_ip

    def __call__(self, frame: bytes, link_type: int = LINKTYPE_ETHERNET) -> bool:
        try:
            rec = extract_features(frame, link_type, 0)
        except (DataError, ValueError):
            return False
        if isinstance(rec, SkipReason):
            return False
        return self.matches_record(rec)

    def as_tcpdump(self) -> str:
        return f"tcp and src host {self.attacker_ip} and dst host {self.target_ip}"


def build_capture_filter(attacker_ip: str, target_ip: str) -> PacketPredicate:
    if attacker_ip == target_ip:
        raise SameAddress(f"attacker and target are both {attacker_ip}")
    return PacketPredicate(attacker_ip, target_ip)


# -- daemon state machine ---------------------------------------------------

Address = tuple[str, int]


@dataclass(frozen=True)
class Datagram:
    payload: bytes
    addr: Address
    now: float


@dataclass(frozen=True)
class CapturedFrame:
    ts_us: int
    data: bytes
    orig_len: int | None = None


@dataclass(frozen=True)
class Shutdown:
    pass


Event = Union[Datagram, CapturedFrame, Shutdown]


@dataclass(frozen=True)
class SendDatagram:
    addr: Address
    payload: bytes


@dataclass(frozen=True)
class OpenFile:
    name: str
    link_type: int


@dataclass(frozen=True)
class AppendFrame:
    name: str
    frame: Frame


@dataclass(frozen=True)
class CloseFile:
    name: str


Action = Union[SendDatagram, OpenFile, AppendFrame, CloseFile]


@dataclass(frozen=True)
class CaptureSession:
    label: str
    attacker_ip: str
    target_ip: str
    start_ts: int
    output_name: str
    state: str = "recording"

    @property
    def predicate(self) -> PacketPredicate:
        return build_capture_filter(self.attacker_ip, self.target_ip)


@dataclass(frozen=True)
class DaemonState:
    target_ip: str
    link_type: int = LINKTYPE_ETHERNET
    session: CaptureSession | None = None

    @property
    def recording(self) -> bool:
        return self.session is not None


def _reply(addr: Address, request: Kind, status: int) -> SendDatagram:
    return SendDatagram(addr, encode_message(ControlMessage.ack(request, status)))


def _handle_datagram(state: DaemonState, ev: Datagram) -> tuple[DaemonState, list[Action]]:
    try:
        msg = decode_message(ev.payload)
    except ProtocolError as exc:
        # a readable header still earns a refusal; garbage is dropped
        try:
            kind, _ = _decode_header(ev.payload)
        except ProtocolError:
            return state, []
        if kind in ACK_FOR:
            log.debug("refusing malformed %s from %s: %s", kind.name, ev.addr, exc)
            return state, [_reply(ev.addr, kind, STATUS_REFUSED)]
        return state, []

    sender_ip = ev.addr[0]
    if msg.kind == Kind.START:
        if state.session is not None or sender_ip == state.target_ip:
            return state, [_reply(ev.addr, Kind.START, STATUS_REFUSED)]
        start = int(ev.now)
        session = CaptureSession(
            label=msg.label,
            attacker_ip=sender_ip,
            target_ip=state.target_ip,
            start_ts=start,
            output_name=output_name(msg.label, start),
        )
        return replace(state, session=session), [
            OpenFile(session.output_name, state.link_type),
            _reply(ev.addr, Kind.START, STATUS_OK),
        ]
    if msg.kind == Kind.STOP:
        session = state.session
        if session is None or sender_ip != session.attacker_ip:
            return state, [_reply(ev.addr, Kind.STOP, STATUS_REFUSED)]
        return replace(state, session=None), [
            CloseFile(session.output_name),
            _reply(ev.addr, Kind.STOP, STATUS_OK),
        ]
    # stray ACKs are not requests
    return state, []


def daemon_step(state: DaemonState, event: Event) -> tuple[DaemonState, list[Action]]:
    """Advance the daemon by one event. Pure: no I/O, no clock reads."""
    if isinstance(event, Datagram):
        return _handle_datagram(state, event)
    if isinstance(event, CapturedFrame):
        session = state.session
        if session is None or not session.predicate(event.data, state.link_type):
            return state, []
        return state, [AppendFrame(session.output_name, Frame.of(event.ts_us, event.data, event.orig_len))]
    if isinstance(event, Shutdown):
        if state.session is None:
            return state, []
        return replace(state, session=None), [CloseFile(state.session.output_name)]
    raise TypeError(f"unknown event {event!r}")


# -- capture sources --------------------------------------------------------


class CaptureSource(Protocol):
    link_type: int

    def drain(self) -> list[CapturedFrame]: ...


class SyntheticSource:
    """Thread-safe queue of frames injected by tests or the simulated network."""

    link_type = LINKTYPE_ETHERNET

    def __init__(self) -> None:
        self._queue: collections.deque[CapturedFrame] = collections.deque()
        self._lock = threading.Lock()

    def inject(self, ts_us: int, data: bytes, orig_len: int | None = None) -> None:
        with self._lock:
            self._queue.append(CapturedFrame(ts_us, data, orig_len))

    def drain(self) -> list[CapturedFrame]:
        with self._lock:
            out = list(self._queue)
            self._queue.clear()
        return out


class ReplaySource(SyntheticSource):
    """Replays a fixed frame list each time a recording session opens."""

    def __init__(self, frames: Iterable[Frame]):
        super().__init__()
        self.frames = list(frames)

    def on_session_open(self) -> None:
        for f in self.frames:
            self.inject(f.ts_us, f.data, f.orig_len)


class LiveSource:
    """Linux AF_PACKET sniffer on one interface. Needs CAP_NET_RAW."""

    link_type = LINKTYPE_ETHERNET

    def __init__(self, interface: str):
        self.sock = socket.socket(socket.AF_PACKET, socket.SOCK_RAW, socket.ntohs(0x0003))
        self.sock.bind((interface, 0))
        self.sock.setblocking(False)

    def fileno(self) -> int:
        return self.sock.fileno()

    def drain(self) -> list[CapturedFrame]:
        out = []
        while True:
            try:
                data = self.sock.recv(65535)
            except BlockingIOError:
                return out
            out.append(CapturedFrame(time.time_ns() // 1000, data))


# -- daemon runtime ---------------------------------------------------------


class CaptureDaemon:
    """Executes :func:`daemon_step` actions against the filesystem."""

    def __init__(
        self,
        target_ip: str,
        out_dir: str | os.PathLike,
        source: Any,
        clock: Callable[[], float] = time.time,
    ):
        self.state = DaemonState(target_ip, getattr(source, "link_type", LINKTYPE_ETHERNET))
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.source = source
        self.clock = clock
        self.completed: list[Path] = []
        self._files: dict[str, tuple[Any, PcapWriter]] = {}
        self._lock = threading.Lock()

    @property
    def target_ip(self) -> str:
        return self.state.target_ip

    def _apply(self, actions: list[Action]) -> list[SendDatagram]:
        sends = []
        for action in actions:
            if isinstance(action, SendDatagram):
                sends.append(action)
            elif isinstance(action, OpenFile):
                fh = open(self.out_dir / action.name, "wb")
                self._files[action.name] = (fh, PcapWriter(fh, action.link_type))
                log.info("session open: %s", action.name)
                hook = getattr(self.source, "on_session_open", None)
                if hook is not None:
                    hook()
            elif isinstance(action, AppendFrame):
                self._files[action.name][1].write(*action.frame)
            elif isinstance(action, CloseFile):
                fh, writer = self._files.pop(action.name)
                fh.close()
                self.completed.append(self.out_dir / action.name)
                log.info("session closed: %s (%d frames)", action.name, writer.count)
        return sends

    def step(self, event: Event) -> list[SendDatagram]:
        with self._lock:
            self.state, actions = daemon_step(self.state, event)
            return self._apply(actions)

    def pump(self) -> None:
        """Feed every pending captured frame through the state machine."""
        for frame in self.source.drain():
            self.step(frame)

    def handle_datagram(self, payload: bytes, addr: Address) -> list[SendDatagram]:
        # frames captured before this datagram arrived belong to the session it may close
        self.pump()
        return self.step(Datagram(payload, addr, self.clock()))

    def shutdown(self) -> None:
        self.pump()
        self.step(Shutdown())


def bind_udp(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(f"UDP {host}:{port} is already in use") from None
        raise IoFailure(f"cannot bind UDP {host}:{port}: {exc}") from None
    return sock


def serve(
    daemon: CaptureDaemon,
    sock: socket.socket,
    stop: threading.Event,
    poll: float = 0.05,
    until: Callable[[], bool] | None = None,
) -> None:
    """Run the daemon event loop until ``stop`` is set or ``until()`` holds."""
    watch = [sock]
    if hasattr(daemon.source, "fileno"):
        watch.append(daemon.source)
    try:
        while not stop.is_set() and not (until is not None and until()):
            readable, _, _ = select.select(watch, [], [], poll)
            daemon.pump()
            if sock in readable:
                try:
                    payload, addr = sock.recvfrom(65535)
                except OSError:
                    continue
                for send in daemon.handle_datagram(payload, addr):
                    sock.sendto(send.payload, send.addr)
    finally:
        daemon.shutdown()


# -- transports and controller ----------------------------------------------


class Transport(Protocol):
    def request(self, addr: Address, payload: bytes, timeout: float) -> list[bytes]: ...


class InMemoryTransport:
    """Delivers datagrams straight into in-process daemons.

    ``drop`` may be set to a callable ``(addr, payload) -> bool`` to simulate
    loss of requests.
    """

    def __init__(self, source_ip: str, source_port: int = 40000):
        self.source = (source_ip, source_port)
        self.daemons: dict[Address, CaptureDaemon] = {}
        self.drop: Callable[[Address, bytes], bool] | None = None

    def attach(self, daemon: CaptureDaemon, port: int = DEFAULT_PORT) -> None:
        self.daemons[(daemon.target_ip, port)] = daemon

    def request(self, addr: Address, payload: bytes, timeout: float) -> list[bytes]:
        daemon = self.daemons.get(addr)
        if daemon is None or (self.drop is not None and self.drop(addr, payload)):
            return []
        return [s.payload for s in daemon.handle_datagram(payload, self.source) if s.addr == self.source]


class UdpTransport:
    def __init__(self, bind_ip: str = "0.0.0.0", bind_port: int = 0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((bind_ip, bind_port))

    def request(self, addr: Address, payload: bytes, timeout: float) -> list[bytes]:
        self.sock.sendto(payload, addr)
        deadline = time.monotonic() + timeout
        replies = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return replies
            self.sock.settimeout(remaining)
            try:
                data, src = self.sock.recvfrom(65535)
            except (socket.timeout, ConnectionRefusedError):
                return replies
            if src == addr:
                replies.append(data)
                return replies

    def close(self) -> None:
        self.sock.close()


@dataclass
class CaptureResult:
    label: str
    target: Address
    start_ts: int
    filename: str
    body_result: Any = None


def _exchange(
    transport: Transport,
    addr: Address,
    msg: ControlMessage,
    *,
    retries: int,
    timeout: float,
    backoff: float,
) -> tuple[int, int]:
    """Send ``msg`` until its ACK arrives. Returns (status, attempts used)."""
    payload = encode_message(msg)
    want = ACK_FOR[msg.kind]
    wait = timeout
    for attempt in range(1, retries + 2):
        for raw in transport.request(addr, payload, wait):
            try:
                reply = decode_message(raw)
            except ProtocolError:
                continue
            if reply.kind == want:
                return reply.status, attempt
        log.debug("no %s from %s:%d (attempt %d)", want.name, *addr, attempt)
        wait *= backoff
    raise NoAck(f"no {want.name} from {addr[0]}:{addr[1]} after {retries + 1} attempts")


def controller_run(
    transport: Transport,
    target: Address,
    label: str,
    body: Callable[[], Any],
    *,
    retries: int = 3,
    timeout: float = 0.5,
    backoff: float = 2.0,
    clock: Callable[[], float] = time.time,
) -> CaptureResult:
    """Wrap ``body`` in a START/STOP recording on the daemon at ``target``.

    STOP is sent even if ``body`` raises. The returned filename is the one the
    daemon derives from its own clock, which matches ours when both share a
    clock (simulation) and otherwise may differ by clock skew.
    """
    check_label(label)
    start_ts = int(clock())
    status, _ = _exchange(
        transport, target, ControlMessage.start(label), retries=retries, timeout=timeout, backoff=backoff
    )
    if status != STATUS_OK:
        raise Refused(f"{target[0]}:{target[1]} refused START {label!r} (already recording?)")
    try:
        result = body()
    finally:
        status, attempts = _exchange(
            transport, target, ControlMessage.stop(), retries=retries, timeout=timeout, backoff=backoff
        )
    if status != STATUS_OK:
        # a refused retransmission means an earlier STOP already closed the session
        if attempts == 1:
            raise Refused(f"{target[0]}:{target[1]} refused STOP for {label!r}")
        log.warning("STOP for %r acknowledged late; assuming the session closed", label)
    return CaptureResult(label, target, start_ts, output_name(label, start_ts), result)


class SimClock:
    """Manually advanced clock shared by simulated controllers and daemons."""

    def __init__(self, start: float):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds

    def advance_to(self, t: float) -> None:
        with self._lock:
            self._now = max(self._now, t)
