"""Attack campaigns: TCP scan synthesis and labeled capture orchestration.

A campaign is a list of attack entries. Each entry runs ``repetitions``
times; every run is wrapped in a START/STOP recording on the target so the
resulting capture file is labeled by its name alone.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import logging
import random
import re
import shlex
import subprocess
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import craft
from .capture_control import (
    DEFAULT_PORT,
    CaptureDaemon,
    CaptureResult,
    InMemoryTransport,
    InvalidLabel,
    NoAck,
    Refused,
    SimClock,
    SyntheticSource,
    check_label,
    controller_run,
)
from .errors import ConfigError, DataError, TrapforgeError
from .packet_model import LINKTYPE_ETHERNET, PacketRecord, extract_features
from .pcap_io import Frame

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScanTechnique:
    id: str
    flags: frozenset[str]
    description: str

    @property
    def flag_byte(self) -> int:
        return craft.flag_byte(*self.flags)


TECHNIQUES: dict[str, ScanTechnique] = {
    t.id: t
    for t in (
        ScanTechnique("syn", frozenset({"syn"}), "half-open SYN scan"),
        ScanTechnique("fin", frozenset({"fin"}), "FIN scan"),
        ScanTechnique("null", frozenset(), "NULL scan, no flags"),
        ScanTechnique("xmas", frozenset({"fin", "psh", "urg"}), "Xmas scan"),
        ScanTechnique("ack", frozenset({"ack"}), "ACK scan"),
        ScanTechnique("maimon", frozenset({"fin", "ack"}), "Maimon scan"),
        ScanTechnique("window", frozenset({"ack"}), "window scan"),
        ScanTechnique("connect", frozenset({"syn"}), "connect() scan, full handshake attempt"),
    )
}

PORT_TEMPLATES: dict[str, str] = {
    "wellknown": "1-1024",
    "registered": "1025-2048",
}

# inter-probe delay, microseconds
TIMING_TEMPLATES: dict[str, int] = {
    "fast": 100,
    "slow": 5000,
}


def parse_ports(spec: Any) -> tuple[int, ...]:
    """Parse ``"22,80,1000-1010"``, an int, or a list of either into unique ports."""
    if isinstance(spec, int):
        items: list[Any] = [spec]
    elif isinstance(spec, str):
        items = [p.strip() for p in spec.split(",") if p.strip()]
    elif isinstance(spec, (list, tuple)):
        items = list(spec)
    else:
        raise ConfigError(f"cannot parse ports from {spec!r}")
    ports: dict[int, None] = {}
    for item in items:
        if isinstance(item, int):
            lo = hi = item
        else:
            m = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+)\s*)?", str(item))
            if not m:
                raise ConfigError(f"bad port expression {item!r}")
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) else lo
        if not 0 <= lo <= hi <= 65535:
            raise ConfigError(f"bad port range {lo}-{hi}")
        for p in range(lo, hi + 1):
            ports[p] = None
    if not ports:
        raise ConfigError("port list is empty")
    return tuple(ports)


def generate_scan(
    technique: str | ScanTechnique,
    src_ip: str,
    dst_ip: str,
    ports: Sequence[int],
    timing: int,
    seed: int,
    start_ts_us: int = 0,
) -> list[Frame]:
    """One Ethernet TCP probe per port, in seeded random port order.

    Probes are spaced ``max(timing, 1)`` microseconds apart. Raw scans reuse
    one source port and carry scanner-style headers (window 1024, at most an
    MSS option); ``connect`` looks like an OS socket connect: fresh source
    port per probe, DF set, full SYN option set.
    """
    tech = TECHNIQUES[technique] if isinstance(technique, str) else technique
    if not ports:
        raise ValueError("no ports to scan")
    rng = random.Random(seed)
    order = list(ports)
    rng.shuffle(order)
    step = max(int(timing), 1)
    flags = tech.flag_byte
    sport = rng.randint(32768, 60999)
    ttl = rng.randint(37, 59)
    frames = []
    for i, dport in enumerate(order):
        ts = start_ts_us + i * step
        ack = rng.getrandbits(32) if "ack" in tech.flags else 0
        if tech.id == "connect":
            pkt = craft.tcp_packet(
                src_ip,
                dst_ip,
                rng.randint(32768, 60999),
                dport,
                flags,
                seq=rng.getrandbits(32),
                window=64240,
                ttl=64,
                ip_id=rng.getrandbits(16),
                df=True,
                options=craft.tcp_options(
                    mss=1460, sack_ok=True, timestamp=(rng.getrandbits(32), 0), wscale=7
                ),
            )
        else:
            pkt = craft.tcp_packet(
                src_ip,
                dst_ip,
                sport,
                dport,
                flags,
                seq=rng.getrandbits(32),
                ack=ack,
                window=1024,
                ttl=ttl,
                ip_id=rng.getrandbits(16),
                options=craft.tcp_options(mss=1460) if tech.id == "syn" else b"",
            )
        frames.append(Frame.of(ts, craft.ethernet(pkt)))
    return frames


@dataclass(frozen=True)
class ClassTemplate:
    label: str
    technique: str
    ports: str
    timing_us: int


def expand_classes(
    n: int,
    techniques: Sequence[str] = tuple(TECHNIQUES),
    port_templates: dict[str, str] = PORT_TEMPLATES,
    timing_templates: dict[str, int] = TIMING_TEMPLATES,
) -> list[ClassTemplate]:
    """First ``n`` attack classes from technique x port-range x timing."""
    out = []
    for timing_name, timing in timing_templates.items():
        for ports_name, ports in port_templates.items():
            for tech in techniques:
                out.append(ClassTemplate(f"{tech}_scan_{ports_name}_{timing_name}", tech, ports, timing))
    if n > len(out):
        raise ConfigError(f"only {len(out)} classes can be derived from the templates, {n} requested")
    return out[:n]


def default_scan_classes() -> list[ClassTemplate]:
    return expand_classes(22)


def _is_ipv4(value: str) -> bool:
    try:
        ipaddress.IPv4Address(value)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class AttackSpec:
    label: str
    technique: str
    target: str
    ports: tuple[int, ...]
    timing_us: int = 0
    repetitions: int = 1

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttackSpec":
        missing = {"label", "technique", "target", "ports"} - d.keys()
        if missing:
            raise ConfigError(f"attack entry {d!r} is missing {sorted(missing)}")
        spec = cls(
            label=str(d["label"]),
            technique=str(d["technique"]),
            target=str(d["target"]),
            ports=parse_ports(d["ports"]),
            timing_us=int(d.get("timing_us", d.get("timing", 0))),
            repetitions=int(d.get("repetitions", 1)),
        )
        spec.validate()
        return spec

    def validate(self) -> None:
        try:
            check_label(self.label)
        except (InvalidLabel, DataError) as exc:
            raise ConfigError(str(exc)) from None
        if not _is_ipv4(self.target):
            raise ConfigError(f"{self.label}: target {self.target!r} is not an IPv4 address")
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"unknown technique {self.technique!r}; choose from {sorted(TECHNIQUES)}")
        if not self.ports:
            raise ConfigError(f"{self.label}: empty port list")
        if self.repetitions < 1:
            raise ConfigError(f"{self.label}: repetitions must be >= 1")
        if self.timing_us < 0:
            raise ConfigError(f"{self.label}: negative timing")

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "technique": self.technique,
            "target": self.target,
            "ports": list(self.ports),
            "timing_us": self.timing_us,
            "repetitions": self.repetitions,
        }


@dataclass
class CampaignConfig:
    attacks: list[AttackSpec]
    seed: int = 0
    attacker_ip: str = "10.0.0.1"
    start_time: int = 1604966400
    port: int = DEFAULT_PORT
    mode: str = "simulate"
    parallel_targets: bool = False
    executor: dict[str, Any] = field(default_factory=lambda: {"kind": "synthetic"})

    def __post_init__(self) -> None:
        seen = set()
        for a in self.attacks:
            key = (a.label, a.target)
            if key in seen:
                raise ConfigError(f"duplicate attack entry for label {a.label!r} on target {a.target}")
            seen.add(key)
            if a.target == self.attacker_ip:
                raise ConfigError(f"{a.label}: target {a.target} is the attacker itself")
        if not _is_ipv4(self.attacker_ip):
            raise ConfigError(f"attacker_ip {self.attacker_ip!r} is not an IPv4 address")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.mode not in ("simulate", "live"):
            raise ConfigError(f"mode must be 'simulate' or 'live', not {self.mode!r}")

    @property
    def targets(self) -> list[str]:
        return list(dict.fromkeys(a.target for a in self.attacks))

    @property
    def total_runs(self) -> int:
        return sum(a.repetitions for a in self.attacks)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CampaignConfig":
        if not isinstance(d, dict):
            raise ConfigError("campaign config must be a JSON object")
        attacks = [AttackSpec.from_dict(a) for a in d.get("attacks", [])]
        preset = d.get("classes")
        if preset:
            # {"count": 22, "targets": [...], "repetitions": 1}
            for tmpl in expand_classes(int(preset.get("count", 22))):
                for target in preset.get("targets", []):
                    attacks.append(
                        AttackSpec(
                            tmpl.label,
                            tmpl.technique,
                            target,
                            parse_ports(preset.get("ports", tmpl.ports)),
                            int(preset.get("timing_us", tmpl.timing_us)),
                            int(preset.get("repetitions", 1)),
                        )
                    )
        if not attacks:
            raise ConfigError("campaign has no attacks")
        known = {"attacks", "classes", "seed", "attacker_ip", "start_time", "port", "mode", "parallel_targets", "executor"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            attacks=attacks,
            seed=int(d.get("seed", 0)),
            attacker_ip=str(d.get("attacker_ip", "10.0.0.1")),
            start_time=int(d.get("start_time", 1604966400)),
            port=int(d.get("port", DEFAULT_PORT)),
            mode=str(d.get("mode", "simulate")),
            parallel_targets=bool(d.get("parallel_targets", False)),
            executor=dict(d.get("executor", {"kind": "synthetic"})),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "attacker_ip": self.attacker_ip,
            "start_time": self.start_time,
            "port": self.port,
            "mode": self.mode,
            "parallel_targets": self.parallel_targets,
            "executor": self.executor,
            "attacks": [a.to_dict() for a in self.attacks],
        }


def load_config(text: str) -> CampaignConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return CampaignConfig.from_dict(data)


class BadName(DataError):
    pass


_NAME_RE = re.compile(r"(?P<label>.+)_(?P<ts>\d+)\.pcap")


def label_from_filename(name: str | Path) -> tuple[str, int]:
    """Split ``<label>_<unix_seconds>.pcap`` on its last underscore."""
    base = Path(name).name
    if not base.endswith(".pcap"):
        raise BadName(f"{base!r} does not end in .pcap")
    stem = base[: -len(".pcap")]
    label, sep, ts = stem.rpartition("_")
    if not sep or not label:
        raise BadName(f"{base!r} has no '<label>_<timestamp>' structure")
    if not ts.isdigit() or not ts.isascii():
        raise BadName(f"{base!r}: timestamp {ts!r} is not numeric")
    return label, int(ts)


def derive_seed(seed: int, *parts: Any) -> int:
    h = hashlib.sha256(repr((seed,) + parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


# -- executors --------------------------------------------------------------


class SyntheticNetwork:
    """Shared segment connecting simulated targets.

    Every transmitted frame reaches every attached capture source, so each
    daemon sees probes aimed at other targets and the targets' replies as
    well; its filter has to reject them.
    """

    def __init__(self, replies: bool = True):
        self.sources: dict[str, SyntheticSource] = {}
        self.replies = replies

    def attach(self, ip: str, source: SyntheticSource) -> None:
        self.sources[ip] = source

    def deliver(self, ts_us: int, data: bytes) -> None:
        for src in self.sources.values():
            src.inject(ts_us, data)

    def transmit(self, frames: Iterable[Frame]) -> None:
        for f in frames:
            self.deliver(f.ts_us, f.data)
            if not self.replies:
                continue
            rec = extract_features(f.data, LINKTYPE_ETHERNET, f.ts_us)
            if not isinstance(rec, PacketRecord) or rec.dst_ip not in self.sources:
                continue
            # closed port: RST; SYN to an "open" port: SYN/ACK
            if rec.tcp_flag_syn and rec.dst_port % 7 == 0:
                flags = craft.flag_byte("syn", "ack")
            else:
                flags = craft.flag_byte("rst", "ack") if rec.tcp_flag_syn else craft.flag_byte("rst")
            reply = craft.tcp_frame(
                rec.dst_ip, rec.src_ip, rec.dst_port, rec.src_port, flags,
                seq=0, ack=(rec.tcp_seq + 1) & 0xFFFFFFFF, window=0, ttl=64,
            )
            self.deliver(f.ts_us + 1, reply)


class SyntheticExecutor:
    """Generates scans in-process and puts them on a :class:`SyntheticNetwork`."""

    def __init__(self, network: SyntheticNetwork, attacker_ip: str, clock: SimClock):
        self.network = network
        self.attacker_ip = attacker_ip
        self.clock = clock

    def __call__(self, spec: AttackSpec, seed: int) -> int:
        start_us = int(self.clock() * 1_000_000) + 1_000_000
        frames = generate_scan(spec.technique, self.attacker_ip, spec.target, spec.ports, spec.timing_us, seed, start_us)
        # the control channel is on the wire too; it must never be recorded
        self.network.deliver(start_us - 1, craft.udp_frame(self.attacker_ip, spec.target, 40000, DEFAULT_PORT, b"ABTP"))
        self.network.transmit(frames)
        self.clock.advance_to(frames[-1].ts_us / 1_000_000 + 1)
        return len(frames)


class CommandExecutor:
    """Runs an external scanner; argv items are ``str.format``-ed with the attack fields.

    Available fields: ``{target}``, ``{ports}`` (comma list), ``{label}``,
    ``{technique}``, ``{timing_us}``, ``{seed}``.
    """

    def __init__(self, argv: Sequence[str] | str, timeout: float | None = None):
        self.argv = shlex.split(argv) if isinstance(argv, str) else list(argv)
        self.timeout = timeout

    def __call__(self, spec: AttackSpec, seed: int) -> None:
        fields = {
            "target": spec.target,
            "ports": ",".join(map(str, spec.ports)),
            "label": spec.label,
            "technique": spec.technique,
            "timing_us": spec.timing_us,
            "seed": seed,
        }
        cmd = [arg.format(**fields) for arg in self.argv]
        log.info("running %s", shlex.join(cmd))
        subprocess.run(cmd, check=True, timeout=self.timeout, stdout=subprocess.DEVNULL)
        return None


# -- campaign runner --------------------------------------------------------


@dataclass
class CampaignRun:
    index: int
    repetition: int
    label: str
    target: str
    filename: str
    start_ts: int
    probes: int | None


@dataclass
class CampaignFailure:
    index: int
    repetition: int
    label: str
    target: str
    error: TrapforgeError

    def __str__(self) -> str:
        return f"attack #{self.index} {self.label!r} -> {self.target} (repetition {self.repetition}): {self.error}"


@dataclass
class CampaignResult:
    runs: list[CampaignRun] = field(default_factory=list)
    errors: list[CampaignFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def total_probes(self) -> int:
        return sum(r.probes or 0 for r in self.runs)


Controller = Callable[[tuple[str, int], str, Callable[[], Any]], CaptureResult]
Executor = Callable[[AttackSpec, int], "int | None"]


def _run_entries(
    jobs: list[tuple[int, AttackSpec]],
    config: CampaignConfig,
    controller: Controller,
    executor: Executor,
) -> CampaignResult:
    result = CampaignResult()
    for index, spec in jobs:
        for rep in range(spec.repetitions):
            seed = derive_seed(config.seed, index, rep)
            try:
                cap = controller((spec.target, config.port), spec.label, lambda: executor(spec, seed))
            except (NoAck, Refused) as exc:
                log.error("attack #%d %s on %s failed: %s", index, spec.label, spec.target, exc)
                result.errors.append(CampaignFailure(index, rep, spec.label, spec.target, exc))
                continue
            result.runs.append(
                CampaignRun(index, rep, spec.label, spec.target, cap.filename, cap.start_ts, cap.body_result)
            )
    return result


def run_campaign(config: CampaignConfig, controller: Controller, executor: Executor) -> CampaignResult:
    """Run every attack entry x repetition; one labeled capture per run.

    NoAck/Refused failures are collected, not raised, so a partial campaign
    still returns the runs that completed.
    """
    jobs = list(enumerate(config.attacks))
    if not config.parallel_targets:
        return _run_entries(jobs, config, controller, executor)

    by_target: dict[str, list[tuple[int, AttackSpec]]] = defaultdict(list)
    for job in jobs:
        by_target[job[1].target].append(job)
    merged = CampaignResult()
    with ThreadPoolExecutor(max_workers=len(by_target)) as pool:
        parts = pool.map(lambda js: _run_entries(js, config, controller, executor), by_target.values())
        for part in parts:
            merged.runs.extend(part.runs)
            merged.errors.extend(part.errors)
    merged.runs.sort(key=lambda r: (r.index, r.repetition))
    merged.errors.sort(key=lambda e: (e.index, e.repetition))
    return merged


@dataclass
class Simulation:
    """In-process daemons on a synthetic network, one per campaign target."""

    config: CampaignConfig
    out_dir: Path
    clock: SimClock
    network: SyntheticNetwork
    transport: InMemoryTransport
    daemons: dict[str, CaptureDaemon]

    @classmethod
    def build(cls, config: CampaignConfig, out_dir: str | Path) -> "Simulation":
        out_dir = Path(out_dir)
        clock = SimClock(config.start_time)
        network = SyntheticNetwork()
        transport = InMemoryTransport(config.attacker_ip)
        daemons = {}
        for target in config.targets:
            source = SyntheticSource()
            network.attach(target, source)
            daemon = CaptureDaemon(target, out_dir / target, source, clock=clock)
            transport.attach(daemon, config.port)
            daemons[target] = daemon
        return cls(config, out_dir, clock, network, transport, daemons)

    def controller(self, target: tuple[str, int], label: str, body: Callable[[], Any]) -> CaptureResult:
        return controller_run(self.transport, target, label, body, clock=self.clock, timeout=0.0, retries=0)

    def executor(self) -> SyntheticExecutor:
        return SyntheticExecutor(self.network, self.config.attacker_ip, self.clock)

    def path_of(self, run: CampaignRun) -> Path:
        return self.out_dir / run.target / run.filename

    def run(self) -> CampaignResult:
        if self.config.parallel_targets:
            # a shared simulated clock cannot be advanced by two targets at once
            raise ConfigError("parallel_targets is not supported in simulate mode")
        return run_campaign(self.config, self.controller, self.executor())
