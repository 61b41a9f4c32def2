"""``trapforge`` command line.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 schema error,
5 I/O error.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .attack_campaign import (
    CommandExecutor,
    Simulation,
    label_from_filename,
    load_config,
    run_campaign,
)
from .benign_pipeline import (
    LabelSet,
    TraceReport,
    convert_mawilab,
    filter_benign,
    parse_label_file,
    records_from_pcap,
    sample_packets,
)
from .capture_control import (
    DEFAULT_PORT,
    CaptureDaemon,
    LiveSource,
    ReplaySource,
    UdpTransport,
    bind_udp,
    controller_run,
    serve,
)
from .dataset_ops import (
    benign_count_for_ratio,
    binary_stats,
    dataset_stats,
    export_csv,
    import_csv,
    salt,
    to_stateful,
    to_stateless,
)
from .errors import ConfigError, IoFailure, SchemaError, TrapforgeError
from .packet_model import BENIGN, PACKET_SCHEMA, TidyDataset
from .pcap_io import read_pcap_file

log = logging.getLogger("trapforge")

RESHAPE_MODES = ("stateless", "stateful")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar(out: Path, suffix: str) -> Path:
    """``data.csv.gz`` + ``.stats.csv`` -> ``data.stats.csv``."""
    name = out.name
    for ext in (".gz", ".csv"):
        if name.endswith(ext):
            name = name[: -len(ext)]
    return out.with_name(name + suffix)


class Manifest:
    def __init__(self, subcommand: str, args: argparse.Namespace):
        self.started = time.monotonic()
        self.data: dict[str, Any] = {
            "tool": "trapforge",
            "version": __version__,
            "subcommand": subcommand,
            "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": {},
        }

    def add_input(self, path: Path) -> None:
        self.data["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path: Path) -> None:
        self.data["outputs"][str(path)] = sha256_file(path)

    def write(self, path: Path) -> Path:
        self.data["duration_s"] = round(time.monotonic() - self.started, 3)
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(v: Any) -> Any:
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path.parent}: {exc}") from None


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None


# -- daemon -----------------------------------------------------------------


def cmd_daemon(args: argparse.Namespace) -> int:
    self_ip = args.self_ip or args.bind
    if self_ip == "0.0.0.0":
        raise ConfigError("--self-ip is required when binding 0.0.0.0")
    if args.interface:
        source: Any = LiveSource(args.interface)
    elif args.replay:
        source = ReplaySource(read_pcap_file(args.replay).frames)
    else:
        raise ConfigError("choose a capture source: --interface IFACE or --replay PCAP")
    sock = bind_udp(args.bind, args.port)
    manifest = Manifest("daemon", args)
    if args.replay:
        manifest.add_input(args.replay)
    daemon = CaptureDaemon(self_ip, args.out, source)
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    log.info("daemon for %s listening on udp %s:%d", self_ip, args.bind, sock.getsockname()[1])
    print(f"listening on udp {args.bind}:{sock.getsockname()[1]}", flush=True)
    until = (lambda: len(daemon.completed) >= args.max_sessions) if args.max_sessions else None
    try:
        serve(daemon, sock, stop, until=until)
    finally:
        sock.close()
    for path in daemon.completed:
        manifest.add_output(path)
        print(path)
    manifest.write(Path(args.out) / "daemon.manifest.json")
    return 0


# -- campaign ---------------------------------------------------------------


def cmd_campaign(args: argparse.Namespace) -> int:
    config = load_config(_read_text(args.config))
    if args.seed is not None:
        config.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("campaign", args)
    manifest.add_input(args.config)
    manifest.data["seed"] = config.seed
    manifest.data["resolved_config"] = config.to_dict()

    if config.mode == "simulate":
        if config.executor.get("kind", "synthetic") != "synthetic":
            raise ConfigError("simulate mode only supports the synthetic executor")
        sim = Simulation.build(config, out)
        result = sim.run()
        paths: list[Path | None] = [sim.path_of(r) for r in result.runs]
    else:
        if config.executor.get("kind") != "command":
            raise ConfigError("live mode needs executor {\"kind\": \"command\", \"argv\": [...]}")
        executor = CommandExecutor(config.executor["argv"], config.executor.get("timeout"))
        transport = UdpTransport()
        try:
            controller = functools.partial(
                controller_run,
                transport,
                retries=int(config.executor.get("retries", 3)),
                timeout=float(config.executor.get("ack_timeout", 0.5)),
            )
            result = run_campaign(config, controller, executor)
        finally:
            transport.close()
        paths = [None] * len(result.runs)

    runs = []
    for run, path in zip(result.runs, paths):
        entry = {"label": run.label, "target": run.target, "file": run.filename, "probes": run.probes}
        if path is not None:
            manifest.add_output(path)
            entry["path"] = str(path)
        runs.append(entry)
        print(f"{run.target}\t{run.filename}\t{run.probes if run.probes is not None else '-'}")
    manifest.data["runs"] = runs
    manifest.data["errors"] = [str(e) for e in result.errors]
    manifest.write(out / "campaign.manifest.json")
    print(f"{len(result.runs)} captures, {result.total_probes} probes, {len(result.errors)} failures")
    if result.errors:
        for e in result.errors:
            print(f"error: {e}", file=sys.stderr)
        return result.errors[0].error.exit_code
    return 0


# -- benign -----------------------------------------------------------------


def cmd_benign(args: argparse.Namespace) -> int:
    if args.labels is None and not args.no_labels:
        raise ConfigError("give --labels FILE or --no-labels")
    manifest = Manifest("benign", args)
    manifest.add_input(args.trace)
    labels = LabelSet()
    if args.labels is not None:
        manifest.add_input(args.labels)
        text = _read_text(args.labels)
        labels = convert_mawilab(text, str(args.labels)) if args.mawilab else parse_label_file(text, str(args.labels))

    trace = TraceReport()
    try:
        with open(args.trace, "rb") as fh:
            packets = list(records_from_pcap(fh, trace))
    except OSError as exc:
        raise IoFailure(f"cannot read {args.trace}: {exc}") from None
    kept, _removed, report = filter_benign(packets, labels, remove_notice=args.remove_notice)
    if args.sample_count is not None or args.sample_ratio is not None:
        kept = sample_packets(
            kept, count=args.sample_count, ratio=args.sample_ratio, seed=args.seed, mode=args.sample_mode
        )
    out = Path(args.out)
    _ensure_parent(out)
    export_csv(TidyDataset.from_records(r.with_label(BENIGN) for r in kept), out)
    manifest.add_output(out)
    manifest.data["report"] = {
        "frames": trace.frames,
        "tcp_packets": trace.packets,
        "skipped": trace.skipped,
        "kept": report.kept,
        "removed": report.removed,
        "sampled": len(kept),
    }
    manifest.write(sidecar(out, ".manifest.json"))
    print(f"frames {trace.frames}  ipv4/tcp {trace.packets}  skipped {sum(trace.skipped.values())}")
    print(report.format())
    print(f"written {len(kept)} benign packets to {out}")
    return 0


# -- salt -------------------------------------------------------------------


def _attack_files(paths: Sequence[Path]) -> list[Path]:
    files: list[Path] = []
    for p in paths:
        if p.is_dir():
            files.extend(sorted(p.rglob("*.pcap")))
        elif p.exists():
            files.append(p)
        else:
            raise IoFailure(f"no such file or directory: {p}")
    return sorted(dict.fromkeys(files))


def _pcap_dataset(path: Path) -> TidyDataset:
    with open(path, "rb") as fh:
        return TidyDataset.from_records(records_from_pcap(fh))


def _write_report(stats, out: Path, manifest: Manifest, figures: bool, title: str) -> None:
    stats_path = sidecar(out, ".stats.csv")
    with open(stats_path, "w", newline="") as fh:
        fh.write("class,count,proportion,percent\r\n")
        for name, n, p, pct in stats.rows():
            fh.write(f"{name},{n},{p!r},{pct}\r\n")
    manifest.add_output(stats_path)
    if figures:
        from .plotting import plot_class_distribution

        manifest.add_output(plot_class_distribution(stats, sidecar(out, ".classes.png"), title))


def cmd_salt(args: argparse.Namespace) -> int:
    manifest = Manifest("salt", args)
    manifest.add_input(args.benign)
    benign = import_csv(args.benign)
    if benign.schema != PACKET_SCHEMA:
        raise SchemaError(f"{args.benign}: benign input must use the {len(PACKET_SCHEMA.columns)}-column packet schema")
    attacks: list[tuple[str, TidyDataset]] = []
    for path in _attack_files(args.attacks):
        label, _ = label_from_filename(path)
        manifest.add_input(path)
        attacks.append((label, _pcap_dataset(path)))
    n_attack = sum(len(d) for _, d in attacks)

    if args.benign_ratio is not None:
        want = benign_count_for_ratio(args.benign_ratio, n_attack)
        records = list(benign.records())
        benign = TidyDataset.from_records(
            sample_packets(records, count=want, seed=args.seed, mode=args.sample_mode)
        )
    dataset = salt(benign, attacks, args.seed)
    out = Path(args.out)
    _ensure_parent(out)
    export_csv(dataset, out)
    manifest.add_output(out)

    stats = dataset_stats(dataset)
    binary = binary_stats(dataset)
    _write_report(stats, out, manifest, not args.no_figures, "Salted dataset")
    manifest.data["stats"] = {"per_class": stats.counts, "binary": binary.counts}
    manifest.write(sidecar(out, ".manifest.json"))
    print(stats.format())
    print()
    print(binary.format())
    return 0


# -- reshape / stats --------------------------------------------------------


def cmd_reshape(args: argparse.Namespace) -> int:
    manifest = Manifest("reshape", args)
    manifest.add_input(args.dataset)
    dataset = import_csv(args.dataset)
    out = Path(args.out)
    _ensure_parent(out)
    if args.mode == "stateless":
        reshaped = to_stateless(dataset)
        export_csv(reshaped, out)
        print(f"{len(reshaped)} rows x {len(reshaped.schema.columns)} columns")
    else:
        flows = to_stateful(dataset)
        export_csv(flows, out)
        if not args.no_figures:
            from .plotting import plot_flow_sizes

            manifest.add_output(plot_flow_sizes(flows, sidecar(out, ".flows.png")))
        print(f"{len(dataset)} packets -> {len(flows)} flows")
    manifest.add_output(out)
    manifest.write(sidecar(out, ".manifest.json"))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    dataset = import_csv(args.dataset)
    stats = binary_stats(dataset) if args.binary else dataset_stats(dataset)
    print(stats.format())
    if args.out:
        manifest = Manifest("stats", args)
        manifest.add_input(args.dataset)
        out = Path(args.out)
        _ensure_parent(out)
        _write_report(stats, out, manifest, not args.no_figures, "Class distribution")
        manifest.write(sidecar(out, ".manifest.json"))
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("daemon", help="run the capture daemon on a target host")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--bind", default="0.0.0.0", help="UDP address to listen on")
    p.add_argument("--self-ip", help="this target's IPv4 address (defaults to --bind)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--interface", help="sniff this interface (Linux, needs CAP_NET_RAW)")
    src.add_argument("--replay", type=Path, help="synthetic source: replay this pcap into every session")
    p.add_argument("--out", type=Path, default=Path("."), help="directory for capture files")
    p.add_argument("--max-sessions", type=int, default=0, help="exit after this many sessions (0 = never)")
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("campaign", help="run an attack campaign from a JSON config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("benign", help="filter and sample a backbone trace into benign rows")
    p.add_argument("--trace", type=Path, required=True)
    lab = p.add_mutually_exclusive_group()
    lab.add_argument("--labels", type=Path, help="anomaly label CSV")
    lab.add_argument("--no-labels", action="store_true", help="keep every packet")
    p.add_argument("--mawilab", action="store_true", help="labels file is in MAWILab's published format")
    p.add_argument("--remove-notice", action="store_true", help="also drop 'notice' traffic")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--sample-count", type=int)
    size.add_argument("--sample-ratio", type=float)
    p.add_argument("--sample-mode", choices=("stateless", "stateful"), default="stateless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_benign)

    p = sub.add_parser("salt", help="merge benign rows with labeled attack captures")
    p.add_argument("--benign", type=Path, required=True, help="benign CSV from 'trapforge benign'")
    p.add_argument("--attacks", type=Path, nargs="+", required=True, help="attack pcaps or directories")
    p.add_argument("--benign-ratio", type=float, help="subsample benign rows to this share of the output")
    p.add_argument("--sample-mode", choices=("stateless", "stateful"), default="stateless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_salt)

    p = sub.add_parser("reshape", help="stateless (drop context) or stateful (per-flow) view")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--mode", choices=RESHAPE_MODES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_reshape)

    p = sub.add_parser("stats", help="class distribution of a dataset CSV")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--binary", action="store_true", help="benign vs attack only")
    p.add_argument("--out", type=Path, help="write <out>.stats.csv and a figure")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TRAPFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except TrapforgeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
