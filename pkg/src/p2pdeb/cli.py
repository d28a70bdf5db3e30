"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage error,
3 I/O or format error, 4 partial run (bag sealed after a source failure).
"""
from __future__ import annotations

import argparse
import hashlib
import os
import signal
import sys
from pathlib import Path
from typing import List, Optional

from . import bag_format as bf
from .classify import (
    DEFAULT_MIN_ENDPOINTS,
    DEFAULT_MIN_SUPPORT,
    DEFAULT_PREFIX_LENGTH,
    default_signatures,
    format_report,
    frequency_report,
    load_signatures,
)
from .custody import (
    AuditRecord,
    append_sidecar,
    default_actor,
    format_log,
    now_us,
    read_sidecar,
    sidecar_path,
    verify_audit,
)
from .errors import (
    AuditError,
    BagError,
    P2PDebError,
    PartSizeTooSmall,
    PcapError,
    SignatureError,
    SourceFailure,
    VerificationFailed,
)
from .pipeline import Pipeline, PipelineConfig, RotationLimits, open_source

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARTIAL = 4

# flag -> CaseMetadata field
METADATA_FLAGS = {
    "agency": "investigating_agency",
    "exhibit": "exhibit_reference",
    "property": "property_reference",
    "suspect": "case_suspect_name",
    "description": "description",
    "seized-at": "seized_datetime",
    "seized-location": "seized_location",
    "producer": "producer_name",
    "producer-signature": "producer_signature",
    "incident": "incident_reference",
    "laboratory": "laboratory_reference",
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"p2pdeb: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# audit helpers


def _sidecar_seed(bag_path: Path) -> bytes:
    """Final chain hash of the bag, or a digest of the raw file if unreadable."""
    try:
        _, footer = bf.read_metadata(bag_path)
        return footer.final_chain_hash
    except (BagError, OSError):
        h = hashlib.sha256()
        with open(bag_path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        return h.digest()


def _audit(args, bag_path: Path, action: str, note: str = "", digest: Optional[bytes] = None) -> None:
    if not bag_path.is_file():
        return  # nothing to attach a record to
    seed = _sidecar_seed(bag_path)
    record = AuditRecord(now_us(), default_actor(args.operator), action, digest or seed, note)
    try:
        append_sidecar(sidecar_path(bag_path), seed, record)
    except (AuditError, OSError) as exc:
        raise CliError(f"cannot append to audit sidecar: {exc}", EXIT_IO) from exc


# ---------------------------------------------------------------------------
# capture


def _metadata_from_args(args) -> bf.CaseMetadata:
    values = {}
    if args.metadata:
        try:
            values = bf.CaseMetadata.from_text(Path(args.metadata).read_text("utf-8")).to_dict()
        except OSError as exc:
            raise CliError(f"cannot read metadata file: {exc}", EXIT_IO) from exc
        except ValueError as exc:
            raise CliError(f"bad metadata file: {exc}", EXIT_USAGE) from exc
    for flag, key in METADATA_FLAGS.items():
        value = getattr(args, flag.replace("-", "_"))
        if value is None:
            continue
        if values.get(key) and values[key] != value:
            _err(f"--{flag} overrides {key} from the metadata file")
        values[key] = value
    return bf.CaseMetadata.from_dict(values)


def _load_signature_set(path: Optional[str]):
    if not path:
        return default_signatures()
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise CliError(f"cannot read signature file: {exc}", EXIT_IO) from exc
    try:
        return load_signatures(text)
    except SignatureError as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from exc


def _print_summary(summary, fmt: str) -> None:
    print(f"packets_in={summary.packets_in} stored={summary.packets_stored} "
          f"dropped={summary.packets_dropped} segments={summary.segments} "
          f"duration={summary.duration:.3f}s")
    print(format_report(frequency_report(summary.stats), fmt), end="")
    print(f"candidates={len(summary.candidates)}")
    for c in summary.candidates:
        print(f"  {c.prefix.hex()} support={c.support} endpoints={c.endpoint_count} transport={c.transport}")


def cmd_capture(args) -> int:
    metadata = _metadata_from_args(args)
    signatures = _load_signature_set(args.signatures)
    try:
        config = PipelineConfig(
            rotation=RotationLimits(args.max_packets, args.max_bytes, args.max_seconds),
            queue_capacity=args.queue_capacity,
            home_networks=tuple(args.home_net or ()),
            drop_policy=args.drop_policy,
            status_interval=args.status_interval,
            prefix_length=args.prefix_length,
            min_support=args.min_support,
            min_endpoints=args.min_endpoints,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    try:
        source = open_source(args.input)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except (OSError, PcapError) as exc:
        raise CliError(f"cannot read input {args.input}: {exc}", EXIT_IO) from exc

    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    code = EXIT_OK
    try:
        with open(tmp, "wb") as sink:
            writer = bf.create_bag(
                metadata,
                bf.BagConfig.for_pcap(source.header, signature_set_digest=signatures.digest),
                sink=sink,
                actor=default_actor(args.operator),
            )
            pipeline = Pipeline(source, signatures, writer, config)
            try:
                previous = signal.signal(signal.SIGINT, lambda *_: pipeline.request_stop())
            except ValueError:  # not the main thread
                previous = None
            try:
                summary = pipeline.run()
            except SourceFailure as exc:
                _err(str(exc))
                summary = exc.summary
                code = EXIT_PARTIAL
            finally:
                if previous is not None:
                    signal.signal(signal.SIGINT, previous)
            sink.flush()
            os.fsync(sink.fileno())
        os.replace(tmp, out)
    except OSError as exc:
        raise CliError(f"writing {out}: {exc}", EXIT_IO) from exc
    finally:
        source.close()
        if tmp.exists():
            tmp.unlink()
    _print_summary(summary, args.format)
    return code


# ---------------------------------------------------------------------------
# sealed-bag commands


def cmd_verify(args) -> int:
    paths = [Path(p) for p in args.bags]
    if any(bf.is_part(p) for p in paths):
        return _verify_parts(args, paths)
    if len(paths) != 1:
        raise CliError("verify takes one bag or a set of part files", EXIT_USAGE)
    path = paths[0]
    try:
        report = bf.verify_bag(path)
    except BagError as exc:
        _audit(args, path, "verified", f"result=malformed {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    print(report.format(), end="")
    if report.ok:
        note = "result=ok"
    else:
        note = "result=FAIL"
        if report.first_failure is not None:
            note += f" first_failing_segment={report.first_failure}"
    _audit(args, path, "verified", note, report.stored_final)
    return EXIT_OK if report.ok else EXIT_VERIFY


def _verify_parts(args, paths: List[Path]) -> int:
    try:
        checks = bf.verify_parts(paths)
    except BagError as exc:
        _audit(args, paths[0], "verified", f"parts={len(paths)} result=malformed {exc}")
        raise CliError(str(exc), EXIT_IO) from exc
    ok = True
    for c in checks:
        print(f"part {c.part_index}: {'ok' if c.ok else 'FAIL'}" + (f" ({c.detail})" if c.detail else ""))
        ok &= c.ok
    print("result: ok" if ok else "result: FAIL")
    _audit(args, paths[0], "verified", f"parts={len(paths)} result={'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_split(args) -> int:
    path = Path(args.bag)
    out_dir = Path(args.out_dir) if args.out_dir else path.parent
    note = f"max_size={args.max_size}"
    if args.max_size >= bf.FAT32_LIMIT:
        warning = f"max size {args.max_size} is not below 2^32 bytes; parts may not fit on FAT32"
        _err(f"warning: {warning}")
        note += " warning=exceeds-fat32-limit"
    try:
        parts = bf.split_bag_files(path, out_dir, args.max_size)
    except PartSizeTooSmall as exc:
        _audit(args, path, "split", f"{note} failed: {exc}")
        raise CliError(str(exc), EXIT_USAGE) from exc
    except BagError as exc:
        _audit(args, path, "split", f"{note} failed: {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    for p in parts:
        print(p)
    _audit(args, path, "split", f"{note} parts={len(parts)}")
    return EXIT_OK


def cmd_merge(args) -> int:
    out = Path(args.out)
    try:
        bf.merge_part_files(args.parts, out)
    except BagError as exc:
        raise CliError(f"merge failed: {type(exc).__name__}: {exc}", EXIT_IO) from exc
    print(out)
    _audit(args, out, "merged", f"parts={len(args.parts)}")
    return EXIT_OK


def cmd_export(args) -> int:
    path = Path(args.bag)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    try:
        with open(tmp, "wb") as sink:
            report = bf.export_raw_to(path, sink, override=args.override)
        os.replace(tmp, out)
    except VerificationFailed as exc:
        print(exc.report.format(), end="")
        _audit(args, path, "exported", "refused: verification failed")
        _err("bag failed verification; use --override to export anyway")
        return EXIT_VERIFY
    except (BagError, OSError) as exc:
        _audit(args, path, "exported", f"failed: {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    finally:
        tmp.unlink(missing_ok=True)
    if not report.ok:
        _err("warning: exported a bag that failed verification (override)")
        _audit(args, path, "override_used", "export of unverified bag")
    _audit(args, path, "exported", f"to={out.name} verified={'ok' if report.ok else 'FAIL'}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.bag)
    try:
        _, footer = bf.read_metadata(path)
    except BagError as exc:
        _audit(args, path, "inspected", f"report failed: {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    print(format_report(frequency_report(footer.stats), args.format), end="")
    if args.candidates:
        if args.format == "csv":
            print("prefix,support,endpoints,transport")
            for c in footer.candidates:
                print(f"{c.prefix.hex()},{c.support},{c.endpoint_count},{c.transport}")
        else:
            for c in footer.candidates:
                print(f"candidate {c.prefix.hex()} support={c.support} endpoints={c.endpoint_count} transport={c.transport}")
    _audit(args, path, "inspected", "report")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.bag)
    try:
        header = bf.read_header(path)
        metadata, footer = bf.read_metadata(path)
    except BagError as exc:
        _audit(args, path, "inspected", f"inspect failed: {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    for key, value in metadata.to_dict().items():
        print(f"{key}: {value}")
    print(f"created_at_us: {header.created_at}")
    print(f"snap_length: {header.snap_length}")
    print(f"link_type: {header.link_type}")
    print(f"signature_set_digest: {header.signature_set_digest.hex()}")
    print(f"segments: {footer.segment_count}")
    print(f"packets: {footer.total_packets}")
    print(f"payload_bytes: {footer.total_payload_bytes}")
    print(f"packets_dropped: {footer.packets_dropped}")
    print(f"candidates: {len(footer.candidates)}")
    print(f"final_chain_hash: {footer.final_chain_hash.hex()}")
    _audit(args, path, "inspected", "inspect")
    return EXIT_OK


def cmd_audit(args) -> int:
    path = Path(args.bag)
    try:
        seed = bf.read_header_digest(path)
        _, footer = bf.read_metadata(path)
    except BagError as exc:
        _audit(args, path, "inspected", f"audit failed: {exc}")
        raise CliError(f"{path}: {exc}", EXIT_IO) from exc
    ok = True
    res = verify_audit(footer.audit_log, seed)
    print(f"in-bag log: {len(footer.audit_log)} records, {'ok' if res.ok else 'FAIL'}"
          + ("" if res.ok else f" at record {res.first_bad_index} ({res.reason})"))
    print(format_log(footer.audit_log), end="")
    ok &= res.ok
    side = sidecar_path(path)
    if side.exists():
        try:
            log = read_sidecar(side)
        except AuditError as exc:
            print(f"sidecar log: unreadable ({exc})")
            ok = False
        else:
            res = verify_audit(log, footer.final_chain_hash)
            print(f"sidecar log: {len(log)} records, {'ok' if res.ok else 'FAIL'}"
                  + ("" if res.ok else f" at record {res.first_bad_index} ({res.reason})"))
            print(format_log(log), end="")
            ok &= res.ok
    else:
        print("sidecar log: none")
    _audit(args, path, "inspected", "audit")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_signatures(args) -> int:
    sigs = _load_signature_set(args.signatures)
    if args.dump:
        print(sigs.dump() if args.signatures else sigs.text, end="")
    else:
        for s in sigs:
            print(f"{s.id}: {s.protocol}/{s.category} {s.transport} @{s.anchor_offset} {s.pattern_hex}")
        print(f"digest {sigs.digest.hex()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2pdeb", description="P2P network evidence bags")
    parser.add_argument("--operator", help="operator name for the custody log (default: $P2PDEB_OPERATOR or login name)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capture", help="capture a pcap source into a sealed bag")
    p.add_argument("--in", dest="input", required=True, help="pcap file or live:<adapter>")
    p.add_argument("--out", required=True, help="bag file to write")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.add_argument("--metadata", help="case metadata file (key=value lines)")
    for flag, key in METADATA_FLAGS.items():
        p.add_argument(f"--{flag}", help=f"case metadata: {key}")
    p.add_argument("--signatures", help="signature file (default: built-in set)")
    p.add_argument("--max-packets", type=int, default=10_000)
    p.add_argument("--max-bytes", type=int, default=64 * 1024 * 1024)
    p.add_argument("--max-seconds", type=float, default=60.0)
    p.add_argument("--queue-capacity", type=int, default=65_536)
    p.add_argument("--home-net", action="append", metavar="CIDR")
    p.add_argument("--drop-policy", choices=("block", "count_drops"))
    p.add_argument("--status-interval", type=float, default=5.0)
    p.add_argument("--prefix-length", type=int, default=DEFAULT_PREFIX_LENGTH)
    p.add_argument("--min-support", type=int, default=DEFAULT_MIN_SUPPORT)
    p.add_argument("--min-endpoints", type=int, default=DEFAULT_MIN_ENDPOINTS)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("verify", help="verify a bag or a set of split parts")
    p.add_argument("bags", nargs="+")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("split", help="split a bag into parts")
    p.add_argument("bag")
    p.add_argument("--max-size", type=int, default=bf.DEFAULT_MAX_PART_SIZE)
    p.add_argument("--out-dir")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("merge", help="recompile parts into the original bag")
    p.add_argument("parts", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("export", help="export the captured traffic as a pcap file")
    p.add_argument("bag")
    p.add_argument("--out", required=True)
    p.add_argument("--override", action="store_true", help="export even if verification fails")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="per-category frequency report")
    p.add_argument("bag")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--candidates", action="store_true", help="also list candidate signatures")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="show case metadata and footer summary")
    p.add_argument("bag")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("audit", help="show and verify custody logs")
    p.add_argument("bag")
    p.add_argument("--operator", default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("signatures", help="list or dump the signature set")
    p.add_argument("--dump", action="store_true", help="print in signature file format")
    p.add_argument("--signatures", help="signature file (default: built-in set)")
    p.set_defaults(func=cmd_signatures)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors (2) and --help (0)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_IO
    except (OSError, P2PDebError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
