"""The P2P evidence bag container.

Layout (all integers little-endian)::

    header   magic "P2PDEB01" | u16 format_version | u16 hash_algorithm
             | u32 snap_length | u32 link_type | u64 created_at_us
             | u32 metadata_length | metadata block | digest signature_set_digest
    segment* u32 index | u32 packet_count | u64 payload_length | u64 first_ts
             | u64 last_ts | digest payload_hash | digest chain_hash
             | u32 sidecar_length | sidecar block | payload
    footer   "P2PDEBFT" | u32 segment_count | u64 total_packets
             | u64 total_payload_bytes | digest final_chain_hash
             | u32 stats_length | stats block | u32 candidates_length
             | candidates block | u64 audit_log_offset | audit log
    trailer  u64 footer_offset

Segment payloads are pcap records exactly as captured (record headers in
the source stream's byte order), so the original capture is recovered by
prefixing a pcap global header. ``chain(i) = H(chain(i-1) || payload_hash(i))``
with ``chain(-1) = H(header bytes)``.

Split parts::

    "P2PDEBSP" | u32 part_index | u32 part_count | digest continuity
    | header bytes | segment* | [footer + trailer, last part only] | digest part_hash
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Sequence, Tuple

from . import kvtext
from .classify import (
    CandidateSignature,
    CategoryStats,
    candidates_from_kv,
    candidates_to_kv,
)
from .custody import AuditLog, AuditRecord, now_us, verify_audit
from .errors import (
    AuditError,
    ContinuityMismatch,
    EmptySegment,
    HeaderMismatch,
    MalformedContainer,
    MissingPart,
    PartCorrupted,
    PartSizeTooSmall,
    SealedBag,
    VerificationFailed,
)
from .pcap_io import (
    MICROSECOND,
    NATIVE,
    NANOSECOND,
    SWAPPED,
    PacketRecord,
    PcapHeader,
    encode_record,
)

BAG_MAGIC = b"P2PDEB01"
FOOTER_MAGIC = b"P2PDEBFT"
PART_MAGIC = b"P2PDEBSP"
FORMAT_VERSION = 1
HASH_SHA256 = 1
HASH_ALGORITHMS = {"sha256": HASH_SHA256}
DIGEST_LEN = 32

# one byte under the FAT32 per-file ceiling of 2**32 bytes
FAT32_LIMIT = 2**32
DEFAULT_MAX_PART_SIZE = FAT32_LIMIT - 1

_HEADER_FIXED = struct.Struct("<8sHHIIQI")
_SEGMENT = struct.Struct("<IIQQQ32s32sI")
_FOOTER_FIXED = struct.Struct("<8sIQQ32s")
_PART_FIXED = struct.Struct("<8sII32s")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

PART_OVERHEAD = _PART_FIXED.size + DIGEST_LEN
_CHUNK = 1 << 20
_INMEMORY_RECORD_CHECK = 256 << 20


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def chain_step(previous: bytes, payload_hash: bytes) -> bytes:
    return hashlib.sha256(previous + payload_hash).digest()


# ---------------------------------------------------------------------------
# header


@dataclass(frozen=True)
class CaseMetadata:
    investigating_agency: str = ""
    exhibit_reference: str = ""
    property_reference: str = ""
    case_suspect_name: str = ""
    description: str = ""
    seized_datetime: str = ""
    seized_location: str = ""
    producer_name: str = ""
    producer_signature: str = ""
    incident_reference: str = ""
    laboratory_reference: str = ""

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> Dict[str, str]:
        return {k: getattr(self, k) for k in self.keys()}

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "CaseMetadata":
        return cls(**{k: d.get(k, "") for k in cls.keys()})

    def to_text(self) -> str:
        return kvtext.dumps(self.to_dict()).decode("utf-8")

    @classmethod
    def from_text(cls, text: str) -> "CaseMetadata":
        d = kvtext.loads(text.encode("utf-8"))
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ValueError(f"unknown metadata keys: {', '.join(sorted(unknown))}")
        return cls.from_dict(d)


# Source pcap framing travels in the metadata block under these keys so
# that export reproduces the original global header exactly.
_PCAP_KEYS = ("pcap.byte_order", "pcap.timestamp_unit", "pcap.version_major",
              "pcap.version_minor", "pcap.thiszone", "pcap.sigfigs")


@dataclass(frozen=True)
class BagHeader:
    metadata: CaseMetadata
    pcap: PcapHeader
    created_at: int
    signature_set_digest: bytes = bytes(DIGEST_LEN)
    format_version: int = FORMAT_VERSION
    hash_algorithm: int = HASH_SHA256

    @property
    def snap_length(self) -> int:
        return self.pcap.snap_length

    @property
    def link_type(self) -> int:
        return self.pcap.link_type

    def encode(self) -> bytes:
        kv: Dict[str, object] = dict(self.metadata.to_dict())
        kv.update({
            "pcap.byte_order": self.pcap.byte_order,
            "pcap.timestamp_unit": self.pcap.timestamp_unit,
            "pcap.version_major": self.pcap.version_major,
            "pcap.version_minor": self.pcap.version_minor,
            "pcap.thiszone": self.pcap.thiszone,
            "pcap.sigfigs": self.pcap.sigfigs,
        })
        meta = kvtext.dumps(kv)
        if len(self.signature_set_digest) != DIGEST_LEN:
            raise ValueError("signature_set_digest must be 32 bytes")
        return (
            _HEADER_FIXED.pack(
                BAG_MAGIC, self.format_version, self.hash_algorithm,
                self.pcap.snap_length, self.pcap.link_type, self.created_at, len(meta),
            )
            + meta
            + self.signature_set_digest
        )

    @classmethod
    def read(cls, stream: BinaryIO) -> Tuple["BagHeader", bytes]:
        fixed = _read_exact(stream, _HEADER_FIXED.size, "bag header")
        magic, ver, alg, snap, link, created, mlen = _HEADER_FIXED.unpack(fixed)
        if magic != BAG_MAGIC:
            raise MalformedContainer(f"bad bag magic {magic!r}")
        if ver != FORMAT_VERSION:
            raise MalformedContainer(f"unsupported format version {ver}")
        if alg != HASH_SHA256:
            raise MalformedContainer(f"unsupported hash algorithm id {alg}")
        meta = _read_exact(stream, mlen, "metadata block")
        digest = _read_exact(stream, DIGEST_LEN, "signature set digest")
        try:
            kv = kvtext.loads(meta)
            byte_order = kv.get("pcap.byte_order", NATIVE)
            unit = kv.get("pcap.timestamp_unit", MICROSECOND)
            if byte_order not in (NATIVE, SWAPPED) or unit not in (MICROSECOND, NANOSECOND):
                raise ValueError("bad pcap framing keys")
            pcap = PcapHeader(
                byte_order, unit,
                int(kv.get("pcap.version_major", 2)), int(kv.get("pcap.version_minor", 4)),
                snap, link,
                int(kv.get("pcap.thiszone", 0)), int(kv.get("pcap.sigfigs", 0)),
            )
            unknown = set(kv) - set(CaseMetadata.keys()) - set(_PCAP_KEYS)
            if unknown:
                raise ValueError(f"unknown metadata keys {sorted(unknown)}")
        except (ValueError, UnicodeDecodeError) as exc:
            raise MalformedContainer(f"metadata block: {exc}") from None
        header = cls(CaseMetadata.from_dict(kv), pcap, created, digest, ver, alg)
        return header, fixed + meta + digest


# ---------------------------------------------------------------------------
# stream helpers


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise MalformedContainer(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


@contextlib.contextmanager
def _open_source(source) -> Iterator[BinaryIO]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        yield io.BytesIO(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            yield fh
    else:
        yield source


def _stream_size(stream: BinaryIO) -> int:
    pos = stream.tell()
    stream.seek(0, os.SEEK_END)
    size = stream.tell()
    stream.seek(pos)
    return size


def _copy(stream: BinaryIO, n: int, sink: Optional[BinaryIO], *hashers) -> None:
    remaining = n
    while remaining:
        chunk = stream.read(min(_CHUNK, remaining))
        if not chunk:
            raise MalformedContainer(f"unexpected end of data ({remaining} bytes short)")
        remaining -= len(chunk)
        for h in hashers:
            h.update(chunk)
        if sink is not None:
            sink.write(chunk)


# ---------------------------------------------------------------------------
# writing


@dataclass
class BagConfig:
    snap_length: int = 65535
    link_type: int = 1
    hash_algorithm: str = "sha256"
    signature_set_digest: bytes = bytes(DIGEST_LEN)
    created_at: Optional[int] = None
    # byte order / timestamp unit / version / zone of the source capture
    source_format: Optional[PcapHeader] = None

    @classmethod
    def for_pcap(cls, header: PcapHeader, **kw) -> "BagConfig":
        return cls(snap_length=header.snap_length, link_type=header.link_type,
                   source_format=header, **kw)

    def pcap_header(self) -> PcapHeader:
        src = self.source_format or PcapHeader()
        return PcapHeader(src.byte_order, src.timestamp_unit, src.version_major,
                          src.version_minor, self.snap_length, self.link_type,
                          src.thiszone, src.sigfigs)


class BagWriter:
    """Builds a bag incrementally. Single owner; not thread-safe."""

    def __init__(self, header: BagHeader, sink: Optional[BinaryIO] = None,
                 actor: str = "unknown", clock=now_us):
        self.header = header
        self.header_bytes = header.encode()
        self.header_digest = sha256(self.header_bytes)
        self.chain = self.header_digest
        self.sink = sink if sink is not None else io.BytesIO()
        self.actor = actor
        self.clock = clock
        self.segment_count = 0
        self.total_packets = 0
        self.total_payload_bytes = 0
        self.stats = CategoryStats()
        self.sealed = False
        self.audit = AuditLog(self.header_digest)
        self.sink.write(self.header_bytes)
        self.offset = len(self.header_bytes)
        self.log("created", self.header_digest)

    def log(self, action: str, digest: Optional[bytes] = None, note: str = "") -> AuditRecord:
        return self.audit.append(
            AuditRecord(self.clock(), self.actor, action, digest or self.chain, note)
        )

    def append_segment(self, records: Sequence[PacketRecord],
                       sidecar: Optional[CategoryStats] = None) -> "BagWriter":
        if not records:
            raise EmptySegment("a segment needs at least one packet")
        pcap = self.header.pcap
        payload = b"".join(encode_record(pcap, r) for r in records)
        return self.append_payload(
            payload, len(records),
            records[0].timestamp_us(pcap), records[-1].timestamp_us(pcap), sidecar,
        )

    def append_payload(self, payload: bytes, packet_count: int, first_ts: int,
                       last_ts: int, sidecar: Optional[CategoryStats] = None) -> "BagWriter":
        """Append already-encoded pcap records as one segment."""
        if self.sealed:
            raise SealedBag("bag is sealed")
        if packet_count < 1:
            raise EmptySegment("a segment needs at least one packet")
        sidecar = sidecar if sidecar is not None else CategoryStats()
        side = kvtext.dumps(sidecar.to_kv())
        payload_hash = sha256(payload)
        chain = chain_step(self.chain, payload_hash)
        self.sink.write(_SEGMENT.pack(
            self.segment_count, packet_count, len(payload), first_ts, last_ts,
            payload_hash, chain, len(side),
        ))
        self.sink.write(side)
        self.sink.write(payload)
        self.offset += _SEGMENT.size + len(side) + len(payload)
        self.chain = chain
        self.segment_count += 1
        self.total_packets += packet_count
        self.total_payload_bytes += len(payload)
        self.stats.merge(sidecar)
        self.log("segment_appended", chain,
                 f"index={self.segment_count - 1} packets={packet_count} bytes={len(payload)}")
        return self

    def seal(self, candidates: Sequence[CandidateSignature] = (),
             extra_stats: Optional[Dict[str, object]] = None, note: str = "") -> int:
        """Write footer and trailer. Returns the total bag length."""
        if self.sealed:
            raise SealedBag("bag is already sealed")
        self.log("sealed", self.chain, note)
        stats_kv = self.stats.to_kv()
        for key, value in (extra_stats or {}).items():
            if key.startswith("cat."):
                raise ValueError("extra stats keys may not use the 'cat.' namespace")
            stats_kv[key] = value
        stats_block = kvtext.dumps(stats_kv)
        cand_block = kvtext.dumps(candidates_to_kv(candidates))
        footer_offset = self.offset
        head = (
            _FOOTER_FIXED.pack(FOOTER_MAGIC, self.segment_count, self.total_packets,
                               self.total_payload_bytes, self.chain)
            + _U32.pack(len(stats_block)) + stats_block
            + _U32.pack(len(cand_block)) + cand_block
        )
        audit_offset = footer_offset + len(head) + _U64.size
        footer = head + _U64.pack(audit_offset) + self.audit.encode() + _U64.pack(footer_offset)
        self.sink.write(footer)
        self.offset += len(footer)
        self.sealed = True
        return self.offset

    def getvalue(self) -> bytes:
        return self.sink.getvalue()


def create_bag(metadata: CaseMetadata, config: Optional[BagConfig] = None,
               sink: Optional[BinaryIO] = None, actor: str = "unknown", clock=now_us) -> BagWriter:
    config = config or BagConfig()
    if config.hash_algorithm not in HASH_ALGORITHMS:
        raise ValueError(f"unsupported hash algorithm {config.hash_algorithm!r}")
    header = BagHeader(
        metadata=metadata,
        pcap=config.pcap_header(),
        created_at=config.created_at if config.created_at is not None else clock(),
        signature_set_digest=config.signature_set_digest,
        hash_algorithm=HASH_ALGORITHMS[config.hash_algorithm],
    )
    return BagWriter(header, sink=sink, actor=actor, clock=clock)


def append_segment(writer: BagWriter, records: Sequence[PacketRecord],
                   sidecar: Optional[CategoryStats] = None) -> BagWriter:
    return writer.append_segment(records, sidecar)


def seal_bag(writer: BagWriter, candidates: Sequence[CandidateSignature] = (), **kw) -> Optional[bytes]:
    """Seal ``writer``; returns the bag bytes for in-memory writers, else None."""
    writer.seal(candidates, **kw)
    if isinstance(writer.sink, io.BytesIO):
        return writer.sink.getvalue()
    return None


# ---------------------------------------------------------------------------
# reading


@dataclass
class SegmentInfo:
    index: int
    packet_count: int
    payload_length: int
    first_ts: int
    last_ts: int
    payload_hash: bytes
    chain_hash: bytes
    sidecar: CategoryStats
    offset: int  # of the segment header
    payload_offset: int

    @property
    def size(self) -> int:
        return self.payload_offset - self.offset + self.payload_length

    @property
    def end(self) -> int:
        return self.payload_offset + self.payload_length


@dataclass
class BagFooter:
    segment_count: int
    total_packets: int
    total_payload_bytes: int
    final_chain_hash: bytes
    stats: CategoryStats
    extra_stats: Dict[str, str]
    candidates: List[CandidateSignature]
    audit_log_offset: int
    audit_log: AuditLog
    offset: int = 0

    @property
    def packets_dropped(self) -> int:
        return int(self.extra_stats.get("packets_dropped", 0))


def _read_segment_header(stream: BinaryIO, offset: int) -> SegmentInfo:
    raw = _read_exact(stream, _SEGMENT.size, "segment header")
    idx, count, plen, first, last, phash, chash, slen = _SEGMENT.unpack(raw)
    side = _read_exact(stream, slen, "segment sidecar")
    try:
        sidecar = CategoryStats.from_kv(kvtext.loads(side))
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedContainer(f"segment {idx} sidecar: {exc}") from None
    return SegmentInfo(idx, count, plen, first, last, phash, chash, sidecar,
                       offset, offset + _SEGMENT.size + slen)


def _parse_footer(data: bytes, offset: int) -> BagFooter:
    """Parse footer bytes (marker through trailer) located at ``offset``."""
    try:
        magic, nseg, npkt, nbytes, final = _FOOTER_FIXED.unpack_from(data, 0)
        if magic != FOOTER_MAGIC:
            raise MalformedContainer("footer marker missing")
        pos = _FOOTER_FIXED.size
        (slen,) = _U32.unpack_from(data, pos)
        pos += 4
        stats_block = data[pos : pos + slen]
        pos += slen
        (clen,) = _U32.unpack_from(data, pos)
        pos += 4
        cand_block = data[pos : pos + clen]
        pos += clen
        (audit_off,) = _U64.unpack_from(data, pos)
        pos += 8
        if len(stats_block) != slen or len(cand_block) != clen:
            raise MalformedContainer("footer blocks truncated")
        if audit_off != offset + pos:
            raise MalformedContainer("audit log offset does not match footer layout")
        if len(data) < pos + _U64.size:
            raise MalformedContainer("footer truncated before trailer")
        audit = AuditLog.decode(data[pos : len(data) - _U64.size])
        stats_kv = kvtext.loads(stats_block)
        extra = {k: v for k, v in stats_kv.items() if not k.startswith("cat.")}
        stats = CategoryStats.from_kv(stats_kv)
        candidates = candidates_from_kv(kvtext.loads(cand_block))
    except struct.error as exc:
        raise MalformedContainer(f"truncated footer: {exc}") from None
    except (ValueError, KeyError, UnicodeDecodeError, AuditError) as exc:
        raise MalformedContainer(f"footer: {exc}") from None
    return BagFooter(nseg, npkt, nbytes, final, stats, extra, candidates, audit_off, audit, offset)


def _read_footer(stream: BinaryIO, size: int, min_offset: int) -> BagFooter:
    if size < min_offset + _FOOTER_FIXED.size + _U64.size:
        raise MalformedContainer("bag too short to hold a footer")
    stream.seek(size - _U64.size)
    (footer_offset,) = _U64.unpack(_read_exact(stream, _U64.size, "trailer"))
    if not min_offset <= footer_offset <= size - _FOOTER_FIXED.size - _U64.size:
        raise MalformedContainer(f"footer offset {footer_offset} out of range")
    stream.seek(footer_offset)
    return _parse_footer(_read_exact(stream, size - footer_offset, "footer"), footer_offset)


@dataclass
class BagLayout:
    header: BagHeader
    header_bytes: bytes
    segments: List[SegmentInfo]
    footer: BagFooter
    size: int

    @property
    def header_digest(self) -> bytes:
        return sha256(self.header_bytes)

    @property
    def footer_length(self) -> int:
        return self.size - self.footer.offset


def scan_bag(stream: BinaryIO) -> BagLayout:
    """Parse header, segment headers and footer, seeking past payloads."""
    size = _stream_size(stream)
    stream.seek(0)
    header, header_bytes = BagHeader.read(stream)
    footer = _read_footer(stream, size, len(header_bytes))
    segments = []
    pos = len(header_bytes)
    while pos < footer.offset:
        stream.seek(pos)
        seg = _read_segment_header(stream, pos)
        if seg.index != len(segments):
            raise MalformedContainer(f"segment index {seg.index} at offset {pos}, expected {len(segments)}")
        if seg.end > footer.offset:
            raise MalformedContainer(f"segment {seg.index} runs past the footer")
        segments.append(seg)
        pos = seg.end
    return BagLayout(header, header_bytes, segments, footer, size)


def read_metadata(source) -> Tuple[CaseMetadata, BagFooter]:
    """Header metadata and footer summary; segment payloads are never read."""
    with _open_source(source) as stream:
        size = _stream_size(stream)
        stream.seek(0)
        header, header_bytes = BagHeader.read(stream)
        footer = _read_footer(stream, size, len(header_bytes))
        return header.metadata, footer


def read_header(source) -> BagHeader:
    with _open_source(source) as stream:
        stream.seek(0)
        return BagHeader.read(stream)[0]


def read_header_digest(source) -> bytes:
    """H(header bytes): the chain seed and the in-bag audit log seed."""
    with _open_source(source) as stream:
        stream.seek(0)
        return sha256(BagHeader.read(stream)[1])


# ---------------------------------------------------------------------------
# verification


@dataclass
class SegmentCheck:
    index: int
    payload_ok: bool
    chain_ok: bool
    records_ok: bool
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.payload_ok and self.chain_ok and self.records_ok


@dataclass
class VerificationReport:
    header_digest: bytes
    segments: List[SegmentCheck]
    footer_ok: bool
    footer_detail: str
    audit_ok: bool
    audit_detail: str
    final_ok: bool
    computed_final: bytes
    stored_final: bytes
    audit_records: int = 0

    @property
    def ok(self) -> bool:
        return self.final_ok and self.footer_ok and self.audit_ok and all(s.ok for s in self.segments)

    @property
    def first_failure(self) -> Optional[int]:
        for s in self.segments:
            if not s.ok:
                return s.index
        return None

    def format(self) -> str:
        def flag(ok):
            return "ok" if ok else "FAIL"

        lines = [f"header_digest {self.header_digest.hex()}"]
        for s in self.segments:
            line = (f"segment {s.index}: {flag(s.ok)} payload={flag(s.payload_ok)} "
                    f"chain={flag(s.chain_ok)} records={flag(s.records_ok)}")
            if s.detail:
                line += f" ({s.detail})"
            lines.append(line)
        lines.append(f"footer: {flag(self.footer_ok)}" + (f" ({self.footer_detail})" if self.footer_detail else ""))
        lines.append(f"audit: {flag(self.audit_ok)} records={self.audit_records}"
                     + (f" ({self.audit_detail})" if self.audit_detail else ""))
        lines.append(f"final: {flag(self.final_ok)} computed={self.computed_final.hex()} stored={self.stored_final.hex()}")
        if self.ok:
            lines.append("result: ok")
        else:
            first = self.first_failure
            lines.append("result: FAIL" + (f" first_failing_segment={first}" if first is not None else ""))
        return "\n".join(lines) + "\n"


def _check_records(payload: bytes, seg: SegmentInfo, pcap: PcapHeader) -> str:
    """Empty string when the payload parses as exactly ``packet_count`` records."""
    endian = pcap.endian
    pos = 0
    count = 0
    first = last = None
    n = len(payload)
    while pos < n:
        if pos + 16 > n:
            return f"record header truncated at payload offset {pos}"
        ts_sec, ts_frac, incl, orig = struct.unpack_from(endian + "IIII", payload, pos)
        if incl > orig or incl > pcap.snap_length or pos + 16 + incl > n:
            return f"bad record lengths at payload offset {pos}"
        rec_ts = PacketRecord(ts_sec, ts_frac, orig, b"").timestamp_us(pcap)
        if first is None:
            first = rec_ts
        last = rec_ts
        count += 1
        pos += 16 + incl
    if count != seg.packet_count:
        return f"payload holds {count} records, header says {seg.packet_count}"
    if count and (first != seg.first_ts or last != seg.last_ts):
        return "segment timestamps disagree with payload"
    return ""


def verify_layout(stream: BinaryIO, layout: BagLayout) -> VerificationReport:
    pcap = layout.header.pcap
    chain = layout.header_digest
    checks = []
    sidecar_total = CategoryStats()
    for seg in layout.segments:
        stream.seek(seg.payload_offset)
        if seg.payload_length <= _INMEMORY_RECORD_CHECK:
            payload = _read_exact(stream, seg.payload_length, f"segment {seg.index} payload")
            payload_hash = sha256(payload)
            detail = _check_records(payload, seg, pcap)
            del payload
        else:
            h = hashlib.sha256()
            _copy(stream, seg.payload_length, None, h)
            payload_hash = h.digest()
            detail = ""
        chain = chain_step(chain, payload_hash)
        payload_ok = payload_hash == seg.payload_hash
        chain_ok = chain == seg.chain_hash
        checks.append(SegmentCheck(seg.index, payload_ok, chain_ok, not detail, detail))
        sidecar_total.merge(seg.sidecar)

    f = layout.footer
    problems = []
    if f.segment_count != len(layout.segments):
        problems.append(f"segment_count {f.segment_count} != {len(layout.segments)}")
    if f.total_packets != sum(s.packet_count for s in layout.segments):
        problems.append("total_packets disagrees with segments")
    if f.total_payload_bytes != sum(s.payload_length for s in layout.segments):
        problems.append("total_payload_bytes disagrees with segments")
    stored_last = layout.segments[-1].chain_hash if layout.segments else layout.header_digest
    if f.final_chain_hash != stored_last:
        problems.append("final_chain_hash differs from last stored chain hash")
    if f.stats != sidecar_total:
        problems.append("cumulative stats differ from segment sidecars")

    audit = verify_audit(f.audit_log, layout.header_digest)
    audit_detail = "" if audit.ok else f"{audit.reason} at record {audit.first_bad_index}"
    audit_ok = audit.ok
    recs = f.audit_log.records
    if audit_ok and (not recs or recs[-1].action != "sealed" or recs[-1].object_digest != f.final_chain_hash):
        audit_ok = False
        audit_detail = "last record is not a seal of the final chain hash"

    return VerificationReport(
        header_digest=layout.header_digest,
        segments=checks,
        footer_ok=not problems,
        footer_detail="; ".join(problems),
        audit_ok=audit_ok,
        audit_detail=audit_detail,
        final_ok=chain == f.final_chain_hash,
        computed_final=chain,
        stored_final=f.final_chain_hash,
        audit_records=len(recs),
    )


def verify_bag(source) -> VerificationReport:
    """Recompute every payload hash and the whole chain. Never writes."""
    with _open_source(source) as stream:
        layout = scan_bag(stream)
        return verify_layout(stream, layout)


# ---------------------------------------------------------------------------
# raw export


def export_raw_to(source, sink: BinaryIO, override: bool = False) -> VerificationReport:
    """Write the original pcap stream to ``sink``; returns the verification report.

    Raises VerificationFailed for a bag that does not verify unless
    ``override`` is set.
    """
    with _open_source(source) as stream:
        layout = scan_bag(stream)
        report = verify_layout(stream, layout)
        if not report.ok and not override:
            raise VerificationFailed("bag failed verification; refusing to export", report)
        sink.write(layout.header.pcap.encode())
        for seg in layout.segments:
            stream.seek(seg.payload_offset)
            _copy(stream, seg.payload_length, sink)
    return report


def export_raw(source, override: bool = False) -> bytes:
    buf = io.BytesIO()
    export_raw_to(source, buf, override=override)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# split / merge


@dataclass
class PartPlan:
    part_index: int
    first_segment: int
    end_segment: int  # exclusive
    with_footer: bool
    size: int


def plan_split(header_length: int, segment_sizes: Sequence[int], footer_length: int,
               max_part_size: int) -> List[PartPlan]:
    """Greedy in-order packing of whole segments into parts of at most ``max_part_size`` bytes.

    The footer (with trailer) rides in the last part, or in a part of its
    own when it does not fit beside the final segments.
    """
    base = PART_OVERHEAD + header_length
    plans: List[PartPlan] = []
    start = 0
    size = base
    for i, seg_size in enumerate(segment_sizes):
        if base + seg_size > max_part_size:
            raise PartSizeTooSmall(
                f"segment {i} needs a part of {base + seg_size} bytes, limit is {max_part_size}"
            )
        if size + seg_size > max_part_size:
            plans.append(PartPlan(len(plans), start, i, False, size))
            start, size = i, base
        size += seg_size
    n = len(segment_sizes)
    if size + footer_length <= max_part_size:
        plans.append(PartPlan(len(plans), start, n, True, size + footer_length))
    else:
        if base + footer_length > max_part_size:
            raise PartSizeTooSmall(
                f"footer needs a part of {base + footer_length} bytes, limit is {max_part_size}"
            )
        if n > start:
            plans.append(PartPlan(len(plans), start, n, False, size))
        plans.append(PartPlan(len(plans), n, n, True, base + footer_length))
    return plans


def _write_part(stream: BinaryIO, layout: BagLayout, plan: PartPlan, part_count: int,
                sink: BinaryIO) -> None:
    if plan.first_segment == 0:
        continuity = layout.header_digest
    else:
        continuity = layout.segments[plan.first_segment - 1].chain_hash
    h = hashlib.sha256()
    head = _PART_FIXED.pack(PART_MAGIC, plan.part_index, part_count, continuity) + layout.header_bytes
    h.update(head)
    sink.write(head)
    segs = layout.segments[plan.first_segment : plan.end_segment]
    if segs:
        stream.seek(segs[0].offset)
        _copy(stream, segs[-1].end - segs[0].offset, sink, h)
    if plan.with_footer:
        stream.seek(layout.footer.offset)
        _copy(stream, layout.footer_length, sink, h)
    sink.write(h.digest())


def _plan_for(layout: BagLayout, max_part_size: int) -> List[PartPlan]:
    return plan_split(len(layout.header_bytes), [s.size for s in layout.segments],
                      layout.footer_length, max_part_size)


def split_bag(bag, max_part_size: int = DEFAULT_MAX_PART_SIZE) -> List[bytes]:
    with _open_source(bag) as stream:
        layout = scan_bag(stream)
        plans = _plan_for(layout, max_part_size)
        parts = []
        for plan in plans:
            buf = io.BytesIO()
            _write_part(stream, layout, plan, len(plans), buf)
            parts.append(buf.getvalue())
        return parts


def split_bag_files(bag_path, out_dir, max_part_size: int = DEFAULT_MAX_PART_SIZE,
                    stem: Optional[str] = None) -> List[Path]:
    """Split a bag file into ``<stem>.part000``... files under ``out_dir``."""
    bag_path = Path(bag_path)
    out_dir = Path(out_dir)
    stem = stem or bag_path.name
    paths = []
    with open(bag_path, "rb") as stream:
        layout = scan_bag(stream)
        plans = _plan_for(layout, max_part_size)
        for plan in plans:
            path = out_dir / f"{stem}.part{plan.part_index:03d}"
            with open(path, "wb") as sink:
                _write_part(stream, layout, plan, len(plans), sink)
            paths.append(path)
    return paths


@dataclass
class _PartInfo:
    source: object
    part_index: int
    part_count: int
    continuity: bytes
    header_bytes: bytes


def _read_part_prefix(stream: BinaryIO, source) -> _PartInfo:
    stream.seek(0)
    raw = _read_exact(stream, _PART_FIXED.size, "part header")
    magic, idx, count, continuity = _PART_FIXED.unpack(raw)
    if magic != PART_MAGIC:
        raise MalformedContainer(f"bad part magic {magic!r}")
    _, header_bytes = BagHeader.read(stream)
    return _PartInfo(source, idx, count, continuity, header_bytes)


def _walk_part(stream: BinaryIO, info: _PartInfo, sink: Optional[BinaryIO],
               chain: bytes) -> Tuple[bytes, Optional[BagFooter], int]:
    """Stream one part's body to ``sink``, checking hashes.

    Returns (chain after last segment, footer if present, segment count).
    """
    size = _stream_size(stream)
    body_end = size - DIGEST_LEN
    part_hasher = hashlib.sha256()
    stream.seek(0)
    _copy(stream, _PART_FIXED.size + len(info.header_bytes), None, part_hasher)
    pos = stream.tell()
    footer = None
    nseg = 0
    while pos < body_end:
        if body_end - pos >= 8:
            peek = stream.read(8)
            stream.seek(pos)
            if peek == FOOTER_MAGIC:
                data = _read_exact(stream, body_end - pos, "part footer")
                part_hasher.update(data)
                (trailer,) = _U64.unpack_from(data, len(data) - 8)
                footer = _parse_footer(data, trailer)
                if sink is not None:
                    sink.write(data)
                pos = body_end
                break
        seg_head = _read_exact(stream, _SEGMENT.size, "segment header")
        idx, count, plen, first, last, phash, chash, slen = _SEGMENT.unpack(seg_head)
        side = _read_exact(stream, slen, "segment sidecar")
        if pos + _SEGMENT.size + slen + plen > body_end:
            raise MalformedContainer(f"segment {idx} runs past the end of part {info.part_index}")
        part_hasher.update(seg_head)
        part_hasher.update(side)
        if sink is not None:
            sink.write(seg_head)
            sink.write(side)
        ph = hashlib.sha256()
        _copy(stream, plen, sink, ph, part_hasher)
        if ph.digest() != phash:
            raise PartCorrupted(f"segment {idx} payload hash mismatch in part {info.part_index}")
        chain = chain_step(chain, phash)
        if chain != chash:
            raise ContinuityMismatch(f"chain discontinuity at segment {idx} in part {info.part_index}")
        nseg += 1
        pos = stream.tell()
    stored = _read_exact(stream, DIGEST_LEN, "part hash")
    if stored != part_hasher.digest():
        raise PartCorrupted(f"part {info.part_index}: part hash mismatch")
    return chain, footer, nseg


def _merge(sources: Sequence, sink: BinaryIO) -> None:
    if not sources:
        raise MissingPart("no parts given")
    infos = []
    for src in sources:
        with _open_source(src) as stream:
            infos.append(_read_part_prefix(stream, src))
    first = infos[0]
    for info in infos[1:]:
        if info.header_bytes != first.header_bytes:
            raise HeaderMismatch("parts carry different bag headers")
        if info.part_count != first.part_count:
            raise HeaderMismatch("parts disagree on part count")
    by_index: Dict[int, _PartInfo] = {}
    for info in infos:
        if info.part_index in by_index:
            raise PartCorrupted(f"part {info.part_index} given twice")
        by_index[info.part_index] = info
    missing = sorted(set(range(first.part_count)) - set(by_index))
    if missing:
        raise MissingPart(f"missing part(s) {missing} of {first.part_count}")
    extra = sorted(set(by_index) - set(range(first.part_count)))
    if extra:
        raise PartCorrupted(f"part index out of range: {extra}")

    chain = sha256(first.header_bytes)
    sink.write(first.header_bytes)
    footer = None
    for i in range(first.part_count):
        info = by_index[i]
        if footer is not None:
            raise MalformedContainer(f"part {i} follows the part holding the footer")
        if info.continuity != chain:
            raise ContinuityMismatch(f"part {i} continuity hash does not match part {i - 1}")
        with _open_source(info.source) as stream:
            chain, footer, _ = _walk_part(stream, info, sink, chain)
    if footer is None:
        raise MissingPart("no part carries the bag footer")
    if footer.final_chain_hash != chain:
        raise ContinuityMismatch("footer final chain hash does not match merged segments")


def merge_parts(parts: Sequence) -> bytes:
    buf = io.BytesIO()
    _merge(parts, buf)
    return buf.getvalue()


def merge_part_files(paths: Sequence, out_path) -> None:
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".partial")
    try:
        with open(tmp, "wb") as sink:
            _merge([Path(p) for p in paths], sink)
        os.replace(tmp, out_path)
    finally:
        if tmp.exists():
            tmp.unlink()


def is_part(source) -> bool:
    with _open_source(source) as stream:
        stream.seek(0)
        return stream.read(8) == PART_MAGIC


@dataclass
class PartCheck:
    part_index: int
    ok: bool
    detail: str = ""


def verify_parts(sources: Sequence) -> List[PartCheck]:
    """Check each part on its own (part hash, internal chain) and its
    continuity against the preceding part when that part is present."""
    infos = []
    for src in sources:
        with _open_source(src) as stream:
            infos.append(_read_part_prefix(stream, src))
    results = []
    ends: Dict[int, bytes] = {}
    for info in sorted(infos, key=lambda i: i.part_index):
        try:
            with _open_source(info.source) as stream:
                ends[info.part_index], _, _ = _walk_part(stream, info, None, info.continuity)
        except (ContinuityMismatch, PartCorrupted, MalformedContainer) as exc:
            results.append(PartCheck(info.part_index, False, str(exc)))
            continue
        if info.part_index == 0:
            expected = sha256(info.header_bytes)
        else:
            expected = ends.get(info.part_index - 1)
        if expected is not None and expected != info.continuity:
            results.append(PartCheck(info.part_index, False, "continuity hash does not match previous part"))
        else:
            results.append(PartCheck(info.part_index, True))
    return results
