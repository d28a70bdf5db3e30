"""Reading and writing classic pcap streams, plus flow-key decoding.

Only the classic (non block-based) capture format is handled. "native"
byte order means little-endian on disk, i.e. the magic number
0xa1b2c3d4 laid out as ``d4 c3 b2 a1``; "swapped" is the big-endian
layout. Both microsecond and nanosecond variants are accepted on read.
"""
from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Optional, Tuple

from .errors import (
    InvariantViolation,
    OversizedRecord,
    Truncated,
    TruncatedRecord,
    UnknownMagic,
)

NATIVE = "native"
SWAPPED = "swapped"
MICROSECOND = "microsecond"
NANOSECOND = "nanosecond"

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

LINKTYPE_ETHERNET = 1

# (byte_order, timestamp_unit) keyed by the magic read little-endian
_MAGICS = {
    MAGIC_MICRO: (NATIVE, MICROSECOND),
    MAGIC_NANO: (NATIVE, NANOSECOND),
    0xD4C3B2A1: (SWAPPED, MICROSECOND),
    0x4D3CB2A1: (SWAPPED, NANOSECOND),
}

_U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class PcapHeader:
    byte_order: str = NATIVE
    timestamp_unit: str = MICROSECOND
    version_major: int = 2
    version_minor: int = 4
    snap_length: int = 65535
    link_type: int = LINKTYPE_ETHERNET
    thiszone: int = 0
    sigfigs: int = 0

    @property
    def endian(self) -> str:
        return "<" if self.byte_order == NATIVE else ">"

    @property
    def ticks_per_second(self) -> int:
        return 1_000_000 if self.timestamp_unit == MICROSECOND else 1_000_000_000

    def encode(self) -> bytes:
        magic = MAGIC_MICRO if self.timestamp_unit == MICROSECOND else MAGIC_NANO
        return struct.pack(
            self.endian + "IHHiIII",
            magic,
            self.version_major,
            self.version_minor,
            self.thiszone,
            self.sigfigs,
            self.snap_length,
            self.link_type,
        )


class PacketRecord(NamedTuple):
    """One captured packet. ``payload`` is the captured frame, verbatim."""

    ts_seconds: int
    ts_fraction: int
    original_length: int
    payload: bytes

    @property
    def captured_length(self) -> int:
        return len(self.payload)

    def timestamp_us(self, header: PcapHeader) -> int:
        if header.timestamp_unit == NANOSECOND:
            return self.ts_seconds * 1_000_000 + self.ts_fraction // 1000
        return self.ts_seconds * 1_000_000 + self.ts_fraction


class FlowKey(NamedTuple):
    src_addr: Optional[ipaddress._BaseAddress]
    dst_addr: Optional[ipaddress._BaseAddress]
    src_port: int
    dst_port: int
    transport: str  # "tcp" | "udp" | "other"


OTHER_FLOW = FlowKey(None, None, 0, 0, "other")


def read_pcap_header(data: bytes) -> PcapHeader:
    if len(data) < GLOBAL_HEADER_LEN:
        raise Truncated(f"pcap global header needs 24 bytes, got {len(data)}")
    (magic,) = struct.unpack_from("<I", data, 0)
    try:
        byte_order, unit = _MAGICS[magic]
    except KeyError:
        raise UnknownMagic(f"not a pcap stream (magic {data[:4].hex()})") from None
    endian = "<" if byte_order == NATIVE else ">"
    _, vmaj, vmin, zone, sigfigs, snaplen, linktype = struct.unpack_from(
        endian + "IHHiIII", data, 0
    )
    if snaplen == 0:
        raise InvariantViolation("pcap snap length is 0")
    return PcapHeader(byte_order, unit, vmaj, vmin, snaplen, linktype, zone, sigfigs)


def read_next_packet(stream: BinaryIO, header: PcapHeader) -> Optional[PacketRecord]:
    """Read one record from ``stream``; None at a clean end of stream."""
    start = _tell(stream)
    raw = stream.read(RECORD_HEADER_LEN)
    if not raw:
        return None
    if len(raw) < RECORD_HEADER_LEN:
        raise TruncatedRecord(
            f"record header truncated at offset {start}: {len(raw)} of 16 bytes",
            start,
        )
    ts_sec, ts_frac, incl, orig = struct.unpack(header.endian + "IIII", raw)
    if incl > header.snap_length:
        raise OversizedRecord(
            f"record at offset {start} captures {incl} bytes, snap length is {header.snap_length}",
            start,
        )
    if incl > orig:
        raise InvariantViolation(
            f"record at offset {start}: captured length {incl} > original length {orig}"
        )
    payload = stream.read(incl)
    if len(payload) < incl:
        raise TruncatedRecord(
            f"record at offset {start} declares {incl} bytes, only {len(payload)} remain",
            start,
        )
    return PacketRecord(ts_sec, ts_frac, orig, payload)


def _tell(stream) -> Optional[int]:
    try:
        return stream.tell()
    except (AttributeError, OSError):
        return None


def iter_packets(stream: BinaryIO, header: PcapHeader) -> Iterator[PacketRecord]:
    for rec, _raw in iter_raw_packets(stream, header):
        yield rec


_CHUNK = 1 << 20


def iter_raw_packets(stream: BinaryIO, header: PcapHeader) -> Iterator[Tuple[PacketRecord, bytes]]:
    """Yield ``(record, raw)`` pairs where ``raw`` is the record's exact bytes
    on disk (header + captured data). Reads the stream in large chunks."""
    unpack = struct.Struct(header.endian + "IIII").unpack_from
    snap = header.snap_length
    base = _tell(stream)
    buf = b""
    pos = 0
    eof = False

    def refill():
        nonlocal buf, pos, base, eof
        more = stream.read(max(_CHUNK, RECORD_HEADER_LEN + snap))
        if not more:
            eof = True
        if base is not None:
            base += pos
        buf = buf[pos:] + more
        pos = 0

    while True:
        avail = len(buf) - pos
        if avail < RECORD_HEADER_LEN:
            if not eof:
                refill()
                continue
            if avail == 0:
                return
            start = None if base is None else base + pos
            raise TruncatedRecord(
                f"record header truncated at offset {start}: {avail} of 16 bytes", start
            )
        ts_sec, ts_frac, incl, orig = unpack(buf, pos)
        if incl > snap:
            start = None if base is None else base + pos
            raise OversizedRecord(
                f"record at offset {start} captures {incl} bytes, snap length is {snap}", start
            )
        if incl > orig:
            start = None if base is None else base + pos
            raise InvariantViolation(
                f"record at offset {start}: captured length {incl} > original length {orig}"
            )
        end = pos + RECORD_HEADER_LEN + incl
        if end > len(buf):
            if not eof:
                refill()
                continue
            start = None if base is None else base + pos
            raise TruncatedRecord(
                f"record at offset {start} declares {incl} bytes, only {avail - RECORD_HEADER_LEN} remain",
                start,
            )
        yield PacketRecord(ts_sec, ts_frac, orig, buf[pos + RECORD_HEADER_LEN : end]), buf[pos:end]
        pos = end


class PcapReader:
    """Sequential reader over a binary stream positioned at a pcap header."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.header = read_pcap_header(stream.read(GLOBAL_HEADER_LEN))

    def __iter__(self) -> Iterator[PacketRecord]:
        return iter_packets(self.stream, self.header)

    def iter_raw(self) -> Iterator[Tuple[PacketRecord, bytes]]:
        return iter_raw_packets(self.stream, self.header)


def read_pcap(data: bytes) -> Tuple[PcapHeader, list]:
    import io

    reader = PcapReader(io.BytesIO(data))
    return reader.header, list(reader)


def check_record(header: PcapHeader, record: PacketRecord) -> None:
    incl = len(record.payload)
    if incl > record.original_length:
        raise InvariantViolation(
            f"captured length {incl} exceeds original length {record.original_length}"
        )
    if incl > header.snap_length:
        raise InvariantViolation(
            f"captured length {incl} exceeds snap length {header.snap_length}"
        )
    for name in ("ts_seconds", "ts_fraction", "original_length"):
        value = getattr(record, name)
        if not 0 <= value <= _U32:
            raise InvariantViolation(f"{name}={value} does not fit in u32")


def encode_record(header: PcapHeader, record: PacketRecord) -> bytes:
    incl = len(record.payload)
    if incl > record.original_length or incl > header.snap_length:
        check_record(header, record)
    try:
        head = struct.pack(
            header.endian + "IIII",
            record.ts_seconds,
            record.ts_fraction,
            incl,
            record.original_length,
        )
    except struct.error:
        check_record(header, record)
        raise
    return head + record.payload


def write_pcap(header: PcapHeader, records: Iterable[PacketRecord]) -> bytes:
    parts = [header.encode()]
    parts.extend(encode_record(header, r) for r in records)
    return b"".join(parts)


# ---------------------------------------------------------------------------
# flow decoding

_ETH_VLAN = (0x8100, 0x88A8, 0x9100)
_ETH_IPV4 = 0x0800
_ETH_IPV6 = 0x86DD


_addr_cache: dict = {}


def _address(raw: bytes):
    addr = _addr_cache.get(raw)
    if addr is None:
        if len(_addr_cache) > 65536:
            _addr_cache.clear()
        addr = _addr_cache[raw] = ipaddress.ip_address(raw)
    return addr


def decode_frame(record: PacketRecord, link_type: int) -> Tuple[FlowKey, int, int]:
    """Like :func:`decode_flow` but also returns where the payload ends.

    The end excludes link-layer padding beyond the IP datagram length.
    Undecodable frames give ``(OTHER_FLOW, 0, captured_length)``.
    """
    frame = record.payload
    n = len(frame)
    fallback = (OTHER_FLOW, 0, n)
    if link_type != LINKTYPE_ETHERNET or n < 14:
        return fallback
    off = 14
    ethertype = frame[12] << 8 | frame[13]
    while ethertype in _ETH_VLAN:
        if n < off + 4:
            return fallback
        ethertype = frame[off + 2] << 8 | frame[off + 3]
        off += 4

    if ethertype == _ETH_IPV4:
        if n < off + 20:
            return fallback
        vihl = frame[off]
        ihl = (vihl & 0x0F) * 4
        if vihl >> 4 != 4 or ihl < 20 or n < off + ihl:
            return fallback
        if (frame[off + 6] & 0x1F) or frame[off + 7]:
            # non-first fragment carries no transport header
            return fallback
        total_len = frame[off + 2] << 8 | frame[off + 3]
        proto = frame[off + 9]
        raw = frame[off + 12 : off + 16]
        src = _addr_cache.get(raw) or _address(raw)
        raw = frame[off + 16 : off + 20]
        dst = _addr_cache.get(raw) or _address(raw)
        if total_len == 0:
            # segmentation offload leaves the length unset
            end = n
        elif total_len < ihl:
            return fallback
        else:
            end = min(n, off + total_len)
        l4 = off + ihl
    elif ethertype == _ETH_IPV6:
        if n < off + 40 or frame[off] >> 4 != 6:
            return fallback
        plen = frame[off + 4] << 8 | frame[off + 5]
        proto = frame[off + 6]
        src = _address(frame[off + 8 : off + 24])
        dst = _address(frame[off + 24 : off + 40])
        l4 = off + 40
        end = n if plen == 0 else min(n, l4 + plen)
    else:
        return fallback

    if proto == 6:
        if end < l4 + 20:
            return fallback
        doff = (frame[l4 + 12] >> 4) * 4
        if doff < 20 or end < l4 + doff:
            return fallback
        start = l4 + doff
        transport = "tcp"
    elif proto == 17:
        if end < l4 + 8:
            return fallback
        start = l4 + 8
        transport = "udp"
    else:
        return fallback
    sport = frame[l4] << 8 | frame[l4 + 1]
    dport = frame[l4 + 2] << 8 | frame[l4 + 3]
    return FlowKey(src, dst, sport, dport, transport), start, end


def decode_flow(record: PacketRecord, link_type: int) -> Tuple[FlowKey, int]:
    flow, start, _ = decode_frame(record, link_type)
    return flow, start
