"""Signature-based P2P packet classification and traffic statistics.

Signatures are anchored byte patterns evaluated first-match-wins in
declaration order. Packets that match nothing are fed to an
:class:`UnknownPatternTable`, which tracks recurring payload prefixes and
the remote endpoints that sent or received them; prefixes seen often
enough across enough endpoints are reported as candidate signatures of
an unidentified protocol.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import ipaddress
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .errors import DuplicateId, SignatureSyntaxError
from .pcap_io import FlowKey, PacketRecord, PcapHeader

UNKNOWN = "unknown"
TRANSPORTS = ("tcp", "udp", "any")

DEFAULT_PREFIX_LENGTH = 8
DEFAULT_SAMPLE_CAP = 16
DEFAULT_ENDPOINT_CAP = 4096
DEFAULT_MAX_ENTRIES = 1_000_000
DEFAULT_MIN_SUPPORT = 20
DEFAULT_MIN_ENDPOINTS = 5

# Editorial choice of "known" protocols; not an exhaustive P2P catalogue.
DEFAULT_SIGNATURES = """\
# id protocol category transport anchor_offset pattern_hex min_payload_length
# BitTorrent peer wire handshake: <19>"BitTorrent protocol"
bt-handshake bittorrent handshake tcp 0 13426974546f7272656e742070726f746f636f6c 20
# Mainline DHT KRPC query, bencoded dict opening "d1:ad2:id20:"
bt-dht-query bittorrent-dht dht_query udp 0 64313a6164323a696432303a 32
# eDonkey: 0xe3, u32 length (any), opcode 0x01 hello, hash size 16
ed2k-hello edonkey hello tcp 0 e3????????0110 39
# Gnutella 0.6 handshake: "GNUTELLA CONNECT/"
gnutella-connect gnutella connect tcp 0 474e5554454c4c4120434f4e4e4543542f 17
"""


def _check_token(value: str, what: str, line: int) -> str:
    if "=" in value or "\\" in value:
        raise SignatureSyntaxError(f"{what} {value!r} may not contain '=' or '\\'", line)
    return value


def _parse_pattern(text: str, line: int) -> Tuple[bytes, Tuple[Tuple[int, bytes], ...]]:
    if len(text) % 2 or not text:
        raise SignatureSyntaxError(f"pattern {text!r} must be an even, non-empty hex string", line)
    pattern = bytearray()
    runs: List[Tuple[int, bytes]] = []
    run_start = None
    for i in range(0, len(text), 2):
        pair = text[i : i + 2]
        pos = i // 2
        if pair == "??":
            pattern.append(0)
            if run_start is not None:
                runs.append((run_start, bytes(pattern[run_start:pos])))
                run_start = None
            continue
        try:
            pattern += bytes.fromhex(pair)
        except ValueError:
            raise SignatureSyntaxError(f"bad hex byte {pair!r} in pattern", line) from None
        if run_start is None:
            run_start = pos
    if run_start is not None:
        runs.append((run_start, bytes(pattern[run_start:])))
    if not runs:
        raise SignatureSyntaxError("pattern is all wildcards", line)
    return bytes(pattern), tuple(runs)


class ClassificationResult(NamedTuple):
    category: str
    signature_id: Optional[str] = None


UNKNOWN_RESULT = ClassificationResult(UNKNOWN, None)


@dataclass(frozen=True)
class Signature:
    id: str
    protocol: str
    category: str
    transport: str
    anchor_offset: int
    pattern: bytes
    min_payload_length: int
    # exact-byte runs (offset within pattern, bytes); wildcard bytes fall between runs
    runs: Tuple[Tuple[int, bytes], ...] = ()

    def __post_init__(self):
        if not self.runs:
            object.__setattr__(self, "runs", ((0, self.pattern),))
        checks = tuple((self.anchor_offset + off, chunk) for off, chunk in self.runs)
        object.__setattr__(self, "_checks", checks)

    @property
    def pattern_hex(self) -> str:
        out = ["??"] * len(self.pattern)
        for off, chunk in self.runs:
            for k, b in enumerate(chunk):
                out[off + k] = f"{b:02x}"
        return "".join(out)

    def to_line(self) -> str:
        return (
            f"{self.id} {self.protocol} {self.category} {self.transport} "
            f"{self.anchor_offset} {self.pattern_hex} {self.min_payload_length}"
        )

    def matches(self, payload: bytes) -> bool:
        if len(payload) < self.min_payload_length:
            return False
        for start, chunk in self._checks:
            if not payload.startswith(chunk, start):
                return False
        return True


class SignatureSet:
    """Immutable, declaration-ordered collection of signatures."""

    def __init__(self, signatures: Sequence[Signature] = (), text: str = ""):
        self.signatures: Tuple[Signature, ...] = tuple(signatures)
        self.text = text
        self.digest = hashlib.sha256(text.encode("utf-8")).digest()
        self._by_transport = {
            t: tuple(s for s in self.signatures if s.transport in (t, "any"))
            for t in ("tcp", "udp", "other")
        }
        self._matchers = {
            t: tuple((s.min_payload_length, s._checks, ClassificationResult(s.category, s.id))
                     for s in sigs)
            for t, sigs in self._by_transport.items()
        }

    def __len__(self):
        return len(self.signatures)

    def __iter__(self):
        return iter(self.signatures)

    def __getitem__(self, i):
        return self.signatures[i]

    def for_transport(self, transport: str) -> Tuple[Signature, ...]:
        return self._by_transport.get(transport, self._by_transport["other"])

    def dump(self) -> str:
        header = "# id protocol category transport anchor_offset pattern_hex min_payload_length\n"
        return header + "".join(s.to_line() + "\n" for s in self.signatures)


def load_signatures(definition_text: str) -> SignatureSet:
    sigs: List[Signature] = []
    seen = set()
    for lineno, raw in enumerate(definition_text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise SignatureSyntaxError(f"expected 7 fields, got {len(fields)}", lineno)
        sid, protocol, category, transport, anchor, pattern_hex, min_len = fields
        for value, what in ((sid, "id"), (protocol, "protocol"), (category, "category")):
            _check_token(value, what, lineno)
        if category == UNKNOWN:
            raise SignatureSyntaxError("category 'unknown' is reserved", lineno)
        if transport not in TRANSPORTS:
            raise SignatureSyntaxError(f"transport must be one of {TRANSPORTS}", lineno)
        try:
            anchor_offset = int(anchor)
            min_payload_length = int(min_len)
        except ValueError:
            raise SignatureSyntaxError("anchor_offset and min_payload_length must be integers", lineno) from None
        if anchor_offset < 0:
            raise SignatureSyntaxError("anchor_offset must be >= 0", lineno)
        pattern, runs = _parse_pattern(pattern_hex.lower(), lineno)
        if min_payload_length < anchor_offset + len(pattern):
            raise SignatureSyntaxError(
                "min_payload_length must cover anchor_offset + pattern length", lineno
            )
        if sid in seen:
            raise DuplicateId(f"line {lineno}: duplicate signature id {sid!r}")
        seen.add(sid)
        sigs.append(
            Signature(sid, protocol, category, transport, anchor_offset, pattern, min_payload_length, runs)
        )
    return SignatureSet(sigs, definition_text)


def default_signatures() -> SignatureSet:
    return load_signatures(DEFAULT_SIGNATURES)




def classify_packet(payload: bytes, flow: FlowKey, signatures: SignatureSet) -> ClassificationResult:
    matchers = signatures._matchers
    n = len(payload)
    for min_len, checks, result in matchers.get(flow.transport) or matchers["other"]:
        if n < min_len:
            continue
        for start, chunk in checks:
            if not payload.startswith(chunk, start):
                break
        else:
            return result
    return UNKNOWN_RESULT


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CategoryCount:
    packets: int = 0
    bytes: int = 0
    first_seen: Optional[int] = None  # microseconds since epoch
    last_seen: Optional[int] = None


class CategoryStats:
    def __init__(self):
        self.categories: Dict[str, CategoryCount] = {}

    def __eq__(self, other):
        return isinstance(other, CategoryStats) and self.categories == other.categories

    def __repr__(self):
        inner = ", ".join(f"{k}: {v.packets}/{v.bytes}" for k, v in sorted(self.categories.items()))
        return f"CategoryStats({inner})"

    @property
    def total_packets(self) -> int:
        return sum(c.packets for c in self.categories.values())

    @property
    def total_bytes(self) -> int:
        return sum(c.bytes for c in self.categories.values())

    def add(self, category: str, nbytes: int, ts: Optional[int]) -> None:
        c = self.categories.get(category)
        if c is None:
            c = self.categories[category] = CategoryCount()
        c.packets += 1
        c.bytes += nbytes
        if ts is not None:
            if c.first_seen is None or ts < c.first_seen:
                c.first_seen = ts
            if c.last_seen is None or ts > c.last_seen:
                c.last_seen = ts

    def merge(self, other: "CategoryStats") -> None:
        for name, oc in other.categories.items():
            c = self.categories.setdefault(name, CategoryCount())
            c.packets += oc.packets
            c.bytes += oc.bytes
            if oc.first_seen is not None and (c.first_seen is None or oc.first_seen < c.first_seen):
                c.first_seen = oc.first_seen
            if oc.last_seen is not None and (c.last_seen is None or oc.last_seen > c.last_seen):
                c.last_seen = oc.last_seen

    def copy(self) -> "CategoryStats":
        return copy.deepcopy(self)

    def to_kv(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for name, c in self.categories.items():
            out[f"cat.{name}.packets"] = c.packets
            out[f"cat.{name}.bytes"] = c.bytes
            out[f"cat.{name}.first_seen"] = "" if c.first_seen is None else c.first_seen
            out[f"cat.{name}.last_seen"] = "" if c.last_seen is None else c.last_seen
        return out

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "CategoryStats":
        stats = cls()
        for key, value in kv.items():
            if not key.startswith("cat."):
                continue
            name, _, attr = key[4:].rpartition(".")
            c = stats.categories.setdefault(name, CategoryCount())
            if attr in ("packets", "bytes"):
                setattr(c, attr, int(value))
            elif attr in ("first_seen", "last_seen"):
                setattr(c, attr, int(value) if value else None)
            else:
                raise ValueError(f"unknown stats key {key!r}")
        return stats


def update_stats(
    stats: CategoryStats,
    result: ClassificationResult,
    record: PacketRecord,
    header: Optional[PcapHeader] = None,
) -> CategoryStats:
    """Count ``record`` under ``result.category``; mutates and returns ``stats``."""
    if header is None:
        ts = record.ts_seconds * 1_000_000 + record.ts_fraction
    else:
        ts = record.timestamp_us(header)
    stats.add(result.category, len(record.payload), ts)
    return stats


# ---------------------------------------------------------------------------
# unknown patterns


def parse_networks(cidrs: Iterable[str]) -> Tuple[ipaddress._BaseNetwork, ...]:
    return tuple(ipaddress.ip_network(c, strict=False) for c in cidrs)


def _larger_endpoint(flow: FlowKey) -> Tuple[object, int]:
    # both sides of a flow share an IP version, so the integer values order them
    if (flow.src_addr._ip, flow.src_port) >= (flow.dst_addr._ip, flow.dst_port):
        return (flow.src_addr, flow.src_port)
    return (flow.dst_addr, flow.dst_port)


def remote_endpoint(flow: FlowKey, home_networks=()) -> Tuple[object, int]:
    """The (address, port) of the side of ``flow`` outside the home networks.

    If both or neither side is home, the larger (address, port) pair wins so
    the choice does not depend on packet direction.
    """
    if home_networks:
        src_home = any(flow.src_addr in net for net in home_networks)
        dst_home = any(flow.dst_addr in net for net in home_networks)
        if src_home and not dst_home:
            return (flow.dst_addr, flow.dst_port)
        if dst_home and not src_home:
            return (flow.src_addr, flow.src_port)
    return _larger_endpoint(flow)


def endpoint_id(addr, port: int) -> Tuple[int, int, int]:
    """Hashable identity of an (address, port) pair.

    ipaddress objects hash in pure Python; this tuple of ints hashes in C.
    """
    return (addr._ip, addr._version, port)


class UnknownEntry:
    """Aggregate for one unknown payload prefix.

    ``endpoints`` holds :func:`endpoint_id` values of the remote peers seen.
    """

    __slots__ = ("occurrence_count", "endpoints", "sample_record_indices", "transports", "saturated")

    def __init__(self, transport: Optional[str] = None, endpoint=None, record_index: Optional[int] = None):
        # a new entry is usually created by its first observation
        if transport is None:
            self.occurrence_count = 0
            self.endpoints: set = set()
            self.sample_record_indices: List[int] = []
            self.transports: set = set()
        else:
            self.occurrence_count = 1
            self.endpoints = {endpoint}
            self.sample_record_indices = [] if record_index is None else [record_index]
            self.transports = {transport}
        self.saturated = False

    @property
    def endpoint_count(self) -> int:
        return len(self.endpoints)


class UnknownPatternTable:
    def __init__(
        self,
        prefix_length: int = DEFAULT_PREFIX_LENGTH,
        sample_cap: int = DEFAULT_SAMPLE_CAP,
        endpoint_cap: int = DEFAULT_ENDPOINT_CAP,
        max_entries: int = DEFAULT_MAX_ENTRIES,
        home_networks=(),
    ):
        if prefix_length < 1 or sample_cap < 0 or endpoint_cap < 1 or max_entries < 0:
            raise ValueError("invalid unknown-pattern table limits")
        self.prefix_length = prefix_length
        self.sample_cap = sample_cap
        self.endpoint_cap = endpoint_cap
        self.max_entries = max_entries
        self.home_networks = tuple(home_networks)
        self.entries: Dict[bytes, UnknownEntry] = {}
        # observations of new prefixes refused because the table was full
        self.overflow = 0
        self._home_cache: Dict[Tuple[int, int], bool] = {}

    def __len__(self):
        return len(self.entries)

    def _is_home(self, addr) -> bool:
        key = (addr._ip, addr._version)
        hit = self._home_cache.get(key)
        if hit is None:
            if len(self._home_cache) > 65536:
                self._home_cache.clear()
            hit = self._home_cache[key] = any(addr in net for net in self.home_networks)
        return hit

    def remote(self, flow: FlowKey) -> Tuple[object, int]:
        """Same rule as :func:`remote_endpoint`, with cached home lookups."""
        if self.home_networks:
            src_home = self._is_home(flow.src_addr)
            dst_home = self._is_home(flow.dst_addr)
            if src_home != dst_home:
                return (flow.dst_addr, flow.dst_port) if src_home else (flow.src_addr, flow.src_port)
        return _larger_endpoint(flow)

    def remote_id(self, flow: FlowKey) -> Tuple[int, int, int]:
        """:func:`endpoint_id` of :meth:`remote`, computed without building the pair."""
        src, dst = flow.src_addr, flow.dst_addr
        if self.home_networks:
            src_home = self._is_home(src)
            if src_home != self._is_home(dst):
                if src_home:
                    return (dst._ip, dst._version, flow.dst_port)
                return (src._ip, src._version, flow.src_port)
        s = (src._ip, src._version, flow.src_port)
        d = (dst._ip, dst._version, flow.dst_port)
        return s if s >= d else d


def observe_unknown(
    table: UnknownPatternTable, payload: bytes, flow: FlowKey, record_index: int
) -> UnknownPatternTable:
    """Record one unclassified TCP/UDP payload. ``flow`` must be decoded."""
    if not payload:
        return table
    key = bytes(payload[: table.prefix_length])
    entries = table.entries
    entry = entries.get(key)
    if entry is None:
        if len(entries) >= table.max_entries:
            table.overflow += 1
            return table
        entry = entries[key] = UnknownEntry(
            flow.transport, table.remote_id(flow), record_index if table.sample_cap else None
        )
        entry.saturated = table.endpoint_cap <= 1
        return table
    entry.occurrence_count += 1
    entry.transports.add(flow.transport)
    if not entry.saturated:
        entry.endpoints.add(table.remote_id(flow))
        if len(entry.endpoints) >= table.endpoint_cap:
            entry.saturated = True
    if len(entry.sample_record_indices) < table.sample_cap:
        entry.sample_record_indices.append(record_index)
    return table


class CandidateSignature(NamedTuple):
    prefix: bytes
    support: int
    endpoint_count: int
    transport: str


def detect_candidates(
    table: UnknownPatternTable,
    min_support: int = DEFAULT_MIN_SUPPORT,
    min_endpoints: int = DEFAULT_MIN_ENDPOINTS,
) -> List[CandidateSignature]:
    if min_support < 1 or min_endpoints < 1:
        raise ValueError("min_support and min_endpoints must be >= 1")
    out = []
    for prefix, e in table.entries.items():
        if e.occurrence_count >= min_support and e.endpoint_count >= min_endpoints:
            transport = next(iter(e.transports)) if len(e.transports) == 1 else "any"
            out.append(CandidateSignature(prefix, e.occurrence_count, e.endpoint_count, transport))
    out.sort(key=lambda c: (-c.support, c.prefix))
    return out


def candidates_to_kv(candidates: Sequence[CandidateSignature]) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for i, c in enumerate(candidates):
        out[f"candidate.{i:06d}.prefix"] = c.prefix.hex()
        out[f"candidate.{i:06d}.support"] = c.support
        out[f"candidate.{i:06d}.endpoints"] = c.endpoint_count
        out[f"candidate.{i:06d}.transport"] = c.transport
    return out


def candidates_from_kv(kv: Dict[str, str]) -> List[CandidateSignature]:
    by_index: Dict[int, Dict[str, str]] = {}
    for key, value in kv.items():
        _, idx, attr = key.split(".")
        by_index.setdefault(int(idx), {})[attr] = value
    return [
        CandidateSignature(
            bytes.fromhex(d["prefix"]), int(d["support"]), int(d["endpoints"]), d["transport"]
        )
        for _, d in sorted(by_index.items())
    ]


# ---------------------------------------------------------------------------
# reporting


class ReportRow(NamedTuple):
    category: str
    packet_count: int
    byte_count: int
    percent: float


def _percentages(counts: Sequence[int]) -> List[float]:
    """Per-count percentages in hundredths, adjusted to sum to exactly 100.00."""
    total = sum(counts)
    if total == 0:
        return [0.0] * len(counts)
    exact = [c * 10000 / total for c in counts]
    floors = [int(x) for x in exact]
    short = 10000 - sum(floors)
    # largest remainder, ties broken by position for determinism
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return [f / 100 for f in floors]


def frequency_report(stats: CategoryStats) -> List[ReportRow]:
    items = sorted(stats.categories.items(), key=lambda kv: (-kv[1].packets, kv[0]))
    items = [(name, c) for name, c in items if c.packets > 0]
    pcts = _percentages([c.packets for _, c in items])
    return [ReportRow(name, c.packets, c.bytes, p) for (name, c), p in zip(items, pcts)]


def format_report(rows: Sequence[ReportRow], fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "packets", "bytes", "percent"])
        for r in rows:
            w.writerow([r.category, r.packet_count, r.byte_count, f"{r.percent:.2f}"])
        return buf.getvalue()
    width = max([len("category")] + [len(r.category) for r in rows])
    lines = [f"{'category':<{width}}  {'packets':>12}  {'bytes':>14}  {'percent':>7}"]
    for r in rows:
        lines.append(f"{r.category:<{width}}  {r.packet_count:>12}  {r.byte_count:>14}  {r.percent:>7.2f}")
    return "\n".join(lines) + "\n"

