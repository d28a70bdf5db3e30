import io
import ipaddress
import re
from collections import defaultdict

import pytest

from p2pdeb import synth
from p2pdeb.bag_format import BagConfig, CaseMetadata, create_bag
from p2pdeb.classify import CategoryStats, classify_packet, default_signatures
from p2pdeb.pcap_io import PcapHeader, decode_frame

FIXTURE_METADATA = CaseMetadata(
    investigating_agency="Metro Police Cyber Unit",
    exhibit_reference="EX-0042",
    property_reference="PR-7731",
    case_suspect_name="J. Doe",
    description="Residential uplink, P2P traffic",
    seized_datetime="2026-03-14T09:26:53Z",
    seized_location="Flat 3, 12 Example Road",
    producer_name="A. Analyst",
    producer_signature="-----BEGIN SIG-----\nopaque\n-----END SIG-----",
    incident_reference="INC-2026-118",
    laboratory_reference="LAB-55",
)

FIXED_CLOCK_START = 1_773_480_000_000_000


class StepClock:
    """Deterministic microsecond clock for writers and audit records."""

    def __init__(self, start=FIXED_CLOCK_START, step=1000):
        self.t = start
        self.step = step

    def __call__(self):
        self.t += self.step
        return self.t


@pytest.fixture(scope="session")
def sigs():
    return default_signatures()


@pytest.fixture
def clock():
    return StepClock()


def segment_stats(records, header, signatures):
    stats = CategoryStats()
    for rec in records:
        flow, start, end = decode_frame(rec, header.link_type)
        res = classify_packet(rec.payload[start:end], flow, signatures)
        stats.add(res.category, len(rec.payload), rec.timestamp_us(header))
    return stats


def build_bag(segments, header=None, metadata=FIXTURE_METADATA, signatures=None,
              created_at=FIXED_CLOCK_START, clock=None):
    """Bag bytes from a list of record lists, one list per segment."""
    header = header or PcapHeader()
    signatures = signatures or default_signatures()
    writer = create_bag(
        metadata,
        BagConfig.for_pcap(header, signature_set_digest=signatures.digest, created_at=created_at),
        sink=io.BytesIO(), actor="tester", clock=clock or StepClock(),
    )
    for recs in segments:
        writer.append_segment(recs, segment_stats(recs, header, signatures))
    writer.seal()
    return writer.getvalue()


def corpus_segments(seed, sizes, signatures=None):
    signatures = signatures or default_signatures()
    total = sum(sizes)
    recs = synth.records_from_frames(synth.mixed_corpus(seed, total, signatures))
    out, i = [], 0
    for n in sizes:
        out.append(recs[i : i + n])
        i += n
    return out


@pytest.fixture
def fixture_bag(sigs):
    return build_bag(corpus_segments(7, [40, 25, 60, 10], sigs), signatures=sigs)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE_DETAILS = {}
_ACCEPTANCE_OUTCOMES = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call":
        _ACCEPTANCE_OUTCOMES[key] = report.outcome
    elif report.failed:
        _ACCEPTANCE_OUTCOMES[key] = "failed"
    elif report.skipped and key not in _ACCEPTANCE_OUTCOMES:
        _ACCEPTANCE_OUTCOMES[key] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_ACCEPTANCE_OUTCOMES.items()):
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        detail = ACCEPTANCE_DETAILS.get(num, "")
        terminalreporter.write_line(f"criterion {num} {name}: {verdict}" + (f"  [{detail}]" if detail else ""))


# ---------------------------------------------------------------------------
# large sparse bags


class SparseSink:
    """File sink that seeks over one designated all-zero block instead of
    writing it, so multi-GiB bags cost almost no disk."""

    def __init__(self, fh, zero_block):
        self.fh = fh
        self.zero_block = zero_block

    def write(self, data):
        if data is self.zero_block:
            self.fh.seek(len(data), 1)
        else:
            self.fh.write(data)
        return len(data)


def write_zero_bag(path, n_segments, segment_bytes, metadata=FIXTURE_METADATA):
    """Bag of ``n_segments`` segments, each ``segment_bytes`` of zero-length
    pcap records (16 zero bytes apiece: ts 0, caplen 0, len 0)."""
    assert segment_bytes % 16 == 0
    zero = bytes(segment_bytes)
    with open(path, "wb") as fh:
        writer = create_bag(metadata, BagConfig(created_at=FIXED_CLOCK_START),
                            sink=SparseSink(fh, zero), actor="tester", clock=StepClock())
        for _ in range(n_segments):
            writer.append_payload(zero, segment_bytes // 16, 0, 0)
        writer.seal()
    return path


# ---------------------------------------------------------------------------
# independent prefix oracle


def brute_force_candidates(frames, n, min_support, min_endpoints, home):
    """Independent recount of unknown-payload prefixes: a plain dict of
    prefix -> occurrences and endpoint set, with frames parsed by scapy rather
    than the package decoder. Assumes no frame matches a known signature.
    """
    from scapy.all import IP, TCP, UDP, Ether

    occ = defaultdict(int)
    peers = defaultdict(set)
    for frame in frames:
        pkt = Ether(frame)
        if IP not in pkt or (UDP not in pkt and TCP not in pkt):
            continue
        ip = pkt[IP]
        l4 = pkt[UDP] if UDP in pkt else pkt[TCP]
        l4_header = 8 if UDP in pkt else l4.dataofs * 4
        # drop Ethernet padding beyond the IP datagram
        data = bytes(l4.payload)[: max(0, ip.len - ip.ihl * 4 - l4_header)]
        if not data:
            continue
        src_home = ipaddress.ip_address(ip.src) in home
        dst_home = ipaddress.ip_address(ip.dst) in home
        if src_home and not dst_home:
            remote = (int(ipaddress.ip_address(ip.dst)), l4.dport)
        elif dst_home and not src_home:
            remote = (int(ipaddress.ip_address(ip.src)), l4.sport)
        else:
            remote = max((int(ipaddress.ip_address(ip.src)), l4.sport),
                         (int(ipaddress.ip_address(ip.dst)), l4.dport))
        key = data[:n]
        occ[key] += 1
        peers[key].add(remote)
    out = [(k, occ[k], len(peers[k])) for k in occ if occ[k] >= min_support and len(peers[k]) >= min_endpoints]
    return sorted(out, key=lambda c: (-c[1], c[0]))
