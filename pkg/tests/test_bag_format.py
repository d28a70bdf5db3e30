import hashlib
import io
import random
import shutil
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURE_METADATA, FIXED_CLOCK_START, StepClock, build_bag, corpus_segments, write_zero_bag
from p2pdeb import synth
from p2pdeb.bag_format import (
    DEFAULT_MAX_PART_SIZE,
    FAT32_LIMIT,
    PART_OVERHEAD,
    BagConfig,
    CaseMetadata,
    create_bag,
    export_raw,
    merge_parts,
    plan_split,
    read_header_digest,
    read_metadata,
    scan_bag,
    split_bag,
    verify_bag,
    verify_parts,
)
from p2pdeb.classify import CategoryStats
from p2pdeb.errors import (
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
from p2pdeb.pcap_io import PacketRecord, PcapHeader, read_pcap_header, write_pcap


def le(data, off, n):
    return int.from_bytes(data[off : off + n], "little")


def independent_walk(bag):
    """Parse a bag with offsets written out by hand (no package constants).

    header: 8 magic, 2 version, 2 hash alg, 4 snap, 4 link, 8 created, 4 mlen,
            mlen metadata, 32 signature digest
    segment: 4 index, 4 count, 8 plen, 8 first, 8 last, 32 payload hash,
             32 chain hash, 4 sidecar len, sidecar, payload
    """
    footer_off = le(bag, len(bag) - 8, 8)
    mlen = le(bag, 28, 4)
    header_len = 32 + mlen + 32
    segs = []
    pos = header_len
    while pos < footer_off:
        plen = le(bag, pos + 8, 8)
        slen = le(bag, pos + 96, 4)
        payload_at = pos + 100 + slen
        segs.append({
            "index": le(bag, pos, 4),
            "count": le(bag, pos + 4, 4),
            "payload_hash": bag[pos + 32 : pos + 64],
            "chain": bag[pos + 64 : pos + 96],
            "payload": bag[payload_at : payload_at + plen],
        })
        pos = payload_at + plen
    assert pos == footer_off
    final = bag[footer_off + 28 : footer_off + 60]
    return bag[:header_len], segs, final


def sha256sum(data, tmp_path):
    """Digest from the coreutils tool rather than hashlib."""
    exe = shutil.which("sha256sum")
    if exe is None:
        pytest.skip("sha256sum not installed")
    f = tmp_path / "blob"
    f.write_bytes(data)
    out = subprocess.run([exe, str(f)], check=True, capture_output=True, text=True).stdout
    return bytes.fromhex(out.split()[0])


def one_packet_records():
    frame = synth.ipv4_frame("10.1.1.1", "10.1.1.2", 1111, 2222, b"x" * 6, "udp")
    assert len(frame) == 60
    return [PacketRecord(1_700_000_000, 42, 60, frame)]


# ---------------------------------------------------------------------------
# header and chain


def test_chain_seed_matches_external_tool(tmp_path):
    writer = create_bag(FIXTURE_METADATA, BagConfig(created_at=FIXED_CLOCK_START), io.BytesIO(),
                        clock=StepClock())
    assert writer.segment_count == 0
    header_bytes = writer.getvalue()
    assert writer.chain == sha256sum(header_bytes, tmp_path)
    writer.seal()
    bag = writer.getvalue()
    hand_header, _, final = independent_walk(bag)
    assert hand_header == header_bytes
    assert read_header_digest(bag) == sha256sum(hand_header, tmp_path)
    assert final == writer.chain  # zero segments: final = H(header)


def test_identical_inputs_give_identical_header_bytes():
    a = create_bag(FIXTURE_METADATA, BagConfig(created_at=5), io.BytesIO(), clock=StepClock())
    b = create_bag(FIXTURE_METADATA, BagConfig(created_at=5), io.BytesIO(), clock=StepClock())
    assert a.header_bytes == b.header_bytes
    c = create_bag(FIXTURE_METADATA, BagConfig(created_at=6), io.BytesIO(), clock=StepClock())
    assert c.header_bytes != a.header_bytes


def test_one_segment_chain_recomputed_externally(tmp_path):
    bag = build_bag([one_packet_records()])
    header, segs, final = independent_walk(bag)
    (seg,) = segs
    # payload is a 16-byte record header plus the 60-byte frame
    assert len(seg["payload"]) == 76
    assert le(seg["payload"], 8, 4) == 60 and le(seg["payload"], 12, 4) == 60
    seed = sha256sum(header, tmp_path)
    ph = sha256sum(seg["payload"], tmp_path)
    assert seg["payload_hash"] == ph
    assert seg["chain"] == sha256sum(seed + ph, tmp_path) == final


def test_identical_appends_get_distinct_chain_hashes():
    recs = one_packet_records()
    bag = build_bag([recs, recs])
    _, segs, _ = independent_walk(bag)
    assert segs[0]["payload_hash"] == segs[1]["payload_hash"]
    assert segs[0]["chain"] != segs[1]["chain"]


def test_manual_offset_audit():
    bag = build_bag([one_packet_records()])
    meta_len = le(bag, 28, 4)
    assert bag[0:8] == b"P2PDEB01"
    assert le(bag, 8, 2) == 1 and le(bag, 10, 2) == 1          # version, sha-256
    assert le(bag, 12, 4) == 65535 and le(bag, 16, 4) == 1     # snap, ethernet
    assert le(bag, 20, 8) == FIXED_CLOCK_START
    meta = bag[32 : 32 + meta_len].decode()
    assert "exhibit_reference=EX-0042" in meta and "pcap.byte_order=native" in meta
    seg = 32 + meta_len + 32
    assert le(bag, seg, 4) == 0 and le(bag, seg + 4, 4) == 1 and le(bag, seg + 8, 8) == 76
    assert le(bag, seg + 16, 8) == le(bag, seg + 24, 8) == 1_700_000_000_000_042
    slen = le(bag, seg + 96, 4)
    payload = seg + 100 + slen
    assert le(bag, payload, 4) == 1_700_000_000 and le(bag, payload + 4, 4) == 42
    footer = payload + 76
    assert le(bag, len(bag) - 8, 8) == footer
    assert bag[footer : footer + 8] == b"P2PDEBFT"
    assert le(bag, footer + 8, 4) == 1 and le(bag, footer + 12, 8) == 1 and le(bag, footer + 20, 8) == 76
    stats_len = le(bag, footer + 60, 4)
    cand_at = footer + 64 + stats_len
    cand_len = le(bag, cand_at, 4)
    audit_off_at = cand_at + 4 + cand_len
    assert le(bag, audit_off_at, 8) == audit_off_at + 8
    assert bag[audit_off_at + 8 : audit_off_at + 16] == b"P2PDEBAU"
    layout = scan_bag(io.BytesIO(bag))
    assert layout.segments[0].payload_offset == payload
    assert layout.footer.offset == footer


@pytest.mark.parametrize("sizes", [[1], [3, 1], [5, 2, 7, 1, 1, 4, 2, 9]])
def test_independent_chain_recomputation(sizes, sigs):
    bag = build_bag(corpus_segments(len(sizes), sizes, sigs), signatures=sigs)
    header, segs, final = independent_walk(bag)
    chain = hashlib.sha256(header).digest()
    for i, seg in enumerate(segs):
        assert seg["index"] == i
        ph = hashlib.sha256(seg["payload"]).digest()
        assert ph == seg["payload_hash"]
        chain = hashlib.sha256(chain + ph).digest()
        assert chain == seg["chain"]
    assert chain == final


# ---------------------------------------------------------------------------
# writer errors


def test_sealed_and_empty_segment():
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    with pytest.raises(EmptySegment):
        writer.append_segment([])
    writer.append_segment(one_packet_records())
    assert writer.segment_count == 1
    writer.seal()
    with pytest.raises(SealedBag):
        writer.append_segment(one_packet_records())
    with pytest.raises(SealedBag):
        writer.seal()
    assert scan_bag(io.BytesIO(writer.getvalue())).footer.segment_count == 1


def test_extra_stats_may_not_shadow_categories():
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    with pytest.raises(ValueError):
        writer.seal(extra_stats={"cat.x.packets": 1})


# ---------------------------------------------------------------------------
# verification


def test_fixture_verifies(fixture_bag):
    before = bytes(fixture_bag)
    report = verify_bag(fixture_bag)
    assert report.ok and report.first_failure is None and len(report.segments) == 4
    assert fixture_bag == before
    assert report.format() == verify_bag(fixture_bag).format()
    assert report.format().endswith("result: ok\n")


def payload_spans(bag):
    layout = scan_bag(io.BytesIO(bag))
    return [(s.payload_offset, s.payload_length) for s in layout.segments]


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_single_bit_flip_localised(data):
    bag = _FLIP_BAG
    spans = payload_spans(bag)
    seg = data.draw(st.integers(0, len(spans) - 1))
    off, n = spans[seg]
    byte = data.draw(st.integers(off, off + n - 1))
    bit = data.draw(st.integers(0, 7))
    tampered = bytearray(bag)
    tampered[byte] ^= 1 << bit
    report = verify_bag(bytes(tampered))
    assert not report.ok and not report.final_ok
    assert report.first_failure == seg
    assert not report.segments[seg].payload_ok
    for later in report.segments[seg:]:
        assert not later.chain_ok
    for earlier in report.segments[:seg]:
        assert earlier.ok


_FLIP_BAG = build_bag(corpus_segments(7, [40, 25, 60, 10]))


def test_metadata_tamper_breaks_chain(fixture_bag):
    bag = bytearray(fixture_bag)
    i = bag.index(b"EX-0042")
    bag[i + 3] = ord("9")
    report = verify_bag(bytes(bag))
    assert not report.ok and report.first_failure == 0


def test_truncated_footer_is_malformed(fixture_bag):
    layout = scan_bag(io.BytesIO(fixture_bag))
    with pytest.raises(MalformedContainer):
        verify_bag(fixture_bag[: layout.footer.offset + 20])
    with pytest.raises(MalformedContainer):
        verify_bag(fixture_bag[:-3])
    with pytest.raises(MalformedContainer):
        verify_bag(b"")
    with pytest.raises(MalformedContainer):
        verify_bag(b"NOTABAG!" + bytes(100))


def test_record_structure_checked():
    # a segment whose payload hash is consistent but whose records do not parse
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    writer.append_payload(b"\x00" * 10, 1, 0, 0)
    writer.seal()
    report = verify_bag(writer.getvalue())
    assert not report.ok and report.segments[0].payload_ok and not report.segments[0].records_ok


def test_stats_mismatch_detected():
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    side = CategoryStats()
    side.add("x", 76, 0)
    writer.append_segment(one_packet_records(), side)
    writer.stats = CategoryStats()  # footer no longer sums the sidecars
    writer.seal()
    report = verify_bag(writer.getvalue())
    assert not report.footer_ok and not report.ok


# ---------------------------------------------------------------------------
# export


def test_export_byte_identical_all_framings():
    recs = synth.records_from_frames(synth.mixed_corpus(4, 300, None))
    for header in (PcapHeader(), PcapHeader(byte_order="swapped"),
                   PcapHeader(timestamp_unit="nanosecond", thiszone=-3600, sigfigs=2)):
        original = write_pcap(header, recs)
        bag = build_bag([recs[:100], recs[100:250], recs[250:]], header=header)
        assert export_raw(bag) == original


def test_empty_bag_export():
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    writer.seal()
    bag = writer.getvalue()
    out = export_raw(bag)
    assert len(out) == 24 and read_pcap_header(out) == PcapHeader()
    layout = scan_bag(io.BytesIO(bag))
    assert layout.footer.final_chain_hash == hashlib.sha256(layout.header_bytes).digest()


def test_export_refuses_tampered(fixture_bag):
    off, _ = payload_spans(fixture_bag)[1]
    bag = bytearray(fixture_bag)
    bag[off + 30] ^= 0x80
    with pytest.raises(VerificationFailed):
        export_raw(bytes(bag))
    assert len(export_raw(bytes(bag), override=True)) == len(export_raw(fixture_bag))


def test_sidecar_separation(sigs):
    segs = corpus_segments(9, [30, 30], sigs)
    with_stats = build_bag(segs, signatures=sigs)
    writer = create_bag(FIXTURE_METADATA, BagConfig(created_at=FIXED_CLOCK_START, signature_set_digest=sigs.digest),
                        io.BytesIO(), actor="tester", clock=StepClock())
    for recs in segs:
        writer.append_segment(recs)  # no sidecar
    writer.seal()
    assert with_stats != writer.getvalue()
    assert export_raw(with_stats) == export_raw(writer.getvalue())


# ---------------------------------------------------------------------------
# metadata


def test_read_metadata_round_trip(fixture_bag):
    meta, footer = read_metadata(fixture_bag)
    assert meta == FIXTURE_METADATA
    assert len(meta.to_dict()) == 11
    assert footer.segment_count == 4 and footer.total_packets == 135


def test_empty_metadata_values():
    writer = create_bag(CaseMetadata(), sink=io.BytesIO(), clock=StepClock())
    writer.seal()
    meta, _ = read_metadata(writer.getvalue())
    d = meta.to_dict()
    assert len(d) == 11 and set(d.values()) == {""}


class CountingReader(io.RawIOBase):
    def __init__(self, fh):
        self.fh = fh
        self.bytes_read = 0

    def readable(self):
        return True

    def seekable(self):
        return True

    def read(self, n=-1):
        data = self.fh.read(n)
        self.bytes_read += len(data)
        return data

    def readinto(self, b):
        data = self.read(len(b))
        b[: len(data)] = data
        return len(data)

    def seek(self, pos, whence=0):
        return self.fh.seek(pos, whence)

    def tell(self):
        return self.fh.tell()


@pytest.mark.slow
def test_read_metadata_io_bounded_on_4gib_bag(tmp_path):
    path = write_zero_bag(tmp_path / "big.bag", 64, 64 << 20)
    size = path.stat().st_size
    assert size > 4 << 30
    with open(path, "rb") as fh:
        head = fh.read(32)
        counter = CountingReader(fh)
        meta, footer = read_metadata(counter)
    assert meta == FIXTURE_METADATA and footer.segment_count == 64
    header_len = 32 + le(head, 28, 4) + 32
    # header, trailer, then footer through trailer; nothing scales with payload
    assert counter.bytes_read == header_len + 8 + (size - footer.offset)
    assert counter.bytes_read < 64 << 10


# ---------------------------------------------------------------------------
# split / merge


def _sizes(bag):
    layout = scan_bag(io.BytesIO(bag))
    return len(layout.header_bytes), [s.size for s in layout.segments], layout.footer_length


def test_greedy_example_4_4_2():
    # units of 1000 bytes; the footer is small enough to ride along
    plans = plan_split(100, [4000, 4000, 2000], 50, PART_OVERHEAD + 100 + 4000 + 50)
    assert [(p.first_segment, p.end_segment, p.with_footer) for p in plans] == [
        (0, 1, False), (1, 2, False), (2, 3, True)]
    assert all(p.size <= PART_OVERHEAD + 100 + 4050 for p in plans)


def test_plan_footer_gets_own_part_when_needed():
    plans = plan_split(100, [4000], 500, PART_OVERHEAD + 100 + 4000)
    assert [(p.first_segment, p.end_segment, p.with_footer) for p in plans] == [(0, 1, False), (1, 1, True)]


def test_split_into_three_parts_and_merge(sigs):
    recs = synth.records_from_frames(synth.fixed_size_frames(10, 200, 1))
    bag = build_bag([recs[:4], recs[4:8], recs[8:]], signatures=sigs)
    hlen, sizes, flen = _sizes(bag)
    assert sizes[0] == sizes[1] and sizes[2] < sizes[0]
    limit = PART_OVERHEAD + hlen + sizes[0] + flen
    parts = split_bag(bag, limit)
    assert len(parts) == 3 and all(len(p) <= limit for p in parts)
    assert merge_parts(parts) == bag
    assert merge_parts(parts[::-1]) == bag
    assert merge_parts([parts[1], parts[2], parts[0]]) == bag
    assert all(c.ok for c in verify_parts(parts))


def test_one_part_when_limit_covers_bag(fixture_bag):
    parts = split_bag(fixture_bag, len(fixture_bag) + 1000)
    assert len(parts) == 1
    assert merge_parts(parts) == fixture_bag


def test_part_size_too_small(fixture_bag):
    hlen, sizes, _ = _sizes(fixture_bag)
    with pytest.raises(PartSizeTooSmall):
        split_bag(fixture_bag, PART_OVERHEAD + hlen + sizes[0] - 1)


def test_missing_part(fixture_bag):
    hlen, sizes, flen = _sizes(fixture_bag)
    parts = split_bag(fixture_bag, PART_OVERHEAD + hlen + max(sizes) + flen)
    assert len(parts) >= 3
    with pytest.raises(MissingPart):
        merge_parts(parts[:1] + parts[2:])
    with pytest.raises(MissingPart):
        merge_parts([])


def test_duplicate_part_rejected(fixture_bag):
    hlen, sizes, flen = _sizes(fixture_bag)
    parts = split_bag(fixture_bag, PART_OVERHEAD + hlen + max(sizes) + flen)
    with pytest.raises(PartCorrupted):
        merge_parts(parts + [parts[0]])


def test_header_mismatch(fixture_bag, sigs):
    other = build_bag(corpus_segments(8, [40, 25, 60, 10], sigs), signatures=sigs,
                      metadata=CaseMetadata(exhibit_reference="OTHER"))
    hlen, sizes, flen = _sizes(fixture_bag)
    limit = PART_OVERHEAD + hlen + max(max(sizes), max(_sizes(other)[1])) + flen + 200
    a, b = split_bag(fixture_bag, limit), split_bag(other, limit)
    with pytest.raises(HeaderMismatch):
        merge_parts([a[0]] + b[1:])


def test_continuity_mismatch(sigs):
    # same header, different evidence: part 1 of one bag after part 0 of another
    a = build_bag(corpus_segments(1, [30, 30], sigs), signatures=sigs)
    b = build_bag(corpus_segments(2, [30, 30], sigs), signatures=sigs)
    hlen, sizes, flen = _sizes(a)
    limit = PART_OVERHEAD + hlen + max(sizes + _sizes(b)[1]) + flen
    pa, pb = split_bag(a, limit), split_bag(b, limit)
    assert len(pa) == len(pb) == 2
    with pytest.raises(ContinuityMismatch):
        merge_parts([pa[0], pb[1]])
    checks = verify_parts([pa[0], pb[1]])
    assert [c.ok for c in checks] == [True, False]


def test_corrupted_part_detected(fixture_bag):
    hlen, sizes, flen = _sizes(fixture_bag)
    parts = split_bag(fixture_bag, PART_OVERHEAD + hlen + max(sizes) + flen)
    bad = bytearray(parts[1])
    bad[len(bad) // 2] ^= 1
    with pytest.raises((PartCorrupted, ContinuityMismatch, MalformedContainer)):
        merge_parts([parts[0], bytes(bad)] + parts[2:])
    assert not verify_parts([parts[0], bytes(bad)] + parts[2:])[1].ok


def test_default_limit_is_below_fat32():
    assert FAT32_LIMIT == 2 ** 32
    assert DEFAULT_MAX_PART_SIZE < 2 ** 32


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.data())
def test_split_merge_identity_property(seed, nseg, data):
    rng = random.Random(seed)
    sizes = [rng.randint(1, 30) for _ in range(nseg)]
    bag = build_bag(corpus_segments(seed, sizes))
    hlen, seg_sizes, flen = _sizes(bag)
    lo = PART_OVERHEAD + hlen + max(seg_sizes + [flen])
    limit = data.draw(st.integers(lo, len(bag) + PART_OVERHEAD + 10))
    parts = split_bag(bag, limit)
    assert all(len(p) <= limit for p in parts)
    assert merge_parts(parts) == bag
