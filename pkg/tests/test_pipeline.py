import io
import re

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURE_METADATA, StepClock
from p2pdeb import synth
from p2pdeb.bag_format import BagConfig, create_bag, export_raw, read_metadata, scan_bag, verify_bag
from p2pdeb.classify import CategoryStats, classify_packet, default_signatures
from p2pdeb.errors import SourceFailure, WriterFailure
from p2pdeb.pcap_io import PcapHeader, PcapReader, decode_frame, write_pcap
from p2pdeb.pipeline import (
    COUNT_DROPS,
    FileSource,
    Pipeline,
    PipelineConfig,
    RotationLimits,
    open_source,
    run,
)

STATUS = re.compile(r"^status t=\d+\.\d in=\d+ stored=\d+ dropped=\d+ top=(\S+:\d+(,\S+:\d+)*)? candidates=\d+$")


def new_writer(header=None, sigs=None):
    header = header or PcapHeader()
    sigs = sigs or default_signatures()
    return create_bag(FIXTURE_METADATA, BagConfig.for_pcap(header, signature_set_digest=sigs.digest),
                      io.BytesIO(), actor="tester", clock=StepClock())


def pcap_bytes(n, seed=1, header=None):
    frames = synth.mixed_corpus(seed, n, default_signatures())
    return write_pcap(header or PcapHeader(), synth.records_from_frames(frames))


def capture(data, config=None, sigs=None, status=None):
    sigs = sigs or default_signatures()
    source = FileSource(io.BytesIO(data))
    writer = new_writer(source.header, sigs)
    summary = run(source, sigs, writer, config, status_stream=status if status is not None else io.StringIO())
    return summary, writer.getvalue()


def standalone_classify(pcap_data):
    """Batch count written against the reader and classifier directly."""
    sigs = default_signatures()
    reader = PcapReader(io.BytesIO(pcap_data))
    counts = {}
    for rec in reader:
        flow, start, end = decode_frame(rec, reader.header.link_type)
        cat = classify_packet(rec.payload[start:end], flow, sigs).category
        n, b = counts.get(cat, (0, 0))
        counts[cat] = (n + 1, b + len(rec.payload))
    return counts


def test_rotation_25k_into_10k_10k_5k():
    data = pcap_bytes(25_000)
    summary, bag = capture(data)
    layout = scan_bag(io.BytesIO(bag))
    assert [s.packet_count for s in layout.segments] == [10_000, 10_000, 5_000]
    assert summary.segments == 3
    assert (summary.packets_in, summary.packets_stored, summary.packets_dropped) == (25_000, 25_000, 0)
    assert verify_bag(bag).ok
    assert export_raw(bag) == data


def test_rotation_by_bytes_and_time():
    recs = synth.records_from_frames(synth.fixed_size_frames(100, 64, 2), step_us=500_000)
    data = write_pcap(PcapHeader(), recs)
    rec_len = 16 + len(recs[0].payload)
    cfg = PipelineConfig(rotation=RotationLimits(max_packets=10**6, max_bytes=rec_len * 7, max_seconds=10**6))
    _, bag = capture(data, cfg)
    counts = [s.packet_count for s in scan_bag(io.BytesIO(bag)).segments]
    assert counts == [7] * 14 + [2]
    # packets 0.5 s apart, 3 s span per segment -> 6 packets each
    cfg = PipelineConfig(rotation=RotationLimits(max_packets=10**6, max_bytes=10**9, max_seconds=3))
    _, bag = capture(data, cfg)
    layout = scan_bag(io.BytesIO(bag))
    assert [s.packet_count for s in layout.segments] == [6] * 16 + [4]
    assert all(s.last_ts - s.first_ts < 3_000_000 for s in layout.segments)


def test_empty_source():
    summary, bag = capture(write_pcap(PcapHeader(), []))
    assert (summary.packets_in, summary.packets_stored, summary.segments) == (0, 0, 0)
    assert summary.stats == CategoryStats() and summary.candidates == []
    assert verify_bag(bag).ok and len(export_raw(bag)) == 24


def test_oracle_equivalence_and_order():
    data = pcap_bytes(7_000, seed=5)
    cfg = PipelineConfig(rotation=RotationLimits(max_packets=999))
    summary, bag = capture(data, cfg)
    exported = export_raw(bag)
    assert exported == data  # order preserved across segment boundaries
    expected = standalone_classify(exported)
    got = {k: (c.packets, c.bytes) for k, c in summary.stats.categories.items()}
    assert got == expected
    _, footer = read_metadata(bag)
    assert footer.stats == summary.stats


def test_swapped_source_uses_raw_bytes():
    header = PcapHeader(byte_order="swapped", timestamp_unit="nanosecond")
    data = pcap_bytes(1_200, seed=3, header=header)
    summary, bag = capture(data)
    assert export_raw(bag) == data
    native = capture(pcap_bytes(1_200, seed=3))[0].stats
    # same frames; only the timestamp unit differs
    assert {k: (c.packets, c.bytes) for k, c in summary.stats.categories.items()} == {
        k: (c.packets, c.bytes) for k, c in native.categories.items()}


def test_plain_iterable_source_matches_file_source():
    data = pcap_bytes(3_000, seed=8)
    sigs = default_signatures()
    records = list(PcapReader(io.BytesIO(data)))
    w1 = new_writer()
    run(records, sigs, w1, status_stream=io.StringIO())
    _, bag = capture(data)
    assert w1.getvalue() == bag


class StoppingSource:
    """Calls back into the pipeline after ``at`` packets."""

    def __init__(self, records, at):
        self.records = records
        self.at = at
        self.pipeline = None
        self.stop_calls = 0

    def __iter__(self):
        for i, rec in enumerate(self.records):
            if i == self.at:
                self.pipeline.request_stop()
                self.pipeline.request_stop()  # second is a no-op
            yield rec

    def stop(self):
        self.stop_calls += 1


def run_stopping(at, n=3_000):
    sigs = default_signatures()
    recs = synth.records_from_frames(synth.mixed_corpus(2, n, sigs))
    src = StoppingSource(recs, at)
    writer = new_writer()
    pipe = Pipeline(src, sigs, writer, status_stream=io.StringIO())
    src.pipeline = pipe
    return pipe.run(), writer.getvalue(), src, recs


def test_stop_mid_run_drains_queue():
    summary, bag, src, recs = run_stopping(1_000)
    assert summary.stopped and src.stop_calls == 1
    assert summary.packets_stored == summary.packets_in == 1_000
    assert summary.packets_dropped == 0
    assert verify_bag(bag).ok
    assert export_raw(bag) == write_pcap(PcapHeader(), recs[:1_000])
    _, footer = read_metadata(bag)
    sealed = footer.audit_log.records[-1]
    assert sealed.action == "sealed" and "stop-requested" in sealed.note


def test_stop_before_first_packet():
    summary, bag, _, _ = run_stopping(0)
    assert summary.packets_in == 0 and summary.segments == 0
    assert verify_bag(bag).ok


class FailingSource:
    def __init__(self, records, fail_at):
        self.records, self.fail_at = records, fail_at

    def __iter__(self):
        for i, rec in enumerate(self.records):
            if i == self.fail_at:
                raise OSError("device vanished")
            yield rec


def test_source_failure_seals_partial_bag():
    sigs = default_signatures()
    recs = synth.records_from_frames(synth.mixed_corpus(4, 900, sigs))
    writer = new_writer()
    with pytest.raises(SourceFailure) as exc:
        run(FailingSource(recs, 700), sigs, writer, status_stream=io.StringIO())
    summary = exc.value.summary
    assert summary.partial and summary.packets_stored == 700
    bag = writer.getvalue()
    assert verify_bag(bag).ok
    assert export_raw(bag) == write_pcap(PcapHeader(), recs[:700])
    note = read_metadata(bag)[1].audit_log.records[-1].note
    assert "source-failure" in note and "device vanished" in note


def test_sealed_writer_rejected():
    writer = new_writer()
    writer.seal()
    with pytest.raises(WriterFailure):
        run([], default_signatures(), writer)


def test_runs_once():
    pipe = Pipeline([], default_signatures(), new_writer(), status_stream=io.StringIO())
    pipe.run()
    with pytest.raises(RuntimeError):
        pipe.run()


class LiveList(list):
    live = True


def test_count_drops_accounts_for_every_packet():
    sigs = default_signatures()
    recs = synth.records_from_frames(synth.mixed_corpus(6, 5_000, sigs))
    for capacity in (1, 7, 256, 100_000):
        writer = new_writer()
        pipe = Pipeline(LiveList(recs), sigs, writer,
                        PipelineConfig(queue_capacity=capacity, batch_size=4), status_stream=io.StringIO())
        assert pipe.drop_policy == COUNT_DROPS
        s = pipe.run()
        assert s.packets_in == 5_000
        assert s.packets_stored + s.packets_dropped == s.packets_in
        assert read_metadata(writer.getvalue())[1].packets_dropped == s.packets_dropped


def test_count_drops_when_queue_full():
    pipe = Pipeline(LiveList(), default_signatures(), new_writer(),
                    PipelineConfig(queue_capacity=2, batch_size=1), status_stream=io.StringIO())
    for _ in range(5):
        pipe._put(["x"])
    assert pipe.packets_dropped == 3


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 64), st.integers(1, 300))
def test_block_policy_never_drops(capacity, max_packets):
    data = pcap_bytes(1_500, seed=capacity)
    cfg = PipelineConfig(queue_capacity=capacity, batch_size=16,
                         rotation=RotationLimits(max_packets=max_packets))
    summary, bag = capture(data, cfg)
    assert summary.packets_dropped == 0 and summary.packets_stored == 1_500
    assert export_raw(bag) == data


def test_status_lines_machine_parseable():
    ticks = iter(range(0, 10**9, 2))

    def fake_clock():
        return float(next(ticks))

    out = io.StringIO()
    sigs = default_signatures()
    data = pcap_bytes(3_000)
    source = FileSource(io.BytesIO(data))
    pipe = Pipeline(source, sigs, new_writer(), PipelineConfig(status_interval=1, batch_size=256),
                    status_stream=out, clock=fake_clock)
    pipe.run()
    lines = out.getvalue().splitlines()
    assert len(lines) >= 2
    for line in lines:
        assert STATUS.match(line), line
    assert "in=3000 stored=3000 dropped=0" in lines[-1]


@pytest.mark.parametrize("bad", [
    dict(rotation=RotationLimits(max_packets=0)),
    dict(rotation=RotationLimits(max_bytes=0)),
    dict(rotation=RotationLimits(max_seconds=0)),
    dict(queue_capacity=0),
    dict(drop_policy="lossy"),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PipelineConfig(**bad)


def test_live_source_requires_adapter():
    with pytest.raises(ValueError):
        open_source("live:eth0")
