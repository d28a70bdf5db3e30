"""Streaming capture: packet source -> classification -> segment rotation -> bag.

A producer thread pulls packets from the source into a bounded FIFO; the
calling thread consumes, classifies, and writes segments. All bag and
statistics mutation happens on the consumer side.
"""
from __future__ import annotations

import gc
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO

from .bag_format import BagWriter
from .classify import (
    DEFAULT_MIN_ENDPOINTS,
    DEFAULT_MIN_SUPPORT,
    DEFAULT_PREFIX_LENGTH,
    UNKNOWN,
    CandidateSignature,
    CategoryStats,
    SignatureSet,
    UnknownPatternTable,
    classify_packet,
    detect_candidates,
    observe_unknown,
    parse_networks,
)
from .errors import SourceFailure, WriterFailure
from .pcap_io import PcapReader, decode_frame, encode_record

BLOCK = "block"
COUNT_DROPS = "count_drops"
DROP_POLICIES = (BLOCK, COUNT_DROPS)

_END = object()


@dataclass
class RotationLimits:
    max_packets: int = 10_000
    max_bytes: int = 64 * 1024 * 1024
    max_seconds: float = 60.0


@dataclass
class PipelineConfig:
    rotation: RotationLimits = field(default_factory=RotationLimits)
    queue_capacity: int = 65_536
    home_networks: Sequence[str] = ()
    # None picks block for file sources and count_drops for live ones
    drop_policy: Optional[str] = None
    status_interval: float = 5.0
    prefix_length: int = DEFAULT_PREFIX_LENGTH
    min_support: int = DEFAULT_MIN_SUPPORT
    min_endpoints: int = DEFAULT_MIN_ENDPOINTS
    batch_size: int = 256

    def __post_init__(self):
        r = self.rotation
        if r.max_packets < 1 or r.max_bytes < 1 or r.max_seconds < 1:
            raise ValueError("rotation limits must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.drop_policy is not None and self.drop_policy not in DROP_POLICIES:
            raise ValueError(f"drop_policy must be one of {DROP_POLICIES}")
        if self.min_support < 1 or self.min_endpoints < 1:
            raise ValueError("candidate thresholds must be >= 1")


@dataclass
class RunSummary:
    packets_in: int
    packets_stored: int
    packets_dropped: int
    segments: int
    duration: float
    stats: CategoryStats
    candidates: List[CandidateSignature]
    stopped: bool = False
    partial: bool = False


class FileSource:
    """Replays a pcap file (path or binary stream) in file order."""

    live = False

    def __init__(self, path_or_stream):
        if hasattr(path_or_stream, "read"):
            self._fh = path_or_stream
            self._owned = False
        else:
            self._fh = open(path_or_stream, "rb")
            self._owned = True
        try:
            self._reader = PcapReader(self._fh)
        except Exception:
            self.close()
            raise
        self.header = self._reader.header

    def __iter__(self):
        return iter(self._reader)

    def iter_raw(self):
        """(record, on-disk bytes) pairs; spares re-encoding each record."""
        return self._reader.iter_raw()

    def close(self):
        if self._owned:
            self._fh.close()


# live capture adapters register here: name -> factory(argument) -> source
LIVE_ADAPTERS: Dict[str, Callable[[str], object]] = {}


def open_source(spec: str):
    """``live:<adapter>[:<arg>]`` or a pcap file path."""
    if spec.startswith("live:"):
        name, _, arg = spec[5:].partition(":")
        factory = LIVE_ADAPTERS.get(name)
        if factory is None:
            raise ValueError(f"no live capture adapter named {name!r} is installed")
        return factory(arg)
    return FileSource(Path(spec))


def format_status(elapsed: float, packets_in: int, stored: int, dropped: int,
                  stats: CategoryStats, candidates: int) -> str:
    top = sorted(stats.categories.items(), key=lambda kv: (-kv[1].packets, kv[0]))[:3]
    top_s = ",".join(f"{name}:{c.packets}" for name, c in top)
    return (f"status t={elapsed:.1f} in={packets_in} stored={stored} dropped={dropped} "
            f"top={top_s} candidates={candidates}")


class Pipeline:
    def __init__(self, source, signatures: SignatureSet, writer: BagWriter,
                 config: Optional[PipelineConfig] = None,
                 status_stream: Optional[TextIO] = None, clock=time.monotonic):
        self.source = source
        self.signatures = signatures
        self.writer = writer
        self.config = config or PipelineConfig()
        self.status_stream = status_stream if status_stream is not None else sys.stderr
        self.clock = clock
        policy = self.config.drop_policy
        if policy is None:
            policy = COUNT_DROPS if getattr(source, "live", False) else BLOCK
        self.drop_policy = policy
        self.batch_size = max(1, min(self.config.batch_size, self.config.queue_capacity))
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, self.config.queue_capacity // self.batch_size))
        self._stop = threading.Event()
        self._started = False
        self._source_error: Optional[BaseException] = None
        self.packets_in = 0
        self.packets_dropped = 0
        self.table = UnknownPatternTable(
            prefix_length=self.config.prefix_length,
            home_networks=parse_networks(self.config.home_networks),
        )

    # -- control ----------------------------------------------------------

    def request_stop(self) -> None:
        """Stop reading from the source; queued packets still reach the bag."""
        if self._stop.is_set():
            return
        self._stop.set()
        stop = getattr(self.source, "stop", None)
        if stop is not None:
            stop()

    @property
    def stop_requested(self) -> bool:
        return self._stop.is_set()

    # -- producer ---------------------------------------------------------

    def _put(self, batch):
        if self.drop_policy == BLOCK:
            self._queue.put(batch)
        else:
            try:
                self._queue.put_nowait(batch)
            except queue.Full:
                self.packets_dropped += len(batch)

    def _produce(self):
        stop = self._stop
        size = self.batch_size
        batch = []
        try:
            pcap = self.writer.header.pcap
            iter_raw = getattr(self.source, "iter_raw", None)
            if iter_raw is not None and getattr(self.source, "header", None) == pcap:
                pairs = iter_raw()
            else:
                pairs = ((rec, encode_record(pcap, rec)) for rec in self.source)
            for pair in pairs:
                if stop.is_set():
                    break
                self.packets_in += 1
                batch.append(pair)
                if len(batch) >= size:
                    self._put(batch)
                    batch = []
        except BaseException as exc:  # reported by the consumer
            self._source_error = exc
        finally:
            if batch:
                self._put(batch)
            self._queue.put(_END)

    # -- consumer ---------------------------------------------------------

    def run(self) -> RunSummary:
        if self._started:
            raise RuntimeError("a pipeline runs once")
        self._started = True
        if self.writer.sealed:
            raise WriterFailure("writer is already sealed")
        t0 = self.clock()
        producer = threading.Thread(target=self._produce, name="p2pdeb-producer", daemon=True)
        # the hot loop allocates many small acyclic objects; cyclic collection
        # passes over a growing pattern table cost more than they reclaim
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            producer.start()
            try:
                stored = self._consume(t0)
            except BaseException:
                self._stop.set()
                self._drain()
                producer.join()
                raise
            producer.join()
        finally:
            if gc_was_enabled:
                gc.enable()

        cfg = self.config
        candidates = detect_candidates(self.table, cfg.min_support, cfg.min_endpoints)
        notes = [f"packets_in={self.packets_in}", f"stored={stored}", f"dropped={self.packets_dropped}"]
        if self._stop.is_set():
            notes.append("stop-requested")
        err = self._source_error
        if err is not None:
            notes.append(f"source-failure: {err}")
        try:
            self.writer.seal(
                candidates,
                extra_stats={"packets_dropped": self.packets_dropped, "packets_in": self.packets_in},
                note=" ".join(notes),
            )
        except OSError as exc:
            raise WriterFailure(f"sealing failed: {exc}") from exc
        summary = RunSummary(
            packets_in=self.packets_in,
            packets_stored=stored,
            packets_dropped=self.packets_dropped,
            segments=self.writer.segment_count,
            duration=self.clock() - t0,
            stats=self.writer.stats.copy(),
            candidates=candidates,
            stopped=self._stop.is_set(),
            partial=err is not None,
        )
        self._emit_status(summary.duration, stored, self.writer.stats, len(candidates))
        if err is not None:
            raise SourceFailure(f"packet source failed: {err}", summary) from err
        return summary

    def _drain(self):
        while True:
            if self._queue.get() is _END:
                return

    def _emit_status(self, elapsed, stored, stats, ncand):
        line = format_status(elapsed, self.packets_in, stored, self.packets_dropped, stats, ncand)
        if self.status_stream is not None:
            print(line, file=self.status_stream, flush=True)

    def _consume(self, t0: float) -> int:
        writer = self.writer
        pcap = writer.header.pcap
        link = pcap.link_type
        sigs = self.signatures
        table = self.table
        rot = self.config.rotation
        max_packets = rot.max_packets
        max_bytes = rot.max_bytes
        max_span = int(rot.max_seconds * 1_000_000)
        micro = pcap.timestamp_unit == "microsecond"
        interval = self.config.status_interval
        next_status = t0 + interval
        clock = self.clock

        stored = 0
        chunks: List[bytes] = []
        seg_bytes = 0
        seg_first = seg_last = 0
        seg_stats = CategoryStats()

        def flush():
            nonlocal chunks, seg_bytes, seg_stats
            try:
                writer.append_payload(b"".join(chunks), len(chunks), seg_first, seg_last, seg_stats)
            except OSError as exc:
                raise WriterFailure(f"writing segment failed: {exc}") from exc
            chunks = []
            seg_bytes = 0
            seg_stats = CategoryStats()

        get = self._queue.get
        while True:
            batch = get()
            if batch is _END:
                break
            for rec, encoded in batch:
                if micro:
                    ts = rec.ts_seconds * 1_000_000 + rec.ts_fraction
                else:
                    ts = rec.timestamp_us(pcap)
                if chunks and (
                    len(chunks) >= max_packets
                    or seg_bytes + len(encoded) > max_bytes
                    or ts - seg_first >= max_span
                ):
                    flush()
                if not chunks:
                    seg_first = ts
                seg_last = ts
                chunks.append(encoded)
                seg_bytes += len(encoded)

                flow, start, end = decode_frame(rec, link)
                app = rec.payload[start:end]
                result = classify_packet(app, flow, sigs)
                seg_stats.add(result.category, len(rec.payload), ts)
                if result.category == UNKNOWN and app and flow.transport != "other":
                    observe_unknown(table, app, flow, stored)
                stored += 1
            if interval and clock() >= next_status:
                next_status = clock() + interval
                cumulative = writer.stats.copy()
                cumulative.merge(seg_stats)
                self._emit_status(clock() - t0, stored, cumulative,
                                  len(detect_candidates(table, self.config.min_support,
                                                        self.config.min_endpoints)))
        if chunks:
            flush()
        return stored


def run(source, signatures: SignatureSet, writer: BagWriter,
        config: Optional[PipelineConfig] = None, **kw) -> RunSummary:
    return Pipeline(source, signatures, writer, config, **kw).run()


def classify_offline(records, link_type: int, signatures: SignatureSet, header=None) -> CategoryStats:
    """Batch classification of a packet sequence, outside any pipeline."""
    stats = CategoryStats()
    for rec in records:
        flow, start, end = decode_frame(rec, link_type)
        result = classify_packet(rec.payload[start:end], flow, signatures)
        ts = rec.timestamp_us(header) if header is not None else rec.ts_seconds * 1_000_000 + rec.ts_fraction
        stats.add(result.category, len(rec.payload), ts)
    return stats
