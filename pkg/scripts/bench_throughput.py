"""Measure end-to-end capture throughput on a synthetic pcap.

Usage: python scripts/bench_throughput.py [--packets N] [--payload BYTES] [--profile]
"""
import argparse
import cProfile
import io
import pstats
import time

from p2pdeb.bag_format import BagConfig, CaseMetadata, create_bag
from p2pdeb.classify import default_signatures
from p2pdeb.pcap_io import PcapHeader, write_pcap
from p2pdeb.pipeline import FileSource, run
from p2pdeb.synth import fixed_size_frames, records_from_frames


def build_input(n: int, payload: int) -> bytes:
    header = PcapHeader()
    return write_pcap(header, records_from_frames(fixed_size_frames(n, payload)))


def measure(data: bytes) -> tuple:
    sigs = default_signatures()
    source = FileSource(io.BytesIO(data))
    sink = io.BytesIO()
    writer = create_bag(CaseMetadata(exhibit_reference="bench"), BagConfig.for_pcap(source.header,
                        signature_set_digest=sigs.digest), sink)
    t0 = time.perf_counter()
    summary = run(source, sigs, writer, status_stream=io.StringIO())
    elapsed = time.perf_counter() - t0
    return summary.packets_stored, elapsed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--packets", type=int, default=200_000)
    ap.add_argument("--payload", type=int, default=64)
    ap.add_argument("--profile", action="store_true")
    args = ap.parse_args()
    data = build_input(args.packets, args.payload)
    if args.profile:
        prof = cProfile.Profile()
        prof.enable()
    n, elapsed = measure(data)
    if args.profile:
        prof.disable()
        pstats.Stats(prof).sort_stats("tottime").print_stats(15)
    print(f"packets={n} seconds={elapsed:.3f} rate={n / elapsed:,.0f} pkts/s")


if __name__ == "__main__":
    main()
