"""Plant a recurring 8-byte prefix in random UDP noise and check that capture
reports it as the only candidate signature.

Usage: python scripts/planted_prefix.py [--noise N] [--occurrences K] [--endpoints E]

Prints the candidates found by a streamed capture next to a plain
dictionary count over the same frames.
"""
import argparse
import io
from collections import defaultdict

from p2pdeb import synth
from p2pdeb.bag_format import BagConfig, CaseMetadata, create_bag
from p2pdeb.classify import UNKNOWN, classify_packet, default_signatures, parse_networks, remote_endpoint
from p2pdeb.pcap_io import PacketRecord, PcapHeader, decode_frame, write_pcap
from p2pdeb.pipeline import FileSource, PipelineConfig, run


def dictionary_count(frames, home, n=8, min_support=20, min_endpoints=5):
    sigs = default_signatures()
    occ, peers = defaultdict(int), defaultdict(set)
    for frame in frames:
        flow, start, end = decode_frame(PacketRecord(0, 0, len(frame), frame), 1)
        app = frame[start:end]
        if flow.transport == "other" or not app or classify_packet(app, flow, sigs).category != UNKNOWN:
            continue
        occ[app[:n]] += 1
        peers[app[:n]].add(remote_endpoint(flow, home))
    hits = [(k, occ[k], len(peers[k])) for k in occ if occ[k] >= min_support and len(peers[k]) >= min_endpoints]
    return sorted(hits, key=lambda h: (-h[1], h[0]))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--prefix", default="c0ffee5a1700d00d")
    ap.add_argument("--occurrences", type=int, default=200)
    ap.add_argument("--endpoints", type=int, default=20)
    ap.add_argument("--noise", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=6)
    ap.add_argument("--home-net", default="192.168.1.0/24")
    args = ap.parse_args(argv)

    frames = synth.planted_prefix_corpus(args.seed, bytes.fromhex(args.prefix), args.occurrences,
                                         args.endpoints, args.noise)
    data = write_pcap(PcapHeader(), synth.records_from_frames(frames))
    sigs = default_signatures()
    source = FileSource(io.BytesIO(data))
    writer = create_bag(CaseMetadata(description="planted prefix experiment"),
                        BagConfig.for_pcap(source.header, signature_set_digest=sigs.digest), io.BytesIO())
    summary = run(source, sigs, writer, PipelineConfig(home_networks=[args.home_net]),
                  status_stream=io.StringIO())

    print(f"packets={summary.packets_stored} candidates={len(summary.candidates)}")
    for c in summary.candidates:
        print(f"  capture     {c.prefix.hex()} support={c.support} endpoints={c.endpoint_count}")
    for prefix, support, endpoints in dictionary_count(frames, parse_networks([args.home_net])):
        print(f"  dict count  {prefix.hex()} support={support} endpoints={endpoints}")


if __name__ == "__main__":
    main()
