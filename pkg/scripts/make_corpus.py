"""Write a synthetic pcap for experiments and demos.

Usage:
  python scripts/make_corpus.py out.pcap --kind mixed --packets 100000
  python scripts/make_corpus.py out.pcap --kind labelled --packets 500
  python scripts/make_corpus.py out.pcap --kind planted --prefix c0ffee5a1700d00d
  python scripts/make_corpus.py out.pcap --kind fixed --packets 200000 --payload 64
"""
import argparse
from pathlib import Path

from p2pdeb import synth
from p2pdeb.classify import default_signatures
from p2pdeb.pcap_io import PcapHeader, write_pcap


def frames_for(args):
    sigs = default_signatures()
    if args.kind == "mixed":
        return synth.mixed_corpus(args.seed, args.packets, sigs)
    if args.kind == "labelled":
        # --packets messages of each protocol plus ten times as many negatives
        return [f for f, _ in synth.labelled_p2p_corpus(args.seed, args.packets, 10 * args.packets, sigs)]
    if args.kind == "planted":
        return synth.planted_prefix_corpus(args.seed, bytes.fromhex(args.prefix), args.occurrences,
                                           args.endpoints, args.packets)
    return synth.fixed_size_frames(args.packets, args.payload, args.seed)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--kind", choices=("mixed", "labelled", "planted", "fixed"), default="mixed")
    ap.add_argument("--packets", type=int, default=10_000, help="corpus size (noise packets for 'planted')")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--payload", type=int, default=64, help="payload bytes for 'fixed'")
    ap.add_argument("--prefix", default="c0ffee5a1700d00d", help="hex prefix for 'planted'")
    ap.add_argument("--occurrences", type=int, default=200)
    ap.add_argument("--endpoints", type=int, default=20)
    ap.add_argument("--byte-order", choices=("native", "swapped"), default="native")
    ap.add_argument("--nanosecond", action="store_true")
    args = ap.parse_args(argv)

    header = PcapHeader(byte_order=args.byte_order,
                        timestamp_unit="nanosecond" if args.nanosecond else "microsecond")
    frames = frames_for(args)
    Path(args.out).write_bytes(write_pcap(header, synth.records_from_frames(frames)))
    print(f"wrote {len(frames)} packets to {args.out}")


if __name__ == "__main__":
    main()
