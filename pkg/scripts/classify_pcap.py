"""Batch-classify a pcap file and print per-category counts as CSV.

Usage: python scripts/classify_pcap.py capture.pcap [--signatures FILE]

Runs outside any capture pipeline, so its output can be compared with the
statistics a streamed capture stored in a bag.
"""
import argparse
import sys
from collections import Counter
from pathlib import Path

from p2pdeb.classify import classify_packet, default_signatures, load_signatures
from p2pdeb.pcap_io import PcapReader, decode_frame


def classify_file(path, signatures):
    packets, octets = Counter(), Counter()
    with open(path, "rb") as fh:
        reader = PcapReader(fh)
        link = reader.header.link_type
        for rec in reader:
            flow, start, end = decode_frame(rec, link)
            cat = classify_packet(rec.payload[start:end], flow, signatures).category
            packets[cat] += 1
            octets[cat] += len(rec.payload)
    return packets, octets


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("pcap")
    ap.add_argument("--signatures")
    args = ap.parse_args(argv)
    sigs = load_signatures(Path(args.signatures).read_text()) if args.signatures else default_signatures()
    packets, octets = classify_file(args.pcap, sigs)
    out = sys.stdout
    out.write("category,packets,bytes\n")
    for cat in sorted(packets):
        out.write(f"{cat},{packets[cat]},{octets[cat]}\n")


if __name__ == "__main__":
    main()
