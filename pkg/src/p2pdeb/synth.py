"""Synthetic traffic for tests, benchmarks and experiments.

Frames are Ethernet II / IPv4 / TCP or UDP with valid IPv4 header
checksums (transport checksums left zero). Message builders follow the
public wire layouts of each protocol.
"""
from __future__ import annotations

import random
import struct
from typing import Iterable, List, Tuple

from .classify import SignatureSet
from .pcap_io import PacketRecord

MAC_A = bytes.fromhex("020000000001")
MAC_B = bytes.fromhex("020000000002")


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4_frame(src: str, dst: str, sport: int, dport: int, payload: bytes,
               transport: str = "tcp") -> bytes:
    if transport == "tcp":
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, 0x18, 65535, 0, 0)
        proto = 6
    elif transport == "udp":
        l4 = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
        proto = 17
    else:
        raise ValueError(transport)
    total = 20 + len(l4) + len(payload)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, proto, 0,
                     bytes(map(int, src.split("."))), bytes(map(int, dst.split("."))))
    ip = ip[:10] + struct.pack("!H", _ip_checksum(ip)) + ip[12:]
    frame = MAC_A + MAC_B + b"\x08\x00" + ip + l4 + payload
    if len(frame) < 60:
        frame += bytes(60 - len(frame))  # Ethernet minimum frame padding
    return frame


# ---------------------------------------------------------------------------
# protocol messages


def bt_handshake(info_hash: bytes, peer_id: bytes, reserved: bytes = bytes(8)) -> bytes:
    return b"\x13BitTorrent protocol" + reserved + info_hash + peer_id


def dht_ping_query(node_id: bytes, txn: bytes = b"aa") -> bytes:
    return (b"d1:ad2:id20:" + node_id + b"e1:q4:ping1:t"
            + str(len(txn)).encode() + b":" + txn + b"1:y1:qe")


def ed2k_hello(user_hash: bytes, client_id: int, port: int,
               server_ip: int = 0, server_port: int = 0) -> bytes:
    body = (b"\x01" + b"\x10" + user_hash + struct.pack("<IH", client_id, port)
            + struct.pack("<I", 0)  # tag count
            + struct.pack("<IH", server_ip, server_port))
    return b"\xe3" + struct.pack("<I", len(body)) + body


def gnutella_connect(user_agent: str = "LimeWire/4.12") -> bytes:
    return f"GNUTELLA CONNECT/0.6\r\nUser-Agent: {user_agent}\r\n\r\n".encode()


def structured_negative(rng: random.Random, signatures: SignatureSet,
                        min_len: int = 1, max_len: int = 200) -> bytes:
    """Random payload that carries no signature pattern at its anchor."""
    while True:
        data = rng.randbytes(rng.randint(min_len, max_len))
        if not any(_pattern_at_anchor(s, data) for s in signatures):
            return data


def _pattern_at_anchor(sig, data: bytes) -> bool:
    base = sig.anchor_offset
    if len(data) < base + len(sig.pattern):
        return False
    return all(data[base + off : base + off + len(chunk)] == chunk for off, chunk in sig.runs)


# ---------------------------------------------------------------------------
# corpora


def random_ip(rng: random.Random, net: str = "10") -> str:
    return f"{net}.{rng.randint(0, 255)}.{rng.randint(0, 255)}.{rng.randint(1, 254)}"


def records_from_frames(frames: Iterable[bytes], start_ts: int = 1_700_000_000,
                        step_us: int = 137) -> List[PacketRecord]:
    out = []
    t = start_ts * 1_000_000
    for frame in frames:
        out.append(PacketRecord(t // 1_000_000, t % 1_000_000, len(frame), frame))
        t += step_us
    return out


def labelled_p2p_corpus(seed: int, n_each: int, n_negative: int,
                        signatures: SignatureSet) -> List[Tuple[bytes, str]]:
    """(frame, expected category) pairs: BitTorrent handshakes, eDonkey hellos,
    Gnutella connects and structured negatives, shuffled."""
    rng = random.Random(seed)
    items: List[Tuple[bytes, str]] = []
    for _ in range(n_each):
        items.append((ipv4_frame(random_ip(rng), random_ip(rng, "192"), rng.randint(1024, 65535), 6881,
                                 bt_handshake(rng.randbytes(20), rng.randbytes(20))), "handshake"))
        items.append((ipv4_frame(random_ip(rng), random_ip(rng, "192"), rng.randint(1024, 65535), 4662,
                                 ed2k_hello(rng.randbytes(16), rng.getrandbits(32), 4662)), "hello"))
        items.append((ipv4_frame(random_ip(rng), random_ip(rng, "192"), rng.randint(1024, 65535), 6346,
                                 gnutella_connect()), "connect"))
    for _ in range(n_negative):
        transport = rng.choice(("tcp", "udp"))
        payload = structured_negative(rng, signatures)
        items.append((ipv4_frame(random_ip(rng), random_ip(rng, "192"), rng.randint(1, 65535),
                                 rng.randint(1, 65535), payload, transport), "unknown"))
    rng.shuffle(items)
    return items


def planted_prefix_corpus(seed: int, prefix: bytes, occurrences: int, endpoints: int,
                          n_noise: int, home: str = "192.168.1.10") -> List[bytes]:
    """UDP frames: ``occurrences`` payloads starting with ``prefix`` spread over
    ``endpoints`` remote peers, mixed with uniform-random payloads from distinct peers."""
    rng = random.Random(seed)
    peers = [(random_ip(rng, "77"), rng.randint(1024, 65535)) for _ in range(endpoints)]
    frames = []
    for i in range(occurrences):
        ip, port = peers[i % endpoints]
        payload = prefix + rng.randbytes(rng.randint(4, 120))
        if rng.random() < 0.5:
            frames.append(ipv4_frame(home, ip, 40000, port, payload, "udp"))
        else:
            frames.append(ipv4_frame(ip, home, port, 40000, payload, "udp"))
    for _ in range(n_noise):
        payload = rng.randbytes(rng.randint(8, 200))
        frames.append(ipv4_frame(home, random_ip(rng, "88"), 40000, rng.randint(1024, 65535), payload, "udp"))
    rng.shuffle(frames)
    return frames


def mixed_corpus(seed: int, n: int, signatures: SignatureSet,
                 p2p_fraction: float = 0.3) -> List[bytes]:
    """Frames mixing known P2P messages, random TCP/UDP payloads and
    non-IP frames (ARP-like) that decode to transport 'other'."""
    rng = random.Random(seed)
    makers = (
        lambda: ipv4_frame(random_ip(rng), random_ip(rng), rng.randint(1024, 65535), 6881,
                           bt_handshake(rng.randbytes(20), rng.randbytes(20))),
        lambda: ipv4_frame(random_ip(rng), random_ip(rng), rng.randint(1024, 65535), 6881,
                           dht_ping_query(rng.randbytes(20)), "udp"),
        lambda: ipv4_frame(random_ip(rng), random_ip(rng), rng.randint(1024, 65535), 4662,
                           ed2k_hello(rng.randbytes(16), rng.getrandbits(32), 4662)),
        lambda: ipv4_frame(random_ip(rng), random_ip(rng), rng.randint(1024, 65535), 6346,
                           gnutella_connect()),
    )
    frames = []
    for _ in range(n):
        r = rng.random()
        if r < p2p_fraction:
            frames.append(rng.choice(makers)())
        elif r < 0.95:
            frames.append(ipv4_frame(random_ip(rng), random_ip(rng), rng.randint(1, 65535),
                                     rng.randint(1, 65535), rng.randbytes(rng.randint(0, 300)),
                                     rng.choice(("tcp", "udp"))))
        else:
            frames.append(MAC_A + MAC_B + b"\x08\x06" + rng.randbytes(46))
    return frames


def fixed_size_frames(n: int, payload_size: int = 64, seed: int = 0) -> List[bytes]:
    rng = random.Random(seed)
    return [ipv4_frame("10.0.0.1", "10.0.0.2", 5000, 6000 + (i % 100), rng.randbytes(payload_size), "udp")
            for i in range(n)]
