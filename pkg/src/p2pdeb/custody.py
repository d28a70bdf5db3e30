"""Hash-chained chain-of-custody log.

Each stored record carries ``link = SHA256(previous_link || record_bytes)``,
seeded by a bag digest. Actions taken before a bag is sealed are kept in
the bag footer; actions on a sealed bag go to an append-only sidecar file
``<bag>.audit`` seeded by the bag's final chain hash.
"""
from __future__ import annotations

import fcntl
import getpass
import hashlib
import os
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Optional

from .errors import AuditError

AUDIT_MAGIC = b"P2PDEBAU"
DIGEST_LEN = 32

ACTIONS = (
    "created",
    "segment_appended",
    "sealed",
    "verified",
    "split",
    "merged",
    "exported",
    "inspected",
    "override_used",
)
_ACTION_CODE = {name: i for i, name in enumerate(ACTIONS)}

OPERATOR_ENV = "P2PDEB_OPERATOR"
CLOCK_REGRESSION = "clock-regression"

_FIXED = struct.Struct("<QB32s")


def now_us() -> int:
    return time.time_ns() // 1000


def default_actor(flag: Optional[str] = None) -> str:
    if flag:
        return flag
    env = os.environ.get(OPERATOR_ENV)
    if env:
        return env
    try:
        return getpass.getuser()
    except Exception:
        return "unknown"


@dataclass(frozen=True)
class AuditRecord:
    timestamp: int
    actor: str
    action: str
    object_digest: bytes
    note: str = ""

    def __post_init__(self):
        if self.action not in _ACTION_CODE:
            raise ValueError(f"unknown audit action {self.action!r}")
        if len(self.object_digest) != DIGEST_LEN:
            raise ValueError("object_digest must be 32 bytes")

    def encode(self) -> bytes:
        actor = self.actor.encode("utf-8")
        note = self.note.encode("utf-8")
        return (
            _FIXED.pack(self.timestamp, _ACTION_CODE[self.action], self.object_digest)
            + struct.pack("<I", len(actor)) + actor
            + struct.pack("<I", len(note)) + note
        )

    @classmethod
    def decode(cls, data: bytes) -> "AuditRecord":
        try:
            ts, code, digest = _FIXED.unpack_from(data, 0)
            off = _FIXED.size
            (alen,) = struct.unpack_from("<I", data, off)
            off += 4
            actor = data[off : off + alen]
            off += alen
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            note = data[off : off + nlen]
            off += nlen
        except struct.error as exc:
            raise AuditError(f"truncated audit record: {exc}") from None
        if off != len(data) or len(actor) != alen or len(note) != nlen:
            raise AuditError("audit record length mismatch")
        if code >= len(ACTIONS):
            raise AuditError(f"unknown audit action code {code}")
        return cls(ts, actor.decode("utf-8"), ACTIONS[code], digest, note.decode("utf-8"))


def link_hash(previous: bytes, record: AuditRecord) -> bytes:
    return hashlib.sha256(previous + record.encode()).digest()


class AuditLog:
    def __init__(self, seed: bytes, records=(), links=()):
        if len(seed) != DIGEST_LEN:
            raise ValueError("audit seed must be 32 bytes")
        self.seed = seed
        self.records: List[AuditRecord] = list(records)
        self.links: List[bytes] = list(links)

    def __len__(self):
        return len(self.records)

    @property
    def head(self) -> bytes:
        return self.links[-1] if self.links else self.seed

    def append(self, record: AuditRecord) -> AuditRecord:
        if self.records and record.timestamp < self.records[-1].timestamp:
            note = CLOCK_REGRESSION if not record.note else f"{record.note}; {CLOCK_REGRESSION}"
            record = replace(record, timestamp=self.records[-1].timestamp, note=note)
        self.links.append(link_hash(self.head, record))
        self.records.append(record)
        return record

    def encode(self) -> bytes:
        parts = [AUDIT_MAGIC, self.seed]
        for rec, link in zip(self.records, self.links):
            body = rec.encode()
            parts.append(struct.pack("<I", len(body)))
            parts.append(body)
            parts.append(link)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "AuditLog":
        if data[:8] != AUDIT_MAGIC or len(data) < 8 + DIGEST_LEN:
            raise AuditError("not an audit log (bad magic or short)")
        log = cls(data[8 : 8 + DIGEST_LEN])
        off = 8 + DIGEST_LEN
        while off < len(data):
            if off + 4 > len(data):
                raise AuditError(f"truncated audit log at offset {off}")
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            end = off + n + DIGEST_LEN
            if end > len(data):
                raise AuditError(f"truncated audit log at offset {off - 4}")
            log.records.append(AuditRecord.decode(data[off : off + n]))
            log.links.append(data[off + n : end])
            off = end
        return log


def append_audit(log: AuditLog, record: AuditRecord) -> AuditLog:
    log.append(record)
    return log


class AuditVerification(NamedTuple):
    ok: bool
    first_bad_index: Optional[int] = None
    reason: str = ""


def verify_audit(log: AuditLog, seed: Optional[bytes] = None) -> AuditVerification:
    if seed is not None and seed != log.seed:
        return AuditVerification(False, 0 if log.records else None, "seed mismatch")
    prev = log.seed
    last_ts = None
    for i, (rec, link) in enumerate(zip(log.records, log.links)):
        expect = link_hash(prev, rec)
        if expect != link:
            return AuditVerification(False, i, "link hash mismatch")
        if last_ts is not None and rec.timestamp < last_ts:
            return AuditVerification(False, i, "timestamp regression")
        prev, last_ts = link, rec.timestamp
    if len(log.records) != len(log.links):
        return AuditVerification(False, min(len(log.records), len(log.links)), "record/link count mismatch")
    return AuditVerification(True)


def format_log(log: AuditLog) -> str:
    lines = []
    for i, rec in enumerate(log.records):
        lines.append(
            f"{i:>4}  {rec.timestamp}  {rec.action:<16} actor={rec.actor} "
            f"digest={rec.object_digest.hex()[:16]} {rec.note}".rstrip()
        )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# sidecar file


def sidecar_path(bag_path) -> Path:
    p = Path(bag_path)
    return p.with_name(p.name + ".audit")


def read_sidecar(path) -> AuditLog:
    return AuditLog.decode(Path(path).read_bytes())


def append_sidecar(path, seed: bytes, record: AuditRecord) -> AuditRecord:
    """Append ``record`` to the sidecar at ``path``, creating it if needed.

    The file is only ever extended, under an exclusive advisory lock.
    """
    fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
    with os.fdopen(fd, "r+b") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.seek(0)
            existing = fh.read()
            if existing:
                log = AuditLog.decode(existing)
                if log.seed != seed:
                    raise AuditError(f"{path}: sidecar belongs to a different bag (seed mismatch)")
            else:
                log = AuditLog(seed)
                fh.write(AUDIT_MAGIC + seed)
            stored = log.append(record)
            body = stored.encode()
            fh.write(struct.pack("<I", len(body)) + body + log.links[-1])
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    return stored
