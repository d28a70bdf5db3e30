"""Canonical key=value text blocks.

Sorted keys, one ``key=value`` pair per line, UTF-8. Backslash and newline
in values are escaped as ``\\\\`` and ``\\n``. Keys may not contain ``=``,
newline or backslash.
"""
from __future__ import annotations

from typing import Dict, Mapping


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(value: str) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\":
            if i + 1 >= len(value):
                raise ValueError("dangling backslash in value")
            nxt = value[i + 1]
            if nxt == "n":
                out.append("\n")
            elif nxt == "\\":
                out.append("\\")
            else:
                raise ValueError(f"unknown escape \\{nxt}")
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def check_key(key: str) -> None:
    if not key or "=" in key or "\n" in key or "\\" in key:
        raise ValueError(f"invalid key {key!r}")


def dumps(mapping: Mapping[str, object]) -> bytes:
    lines = []
    for key in sorted(mapping):
        check_key(key)
        lines.append(f"{key}={_escape(str(mapping[key]))}\n")
    return "".join(lines).encode("utf-8")


def loads(data: bytes) -> Dict[str, str]:
    text = data.decode("utf-8")
    result: Dict[str, str] = {}
    if not text:
        return result
    if not text.endswith("\n"):
        raise ValueError("key-value block must end with a newline")
    for lineno, line in enumerate(text[:-1].split("\n"), 1):
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: missing '='")
        check_key(key)
        if key in result:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        result[key] = _unescape(value)
    return result
