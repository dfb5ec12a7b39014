"""Line-delimited JSON files with a one-line format header."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, fmt: str, records, **header) -> None:
    head = {"format": fmt, "version": FORMAT_VERSION, **header}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(head) + "\n")
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def read_jsonl(path, fmt: str):
    """Return ``(header, [(lineno, record), ...])``.

    An empty file is accepted and yields no records.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        return {"format": fmt, "version": FORMAT_VERSION}, []
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line 1: bad header: {exc}") from None
    if not isinstance(head, dict) or head.get("format") != fmt:
        raise ValueError(f"{path}: expected format {fmt!r}, got {head!r}")
    if head.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {head.get('version')!r}")
    out = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append((i, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {i}: {exc}") from None
    return head, out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
