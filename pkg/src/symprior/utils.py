"""Seed derivation and artifact I/O helpers."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

SCHEMA_VERSION = 1


def derive_seed(seed: int, *parts) -> int:
    """64-bit seed from a parent seed and a path of names/indices."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "), allow_nan=True)


def write_jsonl(path, records: Iterable[dict], kind: str | None = None, **header) -> None:
    """Write line-delimited JSON; with ``kind`` a schema header line comes first."""
    lines = []
    if kind is not None:
        lines.append(dumps({"schema_version": SCHEMA_VERSION, "kind": kind, **header}))
    lines.extend(dumps(r) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    """Return (header or None, records)."""
    header = None
    records = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if i == 0 and "schema_version" in rec and "kind" in rec:
                header = rec
            else:
                records.append(rec)
    return header, records


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
