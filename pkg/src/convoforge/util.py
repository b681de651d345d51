"""Small shared helpers: seed derivation, canonical JSON, digests, tolerant JSON parsing."""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Iterable


class ConvoforgeError(Exception):
    """Base class for all package errors."""


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from arbitrary printable parts (platform independent)."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_if_changed(path: str | os.PathLike, data: bytes) -> bool:
    """Write ``data`` unless the file already holds exactly these bytes.

    Returns True when a write happened.
    """
    path = Path(path)
    if path.exists() and path.read_bytes() == data:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return True


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def dump_jsonl(records: Iterable[Any]) -> bytes:
    return "".join(canonical_json(r) + "\n" for r in records).encode("utf-8")


def read_jsonl(path: str | os.PathLike) -> list[Any]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """Parse the first JSON object/array in a model reply.

    Accepts bare JSON, fenced ```json blocks, or JSON embedded in prose.
    Raises ValueError when nothing parses.
    """
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    candidates.append(text)
    decoder = json.JSONDecoder()
    for chunk in candidates:
        chunk = chunk.strip()
        for i, ch in enumerate(chunk):
            if ch not in "{[":
                continue
            try:
                obj, _ = decoder.raw_decode(chunk[i:])
            except json.JSONDecodeError:
                continue
            return obj
    raise ValueError("no JSON object found in reply")
