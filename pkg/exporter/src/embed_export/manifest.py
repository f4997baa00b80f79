"""Line-delimited JSON manifest: one labeled image per line.

Each record: {"image": <path>, "query": <string>, "score": <real>,
optional "bin": <int >= 0>}. Relative image paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


class ManifestError(Exception):
    """Malformed manifest line or record, labeled with its line number."""


@dataclass
class ManifestRow:
    image: Path
    query: str
    score: float
    bin: int | None = None


def load_manifest(path) -> list:
    """Parse and validate every row; queries keep first-appearance order."""
    path = Path(path)
    base = path.parent
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: not valid JSON ({exc})")
        if not isinstance(rec, dict):
            raise ManifestError(f"line {lineno}: expected an object")
        unknown = set(rec) - {"image", "query", "score", "bin"}
        if unknown:
            raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
        try:
            image = Path(rec["image"])
            query = rec["query"]
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: bad record ({exc})")
        if not isinstance(query, str) or not query:
            raise ManifestError(f"line {lineno}: query must be a nonempty string")
        if not math.isfinite(score):
            raise ManifestError(f"line {lineno}: score must be finite")
        b = rec.get("bin")
        if b is not None and (not isinstance(b, int) or isinstance(b, bool) or b < 0):
            raise ManifestError(f"line {lineno}: bin must be a non-negative integer")
        if not image.is_absolute():
            image = base / image
        rows.append(ManifestRow(image=image, query=query, score=score, bin=b))
    if not rows:
        raise ManifestError("manifest holds no records")
    return rows
