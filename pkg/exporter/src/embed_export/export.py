"""Export orchestration: encode manifest rows, skip unreadables, write.

Unreadable or unembeddable images are skipped with a warning and recorded
in a sidecar report (<out>.skipped.json) instead of failing the whole
export; an export where every image fails is an error.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .manifest import load_manifest
from .writer import ExportError, ItemEntry, QueryEntry, write_embedding_file


@dataclass
class ExportResult:
    out_path: Path
    n_items: int
    n_queries: int
    skipped: list  # [{"image", "reason"}]
    sidecar_path: Path | None


def export(manifest_path, out_path, backbone, precision: int = 4,
           warn_stream=None) -> ExportResult:
    """Encode every manifest row with the backbone and write one file."""
    warn_stream = warn_stream if warn_stream is not None else sys.stderr
    rows = load_manifest(manifest_path)
    out_path = Path(out_path)

    query_ids = {}
    queries = []
    for row in rows:
        if row.query not in query_ids:
            qid = len(query_ids)
            query_ids[row.query] = qid
            queries.append(QueryEntry(query_id=qid, prompt=row.query,
                                      tokens=backbone.encode_text(row.query)))

    items = []
    skipped = []
    for item_id, row in enumerate(rows):
        try:
            with Image.open(row.image) as img:
                patches = backbone.encode_image(img)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            reason = f"{type(exc).__name__}: {exc}"
            skipped.append({"image": str(row.image), "reason": reason})
            print(f"warning: skipping {row.image}: {reason}", file=warn_stream)
            continue
        items.append(ItemEntry(item_id=item_id, query_id=query_ids[row.query],
                               patches=patches, score=row.score, bin=row.bin))

    if not items:
        raise ExportError("no image in the manifest could be embedded")
    write_embedding_file(out_path, p=backbone.patch_tokens, d=backbone.dim,
                         t=backbone.text_tokens, queries=queries, items=items,
                         precision=precision)
    sidecar = None
    if skipped:
        sidecar = out_path.with_name(out_path.name + ".skipped.json")
        sidecar.write_text(json.dumps(skipped, indent=2) + "\n")
    return ExportResult(out_path=out_path, n_items=len(items),
                        n_queries=len(queries), skipped=skipped,
                        sidecar_path=sidecar)
