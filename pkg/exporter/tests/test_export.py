"""Exporter: manifest handling, deterministic export, consumer round-trip."""

import json
import struct
import subprocess
import sys
import zlib

import numpy as np
import pytest
from PIL import Image

from embed_export import backbone as bb
from embed_export import cli, export, manifest, writer


def _make_images(tmp_path, n, seed=0, size=(96, 64)):
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        p = tmp_path / f"img{i}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def _write_manifest(tmp_path, rows, name="manifest.jsonl"):
    path = tmp_path / name
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture()
def ten_image_manifest(tmp_path):
    images = _make_images(tmp_path, 10, seed=4)
    rows = [{"image": p.name, "query": "rank by visual quality",
             "score": float(i), "bin": i % 5} for i, p in enumerate(images)]
    return _write_manifest(tmp_path, rows), tmp_path


def test_manifest_parsing_and_errors(tmp_path):
    images = _make_images(tmp_path, 2)
    good = _write_manifest(tmp_path, [
        {"image": images[0].name, "query": "q", "score": 1.5},
        {"image": str(images[1]), "query": "q", "score": 2.0, "bin": 3}])
    rows = manifest.load_manifest(good)
    assert len(rows) == 2
    assert rows[0].image == images[0] and rows[0].bin is None
    assert rows[1].bin == 3

    for bad_rows, match in [
        ([{"image": "x.png", "query": "", "score": 1}], "query"),
        ([{"image": "x.png", "query": "q", "score": float("nan")}], "finite"),
        ([{"image": "x.png", "query": "q", "score": 1, "bin": -1}], "bin"),
        ([{"image": "x.png", "query": "q", "score": 1, "extra": 1}], "unknown"),
    ]:
        bad = _write_manifest(tmp_path, bad_rows, name="bad.jsonl")
        with pytest.raises(manifest.ManifestError, match=match):
            manifest.load_manifest(bad)
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(manifest.ManifestError):
        manifest.load_manifest(tmp_path / "empty.jsonl")
    (tmp_path / "notjson.jsonl").write_text("{nope\n")
    with pytest.raises(manifest.ManifestError, match="line 1"):
        manifest.load_manifest(tmp_path / "notjson.jsonl")


def test_patch_stats_backbone_geometry():
    b = bb.PatchStatsBackbone(resolution=320, dim=48, text_tokens=6)
    assert b.patch_tokens == 100  # (320 / 32)^2
    img = Image.new("RGB", (50, 70), (10, 200, 30))
    z = b.encode_image(img)
    assert z.shape == (100, 48) and z.dtype == np.float32
    w = b.encode_text("sort by sharpness")
    assert w.shape == (6, 48) and w.dtype == np.float32
    # same input, same bytes; different words, different tokens
    assert np.array_equal(w, b.encode_text("sort by sharpness"))
    assert not np.array_equal(w, b.encode_text("sort by noise"))
    with pytest.raises(ValueError):
        bb.PatchStatsBackbone(resolution=100)


def test_writer_layout_matches_documentation(tmp_path):
    tokens = np.arange(6, dtype=np.float32).reshape(2, 3)
    patches = np.arange(12, dtype=np.float32).reshape(4, 3)
    out = tmp_path / "tiny.emb"
    writer.write_embedding_file(
        out, p=4, d=3, t=2,
        queries=[writer.QueryEntry(0, "q", tokens)],
        items=[writer.ItemEntry(7, 0, patches, 2.5, bin=1)])
    raw = out.read_bytes()
    magic, version, prec, p, d, t, n_items, n_queries, crc = \
        struct.unpack("<4sIB3xIIIQQI", raw[:44])
    assert (magic, version, prec) == (b"RKAD", 1, 4)
    assert (p, d, t, n_items, n_queries) == (4, 3, 2, 1, 1)
    body = raw[44:]
    assert crc == zlib.crc32(body)
    qid, plen = struct.unpack_from("<II", body, 0)
    assert (qid, plen) == (0, 1) and body[8:9] == b"q"
    got_tokens = np.frombuffer(body, dtype="<f4", count=6, offset=9)
    assert np.array_equal(got_tokens.reshape(2, 3), tokens)
    item_off = 9 + 24
    item_id, item_qid = struct.unpack_from("<QI", body, item_off)
    assert (item_id, item_qid) == (7, 0)
    got_patches = np.frombuffer(body, dtype="<f4", count=12, offset=item_off + 12)
    assert np.array_equal(got_patches.reshape(4, 3), patches)
    score_off = item_off + 12 + 48
    (score,) = struct.unpack_from("<d", body, score_off)
    assert score == 2.5
    flag, bin_val = struct.unpack_from("<Bi", body, score_off + 8)
    assert (flag, bin_val) == (1, 1)
    assert len(body) == score_off + 8 + 5  # fully accounted for


def test_writer_rejects_bad_geometry(tmp_path):
    tokens = np.zeros((2, 3), dtype=np.float32)
    with pytest.raises(writer.ExportError):
        writer.write_embedding_file(tmp_path / "x", p=4, d=3, t=2,
                                    queries=[writer.QueryEntry(0, "q", tokens)],
                                    items=[writer.ItemEntry(0, 5, np.zeros((4, 3)), 1.0)])
    with pytest.raises(writer.ExportError):
        writer.write_embedding_file(tmp_path / "x", p=4, d=3, t=3,
                                    queries=[writer.QueryEntry(0, "q", tokens)],
                                    items=[])


def test_ten_image_export_round_trip(ten_image_manifest):
    man, tmp_path = ten_image_manifest
    b = bb.PatchStatsBackbone(resolution=64, dim=12, text_tokens=4)
    res = export.export(man, tmp_path / "out.emb", b)
    assert res.n_items == 10 and res.n_queries == 1 and not res.skipped

    # the primary package must accept the file; this is the cross-package
    # contract check, so the consumer is imported only inside the test
    from rankadapt import datastore
    data = datastore.read_file(res.out_path)
    assert len(data) == 10
    assert (data.patch_tokens, data.dim, data.text_tokens) == (4, 12, 4)
    assert data.queries[0].prompt == "rank by visual quality"
    assert [it.score for it in data.items] == [float(i) for i in range(10)]
    assert [it.bin for it in data.items] == [i % 5 for i in range(10)]
    assert all(np.all(np.isfinite(it.patches)) for it in data.items)


def test_reexport_is_deterministic(ten_image_manifest):
    man, tmp_path = ten_image_manifest
    b = bb.PatchStatsBackbone(resolution=64, dim=12, text_tokens=4)
    export.export(man, tmp_path / "a.emb", b)
    export.export(man, tmp_path / "b.emb", b)
    assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()


def test_duplicate_image_two_queries(tmp_path):
    img = _make_images(tmp_path, 1)[0]
    man = _write_manifest(tmp_path, [
        {"image": img.name, "query": "rank by quality", "score": 1.0},
        {"image": img.name, "query": "rank by beauty", "score": 2.0}])
    b = bb.PatchStatsBackbone(resolution=64, dim=8, text_tokens=3)
    res = export.export(man, tmp_path / "out.emb", b)
    assert res.n_items == 2 and res.n_queries == 2
    from rankadapt import datastore
    data = datastore.read_file(res.out_path)
    assert len(data.queries) == 2
    assert np.array_equal(data.items[0].patches, data.items[1].patches)


def test_unreadable_images_skipped_with_sidecar(tmp_path, capsys):
    images = _make_images(tmp_path, 2)
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"not an image at all")
    man = _write_manifest(tmp_path, [
        {"image": images[0].name, "query": "q", "score": 1.0},
        {"image": "broken.png", "query": "q", "score": 2.0},
        {"image": "missing.png", "query": "q", "score": 3.0},
        {"image": images[1].name, "query": "q", "score": 4.0}])
    b = bb.PatchStatsBackbone(resolution=64, dim=8, text_tokens=3)
    res = export.export(man, tmp_path / "out.emb", b, warn_stream=sys.stderr)
    assert res.n_items == 2
    assert len(res.skipped) == 2
    sidecar = json.loads(res.sidecar_path.read_text())
    assert {s["image"].rsplit("/", 1)[-1] for s in sidecar} == \
        {"broken.png", "missing.png"}
    from rankadapt import datastore
    assert len(datastore.read_file(tmp_path / "out.emb")) == 2
    man_all_bad = _write_manifest(tmp_path, [
        {"image": "missing.png", "query": "q", "score": 1.0}], name="bad.jsonl")
    with pytest.raises(writer.ExportError):
        export.export(man_all_bad, tmp_path / "none.emb", b)


def test_cli_export_and_primary_evaluate_end_to_end(ten_image_manifest):
    man, tmp_path = ten_image_manifest
    out = tmp_path / "cli.emb"
    rc = cli.main(["export", "--manifest", str(man), "--out", str(out),
                   "--resolution", "64", "--dim", "12", "--text-tokens", "4"])
    assert rc == 0 and out.exists()

    # full consumer path: train 0 steps via the primary CLI, then evaluate
    ckpt = tmp_path / "m.rkcp"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 0, "adapter": {
        "adapter_dim": 8, "prompt_tokens": 2, "relational_tokens": 3,
        "encoder_blocks": 1, "reg_head_blocks": 1, "rank_head_blocks": 1}}))
    train = subprocess.run(
        [sys.executable, "-m", "rankadapt.cli", "train", "--config", str(cfg),
         "--data", str(out), "--ckpt", str(ckpt)],
        capture_output=True, text=True)
    assert train.returncode == 0, train.stderr
    ev = subprocess.run(
        [sys.executable, "-m", "rankadapt.cli", "evaluate", "--ckpt", str(ckpt),
         "--data", str(out)],
        capture_output=True, text=True)
    assert ev.returncode == 0, ev.stderr
    report = json.loads(ev.stdout)
    assert report["pooled"]["n_items"] == 10
    assert report["pooled"]["mae"] is not None  # bins made it through


def test_cli_error_paths(tmp_path, capsys):
    rc = cli.main(["export", "--manifest", str(tmp_path / "none.jsonl"),
                   "--out", str(tmp_path / "x.emb")])
    assert rc == 2
    rc = cli.main(["export", "--manifest", str(tmp_path / "none.jsonl"),
                   "--out", str(tmp_path / "x.emb"), "--backbone", "bogus"])
    assert rc == 2
