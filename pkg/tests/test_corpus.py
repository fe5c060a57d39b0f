import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from pairmae.corpus import (
    ClipRecord,
    Manifest,
    ManifestError,
    SynthSpec,
    decode_frame,
    generate_synthetic,
    load_manifest,
    pack_directory,
)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestGenerateSynthetic:
    def test_identical_seed_identical_bytes(self, tmp_path):
        spec = SynthSpec(num_videos=3, num_images=2, frames_per_video=4, seed=7)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_counts_preserved(self, tmp_path):
        spec = SynthSpec(num_videos=8, num_images=3, frames_per_video=16, seed=1)
        manifest = generate_synthetic(spec, tmp_path)
        videos = manifest.by_kind("video")
        assert len(videos) == 8
        assert all(r.num_frames == 16 for r in videos)
        assert len(manifest.by_kind("image")) == 3

    def test_label_range_matches_motion_classes(self, tmp_path):
        spec = SynthSpec(
            num_videos=12, num_images=0, frames_per_video=4,
            motion_classes=("left", "right"), seed=5,
        )
        manifest = generate_synthetic(spec, tmp_path)
        assert manifest.num_classes == 2
        assert {r.label for r in manifest.records} <= {0, 1}

    def test_distinct_motion_classes_differ_somewhere(self, tmp_path):
        spec = SynthSpec(num_videos=12, num_images=0, frames_per_video=6, seed=3)
        manifest = generate_synthetic(spec, tmp_path)
        by_label = {}
        for rec in manifest.records:
            by_label.setdefault(rec.label, rec)
        recs = list(by_label.values())
        for a in recs:
            for b in recs:
                if a.label == b.label:
                    continue
                diffs = [
                    np.abs(
                        decode_frame(manifest.frame_path(a, t))
                        - decode_frame(manifest.frame_path(b, t))
                    ).max()
                    for t in range(min(a.num_frames, b.num_frames))
                ]
                assert max(diffs) > 0.05

    def test_round_trip_all_frames_decode(self, tmp_path):
        spec = SynthSpec(num_videos=2, num_images=2, frames_per_video=3, seed=9)
        generate_synthetic(spec, tmp_path)
        manifest = load_manifest(tmp_path / "manifest.json")
        for rec in manifest.records:
            for t in range(rec.num_frames):
                frame = decode_frame(manifest.frame_path(rec, t))
                assert frame.shape == (rec.height, rec.width, 3)
                assert frame.min() >= 0.0 and frame.max() <= 1.0

    def test_canvas_patch_mismatch_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            SynthSpec(canvas=60, patch_side=8)

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError, match="frames_per_video"):
            SynthSpec(frames_per_video=1)


class TestManifestValidation:
    def test_missing_frame_names_path(self, tmp_path):
        spec = SynthSpec(num_videos=1, num_images=0, frames_per_video=3, seed=2)
        manifest = generate_synthetic(spec, tmp_path)
        victim = manifest.frame_path(manifest.records[0], 1)
        victim.unlink()
        with pytest.raises(ManifestError, match=str(victim)):
            load_manifest(tmp_path / "manifest.json")

    def test_duplicate_id_names_id(self, tmp_path):
        spec = SynthSpec(num_videos=1, num_images=1, frames_per_video=2, seed=2)
        generate_synthetic(spec, tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["records"][1]["id"] = doc["records"][0]["id"]
        doc["records"][1]["kind"] = doc["records"][0]["kind"]
        doc["records"][1]["frames"] = doc["records"][0]["frames"]
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match=doc["records"][0]["id"]):
            load_manifest(tmp_path / "manifest.json")

    def test_parse_error(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(ManifestError, match="parse"):
            load_manifest(path)

    def test_image_with_many_frames_rejected(self):
        with pytest.raises(ManifestError, match="image records"):
            ClipRecord("x", "image", ("a.png", "b.png"), 0, 8, 8)

    def test_label_out_of_range_rejected(self):
        rec = ClipRecord("x", "image", ("a.png",), 7, 8, 8)
        with pytest.raises(ManifestError, match="label"):
            Manifest((rec,), 4, "train", Path("."))


class TestDecodeFrame:
    def test_black_and_white(self, tmp_path):
        black = tmp_path / "black.png"
        white = tmp_path / "white.png"
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(black)
        Image.fromarray(np.full((8, 8, 3), 255, dtype=np.uint8)).save(white)
        assert decode_frame(black).max() == 0.0
        assert decode_frame(white).min() == 1.0

    def test_decode_deterministic(self, tmp_path):
        path = tmp_path / "x.png"
        rng = np.random.default_rng(0)
        Image.fromarray(rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)).save(path)
        np.testing.assert_array_equal(decode_frame(path), decode_frame(path))

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png")
        with pytest.raises(ManifestError, match="decode"):
            decode_frame(path)


class TestPackDirectory:
    def test_pack_round_trip(self, tmp_path):
        spec = SynthSpec(num_videos=2, num_images=1, frames_per_video=3, seed=4)
        manifest = generate_synthetic(spec, tmp_path / "corpus")
        labels = {r.id: r.label for r in manifest.records}
        out = tmp_path / "corpus" / "packed.json"
        packed = pack_directory(tmp_path / "corpus" / "frames", out, labels=labels)
        assert len(packed.records) == 3
        reloaded = load_manifest(out)
        kinds = {r.id: r.kind for r in reloaded.records}
        for rec in manifest.records:
            assert kinds[rec.id] == rec.kind

    def test_pack_missing_dir(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            pack_directory(tmp_path / "nope", tmp_path / "m.json")
