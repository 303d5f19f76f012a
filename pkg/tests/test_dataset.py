"""Dataset layout rules, codecs, and the synthetic generator contract."""

import numpy as np
import pytest

from agnet.dataset import (
    decode_image,
    encode_png,
    generate_synthetic,
    ingest_dataset,
    load_split,
    synth_image,
)
from agnet.errors import DatasetError, ImageError
from agnet.keypoints import DetectorConfig, detect_keypoints, to_grayscale


def write_image(path, rng, size=40):
    path.parent.mkdir(parents=True, exist_ok=True)
    encode_png(path, rng.uniform(size=(size, size, 3)))


def make_layout(root, classes=("a", "b"), per_split=2):
    rng = np.random.default_rng(0)
    for split in ("train", "test"):
        for name in classes:
            for i in range(per_split):
                write_image(root / split / name / f"{i}.png", rng)


class TestIngest:
    def test_two_class_layout(self, tmp_path):
        make_layout(tmp_path)
        manifest = ingest_dataset(tmp_path)
        assert manifest.classes == ["a", "b"]
        assert len(manifest.train) == 4 and len(manifest.test) == 4
        train_paths = {p for p, _ in manifest.train}
        test_paths = {p for p, _ in manifest.test}
        assert not train_paths & test_paths

    def test_missing_test_directory(self, tmp_path):
        rng = np.random.default_rng(1)
        write_image(tmp_path / "train" / "a" / "0.png", rng)
        with pytest.raises(DatasetError, match="test"):
            ingest_dataset(tmp_path)

    def test_lexicographic_class_order(self, tmp_path):
        make_layout(tmp_path, classes=("zebra", "apple"))
        manifest = ingest_dataset(tmp_path)
        assert manifest.classes == ["apple", "zebra"]
        labels = {p.split("/")[1]: idx for p, idx in manifest.train}
        assert labels["apple"] == 0 and labels["zebra"] == 1

    def test_empty_class_directory(self, tmp_path):
        make_layout(tmp_path)
        (tmp_path / "train" / "c").mkdir()
        (tmp_path / "test" / "c").mkdir()
        with pytest.raises(DatasetError, match="c"):
            ingest_dataset(tmp_path)

    def test_undecodable_file_names_path(self, tmp_path):
        make_layout(tmp_path)
        bad = tmp_path / "train" / "a" / "broken.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(ImageError, match="broken.png"):
            ingest_dataset(tmp_path)

    def test_split_class_mismatch(self, tmp_path):
        make_layout(tmp_path)
        rng = np.random.default_rng(2)
        write_image(tmp_path / "train" / "only_train" / "0.png", rng)
        with pytest.raises(DatasetError, match="only_train"):
            ingest_dataset(tmp_path)

    def test_load_split_roundtrip(self, tmp_path):
        make_layout(tmp_path)
        manifest = ingest_dataset(tmp_path)
        items = load_split(manifest, "train")
        assert len(items) == 4
        assert all(i.image.shape == (40, 40, 3) for i in items)
        assert {i.label for i in items} == {0, 1}


class TestCodecs:
    def test_png_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        quantized = np.round(rng.uniform(size=(16, 12, 3)) * 255) / 255.0
        path = tmp_path / "x.png"
        encode_png(path, quantized)
        back = decode_image(path)
        np.testing.assert_allclose(back, quantized, atol=1e-12)

    def test_ppm_p6_decoding(self, tmp_path):
        pixels = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n3 2\n255\n" + pixels.tobytes())
        got = decode_image(path)
        np.testing.assert_allclose(got, pixels / 255.0, atol=1e-12)


class TestSyntheticGenerator:
    def test_counts_and_ingestability(self, tmp_path):
        manifest = generate_synthetic(tmp_path / "ds", per_class=4, seed=1)
        assert len(manifest.train) == 8
        assert len(manifest.test) == 2
        assert manifest.classes == ["class_0", "class_1"]

    def test_fixed_seed_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_synthetic(a, per_class=2, seed=9)
        generate_synthetic(b, per_class=2, seed=9)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*.png"))
        files_b = sorted(p.relative_to(b) for p in b.rglob("*.png"))
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_every_image_has_enough_keypoints(self, tmp_path):
        manifest = generate_synthetic(tmp_path / "ds", per_class=3, seed=4)
        for rel, _ in manifest.train + manifest.test:
            image = decode_image(manifest.root / rel)
            kps = detect_keypoints(to_grayscale(image), DetectorConfig())
            assert len(kps) >= 8, rel

    def test_class_signal_is_spatial(self):
        rng = np.random.default_rng(5)
        gray0 = to_grayscale(synth_image(rng, 64, 0)).pixels
        gray1 = to_grayscale(synth_image(rng, 64, 1)).pixels
        # Bright mass concentrates in the class quadrant.
        assert gray0[:32, :32].sum() > gray0[32:, 32:].sum()
        assert gray1[32:, 32:].sum() > gray1[:32, :32].sum()
