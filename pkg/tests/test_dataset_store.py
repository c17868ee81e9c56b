#!/usr/bin/python3
import json
import unittest
import numpy as np
from pathlib import Path
from tempfile import TemporaryDirectory
from src.models import SynthSpec
from src.synthgen import generate_dataset
from src.imaging import RgbImage, save_image

from src.services.dataset_store import (
    MANIFEST_NAME,
    UNLABELED,
    Corpus,
    DatasetError,
    load_dataset,
    write_dataset
)

SPEC = SynthSpec(image_size=60, n_images=8, anomaly_radius=(5, 9), seed=1)

class DatasetStoreTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.records = generate_dataset(SPEC)

    def test_labeled_round_trip(self):
        with TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_dataset(self.records, SPEC, root)
            corpus = load_dataset(root)
            self.assertTrue((root / f"class_{self.records[0].label}" / "img_000000.png").exists())
        self.assertEqual(len(corpus), 8)
        self.assertTrue(corpus.labeled)
        self.assertEqual(corpus.labels.tolist(), [r.label for r in self.records])
        self.assertEqual(corpus.ids.tolist(), list(range(8)))
        self.assertEqual(corpus.anomaly_boxes, [r.anomaly_box for r in self.records])
        for record, image in zip(self.records, corpus.images):
            np.testing.assert_allclose(image.data, record.image.data, atol=1e-12)

    def test_unlabeled_layout_is_flat(self):
        spec = SynthSpec(image_size=60, n_images=8, anomaly_radius=(5, 9), seed=1, labeled=False)
        with TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_dataset(self.records, spec, root)
            self.assertTrue((root / "img_000003.png").exists())
            corpus = load_dataset(root)
        self.assertFalse(corpus.labeled)
        self.assertTrue(np.all(corpus.labels == UNLABELED))

    def test_manifest_is_reproducible(self):
        with TemporaryDirectory() as first, TemporaryDirectory() as second:
            a = write_dataset(self.records, SPEC, Path(first)).read_bytes()
            b = write_dataset(generate_dataset(SPEC), SPEC, Path(second)).read_bytes()
        self.assertEqual(a, b)
        manifest = json.loads(a)
        self.assertEqual(manifest["spec"]["n_images"], 8)
        self.assertEqual(len(manifest["records"]), 8)

    def test_folder_without_manifest_is_scanned(self):
        with TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_image(RgbImage(np.zeros((9, 9, 3))), root / "class_0" / "a.png")
            save_image(RgbImage(np.ones((9, 9, 3))), root / "class_2" / "b.png")
            corpus = load_dataset(root)
        self.assertEqual(corpus.labels.tolist(), [0, 2])

    def test_missing_directory_raises(self):
        with TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetError):
                load_dataset(Path(tmp) / "absent")

    def test_corrupt_manifest_raises(self):
        with TemporaryDirectory() as tmp:
            (Path(tmp) / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
            with self.assertRaises(DatasetError):
                load_dataset(Path(tmp))

    def test_manifest_pointing_at_missing_image_raises(self):
        with TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_dataset(self.records[:2], SPEC, root)
            next(root.rglob("img_000001.png")).unlink()
            with self.assertRaises(DatasetError):
                load_dataset(root)

    def test_subset_keeps_alignment(self):
        corpus = Corpus.from_records(self.records)
        part = corpus.subset([5, 1])
        self.assertEqual(part.ids.tolist(), [5, 1])
        self.assertEqual(part.labels.tolist(), [self.records[5].label, self.records[1].label])

if __name__ == "__main__":
    unittest.main()
