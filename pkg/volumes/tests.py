# ============================================================================
# 📌 VOLUME TESTS: phantoms, weak labels, slices and FSV1 files
# ============================================================================

import io
import json
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from utils.exceptions import ConfigurationError, DataError

from .formats import (
    BadMagicError, DimOverflowError, TruncatedPayloadError, UnknownDtypeError,
    decode_volume, encode_volume, read_volume, write_volume,
)
from .masks import axial_slices, to_bounding_box
from .phantoms import DegeneratePhantomError, generate_phantoms
from .records import AnnotatedVolume, LabelMask, PhantomSpec, Volume, VolumeKind
from .services import DatasetService

SMALL_SPEC = PhantomSpec(n_classes=3, n_patients=3, dims=(16, 32, 32), seed=7)


def overlap_dice(a, b):
    a, b = a > 0, b > 0
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else 2.0 * np.logical_and(a, b).sum() / total


# ============================================================================
# TEST 1: PHANTOM GENERATION
# ============================================================================
class PhantomGenerationTests(SimpleTestCase):
    """
    🧪 PURPOSE: Phantom cohorts are deterministic, bounded and class-distinct
    WHY: Every fold experiment starts from them
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.records = generate_phantoms(SMALL_SPEC)

    def test_one_record_per_class_and_patient(self):
        self.assertEqual(len(self.records), 9)
        pairs = {(r.class_id, r.patient_id) for r in self.records}
        self.assertEqual(len(pairs), 9)

    def test_generation_is_deterministic(self):
        """
        📌 TEST: Two generations from the same PhantomSpec
        EXPECTED: Bitwise equal images and masks
        """
        again = generate_phantoms(SMALL_SPEC)
        for first, second in zip(self.records, again):
            np.testing.assert_array_equal(first.volume.voxels, second.volume.voxels)
            np.testing.assert_array_equal(first.mask.labels, second.mask.labels)

    def test_masks_hold_only_their_class(self):
        for record in self.records:
            self.assertEqual(set(np.unique(record.mask.labels)) - {0}, {record.class_id})
            self.assertEqual(record.mask.kind, VolumeKind.FULL)

    def test_intensities_in_unit_range(self):
        for record in self.records:
            self.assertGreaterEqual(record.volume.voxels.min(), 0.0)
            self.assertLessEqual(record.volume.voxels.max(), 1.0)
            self.assertEqual(record.volume.voxels.dtype, np.float32)

    def test_other_seed_changes_output(self):
        other = generate_phantoms(PhantomSpec(n_classes=3, n_patients=3, dims=(16, 32, 32), seed=8))
        self.assertFalse(np.array_equal(other[0].volume.voxels, self.records[0].volume.voxels))

    def test_tiny_volume_is_degenerate(self):
        with self.assertRaises(DegeneratePhantomError):
            generate_phantoms(PhantomSpec(n_classes=2, n_patients=2, dims=(8, 8, 8)))

    def test_invalid_spec_rejected(self):
        with self.assertRaises(ConfigurationError):
            PhantomSpec(n_classes=1)
        with self.assertRaises(ConfigurationError):
            PhantomSpec(dims=(4, 64, 64))
        with self.assertRaises(ConfigurationError):
            PhantomSpec(dims=(32, 60, 60)).check_levels(4)


class DefaultCohortTests(SimpleTestCase):
    """Statistics over 100 phantoms at the default extents."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.spec = PhantomSpec(n_classes=4, n_patients=25, dims=(32, 64, 64), seed=0)
        cls.records = generate_phantoms(cls.spec)

    def test_foreground_fraction_bounds(self):
        for record in self.records:
            fraction = (record.mask.labels > 0).mean()
            self.assertGreaterEqual(fraction, 0.005, f"class {record.class_id} patient {record.patient_id}")
            self.assertLessEqual(fraction, 0.20)

    def test_classes_have_distinct_shapes(self):
        by_key = {(r.class_id, r.patient_id): r.mask.labels for r in self.records}
        inter, intra = [], []
        for p in range(self.spec.n_patients):
            for a in range(1, 5):
                for b in range(a + 1, 5):
                    inter.append(overlap_dice(by_key[(a, p)], by_key[(b, p)]))
        for k in range(1, 5):
            for p in range(self.spec.n_patients - 1):
                intra.append(overlap_dice(by_key[(k, p)], by_key[(k, p + 1)]))
        self.assertLess(np.mean(inter), 0.5)
        self.assertGreater(np.mean(intra), np.mean(inter))


# ============================================================================
# TEST 2: WEAK LABELS + SLICES
# ============================================================================
class BoundingBoxTests(SimpleTestCase):

    def test_tight_box_of_two_points(self):
        labels = np.zeros((1, 8, 10), dtype=np.uint8)
        labels[0, 2, 3] = 1
        labels[0, 5, 7] = 1
        box = to_bounding_box(LabelMask(labels))
        expected = np.zeros((8, 10), dtype=np.uint8)
        expected[2:6, 3:8] = 1
        np.testing.assert_array_equal(box.labels[0], expected)
        self.assertEqual(box.kind, VolumeKind.BOX)

    def test_box_is_superset_and_idempotent(self):
        for record in generate_phantoms(SMALL_SPEC):
            box = to_bounding_box(record.mask)
            self.assertTrue(np.all(box.labels[record.mask.labels > 0] == record.class_id))
            self.assertEqual(to_bounding_box(box), box)

    def test_empty_mask_stays_empty(self):
        box = to_bounding_box(LabelMask(np.zeros((3, 8, 8), dtype=np.uint8)))
        self.assertFalse(box.labels.any())


class AxialSliceTests(SimpleTestCase):

    def setUp(self):
        self.record = generate_phantoms(SMALL_SPEC)[4]

    def test_slice_count_and_order(self):
        slices = axial_slices(self.record)
        self.assertEqual(len(slices), self.record.dims[0])
        self.assertEqual([z for _, _, z in slices], list(range(self.record.dims[0])))

    def test_restack_round_trip(self):
        slices = axial_slices(self.record)
        images = np.concatenate([image.numpy() for image, _, _ in slices])
        np.testing.assert_array_equal(images, self.record.volume.voxels)

    def test_labels_binarized_with_matching_counts(self):
        for _, label, z in axial_slices(self.record):
            self.assertTrue(set(np.unique(label.numpy())) <= {0.0, 1.0})
            self.assertEqual(int(label.numpy().sum()), int((self.record.mask.labels[z] > 0).sum()))


# ============================================================================
# TEST 3: FSV1
# ============================================================================
class FormatTests(SimpleTestCase):
    """
    💾 PURPOSE: FSV1 encode/decode and its error codes
    WHY: Commands exchange every volume through this format
    """

    def setUp(self):
        rng = np.random.default_rng(0)
        self.volume = Volume(rng.random((3, 4, 5)).astype(np.float32))
        self.mask = to_bounding_box(LabelMask((rng.random((3, 4, 5)) > 0.5).astype(np.uint8) * 2))

    def test_round_trip_is_byte_identical(self):
        for record in (self.volume, self.mask):
            data = encode_volume(record)
            decoded = decode_volume(data)
            self.assertEqual(decoded, record)
            self.assertEqual(encode_volume(decoded), data)

    def test_header_layout(self):
        data = encode_volume(self.mask)
        self.assertEqual(data[:4], b"FSV1")
        self.assertEqual(tuple(data[4:7]), (1, 2, 3))
        self.assertEqual(struct.unpack("<3I", data[7:19]), (3, 4, 5))
        self.assertEqual(len(data), 19 + 60)

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "v.fsv"
            write_volume(path, self.volume)
            self.assertEqual(read_volume(path), self.volume)

    def test_bad_magic(self):
        data = b"XXXX" + encode_volume(self.volume)[4:]
        with self.assertRaises(BadMagicError):
            decode_volume(data)

    def test_truncated_payload(self):
        with self.assertRaises(TruncatedPayloadError):
            decode_volume(encode_volume(self.volume)[:-1])
        with self.assertRaises(TruncatedPayloadError):
            decode_volume(b"FSV1")

    def test_unknown_dtype(self):
        data = bytearray(encode_volume(self.volume))
        data[4] = 9
        with self.assertRaises(UnknownDtypeError):
            decode_volume(bytes(data))

    def test_dim_overflow(self):
        data = struct.pack("<4sBBB3I", b"FSV1", 1, 1, 3, 0xFFFFFFFF, 0xFFFFFFFF, 2)
        with self.assertRaises(DimOverflowError):
            decode_volume(data)

    def test_box_kind_must_hold_rectangles(self):
        """
        📌 TEST: A kind=2 FSV1 payload whose slices are not filled rectangles
        EXPECTED: DataError on decode, not a silent load
        """
        labels = np.zeros((2, 4, 5), dtype=np.uint8)
        labels[0, 0, 0] = 2
        labels[0, 2, 3] = 2
        data = bytearray(encode_volume(LabelMask(labels)))
        data[5] = int(VolumeKind.BOX)
        with self.assertRaises(DataError):
            decode_volume(bytes(data))
        with self.assertRaises(DataError):
            LabelMask(labels, VolumeKind.BOX)
        # ✅ A filled rectangle of one class is accepted
        LabelMask(to_bounding_box(LabelMask(labels)).labels, VolumeKind.BOX)

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, TruncatedPayloadError, UnknownDtypeError, DimOverflowError}
        self.assertEqual(len(kinds), 4)
        for kind in kinds:
            self.assertEqual(kind.exit_code, 3)


# ============================================================================
# TEST 4: DATASET + COMMAND
# ============================================================================
class GenPhantomsCommandTests(SimpleTestCase):

    def _generate(self, out):
        call_command('gen_phantoms', out=out, classes=2, patients=3, size=32, depth=16, seed=5, stdout=io.StringIO())

    def test_writes_files_and_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            self._generate(tmp)
            manifest = json.loads((Path(tmp) / "manifest.json").read_text())
            self.assertEqual(len(manifest["entries"]), 6)
            self.assertEqual(len(list(Path(tmp).rglob("*.fsv"))), 12)
            records = DatasetService.load(tmp)
            self.assertEqual(len(records), 6)
            self.assertIsInstance(records[0], AnnotatedVolume)

    def test_rerun_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            self._generate(first)
            self._generate(second)
            for path in sorted(Path(first).rglob("*.fsv")):
                twin = Path(second) / path.relative_to(first)
                self.assertEqual(path.read_bytes(), twin.read_bytes())

    def test_invalid_spec_exits_with_usage_code(self):
        """
        📌 TEST: gen_phantoms with an impossible spec
        EXPECTED: CommandError with exit code 2
        """
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError) as ctx:
                call_command('gen_phantoms', out=tmp, classes=1)
            self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_manifest_is_data_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(Exception) as ctx:
                DatasetService.load(tmp)
            self.assertEqual(ctx.exception.exit_code, 3)
