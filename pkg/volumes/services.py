"""
🏗️ DATASET SERVICE LAYER
WHAT: Writes a phantom cohort to disk as FSV1 files plus manifest.json, and
      loads it back as AnnotatedVolume records.
WHEN: gen_phantoms writes; train/eval/run_experiment load.
"""
import json
import logging
from pathlib import Path

from utils.exceptions import DataError

from .formats import read_volume, write_volume
from .records import AnnotatedVolume, LabelMask, Volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class DatasetService:

    @staticmethod
    def write(out_dir, records, spec=None):
        """
        One image + one full-mask file per (class, patient).

        Returns the manifest dict that was written.
        """
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

        entries = []
        for record in records:
            stem = Path(f"class{record.class_id:02d}") / f"patient{record.patient_id:03d}"
            image_path = stem.with_name(stem.name + "_image.fsv")
            mask_path = stem.with_name(stem.name + "_mask.fsv")
            write_volume(out_dir / image_path, record.volume)
            write_volume(out_dir / mask_path, record.mask)
            entries.append({
                "class_id": record.class_id,
                "patient_id": record.patient_id,
                "image": image_path.as_posix(),
                "mask": mask_path.as_posix(),
            })

        manifest = {"format": "FSV1", "spec": spec.as_dict() if spec else None, "entries": entries}
        try:
            (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        except OSError as exc:
            raise DataError(f"cannot write {MANIFEST_NAME} into {out_dir}: {exc}") from exc
        logger.info(f"✅ Wrote {len(entries)} manifest entries to {out_dir}")
        return manifest

    @staticmethod
    def load(data_dir):
        """Read every manifest entry; raises DataError when anything is missing."""
        data_dir = Path(data_dir)
        manifest_path = data_dir / MANIFEST_NAME
        if not manifest_path.exists():
            raise DataError(f"no {MANIFEST_NAME} in {data_dir}")
        try:
            manifest = json.loads(manifest_path.read_text())
            entries = manifest["entries"]
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"unreadable manifest {manifest_path}: {exc}") from exc

        records = []
        for entry in entries:
            try:
                image_name, mask_name = entry["image"], entry["mask"]
                patient_id, class_id = int(entry["patient_id"]), int(entry["class_id"])
            except (TypeError, KeyError, ValueError) as exc:
                raise DataError(f"malformed manifest entry {entry!r} in {manifest_path}") from exc
            volume = read_volume(data_dir / image_name)
            mask = read_volume(data_dir / mask_name)
            if not isinstance(volume, Volume) or not isinstance(mask, LabelMask):
                raise DataError(f"manifest entry {entry} does not pair an image with a mask")
            records.append(AnnotatedVolume(patient_id, class_id, volume, mask))

        logger.info(f"📂 Loaded {len(records)} annotated volumes from {data_dir}")
        return records

    @staticmethod
    def class_ids(records):
        return sorted({record.class_id for record in records})
