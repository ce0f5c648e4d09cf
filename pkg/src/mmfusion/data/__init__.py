"""Volumes, manifests, splits, augmentation and the synthetic generator."""

from pathlib import Path

from .preprocess import augment, minmax_scale
from .records import (
    SplitPlan,
    SubjectRecord,
    label_of,
    load_splits,
    read_manifest,
    records_for_task,
    save_splits,
    stratified_split,
    write_manifest,
)
from .synthetic import SyntheticConfig, generate_synthetic, write_dataset
from .volume import Volume, VolumeFormatError, read_volume, write_vol1


def missing_volumes(records, root) -> list:
    root = Path(root)
    return [str(root / p) for r in records for p in (r.pet_path, r.mri_path) if not (root / p).is_file()]


def load_dataset(manifest) -> tuple:
    """Read a manifest and every volume it references (paths relative to it)."""
    manifest = Path(manifest)
    records = read_manifest(manifest)
    missing = missing_volumes(records, manifest.parent)
    if missing:
        raise FileNotFoundError(f"{len(missing)} volume(s) missing, first: {missing[0]}")
    volumes = {
        r.subject_id: (read_volume(manifest.parent / r.pet_path), read_volume(manifest.parent / r.mri_path))
        for r in records
    }
    return records, volumes
