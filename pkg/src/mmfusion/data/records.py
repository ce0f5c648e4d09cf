"""Subject manifests and stratified train/validation/test splitting."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..seeding import derive_seed

DIAGNOSES = ("CN", "MCI", "AD")
SEXES = ("F", "M")
MANIFEST_FIELDS = ["subject_id", "diagnosis", "sex", "age", "pet_path", "mri_path"]
SPLIT_FRACTIONS = (0.65, 0.15, 0.20)
MIN_AGE_BIN = 5
STRATA_DESCRIPTION = "diagnosis x sex x age tercile (bins < 5 subjects merged into nearest bin)"


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    diagnosis: str
    sex: str
    age: float
    pet_path: str
    mri_path: str

    def __post_init__(self):
        if self.diagnosis not in DIAGNOSES:
            raise ValueError(f"{self.subject_id}: diagnosis must be one of {DIAGNOSES}, got {self.diagnosis!r}")
        if self.sex not in SEXES:
            raise ValueError(f"{self.subject_id}: sex must be F or M, got {self.sex!r}")
        if not self.pet_path or not self.mri_path:
            raise ValueError(f"{self.subject_id}: both modality references are required")


def label_of(diagnosis: str, num_classes: int) -> Optional[int]:
    """Integer class for a diagnosis; ``None`` when excluded from the task."""
    if num_classes == 2:
        return {"CN": 0, "AD": 1}.get(diagnosis)
    if num_classes == 3:
        return DIAGNOSES.index(diagnosis)
    raise ValueError(f"num_classes must be 2 or 3, got {num_classes}")


def records_for_task(records: Iterable[SubjectRecord], num_classes: int) -> list[SubjectRecord]:
    return [r for r in records if label_of(r.diagnosis, num_classes) is not None]


def write_manifest(records: Sequence[SubjectRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.subject_id, r.diagnosis, r.sex, repr(float(r.age)), r.pet_path, r.mri_path])


def read_manifest(path) -> list[SubjectRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = [
            SubjectRecord(row["subject_id"], row["diagnosis"], row["sex"], float(row["age"]),
                          row["pet_path"], row["mri_path"])
            for row in reader
        ]
    _check_unique(records)
    return records


def _check_unique(records: Sequence[SubjectRecord]) -> None:
    seen = set()
    for r in records:
        if r.subject_id in seen:
            raise ValueError(f"duplicate subject id {r.subject_id!r}: one scan per subject expected")
        seen.add(r.subject_id)


@dataclass
class SplitPlan:
    fold: int
    train: list
    val: list
    test: list
    seed: int
    strata: str = STRATA_DESCRIPTION

    def all_ids(self) -> list:
        return [*self.train, *self.val, *self.test]

    def to_dict(self) -> dict:
        return asdict(self)


def save_splits(plans: Sequence[SplitPlan], path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in plans], indent=1) + "\n")


def load_splits(path) -> list[SplitPlan]:
    return [SplitPlan(**d) for d in json.loads(Path(path).read_text())]


def _age_bins(records: Sequence[SubjectRecord]) -> dict:
    ages = np.array([r.age for r in records], dtype=np.float64)
    edges = np.quantile(ages, [1 / 3, 2 / 3])
    bins = {r.subject_id: int(np.searchsorted(edges, r.age, side="right")) for r in records}

    groups = defaultdict(list)
    for r in records:
        groups[(r.diagnosis, r.sex)].append(r.subject_id)
    for ids in groups.values():
        while True:
            counts = defaultdict(int)
            for i in ids:
                counts[bins[i]] += 1
            small = [b for b in sorted(counts) if counts[b] < MIN_AGE_BIN]
            if not small or len(counts) < 2:
                break
            b = small[0]
            target = min((o for o in counts if o != b), key=lambda o: (abs(o - b), -counts[o]))
            for i in ids:
                if bins[i] == b:
                    bins[i] = target
    return bins


def strata_of(records: Sequence[SubjectRecord]) -> dict:
    """Map stratum key -> sorted subject ids."""
    bins = _age_bins(records)
    strata = defaultdict(list)
    for r in records:
        strata[(r.diagnosis, r.sex, bins[r.subject_id])].append(r.subject_id)
    return {k: sorted(v) for k, v in sorted(strata.items())}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(records: Sequence[SubjectRecord], seed: int, fold_count: int = 5) -> list[SplitPlan]:
    """Independently seeded stratified 65/15/20 resamplings, one per fold.

    Per-stratum counts use cumulative rounding across strata, so both every
    stratum and the cohort as a whole are within one subject of the target
    proportions.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    _check_unique(records)
    strata = strata_of(records)
    _, f_val, f_test = SPLIT_FRACTIONS
    plans = []
    for fold in range(fold_count):
        fold_seed = derive_seed(seed, "split", fold)
        rng = np.random.default_rng(fold_seed)
        train, val, test = [], [], []
        seen = 0
        for ids in strata.values():
            order = [ids[i] for i in rng.permutation(len(ids))]
            before, seen = seen, seen + len(ids)
            n_test = _round_half_up(f_test * seen) - _round_half_up(f_test * before)
            n_val = _round_half_up((f_test + f_val) * seen) - _round_half_up((f_test + f_val) * before) - n_test
            test += order[:n_test]
            val += order[n_test:n_test + n_val]
            train += order[n_test + n_val:]
        plans.append(SplitPlan(fold, sorted(train), sorted(val), sorted(test), fold_seed))
    return plans
