"""Synthetic paired PET / gray-matter volumes with planted class signal.

Each subject gets a smooth random "anatomy" field shared by both
modalities. Diseased subjects have intensity removed inside a per-modality
spherical region (full deflection for AD, half for MCI); independent
Gaussian noise is added per modality and values are clamped to [0, 1].
Setting a modality's signal strength to zero makes it carry no label
information, which lets the random-pairing protocol be checked against a
known ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..backbone import ConfigError
from ..seeding import rng_for
from .records import SubjectRecord, write_manifest
from .volume import Volume, write_vol1

# sex and age per diagnosis, loosely following the cohort statistics table
DEMOGRAPHICS = {
    "CN": {"female": 193 / 379, "age": (73.46, 5.93)},
    "MCI": {"female": 253 / 611, "age": (72.31, 7.30)},
    "AD": {"female": 104 / 257, "age": (74.41, 7.89)},
}
SEVERITY = {"CN": 0.0, "MCI": 0.5, "AD": 1.0}


@dataclass
class RegionSpec:
    center: Sequence[float]
    radius: float

    def mask(self, shape) -> np.ndarray:
        grid = np.indices(shape, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64).reshape(3, 1, 1, 1)
        return (((grid - c) ** 2).sum(axis=0) <= self.radius**2).astype(np.float32)


@dataclass
class SyntheticConfig:
    n_subjects: int = 200
    shape: Sequence[int] = (32, 32, 32)
    spacing: float = 1.5
    pet_signal: float = 0.5
    mri_signal: float = 0.0
    noise_sigma: float = 0.1
    num_classes: int = 2
    anatomy_smoothing: float = 3.0
    pet_region: Optional[RegionSpec] = None
    mri_region: Optional[RegionSpec] = None
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if isinstance(self.pet_region, dict):
            self.pet_region = RegionSpec(**self.pet_region)
        if isinstance(self.mri_region, dict):
            self.mri_region = RegionSpec(**self.mri_region)
        d = self.shape[0]
        mid = [(s - 1) / 2 for s in self.shape]
        if self.pet_region is None:
            self.pet_region = RegionSpec([(d - 1) / 3, *mid[1:]], d / 6)
        if self.mri_region is None:
            self.mri_region = RegionSpec([2 * (d - 1) / 3, *mid[1:]], d / 6)
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be at least 2")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"shape must be 3 positive ints, got {self.shape}")
        if self.num_classes not in (2, 3):
            raise ConfigError("num_classes must be 2 or 3")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if self.pet_signal < 0 or self.mri_signal < 0 or self.spacing <= 0:
            raise ConfigError("signal strengths must be >= 0 and spacing > 0")
        for name, region in (("pet_region", self.pet_region), ("mri_region", self.mri_region)):
            if len(region.center) != 3 or region.radius <= 0:
                raise ConfigError(f"{name} needs a 3D center and positive radius")
            for c, n in zip(region.center, self.shape):
                if c - region.radius < 0 or c + region.radius > n - 1:
                    raise ConfigError(f"{name} (center {list(region.center)}, radius {region.radius}) "
                                      f"extends outside volume of shape {self.shape}")

    @property
    def diagnoses(self) -> tuple:
        return ("CN", "AD") if self.num_classes == 2 else ("CN", "MCI", "AD")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SyntheticConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def anatomy(shape, smoothing: float, rng: np.random.Generator) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.standard_normal(shape), smoothing, mode="reflect")
    return (base - base.min()) / (base.max() - base.min())


def subject_volumes(cfg: SyntheticConfig, diagnosis: str, rng: np.random.Generator,
                    clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    base = anatomy(cfg.shape, cfg.anatomy_smoothing, rng)
    sev = SEVERITY[diagnosis]
    pet = base - cfg.pet_signal * sev * cfg.pet_region.mask(cfg.shape) + rng.normal(0, cfg.noise_sigma, cfg.shape)
    mri = base - cfg.mri_signal * sev * cfg.mri_region.mask(cfg.shape) + rng.normal(0, cfg.noise_sigma, cfg.shape)
    if clamp:
        pet, mri = np.clip(pet, 0.0, 1.0), np.clip(mri, 0.0, 1.0)
    return pet.astype(np.float32), mri.astype(np.float32)


def _diagnosis_list(cfg: SyntheticConfig) -> list:
    classes = cfg.diagnoses
    k = len(classes)
    counts = [cfg.n_subjects // k + (1 if i < cfg.n_subjects % k else 0) for i in range(k)]
    dx = [c for c, n in zip(classes, counts) for _ in range(n)]
    order = rng_for(cfg.seed, "labels").permutation(len(dx))
    return [dx[i] for i in order]


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[SubjectRecord], dict]:
    """Return records plus ``{subject_id: (pet Volume, mri Volume)}``.

    A pure function of ``cfg``: class counts are balanced, and each subject
    draws from its own seeded stream.
    """
    cfg.validate()
    spacing = (cfg.spacing,) * 3
    records, volumes = [], {}
    for i, dx in enumerate(_diagnosis_list(cfg)):
        sid = f"sub-{i:04d}"
        rng = rng_for(cfg.seed, "subject", i)
        demo = DEMOGRAPHICS[dx]
        sex = "F" if rng.random() < demo["female"] else "M"
        age = round(float(np.clip(rng.normal(*demo["age"]), 55.0, 95.0)), 2)
        pet, mri = subject_volumes(cfg, dx, rng)
        records.append(SubjectRecord(sid, dx, sex, age, f"volumes/{sid}_pet.vol", f"volumes/{sid}_mri.vol"))
        volumes[sid] = (Volume(pet, spacing), Volume(mri, spacing))
    return records, volumes


def write_dataset(records: Sequence[SubjectRecord], volumes: dict, out_dir) -> Path:
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    for r in records:
        pet, mri = volumes[r.subject_id]
        write_vol1(pet, out / r.pet_path)
        write_vol1(mri, out / r.mri_path)
    manifest = out / "manifest.csv"
    write_manifest(records, manifest)
    return manifest
