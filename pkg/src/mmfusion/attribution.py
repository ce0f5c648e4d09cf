"""Integrated Gradients over both input modalities.

For a target class c with log-probability F_c, each voxel's attribution is

    IG_i = (x_i - x'_i) * mean_k dF_c/dx_i (x' + (k - 0.5)/m * (x - x'))

using the midpoint rule with m steps. Summing IG over a modality gives that
modality's share of F_c(x) - F_c(x'); the residual of that identity is
stored with every result.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data.volume import Volume
from .tensor_nn import ShapeError

MODALITIES = ("pet", "mri")


@dataclass
class AttributionResult:
    pet: np.ndarray
    mri: np.ndarray
    target: int
    steps: int
    f_input: float
    f_baseline: float
    residual: float
    baseline: str = "zeros"
    subject_id: str = ""
    label: Optional[int] = None
    predicted: Optional[int] = None

    @property
    def delta(self) -> float:
        return self.f_input - self.f_baseline

    @property
    def relative_residual(self) -> float:
        return self.residual / abs(self.delta) if self.delta else math.inf

    @property
    def correct(self) -> bool:
        return self.label is not None and self.label == self.predicted

    def maps(self) -> dict:
        return {"pet": self.pet, "mri": self.mri}


@dataclass
class ModalityContribution:
    sum_abs_pet: float
    sum_abs_mri: float
    signed_pet: float
    signed_mri: float
    ratio: float
    dominant: str
    ratio_undefined: bool = False


def _as_input(x, dtype) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    if t.dim() == 3:
        t = t[None, None]
    if t.dim() != 5 or t.shape[:2] != (1, 1):
        raise ShapeError(f"IG expects one [D,H,W] or [1,1,D,H,W] input, got {tuple(t.shape)}")
    return t


def inference_copy(model: torch.nn.Module, dtype=torch.float64) -> torch.nn.Module:
    """Deterministic copy for attribution: inference mode, chosen precision."""
    m = copy.deepcopy(model).to(dtype)
    if dtype != torch.float32:
        # the channels-last fast path only exists for float32 kernels
        m = m.to(memory_format=torch.contiguous_format)
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def integrated_gradients(
    model: Callable,
    pet,
    mri,
    baseline: Optional[tuple] = None,
    target: Optional[int] = None,
    steps: int = 64,
    batch_size: int = 16,
    dtype=torch.float64,
) -> AttributionResult:
    """IG of the target-class output of ``model(pet, mri)``.

    ``model`` is any callable mapping two ``[N,1,D,H,W]`` batches to
    ``[N,C]`` outputs; torch modules are switched to inference mode first.
    The target defaults to the predicted class.
    """
    if steps < 2:
        raise ValueError("IG needs at least 2 steps")
    if isinstance(model, torch.nn.Module):
        model.eval()
    x_pet, x_mri = _as_input(pet, dtype), _as_input(mri, dtype)
    if baseline is None:
        b_pet, b_mri = torch.zeros_like(x_pet), torch.zeros_like(x_mri)
        desc = "zeros"
    else:
        b_pet, b_mri = _as_input(baseline[0], dtype), _as_input(baseline[1], dtype)
        desc = "custom"
    if b_pet.shape != x_pet.shape or b_mri.shape != x_mri.shape:
        raise ShapeError("baseline shapes must match inputs")

    with torch.no_grad():
        out_x = model(x_pet, x_mri)
        out_b = model(b_pet, b_mri)
    if target is None:
        target = int(out_x[0].argmax())
    f_x, f_b = float(out_x[0, target]), float(out_b[0, target])

    d_pet, d_mri = x_pet - b_pet, x_mri - b_mri
    g_pet, g_mri = torch.zeros_like(x_pet[0]), torch.zeros_like(x_mri[0])
    alphas = (torch.arange(steps, dtype=dtype) + 0.5) / steps
    for start in range(0, steps, batch_size):
        a = alphas[start:start + batch_size].view(-1, 1, 1, 1, 1)
        p = (b_pet + a * d_pet).requires_grad_(True)
        q = (b_mri + a * d_mri).requires_grad_(True)
        with torch.enable_grad():
            out = model(p, q)[:, target].sum()
            gp, gq = torch.autograd.grad(out, (p, q), allow_unused=True)
        if gp is not None:
            g_pet += gp.sum(0)
        if gq is not None:
            g_mri += gq.sum(0)

    ig_pet = (d_pet[0] * g_pet / steps)[0].numpy()
    ig_mri = (d_mri[0] * g_mri / steps)[0].numpy()
    residual = abs(float(ig_pet.sum() + ig_mri.sum()) - (f_x - f_b))
    return AttributionResult(ig_pet, ig_mri, target, steps, f_x, f_b, residual, desc,
                             predicted=int(out_x[0].argmax()))


def modality_contribution(result: AttributionResult) -> ModalityContribution:
    a_pet = float(np.abs(result.pet).sum())
    a_mri = float(np.abs(result.mri).sum())
    dominant = "pet" if a_pet >= a_mri else "mri"
    hi, lo = max(a_pet, a_mri), min(a_pet, a_mri)
    undefined = lo == 0.0
    ratio = math.inf if undefined else hi / lo
    return ModalityContribution(a_pet, a_mri, float(result.pet.sum()), float(result.mri.sum()),
                                ratio, dominant, undefined)


def correct_in_class(label: int) -> Callable[[AttributionResult], bool]:
    return lambda r: r.correct and r.label == label


def mean_abs_map(results: Sequence[AttributionResult], select: Callable[[AttributionResult], bool]) -> dict:
    chosen = [r for r in results if select(r)]
    if not chosen:
        n_correct = sum(r.correct for r in results)
        raise ValueError(f"no subjects selected ({len(results)} results, {n_correct} correctly classified)")
    return {m: np.mean([np.abs(r.maps()[m]) for r in chosen], axis=0) for m in MODALITIES}


# --------------------------------------------------------------------------- export


def axial_slice(data: np.ndarray, axis: int = 2) -> np.ndarray:
    return np.take(data, data.shape[axis] // 2, axis=axis)


def to_gray(img: np.ndarray, vmin: Optional[float] = None, vmax: Optional[float] = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if vmin is None else vmin
    hi = img.max() if vmax is None else vmax
    if hi <= lo:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.rint(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def export_axial_slice(vol, path, axis: int = 2, vmin: Optional[float] = None,
                       vmax: Optional[float] = None) -> np.ndarray:
    """Write the center slice along ``axis`` as 8-bit PGM; returns the pixels."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if data.ndim != 3:
        raise ShapeError("export_axial_slice needs a 3D map")
    img = to_gray(axial_slice(data, axis), vmin, vmax)
    write_pgm(img, path)
    return img


ATTRIBUTION_FIELDS = ["subject_id", "class", "correct", "sum_abs_pet", "sum_abs_mri",
                      "signed_pet", "signed_mri", "residual"]


def write_attribution_csv(results: Sequence[AttributionResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTRIBUTION_FIELDS)
        for r in results:
            c = modality_contribution(r)
            w.writerow([r.subject_id, r.label, int(r.correct), repr(c.sum_abs_pet), repr(c.sum_abs_mri),
                        repr(c.signed_pet), repr(c.signed_mri), repr(r.residual)])


def attribute_subjects(model, records, volumes: dict, num_classes: int, steps: int = 64,
                       dtype=torch.float64) -> list[AttributionResult]:
    from .data.records import label_of

    net = inference_copy(model, dtype)
    out = []
    for r in records:
        pet, mri = volumes[r.subject_id]
        res = integrated_gradients(net, pet.data, mri.data, steps=steps, dtype=dtype)
        res.subject_id = r.subject_id
        res.label = label_of(r.diagnosis, num_classes)
        out.append(res)
    return out
