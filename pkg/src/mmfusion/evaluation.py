"""Pairing schemes, balanced accuracy, training loop and the test protocol.

Models are trained on (PET, MRI) pairs from the same subject, or with the
MRI re-paired to a random other subject every epoch. At test time the
pairing is either correct or one modality is replaced with another
subject's scan via a seeded derangement; labels always travel with the
modality that stays put.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import tensor_nn as tnn
from .backbone import BackboneConfig
from .data.preprocess import apply_transform, sample_transform
from .data.records import SplitPlan, SubjectRecord, label_of, records_for_task
from .fusion import ExchangeConfig, FusionModel, FusionStrategy, build_model, to_batch
from .seeding import derive_seed

log = logging.getLogger(__name__)


class PairingScheme(str, enum.Enum):
    CORRECT = "correct"
    RANDOM_MRI = "random_mri"
    RANDOM_PET = "random_pet"


class TrainScheme(str, enum.Enum):
    CORRECT_PAIRS = "correct"
    RANDOM_MRI_PAIRS = "random_mri"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Pair:
    pet_id: str
    mri_id: str
    label: int


# --------------------------------------------------------------------------- metrics


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def recalls_from_confusion(cm: np.ndarray) -> list[Optional[float]]:
    """Per-class recall; ``None`` for classes with no true samples."""
    out = []
    for k in range(cm.shape[0]):
        total = cm[k].sum()
        out.append(float(cm[k, k]) / float(total) if total else None)
    return out


def _mean_recall(recalls) -> float:
    present = [r for r in recalls if r is not None]
    if len(present) < len(recalls):
        missing = [k for k, r in enumerate(recalls) if r is None]
        warnings.warn(f"classes {missing} absent from labels; excluded from balanced accuracy")
    return sum(present) / len(present)


def balanced_accuracy(labels, predictions, num_classes: int) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.size == 0:
        raise ValueError("balanced accuracy of an empty set is undefined")
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions must have equal length")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return _mean_recall(recalls_from_confusion(confusion_matrix(labels, predictions, num_classes)))


# --------------------------------------------------------------------------- pairing


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def random_others(n: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform choice of a different index for every position."""
    if n < 2:
        raise ValueError("random re-pairing needs at least 2 elements")
    draw = rng.integers(0, n - 1, size=n)
    return draw + (draw >= np.arange(n))


def make_pairing(
    records: Sequence[SubjectRecord],
    scheme,
    num_classes: int,
    seed: int = 0,
    derangement: bool = True,
) -> list[Pair]:
    scheme = PairingScheme(scheme)
    ids = [r.subject_id for r in records]
    labels = [label_of(r.diagnosis, num_classes) for r in records]
    if any(lab is None for lab in labels):
        raise ValueError(f"records contain diagnoses outside the {num_classes}-class task")
    if scheme == PairingScheme.CORRECT:
        return [Pair(i, i, lab) for i, lab in zip(ids, labels)]
    rng = np.random.default_rng(seed)
    other = random_derangement(len(ids), rng) if derangement else random_others(len(ids), rng)
    if scheme == PairingScheme.RANDOM_MRI:
        return [Pair(ids[k], ids[other[k]], labels[k]) for k in range(len(ids))]
    return [Pair(ids[other[k]], ids[k], labels[k]) for k in range(len(ids))]


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 0.005
    epochs: int = 120
    batch_size: int = 16
    weight_decay: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_lr: float = 1e-6
    augment: bool = True
    derangement: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: FusionModel
    history: list
    best_epoch: int
    best_val_bacc: float

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _arrays(volumes: dict, pairs: Sequence[Pair]) -> tuple[list, list]:
    return [volumes[p.pet_id][0] for p in pairs], [volumes[p.mri_id][1] for p in pairs]


def _batch_tensors(pets, mris, dtype=torch.float32):
    return to_batch([v.data for v in pets], dtype), to_batch([v.data for v in mris], dtype)


@torch.no_grad()
def predict_log_probs(model: FusionModel, volumes: dict, pairs: Sequence[Pair], batch_size: int = 16) -> torch.Tensor:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for start in range(0, len(pairs), batch_size):
        pets, mris = _arrays(volumes, pairs[start:start + batch_size])
        outs.append(model(*_batch_tensors(pets, mris, dtype)))
    model.train(was_training)
    return torch.cat(outs)


def predict(model: FusionModel, volumes: dict, pairs: Sequence[Pair], batch_size: int = 16) -> np.ndarray:
    return predict_log_probs(model, volumes, pairs, batch_size).argmax(dim=1).numpy()


def epoch_pairs(records, scheme, num_classes: int, seed: int, epoch: int, derangement: bool = True) -> list[Pair]:
    """Training pairs for one epoch; random-MRI training re-draws the MRI every epoch."""
    if TrainScheme(scheme) == TrainScheme.RANDOM_MRI_PAIRS:
        return make_pairing(records, PairingScheme.RANDOM_MRI, num_classes,
                            derive_seed(seed, "train_pairing", epoch), derangement)
    return make_pairing(records, PairingScheme.CORRECT, num_classes)


def train(
    model: FusionModel,
    train_records: Sequence[SubjectRecord],
    val_records: Sequence[SubjectRecord],
    volumes: dict,
    scheme=TrainScheme.CORRECT_PAIRS,
    hp: Optional[TrainConfig] = None,
    seed: int = 0,
) -> TrainResult:
    """Train end-to-end with AdamW and plateau scheduling on validation BACC.

    Validation pairs are always correct. Returns the model restored to its
    best-validation epoch (earliest on ties).
    """
    hp = hp or TrainConfig()
    scheme = TrainScheme(scheme)
    num_classes = model.num_classes
    torch.manual_seed(derive_seed(seed, "torch"))
    order_rng = np.random.default_rng(derive_seed(seed, "order"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))

    optimizer = tnn.AdamW(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    scheduler = tnn.PlateauScheduler(optimizer, "max", hp.plateau_factor, hp.plateau_patience, hp.min_lr)
    val_pairs = make_pairing(val_records, PairingScheme.CORRECT, num_classes) if val_records else []

    history = []
    best_state, best_epoch, best_bacc = None, 0, -math.inf
    for epoch in range(1, hp.epochs + 1):
        pairs = epoch_pairs(train_records, scheme, num_classes, seed, epoch, hp.derangement)
        pairs = [pairs[i] for i in order_rng.permutation(len(pairs))]

        model.train()
        total_loss, correct = 0.0, 0
        for start in range(0, len(pairs), hp.batch_size):
            chunk = pairs[start:start + hp.batch_size]
            pets, mris = _arrays(volumes, chunk)
            if hp.augment:
                tfs = [sample_transform(aug_rng) for _ in chunk]
                # one rigid transform per pair keeps co-registered scans aligned
                pets = [apply_transform(v, tf) for v, tf in zip(pets, tfs)]
                mris = [apply_transform(v, tf) for v, tf in zip(mris, tfs)]
            pet_t, mri_t = _batch_tensors(pets, mris)
            labels = torch.tensor([p.label for p in chunk])
            logp, penalty = model.forward_with_penalty(pet_t, mri_t)
            loss = tnn.softmax_cross_entropy(logp, labels) + penalty
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {start // hp.batch_size}, "
                    f"lr {scheduler.lr}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(chunk)
            correct += int((logp.argmax(1) == labels).sum())

        if val_pairs:
            val_pred = predict(model, volumes, val_pairs)
            val_bacc = balanced_accuracy([p.label for p in val_pairs], val_pred, num_classes)
        else:
            val_bacc = correct / len(pairs)
        row = {
            "epoch": epoch,
            "train_loss": total_loss / len(pairs),
            "train_acc": correct / len(pairs),
            "val_bacc": val_bacc,
            "lr": scheduler.lr,
        }
        if model.strategy == FusionStrategy.MIDDLE:
            row["exchange_fraction"] = model.exchange_fraction()
        history.append(row)
        if val_bacc > best_bacc:
            best_bacc, best_epoch = val_bacc, epoch
            best_state = copy.deepcopy(model.state_dict())
        scheduler.step(val_bacc)
        log.debug("epoch %d %s", epoch, row)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_bacc)


# --------------------------------------------------------------------------- evaluation


@dataclass
class FoldResult:
    fold: int
    strategy: str
    train_scheme: str
    test_scheme: str
    bacc: float
    recalls: list
    confusion: list
    task: int = 2
    repeats: int = 1
    epochs_run: int = 0
    best_epoch: int = 0
    wall_time: float = field(default=0.0, compare=False)

    def metrics(self) -> tuple:
        return (self.bacc, tuple(self.recalls), tuple(map(tuple, self.confusion)))


def evaluate(
    model: FusionModel,
    records: Sequence[SubjectRecord],
    volumes: dict,
    scheme,
    seed: int = 0,
    repeats: int = 5,
    derangement: bool = True,
    fold: int = 0,
    train_scheme: str = TrainScheme.CORRECT_PAIRS.value,
) -> FoldResult:
    """Balanced accuracy on one pairing scheme.

    Randomized schemes are repeated ``repeats`` times with distinct seeds;
    the confusion matrix is the mean over repetitions and recalls/BACC are
    computed from the pooled counts, which equals the mean per-repetition
    BACC because class totals are identical in every repetition.
    """
    t0 = time.perf_counter()
    scheme = PairingScheme(scheme)
    num_classes = model.num_classes
    reps = 1 if scheme == PairingScheme.CORRECT else repeats
    pooled = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in range(reps):
        pairs = make_pairing(records, scheme, num_classes, derive_seed(seed, scheme.value, r), derangement)
        pred = predict(model, volumes, pairs)
        pooled += confusion_matrix([p.label for p in pairs], pred, num_classes)
    recalls = recalls_from_confusion(pooled)
    return FoldResult(
        fold=fold,
        strategy=model.strategy.value,
        train_scheme=TrainScheme(train_scheme).value,
        test_scheme=scheme.value,
        bacc=_mean_recall(recalls),
        recalls=recalls,
        confusion=(pooled / reps).tolist(),
        task=num_classes,
        repeats=reps,
        wall_time=time.perf_counter() - t0,
    )


# --------------------------------------------------------------------------- experiments


@dataclass
class ExperimentSpec:
    """What to run; hyperparameters beyond training live in the configs."""

    tasks: Sequence[int] = (2,)
    strategies: Sequence[str] = tuple(s.value for s in FusionStrategy)
    train_schemes: Sequence[str] = (TrainScheme.CORRECT_PAIRS.value, TrainScheme.RANDOM_MRI_PAIRS.value)
    test_schemes: Sequence[str] = tuple(s.value for s in PairingScheme)
    backbone: dict = field(default_factory=dict)
    exchange: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    test_repeats: int = 5
    seed: int = 0


@dataclass(frozen=True)
class Job:
    task: int
    strategy: str
    train_scheme: str
    fold: int

    @property
    def name(self) -> str:
        return f"task{self.task}_{self.strategy}_{self.train_scheme}_fold{self.fold}"


def plan_jobs(spec: ExperimentSpec, folds: Sequence[int]) -> list[Job]:
    jobs = []
    for task in spec.tasks:
        for strategy in spec.strategies:
            for ts in spec.train_schemes:
                # single-modality models have no second modality to re-pair
                if ts == TrainScheme.RANDOM_MRI_PAIRS.value and not FusionStrategy(strategy).is_multimodal:
                    continue
                for fold in folds:
                    jobs.append(Job(task, strategy, ts, fold))
    return jobs


def build_job_model(spec: ExperimentSpec, job: Job) -> FusionModel:
    torch.manual_seed(derive_seed(spec.seed, "init", job.name))
    bcfg = BackboneConfig(**{**spec.backbone, "num_classes": job.task})
    exchange = ExchangeConfig(**spec.exchange) if job.strategy == FusionStrategy.MIDDLE.value else None
    return build_model(job.strategy, bcfg, exchange)


def _split_records(records, plan: SplitPlan, task: int):
    by_id = {r.subject_id: r for r in records_for_task(records, task)}
    pick = lambda ids: [by_id[i] for i in ids if i in by_id]  # noqa: E731
    return pick(plan.train), pick(plan.val), pick(plan.test)


def train_job(spec: ExperimentSpec, job: Job, records, volumes, plan: SplitPlan) -> TrainResult:
    tr, va, _ = _split_records(records, plan, job.task)
    model = build_job_model(spec, job)
    return train(model, tr, va, volumes, job.train_scheme, spec.train,
                 derive_seed(spec.seed, "train", job.name))


def evaluate_job(spec: ExperimentSpec, job: Job, model: FusionModel, records, volumes, plan: SplitPlan,
                 epochs_run: int = 0, best_epoch: int = 0) -> list[FoldResult]:
    _, _, te = _split_records(records, plan, job.task)
    results = []
    for scheme in spec.test_schemes:
        # every model of a fold sees the same randomized test pairings
        res = evaluate(model, te, volumes, scheme, derive_seed(spec.seed, "test", job.task, job.fold),
                       spec.test_repeats, spec.train.derangement, job.fold, job.train_scheme)
        res.epochs_run, res.best_epoch = epochs_run, best_epoch
        results.append(res)
    return results


@dataclass
class ExperimentReport:
    results: list

    def groups(self) -> dict:
        out: dict = {}
        for r in sorted(self.results, key=lambda r: r.fold):
            out.setdefault((r.task, r.strategy, r.train_scheme, r.test_scheme), []).append(r.bacc)
        return out

    def summary(self) -> dict:
        """``(task, strategy, train, test) -> (mean, sample std, n)``."""
        out = {}
        for key, vals in self.groups().items():
            v = np.asarray(vals, dtype=np.float64)
            std = float(v.std(ddof=1)) if len(v) > 1 else float("nan")
            out[key] = (float(v.mean()), std, len(v))
        return out


def _run_job(args) -> tuple:
    spec, job, records, volumes, plan = args
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    res = train_job(spec, job, records, volumes, plan)
    folds = evaluate_job(spec, job, res.model, records, volumes, plan, res.epochs_run, res.best_epoch)
    for f in folds:
        f.wall_time = time.perf_counter() - t0
    return folds


def run_experiment(spec: ExperimentSpec, records, volumes, plans: Sequence[SplitPlan], jobs: int = 1) -> ExperimentReport:
    """Train every (task, strategy, train scheme, fold) once; test under all schemes."""
    by_fold = {p.fold: p for p in plans}
    todo = [(spec, job, records, volumes, by_fold[job.fold]) for job in plan_jobs(spec, sorted(by_fold))]
    results = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            for folds in pool.map(_run_job, todo):
                results.extend(folds)
    else:
        for item in todo:
            results.extend(_run_job(item))
    return ExperimentReport(results)
