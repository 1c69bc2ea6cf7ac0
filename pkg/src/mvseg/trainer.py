"""Training, inference and cross-validation for the multi-view tU-Net."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import AdamState, Tensor, adam_step, no_grad
from .data.pairing import SliceTriplet, kfold, make_triplets, slice_index, split_patients
from .data.phantom import PatientViews
from .data.volume import Volume3D
from .errors import ConfigError, DataError, NumericError
from .losses import contrastive_loss, dice_loss, total_loss
from .metrics import MetricReport, evaluate_patient
from .model import AXIAL, CORONAL, SAGITTAL, ModelConfig, TUNet

# evaluation-regime flags: axial only, axial + coronal, axial + sagittal, all
VIEW_FLAGS = {
    "1": (AXIAL,),
    "2a": (AXIAL, CORONAL),
    "2c": (AXIAL, CORONAL),
    "2s": (AXIAL, SAGITTAL),
    "3": (AXIAL, SAGITTAL, CORONAL),
}


def parse_views(flag) -> tuple[str, ...]:
    key = str(flag)
    if key not in VIEW_FLAGS:
        raise ConfigError(f"views must be one of {sorted(VIEW_FLAGS)}, got {flag!r}")
    return VIEW_FLAGS[key]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 1e-3
    alpha: float = 0.25
    temperature: float = 0.07
    views: int = 3
    second_view: str = SAGITTAL  # partner of the axial view when views == 2
    rotation_range: tuple = (-60.0, 60.0)
    rotation_prob: float = 0.5
    center_position: bool = True
    random_positions: int = 5
    position_range: tuple = (0.0, 1.0)
    # "shared": one position per batch; "patient": one per patient per round
    position_mode: str = "patient"
    data_seed: int = 0
    init_seed: int = 0
    aug_seed: int = 0
    val_fraction: float = 0.15
    select_on: str = "dice"
    dice_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.views not in (1, 2, 3):
            raise ConfigError(f"views must be 1, 2 or 3, got {self.views}")
        if self.views == 1 and self.alpha != 1.0:
            raise ConfigError(f"views=1 has no contrastive partner and requires alpha=1, got alpha={self.alpha}")
        if self.alpha < 1.0 and self.batch_size < 2:
            raise ConfigError("contrastive training (alpha < 1) needs batch_size >= 2 for negatives")
        if self.second_view not in (SAGITTAL, CORONAL):
            raise ConfigError(f"second_view must be sagittal or coronal, got {self.second_view!r}")
        lo, hi = self.rotation_range
        if lo > hi:
            raise ConfigError(f"rotation_range must be (low, high), got {self.rotation_range}")
        if not 0.0 <= self.rotation_prob <= 1.0:
            raise ConfigError(f"rotation_prob must lie in [0, 1], got {self.rotation_prob}")
        plo, phi = self.position_range
        if not 0.0 <= plo <= phi <= 1.0:
            raise ConfigError(f"position_range must satisfy 0 <= low <= high <= 1, got {self.position_range}")
        if self.random_positions < 0 or (self.random_positions == 0 and not self.center_position):
            raise ConfigError("need at least one slice position per epoch")
        if self.position_mode not in ("shared", "patient"):
            raise ConfigError(f"position_mode must be 'shared' or 'patient', got {self.position_mode!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.select_on not in ("dice", "total"):
            raise ConfigError(f"select_on must be 'dice' or 'total', got {self.select_on!r}")

    @property
    def roles(self) -> tuple[str, ...]:
        if self.views == 1:
            return (AXIAL,)
        if self.views == 2:
            return (AXIAL, self.second_view)
        return (AXIAL, SAGITTAL, CORONAL)

    @property
    def uses_contrastive(self) -> bool:
        return self.alpha < 1.0 and self.views > 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    initial_val: float | None = None
    selected_epoch: int = 0
    wall_time: float = 0.0

    CSV_COLUMNS = ("epoch", "dice", "cont", "total", "val")

    def best_epoch(self) -> int:
        if not self.entries:
            return 0
        vals = [e["val"] for e in self.entries]
        return self.entries[int(np.argmin(vals))]["epoch"]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for e in self.entries:
                w.writerow([e["epoch"]] + [repr(float(e[k])) for k in self.CSV_COLUMNS[1:]])
        return path

    def to_dict(self) -> dict:
        # wall time is left out so logs stay byte-reproducible
        return {"entries": self.entries, "initial_val": self.initial_val, "selected_epoch": self.selected_epoch}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def augment(t: SliceTriplet, rng: np.random.Generator, angle_range=(-60.0, 60.0), p: float = 0.5) -> SliceTriplet:
    """With probability ``p`` rotate every view slice and the mask by one
    shared angle about the slice centre (bilinear images, nearest mask,
    zero fill).  Always consumes two draws from ``rng``."""
    u = rng.random()
    theta = rng.uniform(*angle_range) if angle_range[0] < angle_range[1] else float(angle_range[0])
    if u >= p:
        return t

    def rot(img, order):
        if img is None:
            return None
        out = ndimage.rotate(img, theta, axes=(1, 0), reshape=False, order=order, mode="constant", cval=0.0)
        return out.astype(np.float32)

    return SliceTriplet(rot(t.axial, 1), rot(t.sagittal, 1), rot(t.coronal, 1), rot(t.mask, 0), t.position, t.patient_id)


def _stack(triplets: Sequence[SliceTriplet], roles) -> tuple[dict, np.ndarray]:
    views = {}
    for r in roles:
        slices = [t.view(r) for t in triplets]
        if any(s is None for s in slices):
            missing = [t.patient_id for t, s in zip(triplets, slices) if s is None]
            raise DataError(f"{r} view missing for patients {missing}")
        views[r] = np.stack(slices)[:, None]
    mask = np.stack([t.mask for t in triplets])[:, None]
    return views, mask


def _batch_losses(model: TUNet, views, mask, cfg: TrainConfig, training: bool, rng=None):
    prob, emb = model.forward(views, training=training, rng=rng)
    dice = dice_loss(prob, mask, cfg.dice_eps)
    cont = None
    if cfg.uses_contrastive:
        cont = contrastive_loss(emb, cfg.temperature, allow_partial=cfg.views == 2)
    return dice, cont, total_loss(dice, cont, cfg.alpha)


class Streams:
    """Independent generators for batching, augmentation and dropout."""

    def __init__(self, cfg: TrainConfig):
        self.data = np.random.default_rng(np.random.SeedSequence([cfg.data_seed, 1]))
        self.aug = np.random.default_rng(np.random.SeedSequence([cfg.aug_seed, 2]))
        self.dropout = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 3]))


def epoch_plan(n_patients: int, cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """(positions, patient indices) per batch.

    Each round visits every patient once: the centre round places all of
    them at 0.5, each random round draws one position per batch
    (``position_mode="shared"``) or per patient (``"patient"``).  Patients
    are shuffled and split into near-equal batches.
    """
    n_batches = max(1, -(-n_patients // cfg.batch_size))
    rounds = [np.full(n_patients, 0.5)] if cfg.center_position else []
    for _ in range(cfg.random_positions):
        if cfg.position_mode == "shared":
            rounds.append(None)
        else:
            rounds.append(rng.uniform(*cfg.position_range, size=n_patients))
    plan = []
    for per_patient in rounds:
        for idx in np.array_split(rng.permutation(n_patients), n_batches):
            if per_patient is None:
                pos = np.full(len(idx), rng.uniform(*cfg.position_range))
            else:
                pos = per_patient[idx]
            plan.append((pos, idx))
    return plan


def validation_positions(cfg: TrainConfig, count: int = 11) -> np.ndarray:
    return np.linspace(*cfg.position_range, count)


def train_epoch(model: TUNet, patients: Sequence[PatientViews], cfg: TrainConfig, opt: AdamState, streams: Streams, epoch: int = 1) -> dict:
    """One pass over the training patients; returns mean losses."""
    if not patients:
        raise ConfigError("training set is empty")
    sums = {"dice": 0.0, "cont": 0.0, "total": 0.0}
    plan = epoch_plan(len(patients), cfg, streams.data)
    for b, (pos, idx) in enumerate(plan, start=1):
        triplets = [augment(make_triplets(patients[i], [q])[0], streams.aug, cfg.rotation_range, cfg.rotation_prob) for i, q in zip(idx, pos)]
        views, mask = _stack(triplets, cfg.roles)
        dice, cont, total = _batch_losses(model, views, mask, cfg, True, streams.dropout)
        parts = {"dice": dice.item(), "cont": cont.item() if cont is not None else 0.0, "total": total.item()}
        if not all(np.isfinite(v) for v in parts.values()):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}: {parts}")
        model.zero_grad()
        total.backward()
        adam_step(model.params, None, opt)
        for k in sums:
            sums[k] += parts[k]
    model.zero_grad()
    return {k: v / len(plan) for k, v in sums.items()}


def validation_loss(model: TUNet, patients: Sequence[PatientViews], cfg: TrainConfig) -> dict:
    """Eval-mode losses (no dropout, no augmentation) at evenly spaced
    positions across ``position_range``.

    Dice is pooled over every validation slice, so false positives on
    gland-free slices count; the contrastive term is averaged over one
    batch per position.
    """
    if not patients:
        raise ConfigError("validation set is empty")
    use_cont = cfg.uses_contrastive and len(patients) >= 2
    positions = validation_positions(cfg)
    probs, masks, conts = [], [], []
    with no_grad():
        for pos in positions:
            views, mask = _stack([make_triplets(p, [pos])[0] for p in patients], cfg.roles)
            prob, emb = model.forward(views)
            probs.append(prob.data)
            masks.append(mask)
            if use_cont:
                conts.append(contrastive_loss(emb, cfg.temperature, allow_partial=cfg.views == 2).item())
        dice = dice_loss(Tensor(np.concatenate(probs)), np.concatenate(masks), cfg.dice_eps).item()
    cont = float(np.mean(conts)) if use_cont else 0.0
    total = cfg.alpha * dice + (1 - cfg.alpha) * cont if use_cont else dice
    return {"dice": dice, "cont": cont, "total": total}


def fit(model_config: ModelConfig, cfg: TrainConfig, patients: Sequence[PatientViews], *, verbose: bool = False) -> tuple[TUNet, TrainLog]:
    """Train on ``patients`` with an inner patient-level validation split;
    returns the weights from the epoch with the lowest validation loss."""
    ids = [p.patient_id for p in patients]
    if len(ids) < 2:
        raise ConfigError("need at least two patients to carve out a validation set")
    train_ids, val_ids = split_patients(ids, 1.0 - cfg.val_fraction, seed=cfg.data_seed)
    if not val_ids:
        raise ConfigError("validation set is empty")
    if not train_ids:
        raise ConfigError("training set is empty")
    by_id = {p.patient_id: p for p in patients}
    train = [by_id[i] for i in train_ids]
    val = [by_id[i] for i in val_ids]

    start = time.perf_counter()
    model = TUNet(model_config, seed=cfg.init_seed)
    opt = AdamState(lr=cfg.lr)
    streams = Streams(cfg)
    log = TrainLog()
    key = "dice" if cfg.select_on == "dice" else "total"
    log.initial_val = validation_loss(model, val, cfg)[key]
    best_state, best_val = model.state_dict(), None
    for epoch in range(1, cfg.epochs + 1):
        tr = train_epoch(model, train, cfg, opt, streams, epoch)
        va = validation_loss(model, val, cfg)
        entry = {"epoch": epoch, **tr, "val": va[key]}
        log.entries.append(entry)
        if best_val is None or va[key] < best_val:
            best_val, best_state = va[key], model.state_dict()
            log.selected_epoch = epoch
        if verbose:
            print(f"epoch {epoch:3d}  dice {tr['dice']:.4f}  cont {tr['cont']:.4f}  total {tr['total']:.4f}  val {va[key]:.4f}", flush=True)
    model.load_state_dict(best_state)
    log.wall_time = time.perf_counter() - start
    return model, log


def predict_volume(model: TUNet, patient: PatientViews, roles=(AXIAL,), threshold: float = 0.5) -> Volume3D:
    """Binary axial-grid prediction assembled slice by slice; each axial
    slice is paired with the other views at the same fractional position."""
    for r in roles:
        if patient.view(r) is None:
            raise DataError(f"{patient.patient_id}: {r} view requested but absent")
    ax = patient.axial
    n = patient.n_slices(AXIAL)
    positions = [k / (n - 1) if n > 1 else 0.5 for k in range(n)]
    triplets = make_triplets(patient, positions)
    views, _ = _stack(triplets, roles)
    with no_grad():
        prob, _ = model.forward(views)
    # (n, 1, H, W) -> axial volume with the thick axis in place
    stack = np.moveaxis(prob.data[:, 0], 0, ax.thick_axis)
    return Volume3D((stack >= threshold).astype(np.uint8), ax.spacing)


def evaluate(model: TUNet, patients: Sequence[PatientViews], views="3", threshold: float = 0.5, workers: int = 1) -> MetricReport:
    """Per-patient, per-region metrics for one view regime.

    Predictions run sequentially (gradient recording is a process-wide
    switch); metric computation is spread over ``workers`` threads and
    rows keep the patient order.
    """
    roles = parse_views(views) if not isinstance(views, tuple) else views
    preds = [predict_volume(model, p, roles, threshold) for p in patients]
    jobs = [(pred, p.axial_mask, p.patient_id) for pred, p in zip(preds, patients)]
    report = MetricReport()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(lambda job: evaluate_patient(*job), jobs):
                report.extend(rows)
    else:
        for job in jobs:
            report.extend(evaluate_patient(*job))
    return report


def mean_wg_dsc(report: MetricReport) -> float:
    return float(np.mean(report.values("dsc", "WG")))


def cross_validate(model_config: ModelConfig, cfg: TrainConfig, patients: Sequence[PatientViews], k: int = 5, eval_views="3", seed: int = 0) -> dict:
    """``k`` train/test rotations over patient-level folds."""
    ids = [p.patient_id for p in patients]
    folds = kfold(ids, k, seed)
    by_id = {p.patient_id: p for p in patients}
    results = []
    for i, test_ids in enumerate(folds):
        held = set(test_ids)
        train = [p for p in patients if p.patient_id not in held]
        model, log = fit(model_config, cfg, train)
        report = evaluate(model, [by_id[j] for j in test_ids], eval_views)
        results.append({"fold": i, "test_ids": list(test_ids), "report": report, "log": log, "wg_dsc": mean_wg_dsc(report)})
    means = np.array([r["wg_dsc"] for r in results])
    return {
        "folds": results,
        "wg_dsc_mean": float(means.mean()),
        "wg_dsc_sd": float(means.std(ddof=1)) if len(means) > 1 else 0.0,
    }
