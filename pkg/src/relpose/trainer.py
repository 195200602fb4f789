"""ADAM training with a two-phase schedule and periodic scene-adaptation refresh."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError
from .losses import ALPHA, BETA
from .model import RelPoseModel, pair_loss
from .synth import ScenePair, View, scene_adaptation_targets, targets_hash

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epoch", "phase", "pose", "inliers", "keypoints", "total"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 100
    phase1_fraction: float = 0.5
    phase1_freeze_keypoints: bool = True
    adaptation_period_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    alpha: float = ALPHA
    beta: float = BETA
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @property
    def phase1_epochs(self) -> int:
        return int(round(self.phase1_fraction * self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig, lr_multipliers: dict[str, float] | None = None) -> OptimizerState:
    """Bias-corrected ADAM in place.  Parameters with multiplier 0 (or no
    gradient entry) are left untouched, moments included."""
    state.step += 1
    t = state.step
    lr = config.learning_rate
    for name, p in params.items():
        mult = 1.0 if lr_multipliers is None else lr_multipliers.get(name, 1.0)
        if mult == 0 or name not in grads:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - config.beta1 ** t)
        v_hat = v / (1 - config.beta2 ** t)
        p.data = p.data - mult * lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def views_of(pairs: Sequence[ScenePair]) -> list[View]:
    seen: dict[str, View] = {}
    for p in pairs:
        seen.setdefault(p.query.id, p.query)
        seen.setdefault(p.reference.id, p.reference)
    return [seen[k] for k in sorted(seen)]


def compute_targets(model: RelPoseModel, pairs: Sequence[ScenePair]) -> dict[str, np.ndarray]:
    return scene_adaptation_targets(views_of(pairs), pairs, lambda v: model.extract(v.features))


@dataclass
class TrainResult:
    model: RelPoseModel
    log: list[dict]
    target_hashes: list[tuple[int, str]]  # (first epoch of period, hash)
    state: OptimizerState


def train(pairs: Sequence[ScenePair], model: RelPoseModel, config: TrainConfig,
          on_epoch: Callable[[int, list[dict]], None] | None = None) -> TrainResult:
    if not pairs:
        raise DataError("training needs at least one pair")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    kp_names = set(model.keypoint_parameters())
    state = OptimizerState()
    rows: list[dict] = []
    hashes: list[tuple[int, str]] = []
    targets: dict[str, np.ndarray] = {}
    step = 0
    for epoch in range(config.epochs):
        if config.adaptation_period_epochs > 0 and epoch % config.adaptation_period_epochs == 0:
            targets = compute_targets(model, pairs)
            hashes.append((epoch, targets_hash(targets)))
            log.info("epoch %d: keypoint targets refreshed (%s)", epoch, hashes[-1][1])
        phase = 1 if epoch < config.phase1_epochs else 2
        frozen = phase == 1 and config.phase1_freeze_keypoints
        mult = {n: 0.0 for n in kp_names} if frozen else None
        order = rng.permutation(len(pairs))
        epoch_rows = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = {n: np.zeros(p.shape) for n, p in params.items()}
            sums = np.zeros(4)
            for k in batch:
                for p in params.values():
                    p.grad = None
                loss, _ = pair_loss(model, pairs[k], targets, config.alpha, config.beta)
                ad.Tape(loss.total).backward()
                for n, p in params.items():
                    if p.grad is not None:
                        grads[n] += p.grad
                r = loss.as_row()
                sums += [r["pose"], r["inliers"], r["keypoints"], r["total"]]
            for n in grads:
                grads[n] /= len(batch)
            if frozen:
                for n in kp_names:
                    grads.pop(n)
            clip_global_norm(grads, config.grad_clip)
            adam_step(params, grads, state, config, mult)
            step += 1
            mean = sums / len(batch)
            row = {"step": step, "epoch": epoch, "phase": phase, "pose": mean[0], "inliers": mean[1],
                   "keypoints": mean[2], "total": mean[3]}
            rows.append(row)
            epoch_rows.append(row)
        for p in params.values():
            p.grad = None
        if on_epoch is not None:
            on_epoch(epoch, epoch_rows)
    return TrainResult(model, rows, hashes, state)


def smoothed(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["epoch"], r["phase"]] + [repr(float(r[k])) for k in LOG_COLUMNS[3:]])
