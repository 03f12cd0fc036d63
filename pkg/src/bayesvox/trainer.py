"""Minibatch training loop: Adam updates, per-epoch validation with one MC
sample, best-checkpoint retention, and an append-only CSV log.

Everything stochastic (validation split, epoch shuffling, weight and mask
sampling) draws from one generator seeded by ``TrainConfig.seed``, so a
fixed seed and thread count reproduce the log bit for bit. A non-finite
loss aborts with the name of the first offending tensor.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import mean_dice, voxel_entropy
from .model import MeshNet, save_checkpoint
from .objectives import ObjectiveConfig, elbo_loss, map_loss
from .tensor import Tensor

__all__ = ["TrainConfig", "TrainingAborted", "Adam", "LogRow", "TrainResult", "train", "validate"]


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite; names the first bad tensor."""

    def __init__(self, message: str, tensor_name: str):
        super().__init__(message)
        self.tensor_name = tensor_name


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    minibatch_size: int = 8
    epochs: int = 1
    seed: int = 0
    checkpoint_dir: str | Path | None = None
    validation_fraction: float = 0.1
    val_every: int | None = None  # extra validation rows every this many steps
    log_path: str | Path | None = None
    zero_wall_clock: bool = False  # deterministic runs write 0.0 wall seconds

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"TrainConfig: learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"TrainConfig: betas must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.minibatch_size < 1 or self.epochs < 1:
            raise ValueError("TrainConfig: minibatch_size and epochs must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(
                f"TrainConfig: validation_fraction must lie in [0,1), got {self.validation_fraction}"
            )


class Adam:
    """Standard Adam with bias correction; per-parameter step counters."""

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.cfg = cfg
        self.params = params
        self._m = [np.zeros_like(t.data) for _, t in params]
        self._v = [np.zeros_like(t.data) for _, t in params]
        self._t = [0] * len(params)

    def step(self):
        c = self.cfg
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(
                    f"Adam: gradient shape {g.shape} does not match parameter "
                    f"{name} shape {p.data.shape}"
                )
            self._t[i] += 1
            t = self._t[i]
            m, v = self._m[i], self._v[i]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            m_hat = m / (1 - c.beta1**t)
            v_hat = v / (1 - c.beta2**t)
            p.data -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


@dataclass
class LogRow:
    epoch: int
    step: int
    train_loss: float
    val_dice: float
    val_entropy: float
    wall_seconds: float


@dataclass
class TrainResult:
    log_rows: list[LogRow]
    best_val_dice: float
    best_epoch: int
    best_checkpoint: Path | None
    steps: int


def _normalize_pair(x, y):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    y = np.asarray(y)
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[1:] != y.shape:
        raise ValueError(f"train: bad example shapes x {x.shape}, y {y.shape}")
    return x, y


def validate(model: MeshNet, pairs, rng: np.random.Generator) -> tuple[float, float]:
    """Mean Dice and mean voxel entropy over ``pairs`` with one MC sample each."""
    dices = []
    entropies = []
    for x, y in pairs:
        x, y = _normalize_pair(x, y)
        probs = model.predict_mc(x, n_mc=1, rng=rng).data
        dice, _ = mean_dice(np.argmax(probs, axis=0), y, model.cfg.num_classes)
        dices.append(dice)
        entropies.append(float(np.mean(voxel_entropy(probs))))
    return float(np.mean(dices)), float(np.mean(entropies))


def _first_nonfinite(model: MeshNet, logits: list[Tensor]) -> str:
    for i, z in enumerate(logits):
        if not np.all(np.isfinite(z.data)):
            return f"logits[example {i}]"
    for name, p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name}.grad"
    return "loss"


def train(
    model: MeshNet,
    pairs,
    cfg: TrainConfig,
    objective: ObjectiveConfig,
    val_pairs=None,
) -> TrainResult:
    """Optimize ``model`` on (subvolume, labels) pairs.

    When ``val_pairs`` is None, ``cfg.validation_fraction`` of the data is
    split off first (seeded). ``objective.dataset_size`` must equal the
    resulting training-set size; a mismatch is an error rather than a
    silent mis-scaling of the likelihood. Incomplete trailing minibatches
    are dropped; with per-epoch reshuffling every example still trains.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train: empty dataset")
    rng = np.random.default_rng(cfg.seed)

    if val_pairs is None and cfg.validation_fraction > 0:
        n_val = max(1, round(cfg.validation_fraction * len(pairs)))
        perm = rng.permutation(len(pairs))
        val_pairs = [pairs[i] for i in perm[:n_val]]
        pairs = [pairs[i] for i in perm[n_val:]]
    val_pairs = list(val_pairs) if val_pairs else []

    if objective.dataset_size != len(pairs):
        raise ValueError(
            f"train: objective.dataset_size is {objective.dataset_size} but the "
            f"training split holds {len(pairs)} subvolumes"
        )
    m = cfg.minibatch_size
    if len(pairs) < m:
        raise ValueError(f"train: {len(pairs)} training subvolumes cannot fill a minibatch of {m}")

    optimizer = Adam(model.parameters(), cfg)
    log_rows: list[LogRow] = []
    best_val_dice = -1.0
    best_epoch = -1
    best_path: Path | None = None
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    writer = None
    log_fh = None
    if cfg.log_path:
        log_fh = open(cfg.log_path, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "step", "train_loss", "val_dice", "val_entropy", "wall_seconds"])

    t0 = time.perf_counter()
    global_step = 0
    losses_since_log: list[float] = []

    def emit_row(epoch: int):
        nonlocal best_val_dice, best_epoch, best_path, losses_since_log
        val_dice, val_entropy = validate(model, val_pairs, rng) if val_pairs else (float("nan"),) * 2
        wall = 0.0 if cfg.zero_wall_clock else time.perf_counter() - t0
        mean_loss = float(np.mean(losses_since_log)) if losses_since_log else float("nan")
        row = LogRow(epoch, global_step, mean_loss, val_dice, val_entropy, wall)
        log_rows.append(row)
        if writer:
            writer.writerow(
                [row.epoch, row.step, f"{row.train_loss:.6f}", f"{row.val_dice:.6f}",
                 f"{row.val_entropy:.6f}", f"{row.wall_seconds:.3f}"]
            )
            log_fh.flush()
        losses_since_log = []
        if val_pairs and val_dice > best_val_dice:
            best_val_dice = val_dice
            best_epoch = epoch
            if ckpt_dir:
                best_path = ckpt_dir / "best.bvxl"
                save_checkpoint(model, best_path, seed=cfg.seed)

    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(pairs))
            for start in range(0, len(pairs) - m + 1, m):
                batch = [pairs[i] for i in order[start : start + m]]
                model.zero_grad()
                logits = []
                labels = []
                for x, y in batch:
                    x, y = _normalize_pair(x, y)
                    logits.append(model.forward(Tensor(x.astype(model.dtype, copy=False)), rng, mode="sample"))
                    labels.append(y)
                if objective.method == "ssd":
                    loss = elbo_loss(logits, labels, model.layer_kls(), objective)
                else:
                    loss = map_loss(logits, labels, model.weight_tensors(), objective)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    name = _first_nonfinite(model, logits)
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {global_step + 1}; "
                        f"first non-finite tensor: {name}",
                        tensor_name=name,
                    )
                T.backward(loss)
                optimizer.step()
                global_step += 1
                losses_since_log.append(loss_val)
                if cfg.val_every and global_step % cfg.val_every == 0:
                    emit_row(epoch)
            emit_row(epoch)
    finally:
        if log_fh:
            log_fh.close()

    return TrainResult(
        log_rows=log_rows,
        best_val_dice=best_val_dice,
        best_epoch=best_epoch,
        best_checkpoint=best_path,
        steps=global_step,
    )
