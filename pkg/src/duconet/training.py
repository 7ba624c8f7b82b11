"""Adam training loop with a step-decay learning-rate schedule."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import Batch, DucoNetConfig, Params, duconet_forward, init_params, make_batch, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    decay_epochs: list[int] = field(default_factory=lambda: [240, 285])
    decay_factor: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = [int(e) for e in self.decay_epochs]
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and (self.decay_epochs[0] < 0 or self.decay_epochs[-1] >= self.epochs):
            raise ValueError("decay_epochs must lie in [0, epochs)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def full_scale(cls, **changes) -> "TrainConfig":
        base = dict(epochs=120, batch_size=64, lr=1e-3, decay_epochs=[105, 115], decay_factor=10.0)
        base.update(changes)
        return cls(**base)

    @classmethod
    def desk(cls, epochs: int = 300, **changes) -> "TrainConfig":
        """Late two-step decay at 80% and 95% of the run."""
        base = dict(epochs=epochs, batch_size=8, decay_epochs=sorted({int(0.8 * epochs), int(0.95 * epochs)}))
        base.update(changes)
        return cls(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr / cfg.decay_factor**drops


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainResult:
    params: Params
    losses: list[float]
    lrs: list[float]


def write_loss_csv(path, losses: Sequence[float], lrs: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_l1", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(float(loss)), repr(float(lr))])


def train_batches(
    batch: Batch,
    targets: np.ndarray,
    model_cfg: DucoNetConfig,
    cfg: TrainConfig,
    params: Params | None = None,
    checkpoint_path: str | Path | None = None,
    ids: Sequence[str] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train on pre-stacked NCHW inputs; ``targets`` is (N, 3, H, W) ground-truth RGB."""
    n = batch.rgb.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if params is None:
        params = init_params(model_cfg)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    names = list(params)
    losses, lrs = [], []
    ckpt = Path(checkpoint_path) if checkpoint_path is not None else None

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        if ckpt is not None and epoch in cfg.decay_epochs:
            save_checkpoint(ckpt.with_name(f"{ckpt.stem}.epoch{epoch:04d}{ckpt.suffix}"), model_cfg, params)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            sub = Batch(batch.rgb[idx], batch.mask[idx], batch.lab[idx])
            out = duconet_forward(sub, params, model_cfg)
            loss = ad.l1_loss(out, Tensor(targets[idx]))
            value = loss.item()
            if not math.isfinite(value):
                bad = [ids[i] for i in idx]
                logger.error("non-finite loss at epoch %d, batch ids %s", epoch, bad)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} for samples {bad}")
            grads = ad.backward(loss)
            adam_step(
                params,
                {k: grads[id(params[k])] for k in names if id(params[k]) in grads},
                state,
                lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
        lrs.append(lr)
        logger.info("epoch %d  mean L1 %.6f  lr %.2e", epoch, losses[-1], lr)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])

    if ckpt is not None:
        save_checkpoint(ckpt, model_cfg, params)
    return TrainResult(params, losses, lrs)


def train(samples, model_cfg: DucoNetConfig, cfg: TrainConfig, checkpoint_path=None, loss_csv=None) -> TrainResult:
    """Train on a sequence of :class:`~duconet.synth.SyntheticSample`-like objects."""
    samples = list(samples)
    if not samples:
        raise ValueError("training set is empty")
    batch = make_batch([s.composite for s in samples], [s.mask for s in samples])
    targets = np.stack([s.gt for s in samples]).transpose(0, 3, 1, 2).copy()
    result = train_batches(batch, targets, model_cfg, cfg, checkpoint_path=checkpoint_path, ids=[s.id for s in samples])
    if loss_csv is not None:
        write_loss_csv(loss_csv, result.losses, result.lrs)
    return result
