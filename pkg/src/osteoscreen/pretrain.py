"""Contrastive pretraining of the patch encoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .cropaug import AugmentConfig, CropStats, ViewSpec, make_views
from .diffcore import functional as F
from .diffcore.nn import Conv2d, Linear, Module
from .diffcore.tensor import Tape, Tensor, as_tensor
from .errors import ContractError


class Encoder(Module):
    """Four conv blocks and global pooling (width R), then a 2-layer projection (width E).

    The projection standardizes its hidden layer over the batch, so
    ``forward`` needs a batch of at least two views.
    """

    def __init__(self, rng: np.random.Generator, widths=(8, 16, 32, 64), embed: int = 32, in_channels: int = 1):
        chans = (in_channels,) + tuple(widths)
        self.blocks = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=1 if i == 0 else 2) for i in range(len(widths))]
        self.proj_in = Linear(widths[-1], widths[-1], rng)
        self.proj_out = Linear(widths[-1], embed, rng)

    @property
    def R(self) -> int:
        return self.blocks[-1].weight.shape[0]

    def backbone_parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def represent(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim == 3:
            h = h.reshape(h.shape[0], 1, *h.shape[1:])
        for block in self.blocks:
            h = F.relu(block(h))
        return F.global_avg_pool(h)

    def project(self, r) -> Tensor:
        h = F.relu(F.batch_standardize(self.proj_in(r)))
        return self.proj_out(h)

    def forward(self, x) -> Tensor:
        return F.l2_normalize(self.project(self.represent(x)), axis=-1)


def ntxent_loss(embeddings, temperature: float = 0.5, groups=None) -> Tensor:
    """Normalized-temperature cross-entropy over view groups.

    ``groups[i]`` names the source image of row ``i``; without it rows ``i``
    and ``i + B`` form the pairs.  Every other view of the same source is a
    positive, every view of another source a negative, self-pairs are
    excluded, and the loss is the mean over all (anchor, positive) pairs.
    """
    z = as_tensor(embeddings)
    v = z.shape[0]
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if groups is None:
        if v % 2:
            raise ContractError("paired layout needs an even number of rows")
        groups = np.tile(np.arange(v // 2), 2)
    groups = np.asarray(groups)
    if len(np.unique(groups)) < 2:
        raise ContractError("need views from at least two sources")
    eye = np.eye(v, dtype=bool)
    positives = (groups[:, None] == groups[None, :]) & ~eye
    if not positives.any():
        raise ContractError("every source needs at least two views")
    sim = F.matmul(z, z.T) * (1.0 / temperature)
    logits = F.where(eye, Tensor(np.full((v, v), -1e30)), sim)
    logp = F.log_softmax(logits, axis=1)
    weight = positives.astype(np.float64)
    return -(logp * Tensor(weight)).sum() * (1.0 / weight.sum())


@dataclass
class ScheduleState:
    base_lr: float
    min_lr: float
    total_steps: int
    step: int = 0
    trust_coefficient: float = 0.001


def cosine_lr(state: ScheduleState) -> float:
    if state.total_steps <= 0:
        return state.min_lr
    t = min(max(state.step, 0), state.total_steps) / state.total_steps
    return state.min_lr + 0.5 * (state.base_lr - state.min_lr) * (1.0 + math.cos(math.pi * t))


def local_lr(w: np.ndarray, g: np.ndarray, trust_coefficient: float) -> float:
    return trust_coefficient * float(np.linalg.norm(w)) / (float(np.linalg.norm(g)) + 1e-12)


def trust_ratio_step(params, grads, lr: float, trust_coefficient: float) -> list[np.ndarray]:
    """Layer-wise clipped update ``w - lr * min(1, local_lr / lr) * g``.

    A group whose weights are all zero (typically a fresh bias) has no scale
    to compare against and takes the plain step.
    """
    out = []
    for w, g in zip(params, grads):
        w = np.asarray(w, dtype=np.float64)
        if g is None:
            out.append(w.copy())
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.any(g):
            out.append(w.copy())
            continue
        if np.any(w):
            eff = lr * min(1.0, local_lr(w, g, trust_coefficient) / lr) if lr > 0 else 0.0
        else:
            eff = lr
        out.append(w - eff * g)
    return out


class LARC:
    """Trust-ratio clipping on top of SGD with optional heavy-ball momentum."""

    def __init__(self, params: list[Tensor], trust_coefficient: float = 0.001, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.trust = trust_coefficient
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = []
        for p, buf in zip(self.params, self.buf):
            if p.grad is None:
                grads.append(None)
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf *= self.momentum
                buf += g
                g = buf
            grads.append(g)
        new = trust_ratio_step([p.data for p in self.params], grads, lr, self.trust)
        for p, w in zip(self.params, new):
            p.data = w

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch: int = 16
    temperature: float = 0.5
    base_lr: float = 0.1
    min_lr: float = 0.001
    trust_coefficient: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    views: ViewSpec = field(default_factory=ViewSpec)

    def to_dict(self) -> dict:
        return asdict(self)


def resize_square(x: np.ndarray, size: int) -> np.ndarray:
    if x.shape == (size, size):
        return x
    return np.clip(ndimage.zoom(x, size / x.shape[0], order=1, grid_mode=True, mode="grid-constant"), 0.0, 1.0)


def build_view_batch(images, source_ids, cfg: PretrainConfig, rng: np.random.Generator,
                     stats: CropStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All views of a batch at the global size plus their source index."""
    views, groups = [], []
    for idx, (img, sid) in enumerate(zip(images, source_ids)):
        vs = make_views(img, cfg.augment, cfg.views, rng, sid, stats)
        for view in vs.views:
            views.append(resize_square(view, cfg.views.global_size))
            groups.append(idx)
    return np.stack(views)[:, None], np.asarray(groups)


class Pretrainer:
    """Holds optimizer and schedule state across epochs."""

    def __init__(self, encoder: Encoder, cfg: PretrainConfig, steps_per_epoch: int):
        self.encoder = encoder
        self.cfg = cfg
        self.opt = LARC(encoder.parameters(), cfg.trust_coefficient, cfg.momentum, cfg.weight_decay)
        self.schedule = ScheduleState(cfg.base_lr, cfg.min_lr, cfg.epochs * steps_per_epoch, 0, cfg.trust_coefficient)
        self.crop_stats = CropStats()

    def step(self, images, source_ids, rng: np.random.Generator) -> float:
        if len(set(source_ids)) < 2:
            raise ContractError("a pretraining batch needs at least two distinct source images")
        x, groups = build_view_batch(images, source_ids, self.cfg, rng, self.crop_stats)
        self.opt.zero_grad()
        with Tape() as tape:
            loss = ntxent_loss(self.encoder(Tensor(x)), self.cfg.temperature, groups)
        tape.backward(loss)
        self.opt.step(cosine_lr(self.schedule))
        self.schedule.step += 1
        return loss.item()


def pretrain_epoch(trainer: Pretrainer, images: list[np.ndarray], source_ids: list[str],
                   rng: np.random.Generator) -> float:
    """One shuffled pass; the trailing partial batch is dropped if it has a single source."""
    order = rng.permutation(len(images))
    b = trainer.cfg.batch
    losses = []
    for start in range(0, len(order), b):
        idx = order[start:start + b]
        if len(idx) < 2:
            continue
        losses.append(trainer.step([images[i] for i in idx], [source_ids[i] for i in idx], rng))
    if not losses:
        raise ContractError("no batch with two or more source images")
    return float(np.mean(losses))
