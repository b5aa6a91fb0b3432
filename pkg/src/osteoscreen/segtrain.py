"""Training loop for the mixture segmentation network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import AnnotatedImage
from .diffcore import functional as F
from .diffcore.optim import Adam
from .diffcore.tensor import Tape, Tensor
from .mixunet import MixtureNet, NetConfig, atom_weights, draw_noise, mask_from_probs, mixture_probs
from .otcoupling import anneal_gamma, assemble_loss, cost_matrix, soft_cost_matrix, solve_relaxed


@dataclass
class SegTrainConfig:
    steps: int = 200
    batch: int = 4
    lr: float = 1e-2
    lam: float = 1.0
    gamma0: float = 0.75
    anneal_fraction: float = 0.5
    epsilon: float = 0.01
    sinkhorn_iters: int = 200
    plan_cost: str = "hard"  # "hard" (argmax IoU) or "soft" (surrogate) for the inner solve

    def to_dict(self) -> dict:
        return asdict(self)


def _batch_arrays(items: list[AnnotatedImage]) -> np.ndarray:
    return np.stack([it.image for it in items])[:, None]


def train_step(net: MixtureNet, opt: Adam, items: list[AnnotatedImage], gamma: float,
               cfg: SegTrainConfig, rng: np.random.Generator, dump=None) -> dict:
    c = net.config
    net.zero_grad()
    stats = {"transport_term": 0.0, "kl_term": 0.0, "total": 0.0}
    with Tape() as tape:
        u_e, u_d = net.features(Tensor(_batch_arrays(items)))
        pi = F.softmax(net.route_logits(u_e), axis=-1)
        losses = []
        for n, item in enumerate(items):
            atoms = net.atoms(u_d[n], draw_noise(rng, c.K, c.S, c.L))
            soft = soft_cost_matrix(atoms, item.annotations)
            hard = cost_matrix(atoms.data, item.annotations) if cfg.plan_cost == "hard" else soft.data
            alpha = atom_weights(pi[n], c.S)
            plan = solve_relaxed(hard, item.weights, max(gamma, 1.0 / (c.K * c.S)),
                                 cfg.epsilon, cfg.sinkhorn_iters, alpha=alpha.data)
            if dump is not None:
                dump.write(json.dumps({"image_id": item.image_id, **plan.to_dict()}) + "\n")
            out = assemble_loss(plan, soft, alpha, cfg.lam)
            losses.append(out.total)
            for k, v in out.as_floats().items():
                if k in stats:
                    stats[k] += v / len(items)
        loss = F.stack(losses).mean()
    tape.backward(loss)
    opt.step()
    return stats


def train_segmentation(net: MixtureNet, items: list[AnnotatedImage], cfg: SegTrainConfig,
                       rng: np.random.Generator, log=None, dump_plan: str | Path | None = None) -> list[dict]:
    opt = Adam(net.parameters(), lr=cfg.lr)
    ramp = max(1, int(round(cfg.anneal_fraction * cfg.steps)))
    history = []
    dump = open(dump_plan, "w") if dump_plan else None
    try:
        order = np.array([], dtype=int)
        for step in range(cfg.steps):
            if len(order) < cfg.batch:
                order = np.concatenate([order, rng.permutation(len(items))])
            idx, order = order[:cfg.batch], order[cfg.batch:]
            gamma = anneal_gamma(step, ramp, cfg.gamma0)
            stats = train_step(net, opt, [items[i] for i in idx], gamma, cfg, rng, dump)
            stats.update(step=step, gamma=gamma)
            history.append(stats)
            if log is not None:
                log(stats)
    finally:
        if dump is not None:
            dump.close()
    return history


def predict_batch(net: MixtureNet, images: np.ndarray, S: int, rng: np.random.Generator):
    """Masks, confidences, routing weights and atoms for a stack of images ``(N, H, W)``."""
    c = net.config
    u_e, u_d = net.features(Tensor(np.asarray(images)[:, None]))
    pis = F.softmax(net.route_logits(u_e), axis=-1).data
    out = []
    for n in range(len(images)):
        atoms = net.atoms(u_d[n], draw_noise(rng, c.K, S, c.L)).data
        mask, conf = mask_from_probs(mixture_probs(atoms, atom_weights(pis[n], S)))
        out.append((mask, conf, pis[n], atoms))
    return out


def build_net(num_classes: int, rng: np.random.Generator, **overrides) -> MixtureNet:
    return MixtureNet(NetConfig(num_classes=num_classes, **overrides), rng)
