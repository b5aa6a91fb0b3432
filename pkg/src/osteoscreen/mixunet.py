"""Segmentation network with a mixture of latent-modulated decoder heads.

A small U-Net produces encoder features ``u_e`` (``F1`` channels at 1/8
resolution) and decoder features ``u_d`` (``F2`` channels at full
resolution).  Each of ``K`` modules owns a Gaussian latent and two
projections; a sample ``z`` turns ``u_d`` into ``(W_s z) * (u_d + W_b z)``,
which a shared stack of 1x1 convolutions maps to class scores.  A routing
MLP on pooled ``u_e`` gives the module weights ``pi``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import functional as F
from .diffcore.nn import MLP, Conv2d, Module
from .diffcore.tensor import Tensor, as_tensor
from .errors import ContractError, DimensionError


@dataclass
class NetConfig:
    num_classes: int = 2
    K: int = 4
    S: int = 8
    L: int = 8
    F1: int = 32
    F2: int = 16
    routing_hidden: int = 32
    in_channels: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


class ModuleLatent(Module):
    def __init__(self, L: int, F2: int, rng: np.random.Generator):
        self.mu = Tensor(rng.normal(0.0, 0.1, size=L), requires_grad=True)
        self.log_sigma = Tensor(np.zeros(L), requires_grad=True)
        self.W_s = Tensor(rng.normal(0.0, 1.0 / np.sqrt(L), size=(F2, L)), requires_grad=True)
        self.W_b = Tensor(rng.normal(0.0, 1.0 / np.sqrt(L), size=(F2, L)), requires_grad=True)

    @property
    def L(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def sample(self, noise: np.ndarray) -> Tensor:
        """Reparameterised draws ``mu + sigma * noise`` for noise of shape ``(S, L)``."""
        return self.mu + F.exp(self.log_sigma) * Tensor(noise)

    def projections(self, z) -> tuple[Tensor, Tensor]:
        """``(W_s z, W_b z)`` row-wise for ``z`` of shape ``(S, L)``."""
        z = as_tensor(z)
        return F.matmul(z, self.W_s.T), F.matmul(z, self.W_b.T)


def modulate(u_d, latent: ModuleLatent, z) -> Tensor:
    """Channel-wise scale and shift of ``u_d`` ``(F2, H, W)`` by one latent ``z``."""
    u_d = as_tensor(u_d)
    z = as_tensor(z)
    if z.shape != (latent.L,):
        raise DimensionError(f"latent has length {latent.L}, got z of shape {z.shape}")
    if u_d.ndim != 3 or u_d.shape[0] != latent.W_s.shape[0]:
        raise DimensionError(f"expected u_d with {latent.W_s.shape[0]} channels, got {u_d.shape}")
    scale, bias = latent.projections(z.reshape(1, -1))
    return scale.reshape(-1, 1, 1) * (u_d + bias.reshape(-1, 1, 1))


def _modulate_many(u_d: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    # u_d (F2,H,W), scale/bias (A,F2) -> (A,F2,H,W)
    a, f = scale.shape
    return scale.reshape(a, f, 1, 1) * (u_d.reshape(1, *u_d.shape) + bias.reshape(a, f, 1, 1))


class MixtureNet(Module):
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        if config.K < 1 or config.num_classes < 2:
            raise ContractError("need K >= 1 and at least two classes")
        self.config = config
        c = config
        widths = (8, 16, 24, c.F1)
        self.stem = Conv2d(c.in_channels, widths[0], 3, rng)
        self.down = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2) for i in range(3)]
        dec_out = (widths[2], widths[1], c.F2)
        self.up = [
            Conv2d(widths[3] + widths[2], dec_out[0], 3, rng),
            Conv2d(dec_out[0] + widths[1], dec_out[1], 3, rng),
            Conv2d(dec_out[1] + widths[0], dec_out[2], 3, rng),
        ]
        self.latents = [ModuleLatent(c.L, c.F2, rng) for _ in range(c.K)]
        self.head = [Conv2d(c.F2, c.F2, 1, rng), Conv2d(c.F2, c.F2, 1, rng), Conv2d(c.F2, c.num_classes, 1, rng)]
        self.router = MLP([c.F1, c.routing_hidden, c.K], rng)

    # -- backbone -----------------------------------------------------------
    def features(self, x) -> tuple[Tensor, Tensor]:
        """``(u_e, u_d)`` for a batch ``(N, C_in, H, W)``; H and W divisible by 8."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[2] % 8 or x.shape[3] % 8:
            raise DimensionError(f"expected (N, C, H, W) with H, W divisible by 8, got {x.shape}")
        skips = [F.relu(self.stem(x))]
        h = skips[0]
        for conv in self.down:
            h = F.relu(conv(h))
            skips.append(h)
        u_e = h
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            h = F.relu(conv(F.concat([F.upsample_nearest(h, 2), skip], axis=1)))
        return u_e, h

    def route_logits(self, u_e) -> Tensor:
        return self.router(F.global_avg_pool(u_e))

    def head_forward(self, h) -> Tensor:
        for i, conv in enumerate(self.head):
            h = conv(h)
            if i < len(self.head) - 1:
                h = F.relu(h)
        return h

    def atoms(self, u_d_single: Tensor, noise: np.ndarray) -> Tensor:
        """Score maps ``(K*S, C, H, W)`` for one image; ``noise`` is ``(K, S, L)``."""
        scales, biases = [], []
        for latent, eps in zip(self.latents, noise):
            s, b = latent.projections(latent.sample(eps))
            scales.append(s)
            biases.append(b)
        scale = F.concat(scales, axis=0)
        bias = F.concat(biases, axis=0)
        return self.head_forward(_modulate_many(u_d_single, scale, bias))


def route(u_e, router: MLP) -> Tensor:
    """Routing weights from globally pooled encoder features ``(F1, H', W')``."""
    u_e = as_tensor(u_e)
    pooled = F.global_avg_pool(u_e).reshape(1, -1)
    return F.softmax(router(pooled), axis=-1).reshape(-1)


@dataclass
class MixturePrediction:
    atoms: np.ndarray  # (K*S, C, H, W), module-major
    weights: np.ndarray  # (K*S,)
    pi: np.ndarray  # (K,)
    S: int

    @property
    def K(self) -> int:
        return len(self.pi)

    def module_atoms(self, k: int) -> np.ndarray:
        return self.atoms[k * self.S:(k + 1) * self.S]


def atom_weights(pi, S: int):
    """Per-atom mass ``pi_k / S`` in module-major order (works on tensors too)."""
    if S < 1:
        raise ContractError("S must be >= 1")
    if isinstance(pi, Tensor):
        k = pi.shape[0]
        return (pi.reshape(k, 1) * Tensor(np.full((1, S), 1.0 / S))).reshape(k * S)
    pi = np.asarray(pi, dtype=np.float64)
    return np.repeat(pi / S, S)


def draw_noise(rng: np.random.Generator, K: int, S: int, L: int) -> np.ndarray:
    return rng.standard_normal((K, S, L))


def _as_batch(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    return x


def sample_predictive(net: MixtureNet, x, S: int, rng: np.random.Generator) -> MixturePrediction:
    """Draw ``S`` atoms per module for a single image (encoder and decoder run once)."""
    if S < 1:
        raise ContractError("S must be >= 1")
    batch = _as_batch(x)
    if batch.shape[0] != 1:
        raise DimensionError("sample_predictive takes a single image")
    c = net.config
    u_e, u_d = net.features(batch)
    pi = F.softmax(net.route_logits(u_e), axis=-1).data[0]
    atoms = net.atoms(u_d[0], draw_noise(rng, c.K, S, c.L)).data
    return MixturePrediction(atoms=atoms, weights=atom_weights(pi, S), pi=pi, S=S)


def mixture_probs(atom_scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted average of per-atom softmax maps: ``(N, C, H, W) -> (C, H, W)``."""
    s = atom_scores - atom_scores.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return np.tensordot(np.asarray(weights), p, axes=(0, 0))


def mask_from_probs(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax (first index wins ties) and its probability."""
    mask = probs.argmax(axis=0)
    conf = np.take_along_axis(probs, mask[None], axis=0)[0]
    return mask, conf


def predict_mask(net: MixtureNet, x, S: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pred = sample_predictive(net, x, S, rng)
    return mask_from_probs(mixture_probs(pred.atoms, pred.weights))
