"""Shared prototype space: projection, distances, log-ratio scores, top-K, KL alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import uniform_weight

KL_SMOOTHING = 1e-8


class KTooLarge(ValueError):
    pass


@dataclass
class PrototypeSpace:
    prototypes: Tensor  # (C*N, d_p); flat index c*N + n
    w_g: Tensor  # (d_p, d_g)
    b_g: Tensor
    w_t: Tensor  # (d_p, d_t)
    b_t: Tensor
    num_classes: int
    per_class: int
    top_k: int
    eps: float = 1e-4

    def __post_init__(self):
        if self.num_classes < 1 or self.per_class < 1:
            raise ValueError("need C >= 1 and N >= 1")
        if not 1 <= self.top_k <= self.num_classes * self.per_class:
            raise KTooLarge(f"K={self.top_k} outside [1, {self.num_classes * self.per_class}]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def init(cls, rng, num_classes: int, per_class: int, d_p: int, d_g: int, d_t: int,
             top_k: int, eps: float = 1e-4) -> PrototypeSpace:
        protos = rng.normal(0.0, np.sqrt(1.0 / d_p), size=(num_classes * per_class, d_p))
        return cls(Tensor(protos, requires_grad=True),
                   uniform_weight(rng, d_p, d_g), Tensor(np.zeros(d_p), requires_grad=True),
                   uniform_weight(rng, d_p, d_t), Tensor(np.zeros(d_p), requires_grad=True),
                   num_classes, per_class, top_k, eps)

    @property
    def size(self) -> int:
        return self.num_classes * self.per_class

    @property
    def width(self) -> int:
        return self.prototypes.shape[1]

    def class_of(self, flat_index: int) -> tuple[int, int]:
        return divmod(int(flat_index), self.per_class)

    def named(self, prefix: str = "proto") -> dict[str, Tensor]:
        return {f"{prefix}.prototypes": self.prototypes, f"{prefix}.w_g": self.w_g,
                f"{prefix}.b_g": self.b_g, f"{prefix}.w_t": self.w_t, f"{prefix}.b_t": self.b_t}


@dataclass
class PrototypeDistribution:
    probs: Tensor  # full length C*N (or (batch, C*N)), zero off the support
    support: np.ndarray  # retained flat indices, (K,) or (batch, K)
    retained: Tensor  # probabilities on the support, same order as ``support``


def aggregate_layers(layers: list[Tensor]) -> Tensor:
    if not layers:
        raise ValueError("no layers to aggregate")
    return ad.stack_mean(layers)


def project_to_proto(z: Tensor, modality: str, space: PrototypeSpace) -> Tensor:
    if modality == "graph":
        w, b = space.w_g, space.b_g
    elif modality == "text":
        w, b = space.w_t, space.b_t
    else:
        raise ValueError(f"unknown modality {modality!r}")
    if z.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"{modality} vector width {z.shape[-1]} != {w.shape[1]}")
    if z.value.ndim == 1:
        return ad.add(ad.matmul(w, z), b)
    return ad.add_row(ad.matmul(z, ad.transpose(w)), b)


def proto_distances(z_p: Tensor, space: PrototypeSpace) -> Tensor:
    return ad.sq_dist(z_p, space.prototypes)


def log_ratio_similarity(d: Tensor, eps: float) -> Tensor:
    """log((D + 1) / (D + eps)); decreasing in D, in (0, log(1/eps)]."""
    return ad.sub(ad.log(ad.add(d, 1.0)), ad.log(ad.add(d, eps)))


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lowest index, sorted ascending."""
    n = scores.shape[-1]
    if k > n:
        raise KTooLarge(f"K={k} exceeds {n} entries")
    if k < 1:
        raise KTooLarge("K must be at least 1")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def _index(support: np.ndarray):
    if support.ndim == 1:
        return (support,)
    rows = np.repeat(np.arange(support.shape[0])[:, None], support.shape[1], axis=1)
    return (rows, support)


def topk_sparsify(s: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the K largest scores, zero the rest; selection carries no gradient."""
    support = topk_indices(s.value, k)
    idx = _index(support)
    return ad.scatter(ad.gather(s, idx), idx, s.shape), support


def proto_distribution(masked: Tensor, support: np.ndarray) -> PrototypeDistribution:
    """Softmax over the retained entries only; everything else is exactly 0."""
    idx = _index(support)
    kept = ad.gather(masked, idx)
    retained = ad.softmax_rows(kept)
    return PrototypeDistribution(ad.scatter(retained, idx, masked.shape), support, retained)


def distribution_for(z: Tensor, modality: str, space: PrototypeSpace) -> PrototypeDistribution:
    """Projection -> distances -> similarity -> top-K -> distribution."""
    z_p = project_to_proto(z, modality, space)
    s = log_ratio_similarity(proto_distances(z_p, space), space.eps)
    masked, support = topk_sparsify(s, space.top_k)
    return proto_distribution(masked, support)


def alignment_loss(alpha_g: PrototypeDistribution, alpha_t: PrototypeDistribution) -> Tensor:
    """KL(alpha_g || alpha_t) over alpha_g's support; one value per row.

    Rows where alpha_t is zero somewhere on alpha_g's support get alpha_t
    smoothed to (alpha_t + delta) / (1 + size * delta).
    """
    if alpha_g.probs.shape != alpha_t.probs.shape:
        raise ShapeMismatch(f"{alpha_g.probs.shape} vs {alpha_t.probs.shape}")
    idx = _index(alpha_g.support)
    q_raw = alpha_t.probs.value[idx]
    size = alpha_t.probs.shape[-1]
    disjoint = (q_raw == 0).any(axis=-1)
    q_full = alpha_t.probs
    if np.any(disjoint):
        scale = np.where(disjoint, 1.0 / (1.0 + size * KL_SMOOTHING), 1.0)
        shift = np.where(disjoint, KL_SMOOTHING / (1.0 + size * KL_SMOOTHING), 0.0)
        if q_full.value.ndim == 2:
            scale = np.repeat(scale[:, None], size, axis=1)
            shift = np.repeat(shift[:, None], size, axis=1)
        else:
            scale = np.full(size, float(scale))
            shift = np.full(size, float(shift))
        q_full = ad.add(ad.mul(q_full, Tensor(scale)), Tensor(shift))
    q = ad.gather(q_full, idx)
    p = alpha_g.retained
    return ad.sum(ad.mul(p, ad.sub(ad.log(p), ad.log(q))), axis=-1)
