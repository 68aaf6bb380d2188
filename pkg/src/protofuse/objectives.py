"""Prediction heads, task losses, prototype contrastive losses and the weighted total."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import Linear

log = logging.getLogger(__name__)

# point sets up to this size also get an exact enumeration check (2^(n-1) splits)
EXACT_KMEANS_LIMIT = 16


class InvalidLabel(ValueError):
    pass


class DegenerateConfig(ValueError):
    pass


class ZeroVectorPrototype(ValueError):
    pass


@dataclass
class PredictionHeads:
    heads: list[Linear]

    @classmethod
    def init(cls, d_g: int, out_dim: int, num_layers: int) -> PredictionHeads:
        # zero init: an untrained head predicts the same value for every molecule
        return cls([Linear.zero(d_g, out_dim) for _ in range(num_layers)])

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, h in enumerate(self.heads):
            out.update(h.named(f"head{i}"))
        return out


@dataclass
class ContrastiveConfig:
    tau: float = 0.5
    clusters: int = 2
    kmeans_iters: int = 100
    kmeans_seed: int = 0  # initialisation is deterministic; kept for bookkeeping
    exclude_anchor: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.clusters != 2:
            raise ValueError("only two pseudo-clusters are supported")


@dataclass
class LossWeights:
    align: float = 0.9
    pred: float = 0.9
    proto: float = 0.9

    def __post_init__(self):
        if min(self.align, self.pred, self.proto) < 0:
            raise ValueError("loss weights must be non-negative")


def predict(fused_graph: list[Tensor], heads: PredictionHeads) -> Tensor:
    """Mean of per-layer head outputs.

    Batched (B, d_g) inputs give (B, C) logits, or (B,) for regression.
    A single vector gives (C,) or a scalar.
    """
    if len(fused_graph) != len(heads.heads):
        raise ShapeMismatch(f"{len(fused_graph)} layers but {len(heads.heads)} heads")
    out = ad.stack_mean([h(z) for h, z in zip(heads.heads, fused_graph)])
    if out.shape[-1] == 1:
        out = ad.reshape(out, out.shape[:-1])
    return out


def ce_loss(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label], per row for batched logits."""
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.dtype.kind not in "iu" and not np.all(np.mod(labels, 1) == 0):
        raise InvalidLabel("labels must be integers")
    labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= c):
        raise InvalidLabel(f"labels must lie in [0, {c})")
    logp = ad.log_softmax_rows(logits)
    if logits.value.ndim == 1:
        return ad.mul(ad.gather(logp, (int(labels),)), -1.0)
    return ad.mul(ad.gather(logp, (np.arange(len(labels)), labels)), -1.0)


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = ad.sub(pred, Tensor(np.broadcast_to(np.asarray(target, dtype=float), pred.shape)))
    return ad.mul(diff, diff)


def _contrastive(prototypes: Tensor, groups: np.ndarray, tau: float, exclude_anchor: bool) -> Tensor:
    """Mean anchor loss for prototypes partitioned by ``groups``.

    Anchors whose group has no other member are skipped.
    """
    norms = np.linalg.norm(prototypes.value, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorPrototype("a prototype has zero norm")
    n = len(groups)
    same = groups[:, None] == groups[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    npos = positive.sum(axis=1)
    valid = np.flatnonzero(npos > 0)
    if valid.size == 0:
        return Tensor(0.0)
    denominator_mask = ~np.eye(n, dtype=bool) if exclude_anchor else np.ones((n, n), dtype=bool)
    e = ad.exp(ad.mul(ad.cosine_sim(prototypes, prototypes), 1.0 / tau))
    num = ad.sum(ad.mul(e, Tensor(positive.astype(float))), axis=1)
    den = ad.sum(ad.mul(e, Tensor(denominator_mask.astype(float))), axis=1)
    num = ad.mul(ad.gather(num, (valid,)), Tensor(1.0 / npos[valid]))
    den = ad.gather(den, (valid,))
    return ad.mean(ad.sub(ad.log(den), ad.log(num)))


def proto_contrastive_cls(prototypes: Tensor, num_classes: int, per_class: int,
                          cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Class-anchored contrastive loss over all C*N prototypes."""
    if per_class < 2:
        raise DegenerateConfig("the class contrastive loss needs at least 2 prototypes per class")
    if prototypes.shape[0] != num_classes * per_class:
        raise ShapeMismatch(f"expected {num_classes * per_class} prototypes, got {prototypes.shape[0]}")
    groups = np.repeat(np.arange(num_classes), per_class)
    return _contrastive(prototypes, groups, cfg.tau, cfg.exclude_anchor)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    degenerate: bool = False
    iterations: int = 0

    def sse(self, points: np.ndarray) -> float:
        return float(((points - self.centroids[self.assignments]) ** 2).sum())


def kmeans2(points: np.ndarray, max_iter: int = 100) -> KMeansResult:
    """Two-cluster k-means.

    Starts from the farthest-apart pair of points, runs Lloyd iterations,
    then Hartigan single-point transfers until no move lowers the SSE.
    Small point sets are finally checked against an exact enumeration, so
    the result there is the global optimum.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 2:
        raise ValueError("k-means with two clusters needs at least 2 points")
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=-1)
    if d2.max() == 0:
        log.warning("all points identical; returning split {first} / {rest}")
        assign = np.ones(n, dtype=np.int64)
        assign[0] = 0
        return KMeansResult(assign, np.stack([x[0], x[1:].mean(axis=0)]), degenerate=True)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)  # first maximal pair in row-major order
    centroids = np.stack([x[i], x[j]])
    assign = np.full(n, -1, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new = np.argmin(dist, axis=1)
        for c in (0, 1):
            if not np.any(new == c):
                other = 1 - c
                far = int(np.argmax(((x - centroids[other]) ** 2).sum(axis=1)))
                new[far] = c
        if np.array_equal(new, assign):
            break
        assign = new
        centroids = np.stack([x[assign == c].mean(axis=0) for c in (0, 1)])

    # Hartigan transfers: move a point when the exact SSE change is negative
    moved = True
    while moved:
        moved = False
        for p in range(n):
            a = assign[p]
            b = 1 - a
            na, nb = np.sum(assign == a), np.sum(assign == b)
            if na < 2:
                continue
            gain = nb / (nb + 1) * ((x[p] - centroids[b]) ** 2).sum() - na / (na - 1) * ((x[p] - centroids[a]) ** 2).sum()
            if gain < -1e-12:
                assign[p] = b
                centroids = np.stack([x[assign == c].mean(axis=0) for c in (0, 1)])
                moved = True

    if n <= EXACT_KMEANS_LIMIT:
        best = _best_split(x)
        sse = ((x - centroids[assign]) ** 2).sum()
        best_sse = ((x - np.stack([x[best == c].mean(axis=0) for c in (0, 1)])[best]) ** 2).sum()
        if best_sse < sse - 1e-12 * max(1.0, sse):
            assign = best
            centroids = np.stack([x[assign == c].mean(axis=0) for c in (0, 1)])
    return KMeansResult(assign, centroids, iterations=it)


def _best_split(x: np.ndarray) -> np.ndarray:
    """Exact minimum-SSE two-way split by enumeration; point 0 always in cluster 0."""
    n = len(x)
    codes = np.arange(1, 2 ** (n - 1))
    labels = ((codes[:, None] >> np.arange(n - 1)) & 1).astype(float)
    labels = np.concatenate([np.zeros((len(codes), 1)), labels], axis=1)
    # SSE = sum |x|^2 - |S_0|^2 / n_0 - |S_1|^2 / n_1
    total = x.sum(axis=0)
    s1 = labels @ x
    n1 = labels.sum(axis=1)
    s0 = total - s1
    n0 = n - n1
    score = (s0 ** 2).sum(axis=1) / n0 + (s1 ** 2).sum(axis=1) / n1
    return labels[int(np.argmax(score))].astype(np.int64)


def proto_contrastive_reg(prototypes: Tensor, cfg: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Contrastive loss with two k-means pseudo-classes over the prototypes.

    Anchors in a singleton cluster have no positives and are skipped.
    """
    if prototypes.shape[0] < 2:
        raise DegenerateConfig("need at least 2 prototypes")
    clusters = kmeans2(prototypes.value, cfg.kmeans_iters)
    sizes = np.bincount(clusters.assignments, minlength=2)
    if np.any(sizes == 1):
        log.warning("singleton prototype cluster; %d anchor(s) skipped", int(np.sum(sizes == 1)))
    return _contrastive(prototypes, clusters.assignments, cfg.tau, cfg.exclude_anchor)


def total_loss(parts, weights: LossWeights):
    """lambda_align * L_align + lambda_pred * L_pred + lambda_proto * L_proto."""
    align, pred, proto = parts
    terms = [(weights.align, align), (weights.pred, pred), (weights.proto, proto)]
    if not any(isinstance(p, Tensor) for _, p in terms):
        return sum(w * float(p) for w, p in terms)
    out = None
    for w, p in terms:
        term = ad.mul(p, w) if isinstance(p, Tensor) else Tensor(w * float(p))
        out = term if out is None else ad.add(out, term)
    return out
