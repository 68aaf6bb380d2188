"""GIN-style graph branch: atom MLP, sum-aggregation layers, per-layer mean readout."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import MLP
from .molgraph import FEATURE_WIDTH, MolecularGraph, featurize

# A hierarchical embedding is the ordered list of per-layer vectors
# (or (batch, width) matrices when several molecules are encoded together).
HierarchicalEmbedding = list


@dataclass
class GraphEncoderParams:
    init_mlp: MLP
    layers: list[MLP]
    eps_gin: float = 0.0

    @classmethod
    def init(cls, rng, in_dim: int, d_g: int, num_layers: int) -> GraphEncoderParams:
        if num_layers < 1:
            raise ValueError("need at least one GIN layer")
        return cls(MLP.init(rng, in_dim, d_g, d_g),
                   [MLP.init(rng, d_g, d_g, d_g) for _ in range(num_layers)])

    @property
    def width(self) -> int:
        return self.init_mlp.second.weight.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = self.init_mlp.named("graph.init")
        for i, m in enumerate(self.layers):
            out.update(m.named(f"graph.layer{i}"))
        return out


@dataclass
class GraphBatch:
    """Several molecules packed into one disconnected graph."""

    features: np.ndarray
    adjacency: sp.csr_matrix
    pool: sp.csr_matrix  # (num_graphs, num_atoms), rows average each molecule's atoms
    sizes: list[int] = field(default_factory=list)

    @classmethod
    def from_graphs(cls, graphs: Sequence[MolecularGraph], features: Sequence[np.ndarray] | None = None):
        feats = [featurize(g) for g in graphs] if features is None else list(features)
        sizes = [g.num_atoms for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rows, cols = [], []
        for g, off in zip(graphs, offsets):
            e = g.edge_index()
            rows.append(e[0] + off)
            cols.append(e[1] + off)
        n = int(offsets[-1])
        r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        adjacency = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
        pr = np.repeat(np.arange(len(graphs)), sizes)
        pool = sp.csr_matrix((np.repeat(1.0 / np.array(sizes, dtype=float), sizes), (pr, np.arange(n))),
                             shape=(len(graphs), n))
        return cls(np.concatenate(feats, axis=0), adjacency, pool, sizes)


def init_atom_embed(x: Tensor, params: GraphEncoderParams) -> Tensor:
    expected = params.init_mlp.first.weight.shape[1]
    if x.shape[-1] != expected:
        raise ShapeMismatch(f"atom features have width {x.shape[-1]}, expected {expected}")
    return params.init_mlp(x)


def gin_layer(h: Tensor, adjacency, mlp: MLP, eps_gin: float = 0.0) -> Tensor:
    """h'_v = MLP((1 + eps) h_v + sum of neighbour states)."""
    if h.shape[-1] != mlp.first.weight.shape[1]:
        raise ShapeMismatch(f"state width {h.shape[-1]} does not match layer input")
    combined = ad.add(ad.const_matmul(adjacency, h), h if eps_gin == 0 else ad.mul(h, 1.0 + eps_gin))
    return mlp(combined)


def readout(h: Tensor, pool=None) -> Tensor:
    """Mean over atoms; with ``pool`` given, per-molecule means for a batch."""
    if pool is None:
        return ad.mean(h, axis=0)
    return ad.const_matmul(pool, h)


def adjacency_of(graph: MolecularGraph) -> sp.csr_matrix:
    e = graph.edge_index()
    n = graph.num_atoms
    return sp.csr_matrix((np.ones(e.shape[1]), (e[0], e[1])), shape=(n, n))


def encode_graph(graph: MolecularGraph | GraphBatch, params: GraphEncoderParams) -> HierarchicalEmbedding:
    """Per-layer graph-level vectors z_g^(1..L).

    A single graph yields vectors of width d_g; a :class:`GraphBatch` yields
    (num_graphs, d_g) matrices, one row per molecule.
    """
    if isinstance(graph, GraphBatch):
        x, adjacency, pool = Tensor(graph.features), graph.adjacency, graph.pool
    else:
        x, adjacency, pool = Tensor(featurize(graph)), adjacency_of(graph), None
    if x.shape[1] != FEATURE_WIDTH and x.shape[1] != params.init_mlp.first.weight.shape[1]:
        raise ShapeMismatch("feature width mismatch")
    h = init_atom_embed(x, params)
    layers = []
    for mlp in params.layers:
        h = gin_layer(h, adjacency, mlp, params.eps_gin)
        layers.append(readout(h, pool))
    return layers
