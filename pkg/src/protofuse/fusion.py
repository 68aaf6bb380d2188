"""Layer-wise bidirectional cross-modal attention with residual fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .layers import uniform_weight


class LayerCountMismatch(ValueError):
    pass


@dataclass
class FusionLayerParams:
    w_gt: list[Tensor]  # (d_t, d_g) per layer: graph -> text
    w_tg: list[Tensor]  # (d_g, d_t) per layer: text -> graph

    @classmethod
    def init(cls, rng, d_g: int, d_t: int, num_layers: int) -> FusionLayerParams:
        w_gt, w_tg = [], []
        for _ in range(num_layers):
            w_gt.append(uniform_weight(rng, d_t, d_g))
            w_tg.append(uniform_weight(rng, d_g, d_t))
        return cls(w_gt, w_tg)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (a, b) in enumerate(zip(self.w_gt, self.w_tg)):
            out[f"fusion.layer{i}.w_gt"] = a
            out[f"fusion.layer{i}.w_tg"] = b
        return out


def _project(z: Tensor, w: Tensor) -> Tensor:
    if z.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"cannot project width {z.shape[-1]} with matrix {w.shape}")
    if z.value.ndim == 1:
        return ad.matmul(w, z)
    return ad.matmul(z, ad.transpose(w))


def project_g_to_t(z_g: Tensor, w_gt: Tensor) -> Tensor:
    return _project(z_g, w_gt)


def project_t_to_g(z_t: Tensor, w_tg: Tensor) -> Tensor:
    return _project(z_t, w_tg)


def cross_attention(query: Tensor, kv: Tensor, scale_dim: int) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with a single key/value per sample.

    There is exactly one logit per sample, so the attention weight is 1 and
    the output equals the value; the computation is kept on the tape anyway.
    """
    if query.shape[:-1] != kv.shape[:-1] or query.shape[-1] != kv.shape[-1]:
        raise ShapeMismatch(f"query {query.shape} vs key/value {kv.shape}")
    q = query if query.value.ndim == 2 else ad.reshape(query, (1, -1))
    v = kv if kv.value.ndim == 2 else ad.reshape(kv, (1, -1))
    logits = ad.mul(ad.sum(ad.mul(q, v), axis=1), 1.0 / np.sqrt(scale_dim))
    weights = ad.softmax_rows(ad.reshape(logits, (-1, 1)))  # (batch, 1), all ones
    rows = np.repeat(np.arange(v.shape[0])[:, None], v.shape[1], axis=1)
    spread = ad.gather(weights, (rows, np.zeros_like(rows)))
    out = ad.mul(spread, v)
    return out if kv.value.ndim == 2 else ad.reshape(out, kv.shape)


def cross_attend_pair(z_g: Tensor, z_t: Tensor, w_gt: Tensor, w_tg: Tensor) -> tuple[Tensor, Tensor]:
    """Attended (graph, text) vectors for one layer: (W_tg z_t, W_gt z_g)."""
    z_gt = project_g_to_t(z_g, w_gt)
    z_tg = project_t_to_g(z_t, w_tg)
    attended_t = cross_attention(z_t, z_gt, scale_dim=z_g.shape[-1])
    attended_g = cross_attention(z_g, z_tg, scale_dim=z_t.shape[-1])
    return attended_g, attended_t


def fuse_residual(z_g: Tensor, z_t: Tensor, att_g: Tensor, att_t: Tensor) -> tuple[Tensor, Tensor]:
    return ad.add(z_g, att_g), ad.add(z_t, att_t)


def fuse_all(z_g: list[Tensor], z_t: list[Tensor], params: FusionLayerParams,
             mode: str = "all") -> tuple[list[Tensor], list[Tensor]]:
    """Fuse every layer pair.

    ``mode`` is ``"all"`` (default), ``"final"`` (fuse only the last layer) or
    ``"none"`` (pass both embeddings through unchanged).
    """
    if len(z_g) != len(z_t):
        raise LayerCountMismatch(f"graph has {len(z_g)} layers, text has {len(z_t)}")
    if len(params.w_gt) != len(z_g):
        raise LayerCountMismatch(f"fusion has {len(params.w_gt)} layers, inputs have {len(z_g)}")
    if mode not in ("all", "final", "none"):
        raise ValueError(f"unknown fusion mode {mode!r}")
    fused_g, fused_t = [], []
    last = len(z_g) - 1
    for l, (g, t) in enumerate(zip(z_g, z_t)):
        if mode == "none" or (mode == "final" and l != last):
            fused_g.append(g)
            fused_t.append(t)
            continue
        att_g, att_t = cross_attend_pair(g, t, params.w_gt[l], params.w_tg[l])
        hg, ht = fuse_residual(g, t, att_g, att_t)
        fused_g.append(hg)
        fused_t.append(ht)
    return fused_g, fused_t
