"""Full model: both encoders, fusion, prototype space(s) and prediction heads."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import FusionLayerParams, fuse_all
from .graph_encoder import GraphBatch, GraphEncoderParams, encode_graph
from .layers import stream
from .molgraph import FEATURE_WIDTH, DatasetRecord, featurize
from .objectives import (
    ContrastiveConfig,
    LossWeights,
    PredictionHeads,
    ce_loss,
    mse_loss,
    predict,
    proto_contrastive_cls,
    proto_contrastive_reg,
    total_loss,
)
from .prototypes import (
    PrototypeDistribution,
    PrototypeSpace,
    aggregate_layers,
    alignment_loss,
    distribution_for,
)
from .text_encoder import TextEncoderParams, Vocabulary, encode_text, tokenize

TASK_KINDS = ("classification", "regression")


@dataclass
class TrainConfig:
    task_kind: str = "classification"
    num_layers: int = 3
    d_g: int = 64
    d_t: int = 64
    d_p: int = 64
    num_classes: int = 2
    prototypes_per_class: int = 5
    top_k: int = 5
    eps: float = 1e-4
    tau: float = 0.5
    lambda_align: float = 0.9
    lambda_pred: float = 0.9
    lambda_proto: float = 0.9
    lr: float = 8e-5
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    no_ca: bool = False
    final_layer_only_ca: bool = False
    no_up: bool = False
    no_al: bool = False
    no_cl: bool = False
    no_pr: bool = False
    exclude_anchor: bool = False
    kmeans_iters: int = 100
    standardize_targets: bool = True

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}")
        if self.task_kind == "regression":
            self.num_classes = 1
        for name in ("num_layers", "d_g", "d_t", "d_p", "num_classes", "prototypes_per_class",
                     "top_k", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.top_k > self.num_classes * self.prototypes_per_class:
            raise ValueError("top_k cannot exceed num_classes * prototypes_per_class")
        if min(self.lambda_align, self.lambda_pred, self.lambda_proto) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps <= 0 or self.tau <= 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("eps and tau must be positive; lr and weight_decay non-negative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.field_names()}

    @property
    def fusion_mode(self) -> str:
        if self.no_ca:
            return "none"
        return "final" if self.final_layer_only_ca else "all"

    def effective_weights(self) -> LossWeights:
        return LossWeights(
            align=0.0 if (self.no_al or self.no_up) else self.lambda_align,
            pred=0.0 if self.no_cl else self.lambda_pred,
            proto=0.0 if self.no_pr else self.lambda_proto,
        )

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, kmeans_iters=self.kmeans_iters,
                                 kmeans_seed=self.seed, exclude_anchor=self.exclude_anchor)


@dataclass
class Batch:
    graphs: GraphBatch
    token_ids: list[list[int]]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class ForwardOutput:
    prediction: Tensor  # (B, C) logits or (B,) regression values
    alpha_g: PrototypeDistribution
    alpha_t: PrototypeDistribution


@dataclass
class Model:
    config: TrainConfig
    vocab: Vocabulary
    graph: GraphEncoderParams
    text: TextEncoderParams
    fusion: FusionLayerParams
    space: PrototypeSpace
    heads: PredictionHeads
    text_space: PrototypeSpace | None = None  # separate text space when no_up is set
    target_mean: float = 0.0
    target_std: float = 1.0
    _features: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, config: TrainConfig, vocab: Vocabulary) -> Model:
        seed, L = config.seed, config.num_layers
        c = config
        graph = GraphEncoderParams.init(stream(seed, "init.graph"), FEATURE_WIDTH, c.d_g, L)
        text = TextEncoderParams.init(stream(seed, "init.text"), len(vocab), c.d_t, L)
        fusion = FusionLayerParams.init(stream(seed, "init.fusion"), c.d_g, c.d_t, L)
        space = PrototypeSpace.init(stream(seed, "init.prototypes"), c.num_classes, c.prototypes_per_class,
                                    c.d_p, c.d_g, c.d_t, c.top_k, c.eps)
        text_space = None
        if c.no_up:
            text_space = PrototypeSpace.init(stream(seed, "init.prototypes.text"), c.num_classes,
                                             c.prototypes_per_class, c.d_p, c.d_g, c.d_t, c.top_k, c.eps)
        out_dim = c.num_classes if c.task_kind == "classification" else 1
        heads = PredictionHeads.init(c.d_g, out_dim, L)
        return cls(config, vocab, graph, text, fusion, space, heads, text_space)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.graph.named())
        out.update(self.text.named())
        out.update(self.fusion.named())
        out.update(self.space.named("proto"))
        if self.text_space is not None:
            out.update(self.text_space.named("proto_text"))
        out.update(self.heads.named())
        return out

    # ------------------------------------------------------------------ data

    def make_batch(self, records: Sequence[DatasetRecord]) -> Batch:
        feats = []
        for r in records:
            key = id(r.graph)
            if key not in self._features:
                self._features[key] = (r.graph, featurize(r.graph))
            feats.append(self._features[key][1])
        graphs = GraphBatch.from_graphs([r.graph for r in records], feats)
        ids = [tokenize(r.description, self.vocab) for r in records]
        targets = np.array([r.target for r in records], dtype=float)
        if self.config.task_kind == "regression":
            targets = (targets - self.target_mean) / self.target_std
        return Batch(graphs, ids, targets)

    # --------------------------------------------------------------- forward

    def forward(self, batch: Batch) -> ForwardOutput:
        z_g = encode_graph(batch.graphs, self.graph)
        z_t = encode_text(batch.token_ids, self.text)
        fused_g, fused_t = fuse_all(z_g, z_t, self.fusion, self.config.fusion_mode)
        bar_g = aggregate_layers(fused_g)
        bar_t = aggregate_layers(fused_t)
        alpha_g = distribution_for(bar_g, "graph", self.space)
        alpha_t = distribution_for(bar_t, "text", self.text_space or self.space)
        return ForwardOutput(predict(fused_g, self.heads), alpha_g, alpha_t)

    def sample_losses(self, out: ForwardOutput, batch: Batch) -> tuple[Tensor, Tensor]:
        """Per-sample prediction and alignment losses, each of shape (B,)."""
        if self.config.task_kind == "classification":
            pred = ce_loss(out.prediction, batch.targets.astype(np.int64))
        else:
            pred = mse_loss(out.prediction, batch.targets)
        if self.text_space is not None:
            align = Tensor(np.zeros(len(batch)))
        else:
            align = alignment_loss(out.alpha_g, out.alpha_t)
        return pred, align

    def proto_loss(self) -> Tensor:
        cfg = self.config.contrastive()
        spaces = [self.space] + ([self.text_space] if self.text_space is not None else [])
        losses = []
        for sp in spaces:
            if self.config.task_kind == "classification":
                losses.append(proto_contrastive_cls(sp.prototypes, sp.num_classes, sp.per_class, cfg))
            else:
                losses.append(proto_contrastive_reg(sp.prototypes, cfg))
        return ad.stack_mean(losses)

    def batch_loss(self, batch: Batch) -> tuple[Tensor, dict[str, float]]:
        """Weighted objective: sample-mean of pred/align terms plus the prototype term once."""
        out = self.forward(batch)
        pred, align = self.sample_losses(out, batch)
        weights = self.config.effective_weights()
        parts = (ad.mean(align), ad.mean(pred), self.proto_loss())
        loss = total_loss(parts, weights)
        info = {"align": parts[0].item(), "pred": parts[1].item(), "proto": parts[2].item()}
        return loss, info

    def predict_values(self, records: Sequence[DatasetRecord], batch_size: int = 256) -> np.ndarray:
        """Class probabilities (N, C) or de-standardized regression values (N,)."""
        chunks = []
        for start in range(0, len(records), batch_size):
            batch = self.make_batch(records[start:start + batch_size])
            pred = self.forward(batch).prediction.value
            if self.config.task_kind == "classification":
                e = np.exp(pred - pred.max(axis=1, keepdims=True))
                chunks.append(e / e.sum(axis=1, keepdims=True))
            else:
                chunks.append(pred * self.target_std + self.target_mean)
        return np.concatenate(chunks, axis=0)

    def distributions(self, records: Sequence[DatasetRecord]) -> tuple[PrototypeDistribution, PrototypeDistribution]:
        out = self.forward(self.make_batch(records))
        return out.alpha_g, out.alpha_t
