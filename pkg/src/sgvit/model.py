"""Full detector: encoder -> Relationship Attention -> boxes and logits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import EncoderConfig, ImageEncoder
from .numerics import Module, Tensor
from .relation_head import RelationHead, SelectionResult, classify, relationship_scores, select
from .text_queries import QueryEmbedder, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    shared_mlp: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]), shared_mlp=d["shared_mlp"], seed=d["seed"])


@dataclass
class ModelOutput:
    """Per-batch forward results. Index arrays are per image, row-aligned with the tensors."""

    scores: Tensor                 # (B, N, N) pair logits p
    selections: list[SelectionResult]
    instances: np.ndarray          # (B, M) token index
    pairs: np.ndarray              # (B, k, 2) token indices
    instance_scores: Tensor        # (B, M)  p_ii
    pair_scores: Tensor            # (B, k)  p_ij
    object_logits: Tensor          # (B, M, C_obj)
    predicate_logits: Tensor       # (B, k, C_pred)
    boxes: Tensor                  # (B, M, 4) cx, cy, w, h

    @property
    def m(self) -> int:
        return self.instances.shape[1]

    @property
    def k(self) -> int:
        return self.pairs.shape[1]


class SceneGraphViT(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), vocab: Vocabulary | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.encoder, rng)
        self.head = RelationHead(cfg.encoder.dim, cfg.encoder.grid, rng, shared_mlp=cfg.shared_mlp)
        self.text = QueryEmbedder(cfg.encoder.dim, rng, vocab=vocab)

    def text_parameter_names(self) -> list[str]:
        """The query tower. The logit temperature and bias train with the body."""
        calib = ("text.log_temperature", "text.logit_bias")
        return [n for n, _ in self.named_parameters() if n.startswith("text.") and n not in calib]

    def classification_parameter_names(self) -> list[str]:
        """Parameters that only reach the loss through class logits."""
        return [n for n, _ in self.named_parameters()
                if n.startswith(("text.", "head.post_mlp.", "head.fuse_norm."))]

    def embed_queries(self, texts) -> Tensor:
        return self.text.embed_query_set(texts)

    def forward(self, images: np.ndarray, object_queries: Tensor, predicate_queries: Tensor,
                m: int, k: int, use_pos: bool = True) -> ModelOutput:
        tokens = self.encoder.encode_image(images, use_pos=use_pos).tokens
        s, o = self.head.project_subject_object(tokens)
        p = relationship_scores(s, o)
        b = tokens.shape[0]
        selections = [select(p.data[i], m, k) for i in range(b)]
        inst = np.stack([sel.instances for sel in selections])
        pairs = np.stack([sel.pairs for sel in selections]).reshape(b, k, 2)

        subj_idx = np.concatenate([inst, pairs[..., 0]], axis=1)       # (B, M + k)
        obj_idx = np.concatenate([inst, pairs[..., 1]], axis=1)
        rows = np.arange(b)[:, None]
        r = self.head.relationship_embedding(s[rows, subj_idx], o[rows, obj_idx])
        gathered = p[rows, subj_idx, obj_idx]

        t = self.text
        obj_logits = classify(r[:, :m], object_queries, t.log_temperature, t.logit_bias)
        pred_logits = classify(r[:, m:], predicate_queries, t.log_temperature, t.logit_bias)
        boxes = self.head.predict_boxes(tokens[rows, inst], inst)
        return ModelOutput(
            scores=p, selections=selections, instances=inst, pairs=pairs,
            instance_scores=gathered[:, :m], pair_scores=gathered[:, m:],
            object_logits=obj_logits, predicate_logits=pred_logits, boxes=boxes,
        )

