"""Full model assembly: encoder, graph convolution, fusion, risk head.

Holds every learnable parameter under a prefixed name ("text.", "gnn.",
"fusion.", "head.") so the trainer can freeze and rescale whole groups.
Ablation toggles select the fusion mode, the normalization mode, whether
per-relation propagation weights are learned, and whether the attention
guide vector is pinned to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError
from .fusion import FusionConfig, FusionOutput, GatedFusion
from .graph import DEFAULT_RELATIONS, RGCN, HeteroGraph, RGCNConfig, structural_features
from .tensor import Tensor
from .text import TextEncoder, TextEncoderConfig, user_embedding

PARAM_GROUPS = ("text", "gnn", "fusion", "head")


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int = 128
    hidden: int = 64
    text_layers: int = 2
    heads: int = 2
    ff: int = 128
    attn_proj: int = 0
    gnn_layers: int = 2
    fusion_dim: int = 32
    head_hidden: int = 32
    dropout: float = 0.2
    relations: tuple[str, ...] = DEFAULT_RELATIONS
    gnn_activation: str = "tanh"
    # ablation toggles
    semantic_guide_off: bool = False
    norm_mode: str = "adaptive"
    fusion_mode: str = "gated"
    relation_weights: bool = True

    def uses_text(self) -> bool:
        return self.fusion_mode != "graph_only"

    def uses_graph(self) -> bool:
        return self.fusion_mode != "text_only"


class Model:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        # independent init streams so one toggle cannot shift another
        # component's initialization
        text_ss, gnn_ss, fusion_ss, head_ss = np.random.SeedSequence(seed).spawn(4)
        self.text = TextEncoder(
            TextEncoderConfig(vocab_size=cfg.vocab_size, hidden=cfg.hidden,
                              layers=cfg.text_layers, heads=cfg.heads, ff=cfg.ff,
                              attn_proj=cfg.attn_proj, max_len=cfg.max_len,
                              dropout=cfg.dropout),
            np.random.default_rng(text_ss))
        if cfg.semantic_guide_off:
            self.text.zero_guide()
        gnn_in = 2 * len(cfg.relations) if cfg.fusion_mode == "graph_only" else cfg.hidden
        self.gnn = RGCN(
            RGCNConfig(in_dim=gnn_in, layer_dims=(cfg.hidden,) * cfg.gnn_layers,
                       relations=cfg.relations, activation=cfg.gnn_activation,
                       norm_mode=cfg.norm_mode, relation_weights=cfg.relation_weights,
                       dropout=cfg.dropout),
            np.random.default_rng(gnn_ss))
        self.fusion = GatedFusion(
            FusionConfig(text_dim=cfg.hidden, graph_dim=cfg.hidden,
                         dim=cfg.fusion_dim, dropout=cfg.dropout),
            np.random.default_rng(fusion_ss))
        head_rng = np.random.default_rng(head_ss)
        d_in = self.fusion.out_dim(cfg.fusion_mode)
        dh = cfg.head_hidden
        self.head_params = {
            "w1": Tensor(head_rng.normal(0, 1 / math.sqrt(d_in), (d_in, dh)),
                         requires_grad=True),
            "b1": Tensor(np.zeros(dh), requires_grad=True),
            "w2": Tensor(head_rng.normal(0, 1 / math.sqrt(dh), (dh, 1)),
                         requires_grad=True),
            # slight positive bias keeps early training out of the
            # zero-recall regime that stalls F1-based early stopping
            "b2": Tensor(np.full(1, 0.3), requires_grad=True),
        }

    # -- parameter registry ----------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update({f"text.{k}": v for k, v in self.text.params.items()})
        out.update({f"gnn.{k}": v for k, v in self.gnn.params.items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.params.items()})
        out.update({f"head.{k}": v for k, v in self.head_params.items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def active_groups(self) -> tuple[str, ...]:
        groups = []
        if self.cfg.uses_text():
            groups.append("text")
        if self.cfg.uses_graph():
            groups.append("gnn")
        groups += ["fusion", "head"]
        return tuple(groups)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        for name, arr in arrays.items():
            if name not in params:
                raise DomainError(f"unknown parameter {name!r} in state")
            if params[name].data.shape != arr.shape:
                raise DomainError(f"shape mismatch for {name!r}: model "
                                  f"{params[name].data.shape} vs state {arr.shape}")
            params[name].data[...] = arr

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    # -- forward pieces ----------------------------------------------------------

    def head_logits(self, z: Tensor) -> Tensor:
        p = self.head_params
        h = T.silu(T.matmul(z, p["w1"]) + p["b1"])
        out = T.matmul(h, p["w2"]) + p["b2"]
        return T.reshape(out, (z.shape[0],))

    def encode_user_text(self, post_ids: np.ndarray, post_mask: np.ndarray,
                         post_user: np.ndarray, n_users: int,
                         train: bool = False,
                         rng: np.random.Generator | None = None) -> Tensor:
        post_vecs = self.text.encode_posts(post_ids, post_mask, train, rng)
        return user_embedding(post_vecs, post_user, n_users)

    def node_features(self, graph: HeteroGraph, h_users: Tensor | None) -> Tensor:
        if self.cfg.fusion_mode == "graph_only":
            return Tensor(structural_features(graph))
        if h_users is None:
            raise DomainError("node_features: text embeddings required")
        return h_users

    def forward_users(self, graph: HeteroGraph, h_users: Tensor | None,
                      user_ids: np.ndarray | None = None,
                      h_batch: Tensor | None = None,
                      train: bool = False,
                      rng: np.random.Generator | None = None
                      ) -> tuple[Tensor, FusionOutput, Tensor | None]:
        """Risk logits for ``user_ids`` (all users when None).

        ``h_users`` carries text features for every node (may mix cached and
        fresh rows); ``h_batch`` optionally supplies the text view of just the
        scored users so their gradient path stays direct.
        """
        cfg = self.cfg
        v_all = None
        if cfg.uses_graph():
            feats = self.node_features(graph, h_users)
            v_all = self.gnn.forward(graph, feats, train, rng)
        if user_ids is None:
            h_sel = h_users
            v_sel = v_all
        else:
            h_sel = h_batch if h_batch is not None else (
                T.take_rows(h_users, user_ids) if h_users is not None else None)
            v_sel = T.take_rows(v_all, user_ids) if v_all is not None else None
        fused = self.fusion.fuse(h_sel, v_sel, cfg.fusion_mode, train, rng)
        return self.head_logits(fused.z), fused, v_all

    # -- whole-corpus scoring (eval mode) -----------------------------------------

    def score_all(self, graph: HeteroGraph, post_ids: np.ndarray,
                  post_mask: np.ndarray, post_user: np.ndarray,
                  n_users: int, h_users: Tensor | None = None) -> dict:
        """Sigmoid risk scores for every user; cold-start users bypass the gate.

        A user with no graph presence (zero degree under every relation) is
        scored from the text view alone, exactly as the fusion bypass does.
        ``h_users`` may supply precomputed eval-mode text embeddings.
        """
        if h_users is None and self.cfg.uses_text():
            h_users = self.encode_user_text(post_ids, post_mask, post_user, n_users)
        logits, fused, _ = self.forward_users(graph, h_users)
        scores = _sigmoid(logits.data)
        gate_mean = None
        if fused.gate is not None:
            gate_mean = fused.gate.data.mean(axis=1)
        bypassed = np.zeros(n_users, dtype=bool)
        if self.cfg.fusion_mode == "gated" and self.cfg.uses_text():
            isolated = graph.total_degree() == 0
            if isolated.any():
                cold = self.fusion.fuse(h_users, None, "gated")
                cold_scores = _sigmoid(self.head_logits(cold.z).data)
                scores = np.where(isolated, cold_scores, scores)
                bypassed = isolated
        return {"scores": scores, "gate_mean": gate_mean, "bypassed": bypassed,
                "fused": fused}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
