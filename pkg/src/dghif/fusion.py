"""Gated fusion of the text and graph views of a user.

Both views are projected into a shared space; a small MLP looks at the two
projections plus their agreement (elementwise product) and discrepancy
(difference) features and emits a per-dimension gate in (0,1) that mixes
them convexly. Users with no graph presence bypass the gate and keep the
text view unchanged. Ablation modes swap the mixture for concatenation or
a single view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .tensor import Tensor

FUSION_MODES = ("gated", "concat", "text_only", "graph_only")


@dataclass
class FusionConfig:
    text_dim: int
    graph_dim: int
    dim: int              # shared projection dimension d
    dropout: float = 0.2


@dataclass
class FusionOutput:
    """Fused vector plus the audit trail of how it was produced."""

    z: Tensor
    gate: Tensor | None      # None when the gate was bypassed (cold start)
    p: Tensor
    q: Tensor | None
    bypassed: bool = False


class GatedFusion:
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.dim
        p: dict[str, Tensor] = {}

        def linear(prefix, d_in, d_out):
            p[f"{prefix}_w"] = Tensor(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_out)),
                                      requires_grad=True)
            p[f"{prefix}_b"] = Tensor(np.zeros(d_out), requires_grad=True)

        for side, dim_in in (("text", cfg.text_dim), ("graph", cfg.graph_dim)):
            p[f"ln_{side}_scale"] = Tensor(np.ones(dim_in), requires_grad=True)
            p[f"ln_{side}_shift"] = Tensor(np.zeros(dim_in), requires_grad=True)
            linear(f"proj_{side}", dim_in, d)
        linear("gate1", 4 * d, d)
        linear("gate2", d, d)
        self.params = p

    def out_dim(self, mode: str) -> int:
        return 2 * self.cfg.dim if mode == "concat" else self.cfg.dim

    # -- pieces of the gated path --------------------------------------------

    def project_text(self, h: Tensor) -> Tensor:
        p = self.params
        normed = T.layer_norm(h, p["ln_text_scale"], p["ln_text_shift"])
        return T.silu(T.matmul(normed, p["proj_text_w"]) + p["proj_text_b"])

    def project_graph(self, v: Tensor) -> Tensor:
        p = self.params
        normed = T.layer_norm(v, p["ln_graph_scale"], p["ln_graph_shift"])
        return T.silu(T.matmul(normed, p["proj_graph_w"]) + p["proj_graph_b"])

    @staticmethod
    def interaction_features(p: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
        """Agreement (p*q) and discrepancy (p-q) views."""
        return p * q, p - q

    def gate(self, p: Tensor, q: Tensor, r_times: Tensor, r_delta: Tensor,
             train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        pr = self.params
        x = T.concat_last([p, q, r_times, r_delta])
        hidden = T.silu(T.matmul(x, pr["gate1_w"]) + pr["gate1_b"])
        logits = T.matmul(hidden, pr["gate2_w"]) + pr["gate2_b"]
        logits = T.dropout(logits, self.cfg.dropout, train, rng)
        return T.sigmoid(logits)

    # -- full fusion -----------------------------------------------------------

    def fuse(self, h: Tensor, v: Tensor | None, mode: str = "gated",
             train: bool = False, rng: np.random.Generator | None = None) -> FusionOutput:
        if mode not in FUSION_MODES:
            raise DomainError(f"unknown fusion mode {mode!r}")
        if mode == "graph_only" and v is None:
            raise DomainError("graph_only fusion requires a graph view")
        if mode == "text_only":
            p = self.project_text(h)
            return FusionOutput(z=p, gate=None, p=p, q=None)
        if mode == "graph_only":
            q = self.project_graph(v)
            return FusionOutput(z=q, gate=None, p=q, q=q)
        p = self.project_text(h)
        if v is None:
            # cold start: no graph view, gate bypassed, text view passes through
            return FusionOutput(z=p, gate=None, p=p, q=None, bypassed=True)
        q = self.project_graph(v)
        if mode == "concat":
            return FusionOutput(z=T.concat_last([p, q]), gate=None, p=p, q=q)
        r_times, r_delta = self.interaction_features(p, q)
        g = self.gate(p, q, r_times, r_delta, train, rng)
        z = g * p + (Tensor(np.ones(g.shape)) - g) * q
        return FusionOutput(z=z, gate=g, p=p, q=q)


def gate_audit(outputs: list[FusionOutput], cohorts: list, threshold: float = 0.3):
    """Per-cohort gate statistics.

    Cohort labels align with the examples of the concatenated outputs. Each
    gated example contributes its mean-over-dimensions gate value; bypassed
    examples carry no gate and are excluded, so ``n`` counts gated examples.
    Returns rows of (cohort, mean_gate, frac_below_threshold, n).
    """
    if not outputs:
        raise DomainError("gate_audit: no outputs given")
    per_example: list[float | None] = []
    for out in outputs:
        n = out.p.shape[0] if out.p.data.ndim > 1 else 1
        if out.gate is None:
            per_example.extend([None] * n)
        else:
            means = out.gate.data.reshape(n, -1).mean(axis=1)
            per_example.extend(float(m) for m in means)
    if len(per_example) != len(cohorts):
        raise DomainError(f"gate_audit: {len(per_example)} examples vs "
                          f"{len(cohorts)} cohort labels")
    rows = []
    for cohort in sorted(set(cohorts), key=str):
        values = [v for v, c in zip(per_example, cohorts) if c == cohort and v is not None]
        if values:
            arr = np.array(values)
            rows.append((cohort, float(arr.mean()),
                         float((arr < threshold).mean()), len(values)))
        else:
            rows.append((cohort, float("nan"), float("nan"), 0))
    return rows


def gate_audit_csv(rows) -> str:
    lines = ["cohort,mean_gate,frac_below_threshold,n"]
    for cohort, mean_gate, frac, n in rows:
        mg = "" if math.isnan(mean_gate) else format(mean_gate, ".10g")
        fb = "" if math.isnan(frac) else format(frac, ".10g")
        lines.append(f"{cohort},{mg},{fb},{n}")
    return "\n".join(lines) + "\n"
