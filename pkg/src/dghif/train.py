"""Losses, optimizer, schedule, metrics, and the three-stage training loop.

Stage 1 adapts the text encoder with masked-token prediction; stage 2
pretrains the graph side on edge prediction with the text encoder frozen;
stage 3 co-trains everything on risk labels plus a weighted edge-prediction
term, unfreezing the text encoder after a short burn-in at a reduced
learning rate. Either pretraining stage can be skipped for ablations; the
joint stage always runs, with early stopping on validation F1.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DomainError
from .graph import HeteroGraph, build_graph, edge_prediction_loss, sample_edge_batch
from .model import Model
from .tensor import Tape, Tensor, backward
from .text import Vocab, tokenize

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "stage", "train_loss", "val_F1", "val_precision",
                   "val_recall", "metaphor_acc", "lambda_eff", "mean_gate")

LAMBDA_MODES = ("fixed", "cosine", "learned")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    lr_min_ratio: float = 0.02
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    warmup_frac: float = 0.1
    text_epochs: int = 5
    graph_epochs: int = 5
    joint_epochs: int = 30
    text_lr: float = 0.0        # 0 -> lr
    graph_lr: float = 0.0
    patience: int = 5
    burn_in_epochs: int = 1
    text_lr_mult: float = 0.1
    mask_rate: float = 0.15
    lambda_mode: str = "fixed"
    lambda0: float = 0.5
    val_frac: float = 0.15
    threshold: float = 0.5
    skip_text_pretrain: bool = False
    skip_graph_pretrain: bool = False

    def stage_lr(self, stage: str) -> float:
        if stage == "text_pretrain" and self.text_lr:
            return self.text_lr
        if stage == "graph_pretrain" and self.graph_lr:
            return self.graph_lr
        return self.lr


# ---------------------------------------------------------------------------
# losses

def risk_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE of sigmoid(logits) against binary risk labels."""
    return T.bce_with_logits(logits, labels)


class LambdaPolicy:
    """Weight on the edge-prediction term of the joint objective.

    fixed: constant lambda0. cosine: lambda0 * 0.5 * (1 + cos(pi * progress)),
    decaying over the joint stage. learned: softplus of a trained scalar,
    initialized to match lambda0, structurally nonnegative.
    """

    def __init__(self, mode: str = "fixed", lambda0: float = 0.5):
        if mode not in LAMBDA_MODES:
            raise DomainError(f"unknown lambda mode {mode!r}")
        self.mode = mode
        self.lambda0 = lambda0
        self.raw: Tensor | None = None
        if mode == "learned":
            self.raw = Tensor(np.log(np.expm1(lambda0)), requires_grad=True,
                              name="lambda.raw")

    def value(self, step: int, total_steps: int) -> float:
        if self.mode == "fixed":
            return self.lambda0
        if self.mode == "cosine":
            progress = min(max(step / max(total_steps, 1), 0.0), 1.0)
            return self.lambda0 * 0.5 * (1.0 + math.cos(math.pi * progress))
        return float(np.log1p(np.exp(self.raw.data)))


def joint_loss(l_risk: Tensor, l_rel: Tensor | None, policy: LambdaPolicy,
               step: int, total_steps: int) -> tuple[Tensor, float]:
    """Risk loss plus the policy-weighted relation loss; returns (loss, lambda)."""
    if l_rel is None:
        return l_risk, 0.0
    lam = policy.value(step, total_steps)
    if policy.mode == "learned":
        lam_t = T.log(T.exp(policy.raw) + 1.0)
        return l_risk + lam_t * l_rel, lam
    return l_risk + lam * l_rel, lam


# ---------------------------------------------------------------------------
# learning-rate schedule

def lr_schedule(step: int, total_steps: int, lr_peak: float, lr_min: float,
                warmup_frac: float) -> float:
    """Linear warmup to the peak, then half-amplitude cosine down to lr_min."""
    if total_steps <= 0:
        raise DomainError("lr_schedule: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise DomainError(f"lr_schedule: step {step} outside [0, {total_steps}]")
    if not 0.0 <= warmup_frac < 1.0:
        raise DomainError(f"lr_schedule: warmup_frac {warmup_frac} outside [0, 1)")
    warm = warmup_frac * total_steps
    if step < warm:
        return lr_peak * step / warm
    progress = (step - warm) / (total_steps - warm)
    return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay and bias correction."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                             "t": 0}
                      for name, p in self.params.items()}

    def step(self, lr: float, frozen_groups: frozenset[str] = frozenset(),
             lr_mults: dict[str, float] | None = None) -> None:
        lr_mults = lr_mults or {}
        b1, b2 = self.betas
        for name, p in self.params.items():
            group = name.split(".", 1)[0]
            if group in frozen_groups or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise DomainError(f"non-finite gradient in group {group!r} ({name})")
            st = self.state[name]
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            m_hat = st["m"] / (1 - b1 ** st["t"])
            v_hat = st["v"] / (1 - b2 ** st["t"])
            eff_lr = lr * lr_mults.get(group, 1.0)
            p.data *= (1.0 - eff_lr * self.weight_decay)
            p.data -= eff_lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def export_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        steps = {name: st["t"] for name, st in self.state.items()}
        arrays = {}
        for name, st in self.state.items():
            arrays[f"opt.m.{name}"] = st["m"].copy()
            arrays[f"opt.v.{name}"] = st["v"].copy()
        return steps, arrays

    def load_state(self, steps: dict, arrays: dict[str, np.ndarray]) -> None:
        for name, st in self.state.items():
            st["t"] = int(steps[name])
            st["m"] = arrays[f"opt.m.{name}"].astype(st["m"].dtype)
            st["v"] = arrays[f"opt.v.{name}"].astype(st["v"].dtype)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    precision: float
    recall: float
    f1: float
    metaphor_acc: float | None
    precision_defined: bool = True


def classification_metrics(scores: np.ndarray, labels: np.ndarray,
                           threshold: float = 0.5,
                           metaphor_flags: np.ndarray | None = None) -> Metrics:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise DomainError("classification_metrics: empty input")
    if scores.shape != labels.shape:
        raise DomainError(f"classification_metrics: {scores.shape} vs {labels.shape}")
    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    precision_defined = (tp + fp) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    metaphor_acc = None
    if metaphor_flags is not None:
        flags = np.asarray(metaphor_flags, dtype=bool)
        if flags.any():
            metaphor_acc = float((pred[flags] == pos[flags]).mean())
    return Metrics(precision, recall, f1, metaphor_acc, precision_defined)


# ---------------------------------------------------------------------------
# data preparation

@dataclass
class PreparedData:
    post_ids: np.ndarray
    post_mask: np.ndarray
    post_user: np.ndarray
    n_users: int
    labels: np.ndarray
    metaphor_users: np.ndarray
    graph: HeteroGraph
    vocab: Vocab
    train_idx: np.ndarray
    val_idx: np.ndarray
    user_posts: list[np.ndarray] = field(default_factory=list)


def stratified_split(labels: np.ndarray, val_frac: float,
                     seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-label-class validation split, deterministic in the seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 911)))
    val = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_val = max(1, int(round(val_frac * len(idx)))) if val_frac > 0 else 0
        val.append(idx[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=int)
    train_idx = np.setdiff1d(np.arange(len(labels)), val_idx)
    return train_idx, val_idx


def prepare_data(corpus, vocab: Vocab, max_len: int, val_frac: float,
                 seed: int) -> PreparedData:
    """Tokenize posts, build the interaction graph, and split users."""
    n_users = len(corpus.labels)
    seqs = [tokenize(" ".join(tokens), vocab, max_len,
                     metaphor_flag=flag, post_id=i)
            for i, (user, tokens, flag) in enumerate(corpus.posts)]
    post_ids = np.stack([s.ids for s in seqs])
    post_mask = np.stack([s.mask for s in seqs])
    post_user = np.array([user for user, _, _ in corpus.posts], dtype=np.int64)
    metaphor_users = np.zeros(n_users, dtype=bool)
    for (user, _, flag) in corpus.posts:
        if flag:
            metaphor_users[user] = True
    graph = build_graph(corpus.interactions, n_users)
    train_idx, val_idx = stratified_split(np.asarray(corpus.labels), val_frac, seed)
    user_posts = [np.flatnonzero(post_user == u) for u in range(n_users)]
    return PreparedData(post_ids=post_ids, post_mask=post_mask, post_user=post_user,
                        n_users=n_users, labels=np.asarray(corpus.labels, dtype=float),
                        metaphor_users=metaphor_users, graph=graph, vocab=vocab,
                        train_idx=train_idx, val_idx=val_idx, user_posts=user_posts)


# ---------------------------------------------------------------------------
# trainer

@dataclass
class TrainResult:
    final_f1: float
    final_metrics: Metrics | None
    convergence_epoch: int
    history: list[dict]
    stopped_early: bool


def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield order[lo: lo + size]


class Trainer:
    STREAMS = ("text_stage", "graph_stage", "joint")

    def __init__(self, model: Model, data: PreparedData, cfg: TrainConfig, seed: int):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.seed = seed
        self.policy = LambdaPolicy(cfg.lambda_mode, cfg.lambda0)
        params = dict(model.trainable())
        if self.policy.raw is not None:
            params["lambda.raw"] = self.policy.raw
        self.optimizer = AdamW(params, weight_decay=cfg.weight_decay,
                               betas=(cfg.beta1, cfg.beta2))
        children = np.random.SeedSequence((seed, 1)).spawn(len(self.STREAMS))
        self.rngs = {name: np.random.default_rng(ss)
                     for name, ss in zip(self.STREAMS, children)}
        self.stages = self._build_stages()
        self.stage_idx = 0
        self.epoch_in_stage = 0
        self.best_f1 = -1.0
        self.best_epoch = -1
        self.best_metrics: Metrics | None = None
        self.best_arrays: dict[str, np.ndarray] | None = None
        self.history: list[dict] = []
        self.stopped_early = False
        self._graph_feats: np.ndarray | None = None
        self._h_stash: np.ndarray | None = None

    def _build_stages(self) -> list[tuple[str, int]]:
        cfg, model = self.cfg, self.model
        stages = []
        if model.cfg.uses_text() and not cfg.skip_text_pretrain and cfg.text_epochs > 0:
            stages.append(("text_pretrain", cfg.text_epochs))
        if model.cfg.uses_graph() and not cfg.skip_graph_pretrain and cfg.graph_epochs > 0:
            stages.append(("graph_pretrain", cfg.graph_epochs))
        stages.append(("joint", cfg.joint_epochs))
        return stages

    # -- shared helpers --------------------------------------------------------

    def _zero_grads(self) -> None:
        for p in self.optimizer.params.values():
            p.grad = None

    def _text_cache(self) -> np.ndarray:
        """Eval-mode user text embeddings; constant within a step."""
        d = self.data
        out = self.model.encode_user_text(d.post_ids, d.post_mask, d.post_user,
                                          d.n_users)
        return out.data.copy()

    def _frozen(self, stage: str, epoch: int) -> frozenset[str]:
        groups = {"text", "gnn", "fusion", "head", "lambda"}
        if stage == "text_pretrain":
            return frozenset(groups - {"text"})
        if stage == "graph_pretrain":
            return frozenset(groups - {"gnn"})
        frozen = set()
        if self.model.cfg.uses_text() and epoch < self.cfg.burn_in_epochs:
            frozen.add("text")
        return frozenset(frozen)

    # -- stage epochs -----------------------------------------------------------

    def _epoch_text_pretrain(self, epoch: int, n_epochs: int) -> float:
        cfg, d = self.cfg, self.data
        rng = self.rngs["text_stage"]
        n_posts = len(d.post_ids)
        steps_per_epoch = max(1, math.ceil(n_posts / cfg.batch_size))
        total = n_epochs * steps_per_epoch
        lr_peak = cfg.stage_lr("text_pretrain")
        order = rng.permutation(n_posts)
        losses = []
        for i, batch in enumerate(_batches(order, cfg.batch_size)):
            step = epoch * steps_per_epoch + i
            lr = lr_schedule(step, total, lr_peak, lr_peak * cfg.lr_min_ratio,
                             cfg.warmup_frac)
            self._zero_grads()
            with Tape() as tape:
                loss = self.model.text.mlm_step(d.post_ids[batch], d.post_mask[batch],
                                                cfg.mask_rate, rng, train=True)
                if loss._producer is tape:
                    backward(loss, tape)
                    self.optimizer.step(lr, self._frozen("text_pretrain", epoch))
            losses.append(loss.item())
        return float(np.mean(losses))

    def _epoch_graph_pretrain(self, epoch: int, n_epochs: int) -> float:
        cfg, d = self.cfg, self.data
        rng = self.rngs["graph_stage"]
        if self._graph_feats is None:
            h = self._text_cache() if self.model.cfg.uses_text() else None
            self._graph_feats = self.model.node_features(
                d.graph, Tensor(h) if h is not None else None).data.copy()
        n_pairs = max(len(d.graph.linked_pairs()), 1)
        steps_per_epoch = max(1, math.ceil(2 * n_pairs / cfg.batch_size))
        total = n_epochs * steps_per_epoch
        lr_peak = cfg.stage_lr("graph_pretrain")
        losses = []
        for i in range(steps_per_epoch):
            step = epoch * steps_per_epoch + i
            lr = lr_schedule(step, total, lr_peak, lr_peak * cfg.lr_min_ratio,
                             cfg.warmup_frac)
            pairs, labels = sample_edge_batch(d.graph, cfg.batch_size, rng)
            self._zero_grads()
            with Tape() as tape:
                v = self.model.gnn.forward(d.graph, Tensor(self._graph_feats),
                                           train=True, rng=rng)
                loss = edge_prediction_loss(v, pairs, labels)
                backward(loss, tape)
            self.optimizer.step(lr, self._frozen("graph_pretrain", epoch))
            losses.append(loss.item())
        return float(np.mean(losses))

    def _epoch_joint(self, epoch: int, n_epochs: int) -> tuple[float, float]:
        cfg, d, model = self.cfg, self.data, self.model
        rng = self.rngs["joint"]
        uses_text, uses_graph = model.cfg.uses_text(), model.cfg.uses_graph()
        steps_per_epoch = max(1, math.ceil(len(d.train_idx) / cfg.batch_size))
        total = n_epochs * steps_per_epoch
        frozen = self._frozen("joint", epoch)
        mults = {"text": cfg.text_lr_mult}
        h_cache = None
        if uses_text:
            # the eval pass at the previous epoch boundary used the same
            # parameters, so its embeddings can serve as this epoch's cache
            h_cache = self._h_stash if self._h_stash is not None else self._text_cache()
        self._h_stash = None
        order = rng.permutation(d.train_idx)
        losses, lams = [], []
        for i, batch in enumerate(_batches(order, cfg.batch_size)):
            step = epoch * steps_per_epoch + i
            lr = lr_schedule(step, total, cfg.lr, cfg.lr * cfg.lr_min_ratio,
                             cfg.warmup_frac)
            self._zero_grads()
            with Tape() as tape:
                h_full = h_batch = None
                if uses_text:
                    post_rows = np.concatenate([d.user_posts[u] for u in batch])
                    local_user = np.concatenate(
                        [np.full(len(d.user_posts[u]), j) for j, u in enumerate(batch)])
                    h_batch = model.encode_user_text(
                        d.post_ids[post_rows], d.post_mask[post_rows], local_user,
                        len(batch), train=True, rng=rng)
                    in_batch = np.zeros(d.n_users)
                    in_batch[batch] = 1.0
                    scattered = T.scatter_rows_add(h_batch, batch, d.n_users)
                    h_full = (T.scale_rows(Tensor(h_cache), Tensor(1.0 - in_batch))
                              + T.scale_rows(scattered, Tensor(in_batch)))
                logits, fused, v_all = model.forward_users(
                    d.graph, h_full, batch, h_batch, train=True, rng=rng)
                l_risk = risk_loss(logits, d.labels[batch])
                l_rel = None
                if uses_graph:
                    pairs, pair_labels = sample_edge_batch(d.graph, cfg.batch_size, rng)
                    l_rel = edge_prediction_loss(v_all, pairs, pair_labels)
                loss, lam = joint_loss(l_risk, l_rel, self.policy, step, total)
                backward(loss, tape)
            self.optimizer.step(lr, frozen, mults)
            losses.append(loss.item())
            lams.append(lam)
        return float(np.mean(losses)), float(np.mean(lams))

    # -- evaluation ---------------------------------------------------------------

    def evaluate(self) -> tuple[Metrics, float | None]:
        d = self.data
        h_users = None
        if self.model.cfg.uses_text():
            h_users = Tensor(self._text_cache())
            self._h_stash = h_users.data
        result = self.model.score_all(d.graph, d.post_ids, d.post_mask,
                                      d.post_user, d.n_users, h_users=h_users)
        val = d.val_idx
        metrics = classification_metrics(result["scores"][val], d.labels[val],
                                         self.cfg.threshold,
                                         d.metaphor_users[val])
        mean_gate = None
        if result["gate_mean"] is not None:
            mean_gate = float(result["gate_mean"][val].mean())
        return metrics, mean_gate

    # -- main loop ------------------------------------------------------------------

    def run(self, on_epoch_end=None) -> TrainResult:
        self._graph_feats = None
        while self.stage_idx < len(self.stages):
            stage, n_epochs = self.stages[self.stage_idx]
            if stage == "graph_pretrain" and self.epoch_in_stage == 0:
                self._graph_feats = None
            while self.epoch_in_stage < n_epochs:
                epoch = self.epoch_in_stage
                if stage == "text_pretrain":
                    train_loss = self._epoch_text_pretrain(epoch, n_epochs)
                    row = {"epoch": epoch + 1, "stage": stage,
                           "train_loss": train_loss}
                elif stage == "graph_pretrain":
                    train_loss = self._epoch_graph_pretrain(epoch, n_epochs)
                    row = {"epoch": epoch + 1, "stage": stage,
                           "train_loss": train_loss}
                else:
                    train_loss, lam = self._epoch_joint(epoch, n_epochs)
                    metrics, mean_gate = self.evaluate()
                    row = {"epoch": epoch + 1, "stage": stage,
                           "train_loss": train_loss, "val_F1": metrics.f1,
                           "val_precision": metrics.precision,
                           "val_recall": metrics.recall,
                           "metaphor_acc": metrics.metaphor_acc,
                           "lambda_eff": lam if self.model.cfg.uses_graph() else None,
                           "mean_gate": mean_gate}
                    if metrics.f1 > self.best_f1:
                        self.best_f1 = metrics.f1
                        self.best_epoch = epoch + 1
                        self.best_metrics = metrics
                        self.best_arrays = self.model.export_arrays()
                self.history.append(row)
                self.epoch_in_stage += 1
                if on_epoch_end is not None:
                    on_epoch_end(self)
                if (stage == "joint" and self.best_epoch > 0
                        and (epoch + 1) - self.best_epoch >= self.cfg.patience):
                    self.stopped_early = True
                    break
            self.stage_idx += 1
            self.epoch_in_stage = 0
        if self.best_arrays is not None:
            self.model.load_arrays(self.best_arrays)
        return TrainResult(final_f1=self.best_f1, final_metrics=self.best_metrics,
                           convergence_epoch=self.best_epoch, history=self.history,
                           stopped_early=self.stopped_early)

    # -- resumable state ---------------------------------------------------------

    def export_state(self) -> tuple[dict, dict[str, np.ndarray]]:
        steps, arrays = self.optimizer.export_state()
        arrays.update({f"param.{k}": v for k, v in self.model.export_arrays().items()})
        if self.policy.raw is not None:
            arrays["param.lambda.raw"] = self.policy.raw.data.copy()
        if self.best_arrays is not None:
            arrays.update({f"best.{k}": v.copy() for k, v in self.best_arrays.items()})
        header = {
            "stage_idx": self.stage_idx,
            "epoch_in_stage": self.epoch_in_stage,
            "best_f1": self.best_f1,
            "best_epoch": self.best_epoch,
            "best_metrics": (vars(self.best_metrics) if self.best_metrics else None),
            "stopped_early": self.stopped_early,
            "opt_steps": steps,
            "rng_states": {k: _jsonable_rng(v) for k, v in self.rngs.items()},
        }
        return header, arrays

    def load_state(self, header: dict, arrays: dict[str, np.ndarray]) -> None:
        self.stage_idx = int(header["stage_idx"])
        self.epoch_in_stage = int(header["epoch_in_stage"])
        self.best_f1 = float(header["best_f1"])
        self.best_epoch = int(header["best_epoch"])
        self.stopped_early = bool(header["stopped_early"])
        bm = header.get("best_metrics")
        self.best_metrics = Metrics(**bm) if bm else None
        params = {k[len("param."):]: v for k, v in arrays.items()
                  if k.startswith("param.")}
        lam_raw = params.pop("lambda.raw", None)
        self.model.load_arrays(params)
        if lam_raw is not None and self.policy.raw is not None:
            self.policy.raw.data[...] = lam_raw
        best = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")}
        self.best_arrays = best or None
        self.optimizer.load_state(header["opt_steps"], arrays)
        for name, state in header["rng_states"].items():
            self.rngs[name].bit_generator.state = _unjsonable_rng(state)
        self._graph_feats = None
        self._h_stash = None


def _jsonable_rng(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    return {"bit_generator": state["bit_generator"],
            "state": {k: int(v) for k, v in state["state"].items()},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"])}


def _unjsonable_rng(state: dict) -> dict:
    return {"bit_generator": state["bit_generator"],
            "state": {k: int(v) for k, v in state["state"].items()},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"])}


# ---------------------------------------------------------------------------
# history serialization

def format_float(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".10g")


def history_to_csv(rows: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in rows:
        cells = [str(row["epoch"]), row["stage"]]
        for col in HISTORY_COLUMNS[2:]:
            cells.append(format_float(row.get(col)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# latency probe

def measure_latency(model: Model, data: PreparedData, n_trials: int = 1000,
                    user: int = 0) -> float:
    """Median wall-clock milliseconds to score one user, batch size 1."""
    d = data
    rows = d.user_posts[user]
    h_cache = None
    if model.cfg.uses_text():
        h_cache = model.encode_user_text(d.post_ids, d.post_mask, d.post_user,
                                         d.n_users).data.copy()
    times = []
    for _ in range(n_trials):
        t0 = time.perf_counter()
        h_full = h_batch = None
        if model.cfg.uses_text():
            h_user = model.encode_user_text(d.post_ids[rows], d.post_mask[rows],
                                            np.zeros(len(rows), dtype=int), 1)
            merged = h_cache.copy()
            merged[user] = h_user.data[0]
            h_full = Tensor(merged)
            h_batch = h_user
        logits, _, _ = model.forward_users(d.graph, h_full,
                                           np.array([user]), h_batch)
        _sigmoid_scalar(logits.data[0])
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1000.0)


def _sigmoid_scalar(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))
