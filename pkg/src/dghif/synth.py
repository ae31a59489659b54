"""Synthetic social benchmark: graph, corpus, cascades, efficiency metrics.

The generator plants risk communities inside a power-law interaction graph
and writes posts whose risk signal is either explicit (rare keywords) or
implicit (metaphor tokens that benign users also use occasionally), so
text alone and structure alone are each insufficient. Cascade simulation
follows the synchronous independent-cascade rule. The three efficiency
metrics are propagation delay, the recall gap between degree bands, and
the score-dispersion ratio between risk and benign populations.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, GraphError
from .graph import DEFAULT_RELATIONS, HeteroGraph, build_graph

logger = logging.getLogger(__name__)

CORPUS_FORMAT_VERSION = 1

EVENT_TYPES = ("violent_incitement", "false_news", "financial_fraud")


@dataclass
class SynthConfig:
    n_nodes: int = 1000
    gamma: float = 2.1
    k_min: int = 1
    k_max: int = 0                      # 0 -> n_nodes // 12
    relation_mix: tuple[float, float, float, float] = (0.35, 0.25, 0.25, 0.15)
    n_risk_communities: int = 8
    community_size: int = 40
    risk_label_rate: float = 0.9
    background_risk_rate: float = 0.03
    # risk users split into explicit (rare keywords) and implicit (metaphor
    # tokens that benign users also use) posting styles
    metaphor_user_rate: float = 0.45
    metaphor_post_rate: float = 0.85    # per-post metaphor rate, implicit users
    explicit_keyword_rate: float = 0.7
    explicit_metaphor_rate: float = 0.1
    benign_metaphor_rate: float = 0.3
    benign_keyword_rate: float = 0.01
    # every user gets the same number of extra interactions so degree alone
    # carries no label signal; only the targets differ
    homophily_edges: int = 3
    homophily_relation_mix: tuple[float, float, float, float] = (0.1, 0.25, 0.55, 0.1)
    noisy_user_rate: float = 0.1
    noisy_extra_edges: int = 3
    n_topics: int = 6
    topic_focus: float = 0.85
    n_risk_keywords: int = 12
    n_metaphor_tokens: int = 8
    n_filler_tokens: int = 60
    posts_per_user: tuple[int, int] = (1, 3)
    post_len: tuple[int, int] = (8, 14)
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 1:
            raise DomainError(f"power-law exponent must exceed 1, got {self.gamma}")
        if self.posts_per_user[0] < 1:
            raise DomainError("every user must get at least one post")
        if self.n_risk_communities * self.community_size > self.n_nodes:
            raise DomainError("risk communities larger than the node set")

    def vocab_tokens(self) -> dict[str, list[str]]:
        return {
            "risk": [f"hazard{i}" for i in range(self.n_risk_keywords)],
            "metaphor": [f"ember{i}" for i in range(self.n_metaphor_tokens)],
            "filler": [f"word{i}" for i in range(self.n_filler_tokens)],
        }


@dataclass
class SynthCorpus:
    labels: list[int]
    communities: list[int]              # -1 for background users
    posts: list[tuple[int, list[str], bool]]
    interactions: list[tuple[int, str, int]]
    provenance: dict


# ---------------------------------------------------------------------------
# power-law graph

def sample_powerlaw_degrees(n: int, gamma: float, k_min: int, k_max: int,
                            rng: np.random.Generator) -> np.ndarray:
    ks = np.arange(k_min, k_max + 1, dtype=float)
    weights = ks ** (-gamma)
    cdf = np.cumsum(weights / weights.sum())
    return np.searchsorted(cdf, rng.random(n)) + k_min


def generate_powerlaw_graph(cfg: SynthConfig,
                            rng: np.random.Generator | None = None) -> HeteroGraph:
    """Configuration-model wiring of a discrete power-law degree sequence.

    Self-loops and duplicate undirected pairs from the stub pairing are
    rejected; each surviving pair gets a random orientation and a relation
    drawn from the configured mix. Isolated leftovers are reattached so the
    minimum degree of 1 holds.
    """
    if cfg.n_nodes < 10:
        raise DomainError(f"need at least 10 nodes, got {cfg.n_nodes}")
    rng = rng or np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    k_max = cfg.k_max or max(cfg.n_nodes // 12, 10)
    degrees = sample_powerlaw_degrees(cfg.n_nodes, cfg.gamma, cfg.k_min, k_max, rng)
    if degrees.sum() % 2 == 1:
        idx = int(np.argmax(degrees))
        degrees[idx] -= 1
        logger.info("odd stub count; decremented one stub at node %d", idx)
    stubs = np.repeat(np.arange(cfg.n_nodes), degrees)
    rng.shuffle(stubs)
    pairs = stubs.reshape(-1, 2)
    keep = pairs[:, 0] != pairs[:, 1]
    pairs = pairs[keep]
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    _, first = np.unique(lo * cfg.n_nodes + hi, return_index=True)
    pairs = pairs[np.sort(first)]
    flip = rng.random(len(pairs)) < 0.5
    src = np.where(flip, pairs[:, 1], pairs[:, 0])
    dst = np.where(flip, pairs[:, 0], pairs[:, 1])

    mix = np.asarray(cfg.relation_mix, dtype=float)
    rel_idx = rng.choice(len(DEFAULT_RELATIONS), size=len(pairs), p=mix / mix.sum())

    touched = np.zeros(cfg.n_nodes, dtype=bool)
    touched[src] = True
    touched[dst] = True
    extra = []
    for node in np.flatnonzero(~touched):
        other = int(rng.integers(0, cfg.n_nodes - 1))
        if other >= node:
            other += 1
        extra.append((node, other, int(rng.integers(0, len(DEFAULT_RELATIONS)))))
    if extra:
        logger.info("reattached %d isolated node(s)", len(extra))
        src = np.concatenate([src, [e[0] for e in extra]])
        dst = np.concatenate([dst, [e[1] for e in extra]])
        rel_idx = np.concatenate([rel_idx, [e[2] for e in extra]])

    edges = {}
    for j, rel in enumerate(DEFAULT_RELATIONS):
        sel = rel_idx == j
        if sel.any():
            edges[rel] = np.unique(np.stack([src[sel], dst[sel]], axis=1), axis=0)
    return HeteroGraph(cfg.n_nodes, DEFAULT_RELATIONS, edges)


def fit_powerlaw_mle(degrees: np.ndarray, k_min: int = 2) -> float:
    """Discrete maximum-likelihood exponent estimate over degrees >= k_min."""
    ks = np.asarray(degrees, dtype=float)
    ks = ks[ks >= k_min]
    if len(ks) == 0:
        raise DomainError(f"no degrees >= {k_min} to fit")
    return 1.0 + len(ks) / np.log(ks / (k_min - 0.5)).sum()


# ---------------------------------------------------------------------------
# corpus

def generate_corpus(cfg: SynthConfig, graph: HeteroGraph,
                    rng: np.random.Generator | None = None) -> SynthCorpus:
    """Labels, communities, posts, and the augmented interaction log."""
    rng = rng or np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    n = cfg.n_nodes
    vocab = cfg.vocab_tokens()

    communities = np.full(n, -1, dtype=int)
    members = rng.permutation(n)[: cfg.n_risk_communities * cfg.community_size]
    for c in range(cfg.n_risk_communities):
        communities[members[c * cfg.community_size:(c + 1) * cfg.community_size]] = c

    labels = np.zeros(n, dtype=int)
    in_comm = communities >= 0
    labels[in_comm] = rng.random(in_comm.sum()) < cfg.risk_label_rate
    labels[~in_comm] = rng.random((~in_comm).sum()) < cfg.background_risk_rate

    implicit = (labels == 1) & (rng.random(n) < cfg.metaphor_user_rate)

    interactions = []
    for rel in graph.relations:
        for a, b in graph.edges[rel]:
            interactions.append((int(a), rel, int(b)))
    hmix = np.asarray(cfg.homophily_relation_mix, dtype=float)
    hmix = hmix / hmix.sum()
    for u in range(n):
        c = communities[u]
        if c >= 0:
            pool = np.flatnonzero(communities == c)
            pool = pool[pool != u]
        else:
            pool = None  # random targets: same degree budget, no homophily
        k = cfg.homophily_edges if pool is None else min(cfg.homophily_edges, len(pool))
        if pool is None:
            targets = []
            while len(targets) < k:
                t = int(rng.integers(0, n))
                if t != u:
                    targets.append(t)
        else:
            targets = rng.choice(pool, size=k, replace=False)
        rels = rng.choice(len(DEFAULT_RELATIONS), size=k, p=hmix)
        for t, r in zip(targets, rels):
            interactions.append((int(u), DEFAULT_RELATIONS[r], int(t)))
    n_noisy = int(round(cfg.noisy_user_rate * n))
    noisy_users = rng.permutation(n)[:n_noisy]
    base_mix = np.asarray(cfg.relation_mix, dtype=float)
    base_mix = base_mix / base_mix.sum()
    for u in noisy_users:
        targets = rng.integers(0, n, size=cfg.noisy_extra_edges)
        rels = rng.choice(len(DEFAULT_RELATIONS), size=cfg.noisy_extra_edges, p=base_mix)
        for t, r in zip(targets, rels):
            if int(t) != int(u):
                interactions.append((int(u), DEFAULT_RELATIONS[r], int(t)))

    # topical filler structure gives the masked-token objective something
    # to learn; topics are independent of labels
    topic_sets = np.array_split(np.array(vocab["filler"]), cfg.n_topics)
    home_topic = rng.integers(0, cfg.n_topics, size=n)
    metaphor_set = set(vocab["metaphor"])

    def filler_token(topic: int) -> str:
        if rng.random() < cfg.topic_focus:
            return str(rng.choice(topic_sets[topic]))
        return str(rng.choice(vocab["filler"]))

    posts = []
    for u in range(n):
        n_posts = int(rng.integers(cfg.posts_per_user[0], cfg.posts_per_user[1] + 1))
        for _ in range(n_posts):
            topic = int(home_topic[u]) if rng.random() < 0.7 else \
                int(rng.integers(0, cfg.n_topics))
            length = int(rng.integers(cfg.post_len[0], cfg.post_len[1] + 1))
            tokens = [filler_token(topic) for _ in range(length)]
            if labels[u] == 1 and implicit[u]:
                if rng.random() < cfg.metaphor_post_rate:
                    _inject(tokens, vocab["metaphor"], rng.integers(1, 3), rng)
            elif labels[u] == 1:
                if rng.random() < cfg.explicit_keyword_rate:
                    _inject(tokens, vocab["risk"], rng.integers(1, 3), rng)
                if rng.random() < cfg.explicit_metaphor_rate:
                    _inject(tokens, vocab["metaphor"], 1, rng)
            else:
                if rng.random() < cfg.benign_metaphor_rate:
                    _inject(tokens, vocab["metaphor"], 1, rng)
                if rng.random() < cfg.benign_keyword_rate:
                    _inject(tokens, vocab["risk"], 1, rng)
            flag = any(t in metaphor_set for t in tokens)
            posts.append((u, tokens, flag))

    return SynthCorpus(labels=labels.tolist(), communities=communities.tolist(),
                       posts=posts, interactions=interactions,
                       provenance={"config": asdict(cfg), "seed": cfg.seed,
                                   "format_version": CORPUS_FORMAT_VERSION})


def _inject(tokens: list[str], pool: list[str], count: int,
            rng: np.random.Generator) -> None:
    spots = rng.choice(len(tokens), size=min(int(count), len(tokens)), replace=False)
    for s in spots:
        tokens[s] = str(rng.choice(pool))


def corpus_texts(corpus: SynthCorpus) -> list[str]:
    return [" ".join(tokens) for _, tokens, _ in corpus.posts]


# ---------------------------------------------------------------------------
# corpus serialization

def save_corpus(corpus: SynthCorpus, out_dir: str) -> None:
    """users.csv, posts.jsonl, interactions.tsv; manifest written last."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "users.csv"), "w", encoding="utf-8") as fh:
        fh.write("id,label,community\n")
        for i, (lab, com) in enumerate(zip(corpus.labels, corpus.communities)):
            fh.write(f"{i},{lab},{com}\n")
    with open(os.path.join(out_dir, "posts.jsonl"), "w", encoding="utf-8") as fh:
        for user, tokens, flag in corpus.posts:
            fh.write(json.dumps({"user_id": user, "tokens": tokens,
                                 "metaphor_flag": flag}, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "interactions.tsv"), "w", encoding="utf-8") as fh:
        for actor, rel, target in corpus.interactions:
            fh.write(f"{actor}\t{rel}\t{target}\n")
    manifest = {"format_version": CORPUS_FORMAT_VERSION,
                "provenance": corpus.provenance,
                "files": ["users.csv", "posts.jsonl", "interactions.tsv"],
                "n_users": len(corpus.labels), "n_posts": len(corpus.posts)}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(in_dir: str) -> SynthCorpus:
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DomainError(f"no manifest.json in {in_dir} (incomplete corpus?)")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != CORPUS_FORMAT_VERSION:
        raise DomainError(f"unsupported corpus format {manifest['format_version']}")
    labels, communities = [], []
    with open(os.path.join(in_dir, "users.csv"), encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            _, lab, com = line.rstrip("\n").split(",")
            labels.append(int(lab))
            communities.append(int(com))
    posts = []
    with open(os.path.join(in_dir, "posts.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            posts.append((rec["user_id"], rec["tokens"], rec["metaphor_flag"]))
    interactions = []
    with open(os.path.join(in_dir, "interactions.tsv"), encoding="utf-8") as fh:
        for line in fh:
            actor, rel, target = line.rstrip("\n").split("\t")
            interactions.append((int(actor), rel, int(target)))
    return SynthCorpus(labels=labels, communities=communities, posts=posts,
                       interactions=interactions,
                       provenance=manifest["provenance"])


def corpus_graph(corpus: SynthCorpus) -> HeteroGraph:
    return build_graph(corpus.interactions, len(corpus.labels))


# ---------------------------------------------------------------------------
# cascades

@dataclass
class CascadeEvent:
    event_type: str
    seeds: list[int]
    transmission: dict[str, float]
    token_class: str = "risk"           # scenario metadata only


@dataclass
class CascadeResult:
    trajectory: list[frozenset]
    reachable: frozenset
    max_steps: int


def simulate_cascade(graph: HeteroGraph, event: CascadeEvent, max_steps: int,
                     rng: np.random.Generator) -> CascadeResult:
    """Synchronous independent cascade along out-edges.

    Every newly infected node attempts each outgoing edge exactly once, with
    its relation's transmission probability; stops at saturation or max_steps.
    """
    if not event.seeds:
        raise GraphError("simulate_cascade: empty seed set")
    for rel, p in event.transmission.items():
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"transmission for {rel!r} outside [0,1]: {p}")
    if max(event.seeds) >= graph.n_nodes or min(event.seeds) < 0:
        raise GraphError("simulate_cascade: seed node out of range")

    active_rels = [r for r in graph.relations if event.transmission.get(r, 0.0) > 0]
    infected = set(int(s) for s in event.seeds)
    frontier = np.array(sorted(infected), dtype=np.int64)
    trajectory = [frozenset(infected)]
    for _ in range(max_steps):
        if len(frontier) == 0:
            break
        frontier_mask = np.zeros(graph.n_nodes, dtype=bool)
        frontier_mask[frontier] = True
        new: set[int] = set()
        for rel in active_rels:
            edges = graph.edges[rel]
            if len(edges) == 0:
                continue
            out = edges[frontier_mask[edges[:, 0]]]
            if len(out) == 0:
                continue
            hits = rng.random(len(out)) < event.transmission[rel]
            for target in out[hits, 1]:
                t = int(target)
                if t not in infected:
                    new.add(t)
        infected |= new
        trajectory.append(frozenset(infected))
        frontier = np.array(sorted(new), dtype=np.int64)
        if not new:
            break
    reachable = _reachable_set(graph, event.seeds, active_rels)
    return CascadeResult(trajectory=trajectory, reachable=frozenset(reachable),
                         max_steps=max_steps)


def _reachable_set(graph: HeteroGraph, seeds, relations) -> set[int]:
    adjacency: dict[int, list[int]] = {}
    for rel in relations:
        for a, b in graph.edges[rel]:
            adjacency.setdefault(int(a), []).append(int(b))
    seen = set(int(s) for s in seeds)
    stack = list(seen)
    while stack:
        node = stack.pop()
        for nxt in adjacency.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def propagation_delay(result: CascadeResult, coverage: float = 1.0) -> int:
    """First step at which the infected share of the reachable set hits coverage.

    Returns max_steps + 1 as a sentinel when coverage is never reached.
    """
    if not 0.0 < coverage <= 1.0:
        raise DomainError(f"coverage must be in (0,1], got {coverage}")
    denom = max(len(result.reachable), 1)
    for step, infected in enumerate(result.trajectory):
        if len(infected & result.reachable) / denom >= coverage:
            return step
    return result.max_steps + 1


# ---------------------------------------------------------------------------
# efficiency metrics

def structural_sensitivity(scores: np.ndarray, labels: np.ndarray,
                           degrees: np.ndarray, k_low: int, k_high: int,
                           threshold: float = 0.5) -> float:
    """|recall(low-degree positives) - recall(high-degree positives)| * 100."""
    if k_low >= k_high:
        raise DomainError(f"k_low {k_low} must be below k_high {k_high}")
    scores, labels, degrees = map(np.asarray, (scores, labels, degrees))
    pos = labels == 1
    low = pos & (degrees <= k_low)
    high = pos & (degrees >= k_high)
    if not low.any():
        raise GraphError(f"no positives in the low-degree band (k <= {k_low})")
    if not high.any():
        raise GraphError(f"no positives in the high-degree band (k >= {k_high})")
    recall_low = float((scores[low] >= threshold).mean())
    recall_high = float((scores[high] >= threshold).mean())
    return abs(recall_low - recall_high) * 100.0


def snr_db(scores: np.ndarray, labels: np.ndarray) -> float:
    """20 log10 of risk-score dispersion over benign-score dispersion."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if not ((labels == 1).any() and (labels == 0).any()):
        raise DomainError("snr_db: both classes must be present")
    sigma_risk = float(scores[labels == 1].std())
    sigma_noise = float(scores[labels == 0].std())
    if sigma_noise == 0.0:
        raise DomainError("snr_db: zero benign-score dispersion")
    return 20.0 * math.log10(sigma_risk / sigma_noise)


def build_events(graph: HeteroGraph, labels: np.ndarray, communities: np.ndarray,
                 seed: int, n_seeds: int = 3) -> list[CascadeEvent]:
    """The three benchmark event scenarios over one generated graph."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    deg = graph.total_degree()
    comm_members = np.flatnonzero(np.asarray(communities) >= 0)
    if len(comm_members) == 0:
        comm_members = np.arange(graph.n_nodes)
    incite_seeds = rng.choice(comm_members, size=min(n_seeds, len(comm_members)),
                              replace=False)
    news_seeds = rng.choice(graph.n_nodes, size=n_seeds, replace=False)
    hubs = np.argsort(deg)[::-1][:n_seeds]
    return [
        CascadeEvent("violent_incitement", [int(s) for s in incite_seeds],
                     {"follow": 0.20, "comment": 0.30, "share_retweet": 0.40,
                      "mention": 0.25}, token_class="risk"),
        CascadeEvent("false_news", [int(s) for s in news_seeds],
                     {"follow": 0.15, "comment": 0.25, "share_retweet": 0.50,
                      "mention": 0.20}, token_class="metaphor"),
        CascadeEvent("financial_fraud", [int(h) for h in hubs],
                     {"follow": 0.25, "comment": 0.35, "share_retweet": 0.30,
                      "mention": 0.35}, token_class="risk"),
    ]
