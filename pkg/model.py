"""
Two-tower premise selection model.

The goal tower (GNN-1) and premise tower (GNN-2) have separate weights and
each produce a pooled graph embedding. A tactic head classifies the goal
embedding; a combiner scores ``[g, p, g * p]`` for every (goal, premise)
pair. Also holds batch construction, the weighted training loss with its
full backward pass, premise ranking and the premise-embedding cache.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from corpus import TrainingExample
from gnn import GnnParams, Vocabulary, embed_graphs, embed_graphs_backward
from graphrep import TermGraph, represent
from logger import run_logger
from numerics import (
    Grads, MlpParams, NumericsError, ParamStore, aucroc_loss, backward, checkpoint_id,
    dtype_of, load_checkpoint, mlp_forward, sigmoid_xent, softmax_xent
)
from schemas import BatchConfig, RepresentationConfig, RunConfig
from sexpr import SExpr


class ModelError(ValueError):
    """Invalid model input, unusable corpus or stale cache"""


@dataclass(frozen=True)
class ModelParams:
    store: ParamStore
    gnn1: GnnParams
    gnn2: GnnParams
    tactic_head: MlpParams
    combiner: MlpParams

    @classmethod
    def create(cls, vocab_size: int, config: RunConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        store: ParamStore = {}
        gnn1 = GnnParams.create(store, "gnn1", vocab_size, config.gnn, rng, dtype)
        gnn2 = GnnParams.create(store, "gnn2", vocab_size, config.gnn, rng, dtype)
        width = config.gnn.embedding_size
        head = config.head
        tactic_head = MlpParams.create(
            store, "tactic_head", (width,) + tuple(head.tactic_hidden) + (head.n_tactics,), rng, dtype)
        combiner = MlpParams.create(
            store, "combiner", (3 * width,) + tuple(head.combiner_hidden) + (1,), rng, dtype)
        return cls(store, gnn1, gnn2, tactic_head, combiner)

    def bind(self, store: ParamStore) -> "ModelParams":
        missing = set(self.store) - set(store)
        if missing:
            raise ModelError(f"Store lacks parameters: {sorted(missing)[:3]}")
        return ModelParams(store, self.gnn1.bind(store), self.gnn2.bind(store),
                           self.tactic_head.bind(store), self.combiner.bind(store))


class GraphCache:
    """Memoizes term graphs under one representation"""

    def __init__(self, config: RepresentationConfig):
        self.config = config
        self._graphs: Dict[SExpr, TermGraph] = {}
        self._lock = threading.Lock()

    def __call__(self, expr: SExpr) -> TermGraph:
        graph = self._graphs.get(expr)
        if graph is None:
            graph = represent(expr, self.config)
            with self._lock:
                self._graphs[expr] = graph
        return graph


GoalInput = Union[SExpr, TermGraph]


class TwoTowerModel:
    """
    Evaluation-mode view of a parameter set: embeddings, tactic logits and
    premise scores. ``statements`` maps database indices to terms for the
    index-based scoring used by the proxy metrics.
    """

    def __init__(
        self,
        params: ModelParams,
        vocab: Vocabulary,
        config: RunConfig,
        statements: Optional[Sequence[SExpr]] = None,
        graphs: Optional[GraphCache] = None
    ):
        self.params = params
        self.vocab = vocab
        self.config = config
        self.statements = list(statements or [])
        self.graphs = graphs or GraphCache(config.representation)
        self._premise_embeddings: Dict[int, np.ndarray] = {}

    @property
    def identity(self) -> str:
        return checkpoint_id(self.params.store)

    def graph(self, item: GoalInput) -> TermGraph:
        return item if isinstance(item, TermGraph) else self.graphs(item)

    def embed_goal(self, goal: GoalInput) -> np.ndarray:
        pooled, _ = embed_graphs([self.graph(goal)], self.vocab, self.params.gnn1)
        return pooled[0]

    def embed_premise(self, premise: GoalInput) -> np.ndarray:
        pooled, _ = embed_graphs([self.graph(premise)], self.vocab, self.params.gnn2)
        return pooled[0]

    def premise_embedding(self, index: int) -> np.ndarray:
        if index not in self._premise_embeddings:
            self._premise_embeddings[index] = self.embed_premise(self.statements[index])
        return self._premise_embeddings[index]

    def predict_tactic(self, goal_embedding: np.ndarray) -> np.ndarray:
        logits, _ = mlp_forward(self.params.tactic_head, goal_embedding[None, :])
        return logits[0]

    def score_premise(self, goal_embedding: np.ndarray, premise_embedding: np.ndarray) -> float:
        x = np.concatenate([goal_embedding, premise_embedding, goal_embedding * premise_embedding])
        logits, _ = mlp_forward(self.params.combiner, x[None, :])
        return float(logits[0, 0])

    def score_premises(self, goal_embedding: np.ndarray, premise_embeddings: np.ndarray) -> np.ndarray:
        """
        One logit per row of ``premise_embeddings``. Rows go through the
        combiner one at a time, so a premise scores the same bits whichever
        other premises it is ranked with.
        """
        return np.array([self.score_premise(goal_embedding, p) for p in premise_embeddings],
                        dtype=premise_embeddings.dtype)

    def tactic_logits(self, goal: SExpr) -> np.ndarray:
        return self.predict_tactic(self.embed_goal(goal))

    def premise_scores(self, goal: SExpr, premises: Sequence[int]) -> np.ndarray:
        g = self.embed_goal(goal)
        return self.score_premises(g, np.stack([self.premise_embedding(i) for i in premises]))

    def rank_premises(
        self,
        goal_embedding: np.ndarray,
        cache: "PremiseCache",
        theorem_index: int,
        k: int
    ) -> List[Tuple[int, float]]:
        """
        Top-k eligible premises (database index < theorem_index) by score;
        ties go to the lower index. Fewer than k eligible returns all of them.
        """
        indices, embeddings = cache.eligible(theorem_index)
        if not len(indices):
            return []
        scores = self.score_premises(goal_embedding, embeddings)
        order = np.lexsort((indices, -scores))[:k]
        return [(int(indices[i]), float(scores[i])) for i in order]


def load_model(path, statements: Optional[Sequence[SExpr]] = None, use_shadow: bool = True) -> TwoTowerModel:
    """
    Rebuild a model from a checkpoint; Polyak-averaged parameters by default.

    Raises:
        ModelError: if the checkpoint lacks the model metadata.
    """
    try:
        ckpt = load_checkpoint(path)
    except NumericsError as e:
        raise ModelError(str(e)) from e
    if "run_config" not in ckpt.meta or "vocabulary" not in ckpt.meta:
        raise ModelError(f"{path} is not a model checkpoint")
    config = RunConfig.model_validate(ckpt.meta["run_config"])
    vocab = Vocabulary(tuple(ckpt.meta["vocabulary"]))
    template = ModelParams.create(len(vocab), config, 0, dtype_of(config.train.precision))
    store = ckpt.shadow if use_shadow and ckpt.shadow else ckpt.params
    return TwoTowerModel(template.bind(store), vocab, config, statements)


@dataclass
class TrainingBatch:
    """
    ``goals[:premise_goals]`` own one positive premise each, at
    ``premises[i]``; the following ``negatives_per_goal`` blocks hold their
    owned negatives. Remaining goals only carry a tactic label.
    """

    goals: List[SExpr]
    tactics: np.ndarray
    premise_goals: int
    premises: List[int]
    owner: np.ndarray
    labels: np.ndarray  # (premise_goals, len(premises)) bool

    def pair_counts(self) -> Tuple[int, int, int]:
        """(positive pairs, owned negative pairs, reused negative pairs)"""
        owned = self.owner[None, :] == np.arange(self.premise_goals)[:, None]
        positives = int(self.labels.sum())
        return positives, int(owned.sum()) - positives, int((~owned).sum())


def build_batch(
    examples: Sequence[TrainingExample],
    pool: Sequence[int],
    config: BatchConfig,
    rng: np.random.Generator
) -> TrainingBatch:
    """
    Draw proof steps uniformly until ``config.goals`` of them cite premises;
    each keeps one uniformly chosen premise as its positive and gets
    ``negatives_per_goal`` negatives from the pool, excluding its own
    premises. Every premise is a negative for every non-owning goal.

    Raises:
        ModelError: if no example cites a premise or the pool is too small.
    """
    if not any(e.premises for e in examples):
        raise ModelError("No proof step cites a premise")
    pool = np.asarray(pool)
    with_premises: List[TrainingExample] = []
    tactic_only: List[TrainingExample] = []
    while len(with_premises) < config.goals:
        e = examples[rng.integers(len(examples))]
        (with_premises if e.premises else tactic_only).append(e)

    positives, negatives = [], []
    for e in with_premises:
        positives.append(int(e.premises[rng.integers(len(e.premises))]))
        candidates = pool[~np.isin(pool, e.premises)]
        if len(candidates) < config.negatives_per_goal:
            raise ModelError(f"Negative pool has {len(candidates)} usable premises, "
                             f"need {config.negatives_per_goal}")
        negatives.extend(int(p) for p in rng.choice(candidates, config.negatives_per_goal, replace=False))

    n = config.goals
    owner = np.concatenate([np.arange(n), np.repeat(np.arange(n), config.negatives_per_goal)])
    labels = np.zeros((n, len(owner)), dtype=bool)
    labels[np.arange(n), np.arange(n)] = True
    goals = with_premises + tactic_only
    return TrainingBatch(
        goals=[e.goal for e in goals],
        tactics=np.array([e.tactic_id for e in goals], dtype=np.int64),
        premise_goals=n,
        premises=positives + negatives,
        owner=owner,
        labels=labels
    )


def compute_loss(
    batch: TrainingBatch,
    model: TwoTowerModel,
    training: bool = True,
    rng: Optional[np.random.Generator] = None
) -> Tuple[float, Dict[str, float], Grads]:
    """
    Weighted sum of tactic cross-entropy, pairwise sigmoid cross-entropy and
    the AUCROC ranking loss, with gradients for every parameter.

    Raises:
        ModelError: if the total loss is not finite.
    """
    params, cfg = model.params, model.config
    keep = cfg.head.dropout_keep
    weights = cfg.loss
    n_goals, n_pair_goals = len(batch.goals), batch.premise_goals

    goal_graphs = [model.graph(g) for g in batch.goals]
    premise_graphs = [model.graph(model.statements[i]) for i in batch.premises]
    G, goal_tapes = embed_graphs(goal_graphs, model.vocab, params.gnn1, training, rng)
    P, premise_tapes = embed_graphs(premise_graphs, model.vocab, params.gnn2, training, rng)

    tactic_logits, head_tape = mlp_forward(params.tactic_head, G, keep, training, rng)
    tactic_loss, g_tactic = softmax_xent(tactic_logits, batch.tactics)

    n_prem, width = P.shape
    g_rows = np.repeat(G[:n_pair_goals], n_prem, axis=0)
    p_rows = np.tile(P, (n_pair_goals, 1))
    pair_in = np.concatenate([g_rows, p_rows, g_rows * p_rows], axis=1)
    pair_logits, comb_tape = mlp_forward(params.combiner, pair_in, keep, training, rng)
    pair_logits = pair_logits[:, 0]
    labels = batch.labels.reshape(-1)
    goal_ids = np.repeat(np.arange(n_pair_goals), n_prem)
    pairwise_loss, g_pairwise = sigmoid_xent(pair_logits, labels)
    auc_loss, g_auc = aucroc_loss(pair_logits, labels, goal_ids,
                                  weights.same_goal_factor, weights.aucroc_reduction)

    total = weights.tactic * tactic_loss + weights.pairwise * pairwise_loss + weights.aucroc * auc_loss
    if not np.isfinite(total):
        raise ModelError(f"Non-finite loss {total}")

    grads: Grads = {}
    _, g_goal = backward(head_tape, weights.tactic * g_tactic, grads)
    g_pair = (weights.pairwise * g_pairwise + weights.aucroc * g_auc)[:, None].astype(pair_in.dtype)
    _, g_in = backward(comb_tape, g_pair, grads)
    g_a, g_b, g_c = g_in[:, :width], g_in[:, width:2 * width], g_in[:, 2 * width:]
    g_goal_rows = g_a + g_c * p_rows
    g_prem_rows = g_b + g_c * g_rows
    g_goal = g_goal.copy()
    g_goal[:n_pair_goals] += g_goal_rows.reshape(n_pair_goals, n_prem, width).sum(axis=1)
    g_prem = g_prem_rows.reshape(n_pair_goals, n_prem, width).sum(axis=0)

    embed_graphs_backward(goal_tapes, g_goal, grads)
    embed_graphs_backward(premise_tapes, g_prem, grads)

    components = {"tactic": tactic_loss, "pairwise": pairwise_loss, "aucroc": auc_loss}
    return float(total), components, grads


CACHE_VERSION = 1


@dataclass
class PremiseCache:
    """Precomputed premise-tower embeddings, tied to one parameter set"""

    indices: np.ndarray
    embeddings: np.ndarray
    checkpoint_id: str

    @classmethod
    def build(cls, model: TwoTowerModel, indices: Optional[Sequence[int]] = None, workers: int = 1) -> "PremiseCache":
        indices = list(range(len(model.statements))) if indices is None else sorted(indices)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(lambda i: model.embed_premise(model.statements[i]), indices))
        else:
            rows = [model.embed_premise(model.statements[i]) for i in indices]
        width = model.config.gnn.embedding_size
        embeddings = np.stack(rows) if rows else np.zeros((0, width))
        return cls(np.array(indices, dtype=np.int64), embeddings, model.identity)

    def eligible(self, theorem_index: int) -> Tuple[np.ndarray, np.ndarray]:
        """Entries with database index below ``theorem_index``"""
        cut = int(np.searchsorted(self.indices, theorem_index))
        return self.indices[:cut], self.embeddings[:cut]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            np.savez(f, indices=self.indices, embeddings=self.embeddings,
                     checkpoint_id=np.array(self.checkpoint_id), version=np.array(CACHE_VERSION))
        tmp.replace(path)

    @classmethod
    def load(cls, path, expected_id: str) -> "PremiseCache":
        """
        Raises:
            ModelError: for an unknown version or a cache built from other parameters.
        """
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            cached_id = str(data["checkpoint_id"])
            indices, embeddings = data["indices"], data["embeddings"]
        if version != CACHE_VERSION:
            raise ModelError(f"Unsupported premise cache version {version}")
        if cached_id != expected_id:
            run_logger.log_event(
                action="Rejected stale premise cache",
                component="model",
                details={"path": str(path), "cached": cached_id[:12], "expected": expected_id[:12]},
                success=False,
                error_message="checkpoint id mismatch"
            )
            raise ModelError(f"Premise cache {path} was built for another checkpoint")
        return cls(indices, embeddings, cached_id)
