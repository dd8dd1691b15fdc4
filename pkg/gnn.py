"""
Message-passing graph encoder and max-pooling head.

Node states start as ``h = MLP_V(x_token)``. Every round each edge
``u -> v`` (u parent, v child) sends an s-message into the child,
``MLP_edge([h_u, h_v, h_e])``, and an s-hat-message into the parent,
``MLP_edge_hat([h_v, h_u, h_e])``, where ``h_e = MLP_E(label)``. Each node
averages the two message sets separately (an empty set contributes zeros)
and updates residually:

    h_v <- h_v + MLP_aggr([h_v, mean s, mean s-hat])

TopDown graphs only deliver s-messages, BottomUp graphs only s-hat-messages;
random edges always deliver both. Rounds never share weights.

Graphs are encoded as a disjoint union so that a list of terms runs through
each MLP once per round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from graphrep import BLIND_TOKEN, RANDOM_EDGE_LABEL, TermGraph
from numerics import (
    Grads, MlpParams, MlpTape, ParamStore, accumulate, backward, check_finite, mlp_forward
)
from schemas import Direction, GnnConfig

OOV_TOKEN = "<oov>"


class GnnError(ValueError):
    """Invalid encoder input or parameters"""


@dataclass(frozen=True)
class Vocabulary:
    """Token -> row of the embedding matrix; row 0 is the out-of-vocabulary token."""

    tokens: Tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != OOV_TOKEN:
            raise GnnError(f"Vocabulary must start with {OOV_TOKEN}")
        if len(set(self.tokens)) != len(self.tokens):
            raise GnnError("Vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        rest = sorted((set(tokens) | {BLIND_TOKEN}) - {OOV_TOKEN})
        return cls((OOV_TOKEN,) + tuple(rest))

    @classmethod
    def from_graphs(cls, graphs: Iterable[TermGraph]) -> "Vocabulary":
        return cls.from_tokens(t for g in graphs for t in g.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self.index(t) for t in tokens), dtype=np.int64, count=len(tokens))


@dataclass(frozen=True)
class RoundParams:
    edge: MlpParams
    edge_hat: MlpParams
    aggr: MlpParams


@dataclass(frozen=True)
class GnnParams:
    """One tower: token embeddings, the projection MLPs, per-round MLPs and the pooling layers"""

    store: ParamStore
    embedding: str
    mlp_v: MlpParams
    mlp_e: MlpParams
    rounds: Tuple[RoundParams, ...]
    pool: MlpParams
    config: GnnConfig

    @classmethod
    def create(
        cls,
        store: ParamStore,
        prefix: str,
        vocab_size: int,
        config: GnnConfig,
        rng: np.random.Generator,
        dtype=np.float32
    ) -> "GnnParams":
        c = config
        emb = f"{prefix}/token_embedding"
        store[emb] = (rng.standard_normal((vocab_size, c.token_embedding_size)) * c.token_init_std).astype(dtype)
        node, hidden = c.node_embedding_size, c.mlp_hidden_size

        def mlp(name, n_in, final="identity", sizes=None, scale=1.0):
            return MlpParams.create(store, f"{prefix}/{name}", sizes or (n_in, hidden, node), rng, dtype, final, scale)

        mlp_v = mlp("mlp_v", c.token_embedding_size)
        mlp_e = mlp("mlp_e", 1)
        rounds = tuple(
            RoundParams(
                edge=mlp(f"round{t}/edge", 3 * node),
                edge_hat=mlp(f"round{t}/edge_hat", 3 * node),
                aggr=mlp(f"round{t}/aggr", 3 * node, scale=c.residual_init_scale)
            )
            for t in range(c.hops)
        )
        pool = mlp("pool", node, final="relu", sizes=(node,) + tuple(c.pooling_widths))
        return cls(store, emb, mlp_v, mlp_e, rounds, pool, config)

    def bind(self, store: ParamStore) -> "GnnParams":
        return GnnParams(
            store=store,
            embedding=self.embedding,
            mlp_v=self.mlp_v.bind(store),
            mlp_e=self.mlp_e.bind(store),
            rounds=tuple(RoundParams(r.edge.bind(store), r.edge_hat.bind(store), r.aggr.bind(store))
                         for r in self.rounds),
            pool=self.pool.bind(store),
            config=self.config
        )


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of term graphs; nodes of graph i are rows ``segments[i]:segments[i+1]``."""

    token_ids: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    labels: np.ndarray
    deliver_down: np.ndarray  # s-messages into dst
    deliver_up: np.ndarray    # s-hat-messages into src
    segments: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[TermGraph], vocab: Vocabulary) -> "GraphBatch":
        if not graphs:
            raise GnnError("No graphs to encode")
        ids, src, dst, labels, down, up, segments = [], [], [], [], [], [], [0]
        for g in graphs:
            if not g.node_count:
                raise GnnError("Cannot encode an empty graph")
            offset = segments[-1]
            ids.append(vocab.ids(g.tokens))
            edges = np.array(g.edges, dtype=np.int64).reshape(-1, 3)
            src.append(edges[:, 0] + offset)
            dst.append(edges[:, 1] + offset)
            labels.append(edges[:, 2])
            random = edges[:, 2] == RANDOM_EDGE_LABEL
            down.append(random | (g.direction != Direction.BOTTOM_UP))
            up.append(random | (g.direction != Direction.TOP_DOWN))
            segments.append(offset + g.node_count)
        return cls(
            token_ids=np.concatenate(ids),
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            labels=np.concatenate(labels),
            deliver_down=np.concatenate(down),
            deliver_up=np.concatenate(up),
            segments=np.array(segments, dtype=np.int64)
        )

    @property
    def node_count(self) -> int:
        return int(self.segments[-1])

    @property
    def graph_count(self) -> int:
        return len(self.segments) - 1


@dataclass
class NodeEmbeddings:
    values: np.ndarray  # (n, node_embedding_size)
    segments: np.ndarray
    rounds: int


@dataclass
class _Channel:
    senders: np.ndarray
    receivers: np.ndarray
    edges: np.ndarray
    counts: np.ndarray


@dataclass
class _RoundTape:
    down: MlpTape
    up: MlpTape
    aggr: MlpTape


@dataclass
class EncodeTape:
    batch: GraphBatch
    params: GnnParams
    v_tape: MlpTape
    e_tape: Optional[MlpTape]
    e_inverse: np.ndarray
    down: _Channel
    up: _Channel
    rounds: List[_RoundTape] = field(default_factory=list)


def _channel(senders, receivers, edge_idx, n) -> _Channel:
    counts = np.bincount(receivers, minlength=n)
    return _Channel(senders, receivers, edge_idx, counts)


def _aggregate(messages: np.ndarray, ch: _Channel, n: int) -> np.ndarray:
    total = np.zeros((n, messages.shape[1]), dtype=messages.dtype)
    np.add.at(total, ch.receivers, messages)
    return total / np.maximum(ch.counts, 1)[:, None].astype(messages.dtype)


def encode(
    batch: GraphBatch,
    params: GnnParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[NodeEmbeddings, EncodeTape]:
    """Run ``hops`` message-passing rounds over every graph in the batch."""
    store, keep = params.store, params.config.dropout_keep
    n = batch.node_count
    table = store[params.embedding]
    if batch.token_ids.size and batch.token_ids.max() >= table.shape[0]:
        raise GnnError("Token id outside the embedding table")

    h, v_tape = mlp_forward(params.mlp_v, table[batch.token_ids], keep, training, rng)

    e_tape, inverse = None, np.zeros(0, dtype=np.int64)
    h_e = np.zeros((0, h.shape[1]), dtype=h.dtype)
    if batch.labels.size:
        unique, inverse = np.unique(batch.labels, return_inverse=True)
        # edge labels reach MLP_E undropped
        h_e_unique, e_tape = mlp_forward(params.mlp_e, unique[:, None].astype(h.dtype), 1.0, training, rng)
        h_e = h_e_unique[inverse]

    down_idx = np.flatnonzero(batch.deliver_down)
    up_idx = np.flatnonzero(batch.deliver_up)
    down = _channel(batch.src[down_idx], batch.dst[down_idx], down_idx, n)
    up = _channel(batch.dst[up_idx], batch.src[up_idx], up_idx, n)

    tape = EncodeTape(batch, params, v_tape, e_tape, inverse, down, up)
    for rp in params.rounds:
        msg_down, t_down = mlp_forward(
            rp.edge, np.concatenate([h[down.senders], h[down.receivers], h_e[down.edges]], axis=1),
            keep, training, rng)
        msg_up, t_up = mlp_forward(
            rp.edge_hat, np.concatenate([h[up.senders], h[up.receivers], h_e[up.edges]], axis=1),
            keep, training, rng)
        agg_in = np.concatenate([h, _aggregate(msg_down, down, n), _aggregate(msg_up, up, n)], axis=1)
        update, t_aggr = mlp_forward(rp.aggr, agg_in, keep, training, rng)
        h = h + update
        tape.rounds.append(_RoundTape(t_down, t_up, t_aggr))
    check_finite("node embeddings", h)
    return NodeEmbeddings(h, batch.segments, len(params.rounds)), tape


def encode_backward(tape: EncodeTape, grad_h: np.ndarray, grads: Grads) -> Grads:
    """Accumulate gradients of every encoder parameter, token vectors included."""
    batch, params = tape.batch, tape.params
    n, width = grad_h.shape
    g_he = np.zeros((batch.labels.size, width), dtype=grad_h.dtype)

    for rt in reversed(tape.rounds):
        _, g_in = backward(rt.aggr, grad_h, grads)
        g_prev = grad_h + g_in[:, :width]
        for ch, sub_tape, g_agg in ((tape.down, rt.down, g_in[:, width:2 * width]),
                                    (tape.up, rt.up, g_in[:, 2 * width:])):
            g_msg = (g_agg / np.maximum(ch.counts, 1)[:, None].astype(g_agg.dtype))[ch.receivers]
            _, g_msg_in = backward(sub_tape, g_msg, grads)
            np.add.at(g_prev, ch.senders, g_msg_in[:, :width])
            np.add.at(g_prev, ch.receivers, g_msg_in[:, width:2 * width])
            np.add.at(g_he, ch.edges, g_msg_in[:, 2 * width:])
        grad_h = g_prev

    if tape.e_tape is not None:
        g_unique = np.zeros((tape.e_tape.inputs[0].shape[0], width), dtype=grad_h.dtype)
        np.add.at(g_unique, tape.e_inverse, g_he)
        backward(tape.e_tape, g_unique, grads)

    _, g_x = backward(tape.v_tape, grad_h, grads)
    table = params.store[params.embedding]
    g_table = np.zeros_like(table)
    np.add.at(g_table, batch.token_ids, g_x)
    accumulate(grads, params.embedding, g_table)
    return grads


@dataclass
class PoolTape:
    mlp: MlpTape
    rows: np.ndarray  # (graphs, width) node index holding each maximum
    node_count: int


def pool(
    embeddings: NodeEmbeddings,
    params: GnnParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, PoolTape]:
    """
    Project every node (two 1x1 layers with ReLU) and take the coordinatewise
    max over each graph's nodes. Returns a ``(graphs, width)`` matrix.
    """
    seg = embeddings.segments
    if np.any(np.diff(seg) <= 0):
        raise GnnError("Cannot pool an empty graph")
    z, mlp_tape = mlp_forward(params.pool, embeddings.values, params.config.dropout_keep, training, rng)
    rows = np.stack([seg[i] + np.argmax(z[seg[i]:seg[i + 1]], axis=0) for i in range(len(seg) - 1)])
    pooled = np.take_along_axis(z, rows, axis=0)
    return pooled, PoolTape(mlp_tape, rows, z.shape[0])


def pool_backward(tape: PoolTape, grad_pooled: np.ndarray, grads: Grads) -> np.ndarray:
    """Returns the gradient with respect to the node embeddings."""
    g_z = np.zeros((tape.node_count, grad_pooled.shape[1]), dtype=grad_pooled.dtype)
    cols = np.broadcast_to(np.arange(grad_pooled.shape[1]), tape.rows.shape)
    np.add.at(g_z, (tape.rows, cols), grad_pooled)
    _, g_h = backward(tape.mlp, g_z, grads)
    return g_h


def embed_graphs(
    graphs: Sequence[TermGraph],
    vocab: Vocabulary,
    params: GnnParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, Tuple[EncodeTape, PoolTape]]:
    """encode + pool for a list of graphs; one row per graph."""
    embeddings, enc_tape = encode(GraphBatch.from_graphs(graphs, vocab), params, training, rng)
    pooled, pool_tape = pool(embeddings, params, training, rng)
    return pooled, (enc_tape, pool_tape)


def embed_graphs_backward(tapes: Tuple[EncodeTape, PoolTape], grad_pooled: np.ndarray, grads: Grads) -> Grads:
    enc_tape, pool_tape = tapes
    return encode_backward(enc_tape, pool_backward(pool_tape, grad_pooled, grads), grads)
