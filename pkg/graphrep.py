"""
Graph representations of HOL terms.

The abstract syntax tree of an S-expression becomes a labeled directed graph:
one node per sub-expression (internal nodes carry the head token), edges from
a node to its children labeled with the child index. The transforms below
derive the leaf-shared and subexpression-shared (hash-consed) variants,
blind variable names, add random edges and restrict message direction.

Node ids are always assigned in structural preorder from the root, so two
constructions of isomorphic graphs produce identical token and edge lists.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from schemas import Direction, GraphKind, GraphStats, RepresentationConfig, Sharing
from sexpr import Atom, Node, SExpr, serialize

MAX_ARITY = 2
RANDOM_EDGE_LABEL = 2
RANDOM_EDGES_PER_NODE = 3
BLIND_TOKEN = "x"
VARIABLE_TOKEN = "v"

Edge = Tuple[int, int, int]


class GraphError(ValueError):
    """Invalid graph or violated transform precondition"""


@dataclass(frozen=True)
class TermGraph:
    """Labeled directed multigraph over node ids ``0..n-1``."""

    tokens: Tuple[str, ...]
    edges: Tuple[Edge, ...]
    root: int
    kind: GraphKind
    direction: Direction = Direction.BOTH

    @property
    def node_count(self) -> int:
        return len(self.tokens)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def structural_edges(self) -> List[Edge]:
        return [e for e in self.edges if e[2] != RANDOM_EDGE_LABEL]

    @property
    def has_random_edges(self) -> bool:
        return any(e[2] == RANDOM_EDGE_LABEL for e in self.edges)

    def children(self) -> List[List[int]]:
        """Structural children of every node, ordered by edge label."""
        labeled: List[Dict[int, int]] = [dict() for _ in self.tokens]
        for src, dst, label in self.structural_edges:
            if label in labeled[src]:
                raise GraphError(f"Node {src} has two children labeled {label}")
            labeled[src][label] = dst
        result = []
        for src, by_label in enumerate(labeled):
            if sorted(by_label) != list(range(len(by_label))):
                raise GraphError(f"Node {src} has non-contiguous child labels {sorted(by_label)}")
            result.append([by_label[i] for i in range(len(by_label))])
        return result


def build_ast(expr: SExpr) -> TermGraph:
    """
    One graph node per S-expression node; edges to children labeled 0, 1.

    Raises:
        GraphError: for a Node whose head is not an atom, with no arguments,
            or with more than two arguments.
    """
    tokens: List[str] = []
    edges: List[Edge] = []
    # (expression, parent id, label)
    work: List[Tuple[SExpr, int, int]] = [(expr, -1, -1)]
    while work:
        item, parent, label = work.pop()
        node_id = len(tokens)
        if parent >= 0:
            edges.append((parent, node_id, label))
        if isinstance(item, Atom):
            tokens.append(item.token)
            continue
        head, args = item.head, item.args
        if not isinstance(head, Atom):
            raise GraphError(f"Node head must be an atom: {serialize(item)}")
        if not args:
            raise GraphError(f"Constructor without arguments: {serialize(item)}")
        if len(args) > MAX_ARITY:
            raise GraphError(f"Node has {len(args)} arguments, at most {MAX_ARITY} allowed: {serialize(item)}")
        tokens.append(head.token)
        for i in reversed(range(len(args))):
            work.append((args[i], node_id, i))
    edges.sort()
    return TermGraph(tuple(tokens), tuple(edges), 0, GraphKind.TREE)


def _postorder(graph: TermGraph, children: List[List[int]]) -> List[int]:
    """Children before parents over the structural DAG reachable from the root."""
    order: List[int] = []
    state = [0] * graph.node_count  # 0 new, 1 on stack, 2 done
    work: List[Tuple[int, bool]] = [(graph.root, False)]
    while work:
        v, expanded = work.pop()
        if expanded:
            state[v] = 2
            order.append(v)
            continue
        if state[v] == 2:
            continue
        if state[v] == 1:
            raise GraphError("Cycle in structural edges")
        state[v] = 1
        work.append((v, True))
        for c in reversed(children[v]):
            if state[c] == 1:
                raise GraphError("Cycle in structural edges")
            if state[c] == 0:
                work.append((c, False))
    return order


def _quotient(graph: TermGraph, rep: Sequence[int], kind: GraphKind) -> TermGraph:
    """Merge every node into its representative and renumber in preorder."""
    children = graph.children()
    new_id: Dict[int, int] = {}
    tokens: List[str] = []
    work = [rep[graph.root]]
    while work:
        v = work.pop()
        if v in new_id:
            continue
        new_id[v] = len(tokens)
        tokens.append(graph.tokens[v])
        for c in reversed(children[v]):
            if rep[c] not in new_id:
                work.append(rep[c])
    edges = []
    for v, nid in new_id.items():
        for label, c in enumerate(children[v]):
            edges.append((nid, new_id[rep[c]], label))
    edges.sort()
    return TermGraph(tuple(tokens), tuple(edges), 0, kind, graph.direction)


def _require_structural(graph: TermGraph, transform: str):
    if graph.has_random_edges:
        raise GraphError(f"{transform} must run before random edges are added")


def share_subexpressions(graph: TermGraph) -> TermGraph:
    """Hash-cons the graph: merge nodes with equal (token, ordered children)."""
    _require_structural(graph, "share_subexpressions")
    children = graph.children()
    rep = list(range(graph.node_count))
    table: Dict[Tuple[str, Tuple[int, ...]], int] = {}
    for v in _postorder(graph, children):
        key = (graph.tokens[v], tuple(rep[c] for c in children[v]))
        rep[v] = table.setdefault(key, v)
    return _quotient(graph, rep, GraphKind.SUBEXPR_SHARED)


def share_leaves(graph: TermGraph) -> TermGraph:
    """Merge childless nodes with identical tokens; internal nodes untouched."""
    _require_structural(graph, "share_leaves")
    if graph.kind == GraphKind.SUBEXPR_SHARED:
        raise GraphError("share_leaves expects a tree or leaf-shared graph")
    children = graph.children()
    rep = list(range(graph.node_count))
    first: Dict[str, int] = {}
    for v in range(graph.node_count):
        if not children[v]:
            rep[v] = first.setdefault(graph.tokens[v], v)
    return _quotient(graph, rep, GraphKind.LEAF_SHARED)


def blind_variables(graph: TermGraph) -> TermGraph:
    """
    Rename the name child (label 1) of every ``v`` node to ``x``; structure
    unchanged. After sharing, a name node that is also reached as a constant
    name or a type keeps its token.
    """
    variable_names, other_uses = set(), set()
    for src, dst, label in graph.structural_edges:
        if label == 1 and graph.tokens[src] == VARIABLE_TOKEN:
            variable_names.add(dst)
        else:
            other_uses.add(dst)
    tokens = list(graph.tokens)
    for v in variable_names - other_uses:
        tokens[v] = BLIND_TOKEN
    return replace(graph, tokens=tuple(tokens))


def add_random_edges(graph: TermGraph, seed: int) -> TermGraph:
    """Add exactly 3 outgoing label-2 edges per node, targets uniform with replacement."""
    rng = np.random.default_rng(seed)
    n = graph.node_count
    targets = rng.integers(0, n, size=(n, RANDOM_EDGES_PER_NODE))
    extra = [(src, int(dst), RANDOM_EDGE_LABEL) for src in range(n) for dst in targets[src]]
    return replace(graph, edges=graph.edges + tuple(extra))


def restrict_direction(graph: TermGraph, direction: Direction) -> TermGraph:
    """Flag the graph so the encoder delivers only the selected message flow."""
    if direction == Direction.BOTH:
        return replace(graph, direction=direction)
    if graph.kind != GraphKind.SUBEXPR_SHARED:
        raise GraphError("Direction restriction requires a subexpression-shared graph")
    _postorder(graph, graph.children())  # asserts acyclicity
    return replace(graph, direction=direction)


def expand(graph: TermGraph) -> TermGraph:
    """Duplicate shared nodes back into a tree (structural edges only)."""
    children = graph.children()
    tokens: List[str] = []
    edges: List[Edge] = []
    work: List[Tuple[int, int, int]] = [(graph.root, -1, -1)]
    while work:
        v, parent, label = work.pop()
        nid = len(tokens)
        tokens.append(graph.tokens[v])
        if parent >= 0:
            edges.append((parent, nid, label))
        for i in reversed(range(len(children[v]))):
            work.append((children[v][i], nid, i))
    edges.sort()
    return TermGraph(tuple(tokens), tuple(edges), 0, GraphKind.TREE)


def unparse(graph: TermGraph) -> SExpr:
    """
    Inverse of build_ast.

    Raises:
        GraphError: if the graph is not a tree, or child labels are missing
            or duplicated.
    """
    if graph.kind != GraphKind.TREE:
        raise GraphError("unparse expects a tree; expand() shared graphs first")
    children = graph.children()
    built: Dict[int, SExpr] = {}
    for v in _postorder(graph, children):
        if children[v]:
            built[v] = Node((Atom(graph.tokens[v]),) + tuple(built[c] for c in children[v]))
        else:
            built[v] = Atom(graph.tokens[v])
    return built[graph.root]


def stats(graph: TermGraph) -> GraphStats:
    """
    Node count, edge count and depth (longest structural path from the root).

    Raises:
        GraphError: if the structural edges contain a cycle.
    """
    children = graph.children()
    indegree = [0] * graph.node_count
    for _, dst, _ in graph.structural_edges:
        indegree[dst] += 1
    if indegree[graph.root]:
        raise GraphError("Root has incoming structural edges")
    depth = [0] * graph.node_count
    ready = [v for v in range(graph.node_count) if indegree[v] == 0]
    seen = 0
    while ready:
        v = ready.pop()
        seen += 1
        for c in children[v]:
            depth[c] = max(depth[c], depth[v] + 1)
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
    if seen != graph.node_count:
        raise GraphError("Cycle in structural edges")
    return GraphStats(
        node_count=graph.node_count,
        edge_count=graph.edge_count,
        depth=max(depth) if depth else 0
    )


def term_seed(base_seed: int, expr: SExpr) -> int:
    """Stable per-term seed for random edges."""
    digest = hashlib.blake2b(serialize(expr).encode("utf-8"), digest_size=8,
                             key=int(base_seed).to_bytes(8, "little"))
    return int.from_bytes(digest.digest(), "little")


def represent(expr: SExpr, config: Optional[RepresentationConfig] = None) -> TermGraph:
    """Build the graph of ``expr`` under a representation configuration."""
    config = config or RepresentationConfig()
    graph = build_ast(expr)
    if config.sharing == Sharing.LEAF:
        graph = share_leaves(graph)
    elif config.sharing == Sharing.SUBEXPRESSION:
        graph = share_subexpressions(graph)
    if config.variable_blinding:
        graph = blind_variables(graph)
    graph = restrict_direction(graph, config.direction)
    if config.random_edges:
        graph = add_random_edges(graph, term_seed(config.random_seed, expr))
    return graph


def to_text(graph: TermGraph) -> str:
    """Line-oriented interchange format."""
    lines = [
        f"nodes {graph.node_count} edges {graph.edge_count} root {graph.root} "
        f"kind {graph.kind.value} direction {graph.direction.value}"
    ]
    lines.extend(f"node {i} {token}" for i, token in enumerate(graph.tokens))
    lines.extend(f"edge {src} {dst} {label}" for src, dst, label in graph.edges)
    return "\n".join(lines) + "\n"
