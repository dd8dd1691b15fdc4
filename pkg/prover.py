"""
Breadth-first proof search.

Goals are expanded in FIFO order. Each expansion asks a policy for up to k1
(tactic, premises) candidates and applies them all; every successful
application is kept as an alternative branch. A goal is closed when some
application on it has all of its subgoals closed. The same goal reached
twice within one search is a single node.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from corpus import ProofLog, TheoremRecord, write_text_atomic
from engine import Failed, Subgoals, ToyTacticEngine, describe, replay_proof
from graphrep import term_seed
from logger import run_logger
from model import PremiseCache, TwoTowerModel
from schemas import ProofRecord, ProverConfig, ProverReport, ProverSummary
from sexpr import SExpr

OPEN, CLOSED, FAILED = "open", "closed", "failed"

Candidate = Tuple[int, Tuple[int, ...]]


class ProverError(ValueError):
    """A reported proof failed independent replay"""


class Policy(Protocol):
    def propose(self, goal: SExpr, theorem_index: int) -> List[Candidate]: ...


class ModelPolicy:
    """Top-k1 tactics by logit, each with the top-k2 ranked premises"""

    def __init__(self, model: TwoTowerModel, cache: PremiseCache, config: ProverConfig):
        self.model = model
        self.cache = cache
        self.config = config
        self.goal_embeddings = 0
        self._lock = threading.Lock()

    def propose(self, goal: SExpr, theorem_index: int) -> List[Candidate]:
        g = self.model.embed_goal(goal)
        with self._lock:
            self.goal_embeddings += 1
        logits = self.model.predict_tactic(g)
        tactics = np.lexsort((np.arange(len(logits)), -logits))[:self.config.k1]
        ranked = self.model.rank_premises(g, self.cache, theorem_index, self.config.k2)
        premises = tuple(i for i, _ in ranked)
        return [(int(t), premises) for t in tactics]


class RandomPolicy:
    """Uniform baseline: k1 distinct tactics, k2 distinct eligible premises"""

    def __init__(self, n_tactics: int, config: ProverConfig, seed: int = 0):
        self.n_tactics = n_tactics
        self.config = config
        self.seed = seed

    def propose(self, goal: SExpr, theorem_index: int) -> List[Candidate]:
        rng = np.random.default_rng(term_seed(self.seed + theorem_index, goal))
        tactics = rng.choice(self.n_tactics, min(self.config.k1, self.n_tactics), replace=False)
        premises = ()
        if theorem_index > 0:
            chosen = rng.choice(theorem_index, min(self.config.k2, theorem_index), replace=False)
            premises = tuple(int(p) for p in chosen)
        return [(int(t), premises) for t in tactics]


class OraclePolicy:
    """Replays the logged tactic applications of each goal"""

    def __init__(self, log: ProofLog):
        self._steps: Dict[Tuple[int, SExpr], List[Candidate]] = {}
        for s in log.steps:
            self._steps.setdefault((s.theorem, s.goal), []).append((s.tactic, s.premises))

    def propose(self, goal: SExpr, theorem_index: int) -> List[Candidate]:
        return list(self._steps.get((theorem_index, goal), []))


@dataclass(frozen=True)
class TacticApplication:
    tactic: int
    premises: Tuple[int, ...]
    subgoals: Tuple[SExpr, ...]  # empty: closed the goal directly


@dataclass
class GoalNode:
    goal: SExpr
    status: str = OPEN
    expanded: bool = False
    applications: List[TacticApplication] = field(default_factory=list)
    parents: List[Tuple["GoalNode", int]] = field(default_factory=list)
    closing: Optional[int] = None


@dataclass
class ProofSearchState:
    statement: SExpr
    theorem_index: int
    nodes: Dict[SExpr, GoalNode] = field(default_factory=dict)
    queue: Deque[GoalNode] = field(default_factory=deque)
    expansions: int = 0
    attempts: int = 0
    successes: int = 0
    failures: List[Tuple[SExpr, int, Tuple[int, ...], str]] = field(default_factory=list)

    def __post_init__(self):
        self.root = self.node(self.statement)

    @property
    def closed(self) -> bool:
        return self.root.status == CLOSED

    def node(self, goal: SExpr) -> GoalNode:
        existing = self.nodes.get(goal)
        if existing is None:
            existing = self.nodes[goal] = GoalNode(goal)
            self.queue.append(existing)
        return existing

    def first_failure(self) -> Optional[str]:
        if not self.failures:
            return None
        goal, tactic, premises, reason = self.failures[0]
        return f"{describe(goal, tactic, premises)}: {reason}"


def _all_closed(state: ProofSearchState, app: TacticApplication) -> bool:
    return all(state.nodes[g].status == CLOSED for g in app.subgoals)


def _propagate(state: ProofSearchState, node: GoalNode):
    """Close ``node`` if some application is fully closed, then recheck its parents."""
    work = [node]
    while work:
        n = work.pop()
        if n.status == CLOSED:
            continue
        for i, app in enumerate(n.applications):
            if _all_closed(state, app):
                n.status, n.closing = CLOSED, i
                work.extend(parent for parent, _ in n.parents)
                break


def prove(
    statement: SExpr,
    theorem_index: int,
    engine: ToyTacticEngine,
    policy: Policy,
    config: Optional[ProverConfig] = None
) -> ProofSearchState:
    """
    Search until the root closes or a budget (expansions, wall clock) runs
    out. Failed applications only enter the failure log.
    """
    config = config or ProverConfig()
    state = ProofSearchState(statement, theorem_index)
    deadline = time.monotonic() + config.time_budget_s

    while state.queue and not state.closed:
        if state.expansions >= config.max_expansions or time.monotonic() > deadline:
            break
        node = state.queue.popleft()
        if node.status != OPEN or node.expanded:
            continue
        node.expanded = True
        state.expansions += 1

        for tactic, premises in policy.propose(node.goal, theorem_index):
            state.attempts += 1
            outcome = engine.apply_tactic(node.goal, tactic, premises, theorem_index)
            if isinstance(outcome, Failed):
                state.failures.append((node.goal, tactic, tuple(premises), outcome.reason))
                continue
            state.successes += 1
            subgoals = outcome.goals if isinstance(outcome, Subgoals) else ()
            node.applications.append(TacticApplication(tactic, tuple(premises), subgoals))
            for g in subgoals:
                state.node(g).parents.append((node, len(node.applications) - 1))
            _propagate(state, node)
            if state.closed:
                break
        if not node.applications:
            node.status = FAILED
    return state


def extract_proof(state: ProofSearchState) -> List[Tuple[SExpr, int, Tuple[int, ...]]]:
    """Closing (goal, tactic, premises) steps, parents before children; each goal once."""
    if not state.closed:
        return []
    steps, seen = [], set()
    work = [state.root]
    while work:
        node = work.pop()
        if node.goal in seen:
            continue
        seen.add(node.goal)
        app = node.applications[node.closing]
        steps.append((node.goal, app.tactic, app.premises))
        work.extend(state.nodes[g] for g in reversed(app.subgoals))
    return steps


def proof_record(record: TheoremRecord, state: ProofSearchState) -> ProofRecord:
    return ProofRecord(
        index=record.index,
        name=record.name,
        closed=state.closed,
        proof_length=len(extract_proof(state)),
        expansions=state.expansions,
        tactic_successes=state.successes,
        tactic_attempts=state.attempts
    )


def summarize(records: Sequence[ProofRecord]) -> ProverSummary:
    closed = [r for r in records if r.closed]
    attempts = sum(r.tactic_attempts for r in records)
    return ProverSummary(
        theorems=len(records),
        closed=len(closed),
        closed_fraction=len(closed) / len(records) if records else 0.0,
        mean_proof_length=float(np.mean([r.proof_length for r in closed])) if closed else 0.0,
        tactic_success_rate=sum(r.tactic_successes for r in records) / attempts if attempts else 0.0
    )


def evaluate_prover(
    theorems: Sequence[TheoremRecord],
    engine: ToyTacticEngine,
    policy: Policy,
    config: Optional[ProverConfig] = None
) -> ProverReport:
    """
    Prove every theorem independently and check every closure by replay.

    Raises:
        ProverError: if a closed proof does not replay.
    """
    config = config or ProverConfig()

    def run_one(record: TheoremRecord) -> ProofRecord:
        state = prove(record.statement, record.index, engine, policy, config)
        if state.closed and not replay_proof(engine, record.statement, extract_proof(state), record.index):
            raise ProverError(f"Proof of {record.name} does not replay")
        details = {"theorem": record.name, "expansions": state.expansions, "failures": len(state.failures)}
        if state.failures:
            details["first_failure"] = state.first_failure()
        run_logger.log_event(
            action="Closed theorem" if state.closed else "Search exhausted",
            component="prover",
            details=details
        )
        return proof_record(record, state)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(run_one, theorems))
    else:
        records = [run_one(r) for r in theorems]
    report = ProverReport(records=records, summary=summarize(records))
    run_logger.log_event(
        action="Evaluated prover",
        component="prover",
        details=report.summary.model_dump()
    )
    return report


def report_text(report: ProverReport) -> str:
    lines = [r.model_dump_json() for r in report.records]
    lines.append(json.dumps({"summary": report.summary.model_dump()}))
    return "\n".join(lines) + "\n"


def write_report(report: ProverReport, path):
    write_text_atomic(path, report_text(report))
