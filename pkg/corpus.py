"""
Theorem database and proof log ingestion, training-example extraction,
proxy metrics, and a synthetic toy corpus generator.

File formats (UTF-8, one record per line, ``#`` comments and blank lines
ignored):

    def <index> <split> <name> <sexpr>
    thm <index> <split> <name> <sexpr>
    step <thm-index> <tactic-id> <p1,p2,...|NONE> <goal-sexpr>
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

import numpy as np

from engine import CONJ_TAC, GEN_TAC, REFL_TAC, REWRITE_TAC, TACTIC_NAMES, Failed, Subgoals, ToyTacticEngine, replay_proof
from sexpr import SExpr, SExprError, parse, serialize
from terms import (
    NUM, fun_type, instantiate, mk_comb, mk_conj, mk_const, mk_eq, mk_forall, mk_var
)

SPLITS = ("train", "valid", "test")
KINDS = {"def": "definition", "thm": "theorem"}
NO_PREMISES = "NONE"


class CorpusError(ValueError):
    """Malformed corpus file or violated corpus invariant"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class TheoremRecord:
    index: int
    name: str
    statement: SExpr
    kind: str  # "theorem" | "definition"
    split: str  # "train" | "valid" | "test"


@dataclass
class TheoremDb:
    """Ordered theorem database; a premise is eligible iff it precedes the theorem"""

    records: List[TheoremRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> TheoremRecord:
        return self.records[index]

    def __iter__(self):
        return iter(self.records)

    @property
    def statements(self) -> List[SExpr]:
        return [r.statement for r in self.records]

    def theorems(self, splits: Iterable[str] = SPLITS) -> List[TheoremRecord]:
        splits = set(splits)
        return [r for r in self.records if r.kind == "theorem" and r.split in splits]

    def append(self, name: str, statement: SExpr, kind: str, split: str) -> TheoremRecord:
        record = TheoremRecord(len(self.records), name, statement, kind, split)
        self.records.append(record)
        return record


@dataclass(frozen=True)
class ProofStep:
    theorem: int
    tactic: int
    premises: Tuple[int, ...]
    goal: SExpr


@dataclass
class ProofLog:
    steps: List[ProofStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def for_theorem(self, index: int) -> List[ProofStep]:
        return [s for s in self.steps if s.theorem == index]


@dataclass(frozen=True)
class TrainingExample:
    goal: SExpr
    tactic_id: int
    premises: Tuple[int, ...]
    theorem_index: int


@dataclass
class Corpus:
    db: TheoremDb
    log: ProofLog

    def validate(self):
        """
        Raises:
            CorpusError: if a step cites a missing theorem or a definition.
        """
        for step in self.log.steps:
            if step.theorem >= len(self.db):
                raise CorpusError(f"Proof step for unknown theorem {step.theorem}")
            if self.db[step.theorem].kind != "theorem":
                raise CorpusError(f"Proof step for definition {step.theorem}")
        return self


def _parse_sexpr(text: str, line: int) -> SExpr:
    try:
        return parse(text)
    except SExprError as e:
        raise CorpusError(str(e), line) from e


def _records(path) -> Iterable[Tuple[int, List[str]]]:
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            yield number, text.split(maxsplit=4)


def load_theorem_db(path) -> TheoremDb:
    """
    Raises:
        CorpusError: with the line number on any malformed record.
    """
    db = TheoremDb()
    for line, parts in _records(path):
        if len(parts) != 5 or parts[0] not in KINDS:
            raise CorpusError("expected '<def|thm> <index> <split> <name> <sexpr>'", line)
        keyword, index, split, name, sexpr_text = parts
        if not index.isdigit() or int(index) != len(db):
            raise CorpusError(f"index {index} out of order, expected {len(db)}", line)
        if split not in SPLITS:
            raise CorpusError(f"unknown split {split!r}", line)
        db.append(name, _parse_sexpr(sexpr_text, line), KINDS[keyword], split)
    return db


def load_proof_log(path, n_tactics: int = len(TACTIC_NAMES)) -> ProofLog:
    """
    Raises:
        CorpusError: with the line number on a malformed record, an unknown
            tactic id, or a premise that does not precede its theorem.
    """
    log = ProofLog()
    for line, parts in _records(path):
        if len(parts) != 5 or parts[0] != "step":
            raise CorpusError("expected 'step <thm> <tactic> <premises|NONE> <goal>'", line)
        _, theorem, tactic, premise_text, goal_text = parts
        try:
            theorem_index, tactic_id = int(theorem), int(tactic)
            premises = () if premise_text == NO_PREMISES else tuple(int(p) for p in premise_text.split(","))
        except ValueError as e:
            raise CorpusError(f"bad integer field: {e}", line) from e
        if theorem_index < 0:
            raise CorpusError(f"negative theorem index {theorem_index}", line)
        if not 0 <= tactic_id < n_tactics:
            raise CorpusError(f"unknown tactic id {tactic_id}", line)
        for p in premises:
            if not 0 <= p < theorem_index:
                raise CorpusError(f"premise {p} does not precede theorem {theorem_index}", line)
        log.steps.append(ProofStep(theorem_index, tactic_id, premises, _parse_sexpr(goal_text, line)))
    return log


def load_corpus(db_path, log_path, n_tactics: int = len(TACTIC_NAMES)) -> Corpus:
    return Corpus(load_theorem_db(db_path), load_proof_log(log_path, n_tactics)).validate()


def write_text_atomic(path, text: str):
    """Write via a temporary sibling so a failed run leaves no partial file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def theorem_db_text(db: TheoremDb) -> str:
    keyword = {v: k for k, v in KINDS.items()}
    return "".join(
        f"{keyword[r.kind]} {r.index} {r.split} {r.name} {serialize(r.statement)}\n" for r in db
    )


def proof_log_text(log: ProofLog) -> str:
    lines = []
    for s in log.steps:
        premises = ",".join(str(p) for p in s.premises) or NO_PREMISES
        lines.append(f"step {s.theorem} {s.tactic} {premises} {serialize(s.goal)}\n")
    return "".join(lines)


def save_theorem_db(db: TheoremDb, path):
    write_text_atomic(path, theorem_db_text(db))


def save_proof_log(log: ProofLog, path):
    write_text_atomic(path, proof_log_text(log))


def extract_examples(
    corpus: Corpus,
    splits: Iterable[str] = ("train",),
    theorems: Optional[Set[int]] = None
) -> List[TrainingExample]:
    """One example per proof step of the selected theorems."""
    splits = set(splits)
    examples = []
    for s in corpus.log.steps:
        if corpus.db[s.theorem].split not in splits:
            continue
        if theorems is not None and s.theorem not in theorems:
            continue
        examples.append(TrainingExample(s.goal, s.tactic, s.premises, s.theorem))
    return examples


def negative_pool(examples: Iterable[TrainingExample]) -> Tuple[int, ...]:
    """Every premise used at least once as a positive example"""
    return tuple(sorted({p for e in examples for p in e.premises}))


def selection_split(theorem_indices: Sequence[int], every: int = 20) -> Tuple[List[int], List[int]]:
    """Hold out every ``every``-th training theorem for checkpoint selection."""
    kept, held_out = [], []
    for position, index in enumerate(sorted(theorem_indices)):
        (held_out if position % every == every - 1 else kept).append(index)
    return kept, held_out


class TacticScorer(Protocol):
    def tactic_logits(self, goal: SExpr) -> np.ndarray: ...


class PremiseScorer(Protocol):
    def premise_scores(self, goal: SExpr, premises: Sequence[int]) -> np.ndarray: ...


def tactic_accuracy(model: TacticScorer, examples: Sequence[TrainingExample]) -> float:
    """Fraction of examples whose argmax tactic is the logged tactic"""
    if not examples:
        raise CorpusError("tactic_accuracy needs at least one example")
    hits = sum(int(np.argmax(model.tactic_logits(e.goal)) == e.tactic_id) for e in examples)
    return hits / len(examples)


def relative_premise_accuracy(
    model: PremiseScorer,
    examples: Sequence[TrainingExample],
    rng: np.random.Generator
) -> float:
    """
    Fraction of (true premise, random eligible premise) pairs in which the
    true premise scores strictly higher. The random premise is uniform over
    the premises preceding the theorem that are not true premises of the step.
    Examples without premises are skipped; 0.0 if no pair can be formed.
    """
    if not examples:
        raise CorpusError("relative_premise_accuracy needs at least one example")
    wins = total = 0
    for e in examples:
        if not e.premises:
            continue
        true = set(e.premises)
        candidates = np.array([i for i in range(e.theorem_index) if i not in true])
        if not candidates.size:
            continue
        for p in e.premises:
            r = int(rng.choice(candidates))
            scores = model.premise_scores(e.goal, [p, r])
            wins += int(scores[0] > scores[1])
            total += 1
    return wins / total if total else 0.0


# Toy corpus: equational theorems over a small first-order signature.

_CONSTANTS = ("c0", "c1", "c2", "c3", "c4")
_UNARY = ("f", "g", "h", "k")
_BINARY = ("p", "q")
_DEF_VARS = ("x", "y")
_GOAL_VAR = "z"

# Generator-side term shapes: a leaf name, ("un", fn, arg) or ("bin", fn, left, right)


def _to_term(shape, leaves: Dict[str, SExpr]) -> SExpr:
    if isinstance(shape, str):
        return leaves[shape]
    if shape[0] == "un":
        return mk_comb(mk_const(shape[1], fun_type(NUM, NUM)), _to_term(shape[2], leaves))
    op = mk_const(shape[1], fun_type(NUM, fun_type(NUM, NUM)))
    return mk_comb(mk_comb(op, _to_term(shape[2], leaves)), _to_term(shape[3], leaves))


def _random_shape(rng: np.random.Generator, depth: int, leaves: Sequence[str], stop: float = 0.3):
    if depth == 0 or rng.random() < stop:
        return leaves[rng.integers(len(leaves))]
    if rng.random() < 0.6:
        return ("un", _UNARY[rng.integers(len(_UNARY))], _random_shape(rng, depth - 1, leaves, stop))
    return ("bin", _BINARY[rng.integers(len(_BINARY))],
            _random_shape(rng, depth - 1, leaves, stop), _random_shape(rng, depth - 1, leaves, stop))


def _twin(shape):
    """Same tokens, different nesting: swap binary arguments or a unary pair."""
    if isinstance(shape, str):
        return None
    if shape[0] == "bin":
        if shape[2] != shape[3]:
            return ("bin", shape[1], shape[3], shape[2])
        inner = _twin(shape[2])
        return ("bin", shape[1], inner, inner) if inner else None
    arg = shape[2]
    if not isinstance(arg, str) and arg[0] == "un" and arg[1] != shape[1]:
        return ("un", arg[1], ("un", shape[1], arg[2]))
    inner = _twin(arg)
    return ("un", shape[1], inner) if inner else None


def _leaves(shape) -> Set[str]:
    if isinstance(shape, str):
        return {shape}
    return set().union(*(_leaves(s) for s in shape[2:]))


def _definition(lhs, rhs) -> SExpr:
    leaves = {c: mk_const(c, NUM) for c in _CONSTANTS}
    leaves.update({v: mk_var(v) for v in _DEF_VARS})
    body = mk_eq(_to_term(lhs, leaves), _to_term(rhs, leaves))
    for v in sorted(_leaves(lhs) & set(_DEF_VARS), reverse=True):
        body = mk_forall(mk_var(v), body)
    return body


def _definition_pair(rng: np.random.Generator):
    """Two equations whose left sides are structural twins"""
    while True:
        lhs = _random_shape(rng, 3, _DEF_VARS, stop=0.0)
        twin = _twin(lhs)
        if twin is None or twin == lhs or not (_leaves(lhs) & set(_DEF_VARS)):
            continue
        rhs_leaves = sorted(_leaves(lhs)) + list(_CONSTANTS[:2])
        rhs, rhs_twin = (_random_shape(rng, 2, rhs_leaves) for _ in range(2))
        if rhs in (lhs, twin) or rhs_twin in (lhs, twin):
            continue
        return _definition(lhs, rhs), _definition(twin, rhs_twin)


class _ToyBuilder:
    """Draws theorem statements with proof plans and keeps only those that replay"""

    def __init__(self, rng: np.random.Generator, engine: ToyTacticEngine, db: TheoremDb):
        self.rng = rng
        self.engine = engine
        self.db = db

    def ground(self, depth: int = 1, with_var: bool = False) -> SExpr:
        leaves = {c: mk_const(c, NUM) for c in _CONSTANTS}
        names = list(_CONSTANTS)
        if with_var:
            leaves[_GOAL_VAR] = mk_var(_GOAL_VAR)
            names.append(_GOAL_VAR)
        return _to_term(_random_shape(self.rng, depth, names), leaves)

    def rewrite_premise(self, index: int) -> int:
        """A rule-bearing premise before ``index``; mostly definitions."""
        rule_bearing = [i for i in range(index) if self.engine.rules(i)]
        defs = [i for i in rule_bearing if self.db[i].kind == "definition"]
        pool = defs if defs and self.rng.random() < 0.8 else rule_bearing
        return int(pool[self.rng.integers(len(pool))])

    def instance(self, premise: int, with_var: bool) -> Tuple[SExpr, SExpr]:
        rules = self.engine.rules(premise)
        rule = rules[self.rng.integers(len(rules))]
        sigma = {v: self.ground(1, with_var) for v in sorted(rule.schematic, key=serialize)}
        return instantiate(rule.lhs, sigma), instantiate(rule.rhs, sigma)

    def context(self, with_var: bool) -> Callable[[SExpr], SExpr]:
        """A one-hole term context, applied identically to both sides of a goal."""
        choice = self.rng.integers(4)
        if choice == 0:
            return lambda hole: hole
        if choice == 1:
            fn = _UNARY[self.rng.integers(len(_UNARY))]
            return lambda hole: _to_term(("un", fn, "_"), {"_": hole})
        other = self.ground(1, with_var)
        op = ("bin", _BINARY[self.rng.integers(len(_BINARY))], "_", "o")
        if choice == 2:
            return lambda hole: _to_term(op, {"_": hole, "o": other})
        return lambda hole: _to_term(op, {"_": other, "o": hole})

    def rewrite_goal(self, index: int, with_var: bool = False) -> Tuple[SExpr, List[Tuple[int, Tuple[int, ...]]]]:
        p = self.rewrite_premise(index)
        lhs, rhs = self.instance(p, with_var)
        wrap = self.context(with_var)
        return mk_eq(wrap(lhs), wrap(rhs)), [(REWRITE_TAC, (p,))]

    def draw(self, index: int) -> Tuple[str, SExpr, List[Tuple[int, Tuple[int, ...]]]]:
        shape = ("rewrite", "two_step", "multi", "conj", "forall", "refl")[
            self.rng.choice(6, p=(0.3, 0.15, 0.15, 0.15, 0.15, 0.1))]
        p1, p2 = self.rewrite_premise(index), self.rewrite_premise(index)
        if shape in ("two_step", "multi") and p1 == p2:
            shape = "rewrite"
        if shape == "rewrite":
            goal, plan = self.rewrite_goal(index)
        elif shape in ("two_step", "multi"):
            l1, r1 = self.instance(p1, False)
            l2, r2 = self.instance(p2, False)
            op = ("bin", _BINARY[self.rng.integers(len(_BINARY))], "a", "b")
            goal = mk_eq(_to_term(op, {"a": l1, "b": l2}), _to_term(op, {"a": r1, "b": r2}))
            plan = [(REWRITE_TAC, (p1,)), (REWRITE_TAC, (p2,))] if shape == "two_step" \
                else [(REWRITE_TAC, (p1, p2))]
        elif shape == "conj":
            a, plan_a = self.rewrite_goal(index)
            b, plan_b = self.rewrite_goal(index)
            goal, plan = mk_conj(a, b), [(CONJ_TAC, ())] + plan_a + plan_b
        elif shape == "forall":
            body, plan = self.rewrite_goal(index, with_var=True)
            goal, plan = mk_forall(mk_var(_GOAL_VAR), body), [(GEN_TAC, ())] + plan
        else:
            t = self.ground(2, with_var=True)
            goal, plan = mk_forall(mk_var(_GOAL_VAR), mk_eq(t, t)), [(REFL_TAC, ())]
        return shape, goal, plan


def run_plan(
    engine: ToyTacticEngine,
    statement: SExpr,
    plan: Sequence[Tuple[int, Tuple[int, ...]]],
    theorem_index: int
) -> Optional[List[Tuple[SExpr, int, Tuple[int, ...]]]]:
    """Apply planned tactics to open goals in FIFO order; the steps if the proof closes, else None."""
    open_goals = [statement]
    steps = []
    for tactic, premises in plan:
        if not open_goals:
            return None
        goal = open_goals.pop(0)
        outcome = engine.apply_tactic(goal, tactic, premises, theorem_index)
        if isinstance(outcome, Failed):
            return None
        steps.append((goal, tactic, premises))
        if isinstance(outcome, Subgoals):
            open_goals.extend(g for g in outcome.goals if g not in open_goals)
    return steps if not open_goals else None


def generate_toy_corpus(seed: int, n_theorems: int, n_tactics: int = len(TACTIC_NAMES)) -> Corpus:
    """
    Deterministic synthetic corpus: ``max(4, n_theorems // 5)`` definitions
    (in structurally twinned pairs) followed by ``n_theorems`` theorems, each
    with a logged proof that replays in the toy engine.

    Raises:
        CorpusError: if ``n_theorems < 20``.
    """
    if n_theorems < 20:
        raise CorpusError(f"n_theorems must be at least 20, got {n_theorems}")
    rng = np.random.default_rng(seed)
    db, log = TheoremDb(), ProofLog()
    engine = ToyTacticEngine([], n_tactics)

    n_defs = max(4, n_theorems // 5)
    n_defs += n_defs % 2
    for _ in range(n_defs // 2):
        for statement in _definition_pair(rng):
            record = db.append(f"def_{len(db)}", statement, "definition", "train")
            engine.statements.append(record.statement)

    builder = _ToyBuilder(rng, engine, db)
    for k in range(n_theorems):
        index = len(db)
        split = {8: "valid", 9: "test"}.get(k % 10, "train")
        steps = None
        for _ in range(50):
            _, goal, plan = builder.draw(index)
            steps = run_plan(engine, goal, plan, index)
            if steps and replay_proof(engine, goal, steps, index):
                break
            steps = None
        if steps is None:
            t = builder.ground(2)
            goal = mk_eq(t, t)
            steps = [(goal, REFL_TAC, ())]
        db.append(f"thm_{index}", goal, "theorem", split)
        engine.statements.append(goal)
        log.steps.extend(ProofStep(index, tactic, tuple(premises), g) for g, tactic, premises in steps)
    return Corpus(db, log).validate()
