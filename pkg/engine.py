"""
Simulated tactic engine.
Stands in for a real HOL Light backend: a small deterministic calculus over
HOL terms in which rewriting with the right premises is what closes goals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from sexpr import SExpr, serialize
from terms import Rule, dest_conj, dest_eq, dest_forall, rewrite, rules_of, strip_forall

# The four active tactics come first; the rest exist so that the tactic
# classifier has the full label space, and always fail here.
TACTIC_NAMES: Tuple[str, ...] = (
    "REFL_TAC", "GEN_TAC", "CONJ_TAC", "REWRITE_TAC",
    "ASM_REWRITE_TAC", "ONCE_REWRITE_TAC", "SIMP_TAC", "ASM_SIMP_TAC",
    "MESON_TAC", "ASM_MESON_TAC", "ARITH_TAC", "REAL_ARITH_TAC",
    "DISCH_TAC", "STRIP_TAC", "EQ_TAC", "X_GEN_TAC",
    "EXISTS_TAC", "MATCH_MP_TAC", "MP_TAC", "INDUCT_TAC",
    "CASES_TAC", "ABS_TAC", "AP_TERM_TAC", "AP_THM_TAC",
    "BINOP_TAC", "MK_COMB_TAC", "SUBST1_TAC", "ANTS_TAC",
    "EXPAND_TAC", "DISJ1_TAC", "DISJ2_TAC", "DISJ_CASES_TAC",
    "CHOOSE_TAC", "CONTR_TAC", "TAUT_TAC", "SET_TAC",
    "CONV_TAC", "ACCEPT_TAC", "LABEL_TAC", "ASSUME_TAC",
    "REPEAT_TAC",
)
assert len(TACTIC_NAMES) == 41

REFL_TAC, GEN_TAC, CONJ_TAC, REWRITE_TAC = range(4)


class EngineError(ValueError):
    """Unknown tactic or ineligible premise"""


@dataclass(frozen=True)
class Failed:
    reason: str


@dataclass(frozen=True)
class Closed:
    pass


@dataclass(frozen=True)
class Subgoals:
    goals: Tuple[SExpr, ...]

    def __post_init__(self):
        if not self.goals:
            raise ValueError("Subgoals must be nonempty; use Closed")


TacticOutcome = Union[Failed, Closed, Subgoals]


def is_reflexive(goal: SExpr) -> bool:
    _, body = strip_forall(goal)
    eq = dest_eq(body)
    return eq is not None and eq[0] == eq[1]


class ToyTacticEngine:
    """Deterministic tactic application against a fixed theorem database"""

    def __init__(self, statements: Sequence[SExpr], n_tactics: int = len(TACTIC_NAMES)):
        """
        Args:
            statements: statement of every database entry, by index
            n_tactics: size of the tactic id space
        """
        self.statements = list(statements)
        self.n_tactics = n_tactics
        self._rules: Dict[int, List[Rule]] = {}

    def rules(self, index: int) -> List[Rule]:
        if index not in self._rules:
            self._rules[index] = rules_of(self.statements[index])
        return self._rules[index]

    def apply_tactic(
        self,
        goal: SExpr,
        tactic_id: int,
        premises: Sequence[int] = (),
        theorem_index: Optional[int] = None
    ) -> TacticOutcome:
        """
        Apply one tactic to one goal.

        Args:
            goal: Goal term
            tactic_id: Tactic in ``0..n_tactics-1``
            premises: Database indices cited as parameters
            theorem_index: Theorem under proof; premises must precede it

        Returns:
            Failed, Closed or Subgoals

        Raises:
            EngineError: for an unknown tactic or an ineligible premise
        """
        if not 0 <= tactic_id < self.n_tactics:
            raise EngineError(f"Unknown tactic id {tactic_id}")
        limit = len(self.statements) if theorem_index is None else theorem_index
        for p in premises:
            if not 0 <= p < limit:
                raise EngineError(f"Premise {p} is not eligible before theorem {limit}")

        if tactic_id == REFL_TAC:
            return Closed() if is_reflexive(goal) else Failed("not an equation t = t")

        if tactic_id == GEN_TAC:
            parts = dest_forall(goal)
            return Subgoals((parts[1],)) if parts else Failed("not universally quantified")

        if tactic_id == CONJ_TAC:
            parts = dest_conj(goal)
            return Subgoals(parts) if parts else Failed("not a conjunction")

        if tactic_id == REWRITE_TAC:
            return self._rewrite(goal, premises)

        return Failed(f"{self.tactic_name(tactic_id)} is not available in the toy calculus")

    def _rewrite(self, goal: SExpr, premises: Iterable[int]) -> TacticOutcome:
        current, matched = goal, False
        for p in premises:
            for rule in self.rules(p):
                current, hit = rewrite(current, rule)
                matched = matched or hit
        if not matched:
            return Failed("no premise matches the goal")
        if current == goal:
            return Failed("rewriting left the goal unchanged")
        if is_reflexive(current):
            return Closed()
        return Subgoals((current,))

    def tactic_name(self, tactic_id: int) -> str:
        return TACTIC_NAMES[tactic_id] if tactic_id < len(TACTIC_NAMES) else f"TACTIC_{tactic_id}"


def replay_proof(
    engine: ToyTacticEngine,
    statement: SExpr,
    steps: Iterable[Tuple[SExpr, int, Sequence[int]]],
    theorem_index: int
) -> bool:
    """
    Proof checker. Each step proves its goal once its subgoals are proved;
    the closing step of a goal is its first step in ``steps``. A goal that
    occurs twice needs one proof. Circular justifications are rejected.
    """
    by_goal: Dict[SExpr, Tuple[int, Sequence[int]]] = {}
    for goal, tactic, premises in steps:
        by_goal.setdefault(goal, (tactic, tuple(premises)))

    proved, visiting = set(), set()
    # (goal, None) to visit; (goal, subgoals) once its subgoals were pushed
    work: List[Tuple[SExpr, Optional[Tuple[SExpr, ...]]]] = [(statement, None)]
    while work:
        goal, subgoals = work.pop()
        if subgoals is not None:
            if not all(g in proved for g in subgoals):
                return False
            visiting.discard(goal)
            proved.add(goal)
            continue
        if goal in proved:
            continue
        if goal in visiting or goal not in by_goal:
            return False
        tactic, premises = by_goal[goal]
        try:
            outcome = engine.apply_tactic(goal, tactic, premises, theorem_index)
        except EngineError:
            return False
        if isinstance(outcome, Failed):
            return False
        children = outcome.goals if isinstance(outcome, Subgoals) else ()
        visiting.add(goal)
        work.append((goal, children))
        work.extend((g, None) for g in reversed(children))
    return statement in proved


def describe(goal: SExpr, tactic_id: int, premises: Sequence[int]) -> str:
    names = ",".join(str(p) for p in premises) or "NONE"
    name = TACTIC_NAMES[tactic_id] if tactic_id < len(TACTIC_NAMES) else str(tactic_id)
    return f"{name} [{names}] on {serialize(goal)}"
