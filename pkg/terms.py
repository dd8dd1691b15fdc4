"""
HOL terms over the S-expression grammar: ``(a f x)`` application,
``(v ty name)`` variable, ``(c ty name)`` constant, ``(l var body)``
abstraction, ``(fun a b)`` function type.

Provides the constructors and destructors the toy corpus and the tactic
engine need, plus first-order matching and rewriting with equations.
Quantifiers are ordinary constants: ``!x. P`` is ``(a (c ty !) (l (v A x) P))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple

from sexpr import Atom, Node, SExpr, node

BOOL = Atom("bool")
NUM = Atom("num")

APP, VAR, CONST, ABS = "a", "v", "c", "l"


def fun_type(domain: SExpr, codomain: SExpr) -> Node:
    return node("fun", domain, codomain)


def mk_var(name: str, ty: SExpr = NUM) -> Node:
    return node(VAR, ty, name)


def mk_const(name: str, ty: SExpr) -> Node:
    return node(CONST, ty, name)


def mk_comb(f: SExpr, x: SExpr) -> Node:
    return node(APP, f, x)


def mk_abs(var: Node, body: SExpr) -> Node:
    return node(ABS, var, body)


def is_kind(term: SExpr, head: str) -> bool:
    return isinstance(term, Node) and term.head == Atom(head)


def is_var(term: SExpr) -> bool:
    return is_kind(term, VAR) and len(term.args) == 2


def const_name(term: SExpr) -> Optional[str]:
    if is_kind(term, CONST) and len(term.args) == 2 and isinstance(term.args[1], Atom):
        return term.args[1].token
    return None


def dest_binary(term: SExpr, name: str) -> Optional[Tuple[SExpr, SExpr, SExpr]]:
    """Match ``(a (a (c ty name) l) r)``; returns (ty, l, r)."""
    if not (is_kind(term, APP) and len(term.args) == 2):
        return None
    inner, right = term.args
    if not (is_kind(inner, APP) and len(inner.args) == 2):
        return None
    op, left = inner.args
    if const_name(op) != name:
        return None
    return op.args[0], left, right


def mk_eq(left: SExpr, right: SExpr, ty: SExpr = NUM) -> Node:
    op = mk_const("=", fun_type(ty, fun_type(ty, BOOL)))
    return mk_comb(mk_comb(op, left), right)


def dest_eq(term: SExpr) -> Optional[Tuple[SExpr, SExpr]]:
    parts = dest_binary(term, "=")
    return (parts[1], parts[2]) if parts else None


def mk_conj(p: SExpr, q: SExpr) -> Node:
    op = mk_const("/\\", fun_type(BOOL, fun_type(BOOL, BOOL)))
    return mk_comb(mk_comb(op, p), q)


def dest_conj(term: SExpr) -> Optional[Tuple[SExpr, SExpr]]:
    parts = dest_binary(term, "/\\")
    return (parts[1], parts[2]) if parts else None


def mk_forall(var: Node, body: SExpr) -> Node:
    ty = var.args[0]
    binder = mk_const("!", fun_type(fun_type(ty, BOOL), BOOL))
    return mk_comb(binder, mk_abs(var, body))


def dest_forall(term: SExpr) -> Optional[Tuple[Node, SExpr]]:
    if not (is_kind(term, APP) and len(term.args) == 2):
        return None
    binder, lam = term.args
    if const_name(binder) != "!" or not (is_kind(lam, ABS) and len(lam.args) == 2):
        return None
    var, body = lam.args
    if not is_var(var):
        return None
    return var, body


def strip_forall(term: SExpr) -> Tuple[List[Node], SExpr]:
    bound: List[Node] = []
    parts = dest_forall(term)
    while parts:
        bound.append(parts[0])
        term = parts[1]
        parts = dest_forall(term)
    return bound, term


def conjuncts(term: SExpr) -> List[SExpr]:
    result, work = [], [term]
    while work:
        t = work.pop()
        parts = dest_conj(t)
        if parts:
            work.extend(reversed(parts))
        else:
            result.append(t)
    return result


def term_children(term: SExpr) -> Tuple[int, ...]:
    """Positions (indices into ``children``) that hold sub-terms, never types or binder variables."""
    if is_kind(term, APP) and len(term.args) == 2:
        return (1, 2)
    if is_kind(term, ABS) and len(term.args) == 2:
        return (2,)
    return ()


def iter_subterms(term: SExpr) -> Iterator[SExpr]:
    work = [term]
    while work:
        t = work.pop()
        yield t
        work.extend(t.children[i] for i in reversed(term_children(t)))


def variables(term: SExpr) -> FrozenSet[Node]:
    return frozenset(t for t in iter_subterms(term) if is_var(t))


@dataclass(frozen=True)
class Rule:
    """Left-to-right rewrite rule; ``schematic`` variables match any sub-term."""
    lhs: SExpr
    rhs: SExpr
    schematic: FrozenSet[Node]


def rules_of(statement: SExpr) -> List[Rule]:
    """Equations usable for rewriting: binders stripped, conjunctions split."""
    rules = []
    _, body = strip_forall(statement)
    for conjunct in conjuncts(body):
        _, conjunct = strip_forall(conjunct)
        eq = dest_eq(conjunct)
        if not eq:
            continue
        lhs, rhs = eq
        if is_var(lhs) or lhs == rhs:
            continue
        rules.append(Rule(lhs, rhs, variables(lhs)))
    return rules


def match_term(pattern: SExpr, term: SExpr, schematic: FrozenSet[Node],
               bindings: Optional[Dict[Node, SExpr]] = None) -> Optional[Dict[Node, SExpr]]:
    """First-order match; returns variable bindings or None."""
    bindings = dict(bindings or {})
    work = [(pattern, term)]
    while work:
        p, t = work.pop()
        if p in schematic:
            bound = bindings.get(p)
            if bound is None:
                bindings[p] = t
            elif bound != t:
                return None
            continue
        if isinstance(p, Atom) or isinstance(t, Atom):
            if p != t:
                return None
            continue
        if len(p.children) != len(t.children):
            return None
        work.extend(zip(p.children, t.children))
    return bindings


def instantiate(term: SExpr, bindings: Dict[Node, SExpr]) -> SExpr:
    if term in bindings:
        return bindings[term]
    if isinstance(term, Atom):
        return term
    return Node(tuple(instantiate(c, bindings) for c in term.children))


def rewrite(term: SExpr, rule: Rule) -> Tuple[SExpr, bool]:
    """Rewrite every outermost match of ``rule.lhs`` once; returns (term, matched)."""
    bindings = match_term(rule.lhs, term, rule.schematic)
    if bindings is not None:
        return instantiate(rule.rhs, bindings), True
    positions = term_children(term)
    if not positions:
        return term, False
    children = list(term.children)
    matched = False
    for i in positions:
        children[i], hit = rewrite(children[i], rule)
        matched = matched or hit
    return (Node(tuple(children)), True) if matched else (term, False)
