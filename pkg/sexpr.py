"""
S-expression reader and writer for HOL terms.

Terms arrive as parenthesized, whitespace-separated tokens, e.g.
``(a (v (fun A B) f) (v A x))``. Parsing is iterative so that nesting depth
is bounded by ``max_depth`` rather than by the interpreter's recursion limit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, List, Tuple, Union

DEFAULT_MAX_DEPTH = 10_000

# Tokens are parentheses or maximal runs of anything else sans whitespace.
_TOKEN_RE = re.compile(rb"[()]|[^\s()]+")
_FORBIDDEN = re.compile(r"[\s()]")


class SExprError(ValueError):
    """Malformed S-expression; ``offset`` is the UTF-8 byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Atom:
    token: str

    def __post_init__(self):
        if not self.token or _FORBIDDEN.search(self.token):
            raise ValueError(f"Invalid atom token: {self.token!r}")


@dataclass(frozen=True)
class Node:
    children: Tuple["SExpr", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("Node must have at least one child")

    @property
    def head(self) -> "SExpr":
        return self.children[0]

    @property
    def args(self) -> Tuple["SExpr", ...]:
        return self.children[1:]


SExpr = Union[Atom, Node]


def node(*children: Union[SExpr, str]) -> Node:
    """Build a Node, turning bare strings into atoms."""
    return Node(tuple(Atom(c) if isinstance(c, str) else c for c in children))


def tokenize(text: str) -> Iterator[Tuple[str, int]]:
    """Yield ``(token, byte_offset)`` pairs."""
    data = text.encode("utf-8")
    for match in _TOKEN_RE.finditer(data):
        yield match.group().decode("utf-8"), match.start()


def parse(text: str, max_depth: int = DEFAULT_MAX_DEPTH) -> SExpr:
    """
    Parse a single S-expression or bare atom.

    Raises:
        SExprError: on empty input, unbalanced parentheses, ``()``,
            trailing tokens after the top-level expression, or nesting
            deeper than ``max_depth``.
    """
    stack: List[Tuple[int, List[SExpr]]] = []
    result = None
    end_offset = 0

    for token, offset in tokenize(text):
        if result is not None:
            raise SExprError(f"Trailing input {token!r} after expression", offset)
        if token == "(":
            if len(stack) >= max_depth:
                raise SExprError(f"Nesting deeper than {max_depth}", offset)
            stack.append((offset, []))
        elif token == ")":
            if not stack:
                raise SExprError("Unexpected ')'", offset)
            open_offset, children = stack.pop()
            if not children:
                raise SExprError("Empty list '()'", open_offset)
            done = Node(tuple(children))
            if stack:
                stack[-1][1].append(done)
            else:
                result = done
        else:
            atom = Atom(token)
            if stack:
                stack[-1][1].append(atom)
            else:
                result = atom
        end_offset = offset

    if stack:
        raise SExprError("Unclosed '('", stack[-1][0])
    if result is None:
        raise SExprError("Empty input", end_offset)
    return result


def serialize(expr: SExpr) -> str:
    """Canonical single-space form; ``parse(serialize(e)) == e``."""
    parts: List[str] = []
    # Work items are expressions or the literal ")" marker.
    work: List[Union[SExpr, str]] = [expr]
    while work:
        item = work.pop()
        if isinstance(item, str):
            parts.append(item)
        elif isinstance(item, Atom):
            parts.append(item.token)
        else:
            parts.append("(")
            work.append(")")
            work.extend(reversed(item.children))
    # Join with spaces except directly inside parentheses.
    out: List[str] = []
    for i, part in enumerate(parts):
        if i and part != ")" and parts[i - 1] != "(":
            out.append(" ")
        out.append(part)
    return "".join(out)
