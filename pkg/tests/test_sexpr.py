"""Reader and writer for S-expressions."""

import pytest

from sexpr import (
    Atom, Node, SExprError, node, parse, serialize, tokenize
)
from conftest import FORALL_REFL


class TestParse:

    def test_canonical_text_round_trips(self):
        assert serialize(parse(FORALL_REFL)) == FORALL_REFL

    def test_whitespace_is_normalized(self):
        assert serialize(parse("( a\t(b  c)\n d )")) == "(a (b c) d)"

    def test_bare_atom(self):
        assert parse("  bool ") == Atom("bool")

    def test_structure(self):
        expr = parse("(a (v (fun A B) f) (v A x))")
        assert isinstance(expr, Node)
        assert expr.head == Atom("a")
        assert expr.args[1] == node("v", "A", "x")

    def test_random_terms_round_trip(self, random_terms):
        for term in random_terms:
            assert parse(serialize(term)) == term

    def test_deep_nesting_without_recursion(self):
        depth = 5000
        text = "(f " * depth + "x" + ")" * depth
        expr = parse(text)
        assert serialize(expr) == text
        levels, item = 0, expr
        while isinstance(item, Node):
            item, levels = item.args[0], levels + 1
        assert (levels, item) == (depth, Atom("x"))


class TestParseErrors:

    @pytest.mark.parametrize("text, offset, message", [
        ("(a b", 0, "Unclosed"),
        (")", 0, "Unexpected"),
        ("(a ())", 3, "Empty list"),
        ("a b", 2, "Trailing"),
        ("(a) (b)", 4, "Trailing"),
        ("", 0, "Empty input"),
    ])
    def test_offsets(self, text, offset, message):
        with pytest.raises(SExprError) as info:
            parse(text)
        assert info.value.offset == offset
        assert message in str(info.value)

    def test_offsets_count_utf8_bytes(self):
        with pytest.raises(SExprError) as info:
            parse("é )")
        assert info.value.offset == 3

    def test_max_depth(self):
        with pytest.raises(SExprError, match="Nesting deeper than 3"):
            parse("(a (b (c (d e))))", max_depth=3)
        assert parse("(a (b (c d)))", max_depth=3)


class TestHelpers:

    def test_tokenize_offsets(self):
        assert list(tokenize("(a bc)")) == [("(", 0), ("a", 1), ("bc", 3), (")", 5)]

    def test_atom_rejects_delimiters(self):
        with pytest.raises(ValueError):
            Atom("a b")
        with pytest.raises(ValueError):
            Node(())
