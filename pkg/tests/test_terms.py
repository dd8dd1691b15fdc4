from terms import (
    NUM, conjuncts, dest_conj, dest_eq, dest_forall, fun_type, instantiate, match_term, mk_comb,
    mk_conj, mk_const, mk_eq, mk_forall, mk_var, rewrite, rules_of, strip_forall, variables
)
from sexpr import parse, serialize

F = mk_const("f", fun_type(NUM, NUM))
G = mk_const("g", fun_type(NUM, NUM))
C0 = mk_const("c0", NUM)
C1 = mk_const("c1", NUM)
X = mk_var("x")


def f(t):
    return mk_comb(F, t)


def g(t):
    return mk_comb(G, t)


class TestConstructors:

    def test_equation_round_trip(self):
        eq = mk_eq(f(C0), C1)
        assert dest_eq(eq) == (f(C0), C1)
        assert dest_conj(eq) is None

    def test_forall_matches_the_parser_shape(self, forall_refl):
        var, body = dest_forall(forall_refl)
        assert serialize(var) == "(v A x)"
        assert dest_eq(body) == (var, var)

    def test_strip_forall(self):
        y = mk_var("y")
        term = mk_forall(X, mk_forall(y, mk_eq(X, y)))
        bound, body = strip_forall(term)
        assert bound == [X, y]
        assert body == mk_eq(X, y)

    def test_conjuncts_flatten_nested_conjunctions(self):
        a, b, c = mk_eq(C0, C0), mk_eq(C1, C1), mk_eq(C0, C1)
        assert conjuncts(mk_conj(mk_conj(a, b), c)) == [a, b, c]

    def test_variables_skip_types_and_binders(self):
        term = mk_forall(X, mk_eq(f(X), mk_var("y")))
        assert variables(term) == frozenset({X, mk_var("y")})


class TestRules:

    def test_rules_strip_binders_and_split_conjunctions(self):
        statement = mk_forall(X, mk_conj(mk_eq(f(X), g(X)), mk_eq(g(C0), C1)))
        rules = rules_of(statement)
        assert [(r.lhs, r.rhs) for r in rules] == [(f(X), g(X)), (g(C0), C1)]
        assert rules[0].schematic == frozenset({X})
        assert rules[1].schematic == frozenset()

    def test_trivial_and_variable_equations_give_no_rule(self):
        assert rules_of(mk_eq(C0, C0)) == []
        assert rules_of(mk_forall(X, mk_eq(X, C0))) == []

    def test_match_binds_consistently(self):
        pattern = mk_comb(mk_comb(mk_const("p", NUM), X), X)
        same = mk_comb(mk_comb(mk_const("p", NUM), C0), C0)
        different = mk_comb(mk_comb(mk_const("p", NUM), C0), C1)
        assert match_term(pattern, same, frozenset({X})) == {X: C0}
        assert match_term(pattern, different, frozenset({X})) is None

    def test_rewrite_outermost_matches(self):
        rule = rules_of(mk_forall(X, mk_eq(f(X), g(X))))[0]
        term = mk_eq(f(f(C0)), f(C1))
        rewritten, matched = rewrite(term, rule)
        assert matched
        # outermost f(f c0) becomes g(f c0); the inner f is left alone
        assert rewritten == mk_eq(g(f(C0)), g(C1))

    def test_rewrite_without_match(self):
        rule = rules_of(mk_eq(g(C0), C1))[0]
        term = mk_eq(f(C0), C1)
        assert rewrite(term, rule) == (term, False)

    def test_instantiate(self):
        assert instantiate(f(X), {X: C1}) == f(C1)

    def test_parsed_terms_compare_equal_to_built_ones(self):
        assert parse(serialize(mk_eq(f(C0), C1))) == mk_eq(f(C0), C1)
