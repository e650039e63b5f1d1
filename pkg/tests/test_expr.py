import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import REFERENCE_SIZES, mp_evaluate, random_inputs, reference_formulas
from seasonal_forecast.expr import (
    PRIMITIVES,
    VARIABLES,
    Apply,
    Constant,
    ExprSyntaxError,
    FunctionSet,
    MutationRates,
    TerminalSet,
    UnknownVariableError,
    Variable,
    complexity,
    crossover,
    depth,
    evaluate,
    evaluate_columns,
    fold_constants,
    iter_nodes,
    load_formulas,
    mutate,
    node_at,
    parse,
    random_tree,
    to_text,
    variables_of,
)

FULL = FunctionSet.standard(gaussian=True)


def arity_ok(tree) -> bool:
    return all(
        not isinstance(n, Apply) or len(n.children) == PRIMITIVES[n.op].arity
        for _, n, _ in iter_nodes(tree)
    )


def trees(draw_seed: int, lo: int = 1, hi: int = 6):
    rng = random.Random(draw_seed)
    return random_tree(FULL, lo, hi, rng)


class TestEvaluate:
    def test_cos_formula(self):
        assert evaluate(parse("MST - cos(MSDMT)"), {"MST": 20.0, "MSDMT": 0.0}) == 19.0

    def test_affine_formula(self):
        assert evaluate(parse("0.51 + 0.96*MST"), {"MST": 10.0}) == pytest.approx(10.11, abs=1e-12)

    def test_frozen_high_precision_value(self):
        # mpmath at 50 digits, computed once and frozen
        f = parse(reference_formulas()[9])
        value = evaluate(f, {"Y": 2005.0, "MYT": 15.0, "S": 2.0})
        assert math.isclose(value, 17.224203540227048, rel_tol=1e-9)

    def test_division_by_zero_is_nonfinite(self):
        for x in (-3.0, 0.0, 7.5):
            assert math.isnan(evaluate(parse("1/(MST - MST)"), {"MST": x}))

    def test_ln_of_nonpositive_is_nonfinite(self):
        assert math.isnan(evaluate(parse("ln(MST)"), {"MST": 0.0}))
        assert math.isnan(evaluate(parse("ln(MST)"), {"MST": -1.0}))

    def test_overflow_is_nonfinite(self):
        assert math.isnan(evaluate(parse("exp(MST)"), {"MST": 1000.0}))

    @pytest.mark.parametrize("text,x", [
        ("1 / exp(MST)", 1000.0),
        ("tanh(ln(MST))", 0.0),
        ("1 / (MST * 1e308)", 10.0),
        ("logistic(exp(MST))", 800.0),
    ])
    def test_infinite_intermediate_is_not_masked(self, text, x):
        t = parse(text)
        assert math.isnan(evaluate(t, {"MST": x}))
        assert np.isnan(evaluate_columns(t, {"MST": np.array([x, 1.0])})[0])

    def test_unknown_variable_raises(self):
        with pytest.raises(UnknownVariableError):
            evaluate(parse("MST + MYT"), {"MST": 1.0})

    def test_min_propagates_nan_in_either_position(self):
        x = {"MST": 0.0}
        assert math.isnan(evaluate(parse("min(ln(MST), 1)"), x))
        assert math.isnan(evaluate(parse("min(1, ln(MST))"), x))

    def test_logistic_and_gauss_definitions(self):
        for z in (-30.0, -1.5, 0.0, 2.0, 40.0):
            x = {"MST": z}
            assert evaluate(parse("logistic(MST)"), x) == pytest.approx(1 / (1 + math.exp(-z)), rel=1e-15)
            assert evaluate(parse("gauss(MST)"), x) == pytest.approx(math.exp(-z * z), rel=1e-15, abs=1e-300)

    @given(st.floats(-50, 50))
    def test_logistic_tanh_identity(self, z):
        x = {"MST": z}
        lhs = evaluate(parse("logistic(MST)"), x)
        rhs = (evaluate(parse("tanh(MST/2)"), x) + 1) / 2
        assert abs(lhs - rhs) <= 1e-12

    @pytest.mark.parametrize("formula", reference_formulas())
    def test_matches_high_precision_oracle(self, formula):
        tree = parse(formula)
        rng = np.random.default_rng(11)
        for _ in range(25):
            x = random_inputs(rng)
            assert math.isclose(evaluate(tree, x), mp_evaluate(formula, x), rel_tol=1e-9, abs_tol=1e-12)

    def test_vector_matches_scalar(self):
        rng = np.random.default_rng(3)
        rows = [random_inputs(rng) for _ in range(40)]
        cols = {v: np.array([r[v] for r in rows]) for v in VARIABLES}
        for seed in range(60):
            t = trees(seed)
            vec = evaluate_columns(t, cols, len(rows))
            sca = np.array([evaluate(t, r) for r in rows])
            np.testing.assert_array_equal(np.isnan(vec), np.isnan(sca))
            # skip rows where a one-ulp nudge of the inputs already changes the value
            nudged = np.array([evaluate(t, {k: v * (1 + 1e-15) for k, v in r.items()}) for r in rows])
            ok = ~np.isnan(sca) & np.isclose(nudged, sca, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(vec[ok], sca[ok], rtol=1e-9, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10**6), st.lists(st.floats(allow_nan=False, allow_infinity=True), min_size=8, max_size=8))
    def test_totality(self, seed, values):
        t = trees(seed)
        result = evaluate(t, dict(zip(VARIABLES, values)))
        assert isinstance(result, float)
        assert math.isfinite(result) or math.isnan(result)


class TestComplexity:
    def test_reference_sizes(self):
        sizes = tuple(complexity(parse(f)) for f in reference_formulas())
        assert sizes == REFERENCE_SIZES

    @pytest.mark.parametrize("text,expected", [
        ("MST", 1),
        ("0.99*MST", 3),
        ("MST - cos(MSDMT)", 6),
        ("0.55 + 0.95*MST - cos(MSDMT)", 10),
        ("MST / 2", 4),
        ("min(MST, 1)", 6),
    ])
    def test_examples(self, text, expected):
        assert complexity(parse(text)) == expected

    def test_cached_matches_recomputed(self):
        for seed in range(50):
            t = trees(seed)
            assert t.complexity == complexity(t)

    def test_custom_weights(self):
        t = parse("MST - cos(MSDMT)")
        assert complexity(t, weights={"cos": 1}) == 4


class TestParsePrint:
    def test_variable(self):
        assert parse("MST") == Variable("MST")

    def test_precedence_and_left_associativity(self):
        assert parse("1 - 2 - 3") == parse("(1 - 2) - 3")
        assert parse("1 + 2*MST") == Apply("add", (Constant(1.0), Apply("mul", (Constant(2.0), Variable("MST")))))
        assert evaluate(parse("8 / 4 / 2"), {}) == 1.0

    def test_prefix_and_aliases(self):
        assert parse("MSTNY = log(MST)") == parse("ln(MST)")
        assert parse("gaussian(S)") == parse("gauss(S)")

    def test_negative_literal_and_negation(self):
        assert parse("-2.5") == Constant(-2.5)
        assert evaluate(parse("-MST"), {"MST": 3.0}) == -3.0

    @pytest.mark.parametrize("text,pos", [("MST +", 5), ("(MST", 4), ("MST $ 2", 4), ("1.2.3", 3)])
    def test_syntax_errors_report_position(self, text, pos):
        with pytest.raises(ExprSyntaxError) as info:
            parse(text)
        assert info.value.position == pos

    def test_unknown_identifier(self):
        with pytest.raises(ExprSyntaxError):
            parse("MST + FOO")
        with pytest.raises(ExprSyntaxError):
            parse("sqrt(MST)")

    def test_wrong_arity(self):
        with pytest.raises(ExprSyntaxError):
            parse("min(MST)")
        with pytest.raises(ExprSyntaxError):
            parse("cos(MST, S)")

    def test_round_trip_reference(self):
        for f in reference_formulas():
            t = parse(f)
            assert parse(to_text(t)) == t

    def test_round_trip_random_trees(self):
        rng = random.Random(2024)
        for _ in range(10_000):
            t = random_tree(FULL, 1, 6, rng)
            assert parse(to_text(t)) == t

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_constant_round_trip(self, c):
        t = Apply("add", (Constant(c), Variable("S")))
        assert parse(to_text(t)) == t

    def test_load_formulas_skips_comments(self):
        text = "# header\nMST\n\n0.99*MST  # scaled\n"
        assert load_formulas(text) == [parse("MST"), parse("0.99*MST")]


class TestStructure:
    def test_depth_and_variables(self):
        t = parse(reference_formulas()[6])
        assert variables_of(t) == ("Y", "S", "MYT")
        assert depth(Variable("MST")) == 1
        assert depth(parse("cos(MST)")) == 2

    def test_node_at_matches_preorder(self):
        for seed in range(30):
            t = trees(seed)
            nodes = list(iter_nodes(t))
            assert len(nodes) == t.size
            for k, expected in enumerate(nodes):
                assert node_at(t, k) == expected

    def test_fold_constants(self):
        t = parse("(2 * 3) + MST")
        assert fold_constants(t) == parse("6 + MST")
        # non-finite results stay unfolded
        t = parse("ln(-1) + MST")
        assert fold_constants(t) == t


class TestVariation:
    def test_leaf_only_at_depth_one(self):
        rng = random.Random(0)
        for _ in range(200):
            assert random_tree(FULL, 1, 1, rng).depth == 1

    @pytest.mark.parametrize("lo,hi", [(1, 3), (2, 6), (4, 4)])
    def test_depth_bounds(self, lo, hi):
        rng = random.Random(lo * 10 + hi)
        for _ in range(300):
            t = random_tree(FULL, lo, hi, rng)
            assert lo <= t.depth <= hi
            assert arity_ok(t)

    def test_empty_function_set_rejected(self):
        with pytest.raises(ValueError):
            FunctionSet(())

    def test_crossover_of_leaves(self):
        a, b = Variable("MST"), Constant(2.0)
        rng = random.Random(5)
        for _ in range(50):
            assert crossover(a, b, rng) in (a, b)

    def test_crossover_returns_parent_when_too_deep(self):
        deep = random_tree(FULL, 6, 6, random.Random(1), method="full")
        other = random_tree(FULL, 6, 6, random.Random(2), method="full")
        child = crossover(deep, other, random.Random(3), depth_max=6)
        assert child.depth <= 6

    def test_determinism(self):
        a, b = trees(1), trees(2)
        out1 = [crossover(a, b, random.Random(9)), mutate(a, FULL, random.Random(9))]
        out2 = [crossover(a, b, random.Random(9)), mutate(a, FULL, random.Random(9))]
        assert out1 == out2

    def test_constant_perturbation_formula(self):
        t = Apply("add", (Constant(2.0), Variable("MST")))
        rates = MutationRates(subtree=0.0, point=0.0, constant=1.0, sigma=0.1)
        rng = random.Random(4)
        child = mutate(t, FULL, rng, rates=rates)
        ref = random.Random(4)
        ref.random()  # operator choice
        ref.randrange(1)  # which constant
        expected = 2.0 * (1 + ref.gauss(0.0, 0.1)) + ref.gauss(0.0, 0.1)
        assert child == Apply("add", (Constant(expected), Variable("MST")))

    def test_multi_scale_perturbation(self):
        t = Apply("add", (Constant(2.0), Variable("MST")))
        rates = MutationRates(subtree=0.0, point=0.0, constant=1.0, sigma=0.1, sigma_decades=3.0)
        child = mutate(t, FULL, random.Random(4), rates=rates)
        ref = random.Random(4)
        ref.random()
        ref.randrange(1)
        sigma = 0.1 * 10.0 ** -ref.uniform(0.0, 3.0)
        expected = 2.0 * (1 + ref.gauss(0.0, sigma)) + ref.gauss(0.0, sigma)
        assert child == Apply("add", (Constant(expected), Variable("MST")))

    def test_point_swap_keeps_arity(self):
        rates = MutationRates(subtree=0.0, point=1.0, constant=0.0)
        rng = random.Random(8)
        t = parse("cos(MST) + S")
        for _ in range(100):
            child = mutate(t, FULL, rng, rates=rates)
            assert child.size == t.size and arity_ok(child) and child != t

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(3, 12))
    def test_variation_respects_invariants(self, s1, s2, depth_max):
        a = trees(s1, 1, min(6, depth_max))
        b = trees(s2, 1, min(6, depth_max))
        rng = random.Random(s1 ^ s2)
        for child in (crossover(a, b, rng, depth_max), mutate(a, FULL, rng, TerminalSet(), depth_max)):
            assert child.depth <= depth_max
            assert arity_ok(child)
