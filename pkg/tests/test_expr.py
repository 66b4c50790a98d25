"""Grammar, constrained decoding, protected evaluation, and formula text."""

import itertools

import numpy as np
import pytest

from factormine.data import Panel
from factormine.errors import ExprError, ParseError, UsageError
from factormine.expr import (
    DEFAULT_MAX_LENGTH,
    FactorExpr,
    Vocabulary,
    complexity,
    evaluate,
    legal_next_tokens,
    parse,
    random_expression,
    serialize,
)

from conftest import (
    ADD,
    CLOSE,
    DIV,
    FIXTURE_CATALOG,
    FIXTURE_FORMULAS,
    HIGH,
    LOW,
    MUL,
    OPEN,
    SUB,
    VOCAB,
    VOCAB_POW,
    VOLUME,
    make_panel,
)


def constant_panel(price=100.0, shape=(2, 3, 4)):
    d, s, m = shape
    import datetime as dt

    days = tuple(dt.date(2024, 1, 2) + dt.timedelta(days=i) for i in range(d))
    symbols = tuple(f"S{i:02d}" for i in range(s))
    values = np.full((d, s, m, 6), price)
    return Panel(days, symbols, m, values, np.ones((d, s, m), dtype=bool))


class TestStructure:
    def test_vocabulary_size(self):
        assert Vocabulary().size == 20
        assert Vocabulary(include_pow=True).size == 21

    def test_incomplete_rejected(self):
        with pytest.raises(ExprError):
            FactorExpr((ADD, OPEN), 0)

    def test_trailing_rejected(self):
        with pytest.raises(ExprError):
            FactorExpr((OPEN, CLOSE), 0)

    def test_complexity(self):
        assert complexity(FactorExpr((OPEN,), 0)) == 1
        assert complexity(FactorExpr((ADD, OPEN, CLOSE), 0)) == 3


class TestLegalNextTokens:
    def test_empty_prefix_allows_everything(self):
        assert legal_next_tokens((), 15, VOCAB) == tuple(range(VOCAB.size))

    def test_one_slot_left_only_terminals(self):
        # add open ... : one operand pending, one slot remaining
        partial = (ADD, OPEN)
        legal = legal_next_tokens(partial, 3, VOCAB)
        assert legal == tuple(range(6))

    def test_complete_prefix_rejects_extension(self):
        with pytest.raises(UsageError):
            legal_next_tokens((OPEN,), 15, VOCAB)

    def test_uncompletable_prefix_rejected(self):
        with pytest.raises(ExprError):
            # three pending operands, two slots left
            legal_next_tokens((ADD, ADD), 4, VOCAB)

    def test_exhaustive_mini_vocabulary(self):
        # 3-token mini-vocabulary: one terminal, one unary, one binary
        class MiniVocab:
            size = 3
            _arity = (0, 1, 2)

            def tokens(self):
                return range(3)

            def arity(self, tok):
                return self._arity[tok]

        mini = MiniVocab()
        max_len = 6

        def completable(seq):
            """Brute force: does some extension of seq within max_len
            terminate in a complete expression?"""
            need = 1
            for tok in seq:
                if need == 0:
                    return False
                need += mini.arity(tok) - 1
            if need == 0:
                return len(seq) > 0
            return any(
                completable(seq + (t,))
                for t in range(3)
                if len(seq) < max_len
            )

        def complete(seq):
            need = 1
            for tok in seq:
                if need == 0:
                    return False
                need += mini.arity(tok) - 1
            return bool(seq) and need == 0

        checked = 0
        for n in range(0, max_len):
            for seq in itertools.product(range(3), repeat=n):
                if not completable(seq) or complete(seq):
                    continue
                legal = legal_next_tokens(seq, max_len, mini)
                brute = tuple(
                    t for t in range(3) if completable(seq + (t,))
                )
                assert legal == brute, f"prefix {seq}"
                assert legal, f"no legal extension for completable prefix {seq}"
                checked += 1
        assert checked > 50

        # greedy descent always terminates in a complete expression
        for seed in range(40):
            g = np.random.default_rng(seed)
            seq = ()
            while not complete(seq):
                legal = legal_next_tokens(seq, max_len, mini)
                seq = seq + (legal[g.integers(len(legal))],)
            assert len(seq) <= max_len


class TestEvaluate:
    def test_constant_panel_ratio(self):
        # (0.1*open)/(0.3*low) on a constant-price panel: every valid cell
        # equals the analytic ratio 1/3
        expr = parse("(0.1·open)/(0.3·low)", FIXTURE_CATALOG)
        values = evaluate(expr, FIXTURE_CATALOG, constant_panel(price=77.0))
        expected = (0.1 * 77.0) / (0.3 * 77.0)
        assert values.mask.all()
        np.testing.assert_array_equal(values.values, expected)
        assert abs(expected - 1.0 / 3.0) < 1e-15

    def test_abs_on_positive_terminal_is_identity(self, catalog):
        panel = constant_panel(price=50.0)
        absexpr = FactorExpr((VOCAB.token_for("abs"), VOLUME), 0)
        plain = FactorExpr((VOLUME,), 0)
        a = evaluate(absexpr, catalog, panel)
        b = evaluate(plain, catalog, panel)
        np.testing.assert_array_equal(a.values, b.values)

    def test_hand_built_brute_force_oracle(self):
        # independent brute-force tree evaluation of
        # (0.1*open)*(0.3*low) - (0.18*volume)/(0.4*vwap) on a 2x2x2 panel
        import datetime as dt

        o = np.array([[[100.0, 102.0], [50.0, 51.0]],
                      [[103.0, 101.0], [52.0, 49.0]]])
        low = o * 0.99
        high = o * 1.02
        c = o * 1.01
        vol = np.array([[[1000.0, 1100.0], [900.0, 950.0]],
                        [[1200.0, 1250.0], [800.0, 850.0]]])
        vw = (high + low) / 2.0
        values = np.stack([o, high, low, c, vol, vw], axis=-1)
        days = (dt.date(2024, 1, 2), dt.date(2024, 1, 3))
        panel = Panel(days, ("A", "B"), 2, values, np.ones((2, 2, 2), dtype=bool))

        expr = parse(FIXTURE_FORMULAS[0][0], FIXTURE_CATALOG)
        got = evaluate(expr, FIXTURE_CATALOG, panel)

        for d in range(2):
            for s in range(2):
                cells = []
                for m in range(2):
                    left = (0.1 * o[d, s, m]) * (0.3 * low[d, s, m])
                    right = (0.18 * vol[d, s, m]) / (0.4 * vw[d, s, m])
                    cells.append(left - right)
                expected = sum(cells) / 2.0
                assert abs(got.values[d, s] - expected) < 1e-12

    def test_div_guard_masks(self, catalog):
        panel = constant_panel()
        # open - open == 0, then div by it
        zero = (SUB, OPEN, OPEN)
        expr = FactorExpr((DIV, CLOSE) + zero, 0)
        values = evaluate(expr, catalog, panel)
        assert not values.mask.any()
        np.testing.assert_array_equal(values.values, 0.0)

    def test_log_of_difference_guarded(self, catalog):
        panel = constant_panel()
        expr = FactorExpr((VOCAB.token_for("log"), SUB, OPEN, OPEN), 0)
        values = evaluate(expr, catalog, panel)
        assert not values.mask.any()

    def test_exp_clamped(self, catalog):
        panel = constant_panel(price=10000.0)
        expr = FactorExpr((VOCAB.token_for("exp"), VOLUME), 4)
        values = evaluate(expr, catalog, panel)
        assert values.mask.all()
        assert np.isfinite(values.values).all()
        np.testing.assert_allclose(values.values, np.exp(50.0))

    def test_last_aggregation(self, catalog):
        closes = np.array([[[100.0, 110.0, 120.0]]])
        panel = make_panel(closes)
        expr = FactorExpr((CLOSE,), 0)
        w = catalog.weights(0)[CLOSE]
        last = evaluate(expr, catalog, panel, aggregation="last")
        assert last.values[0, 0] == w * 120.0
        mean = evaluate(expr, catalog, panel, aggregation="mean")
        assert abs(mean.values[0, 0] - w * 110.0) < 1e-12

    def test_protected_totality_random(self, catalog, rng):
        panel = constant_panel(price=3.0, shape=(2, 3, 3))
        for _ in range(2000):
            expr = random_expression(rng, catalog, vocab=VOCAB_POW)
            values = evaluate(expr, catalog, panel)
            assert np.isfinite(values.values).all()
            assert np.isfinite(values.values[values.mask]).all()

    def test_permutation_equivariance(self, catalog, rng):
        closes = 100.0 * np.exp(rng.normal(0, 0.01, (3, 5, 4)))
        panel = make_panel(closes)
        perm = rng.permutation(5)
        permuted = Panel(
            panel.days,
            tuple(panel.symbols[i] for i in perm),
            panel.minutes_per_day,
            panel.values[:, perm].copy(),
            panel.mask[:, perm].copy(),
        )
        expr = random_expression(rng, catalog)
        a = evaluate(expr, catalog, panel)
        b = evaluate(expr, catalog, permuted)
        np.testing.assert_array_equal(a.values[:, perm], b.values)
        np.testing.assert_array_equal(a.mask[:, perm], b.mask)


class TestSerializeParse:
    def test_single_terminal(self, catalog):
        text = serialize(FactorExpr((OPEN,), 0), catalog)
        assert text == "(0.1·open)"

    def test_add_two_terminals(self, catalog):
        text = serialize(FactorExpr((ADD, OPEN, CLOSE), 0), catalog)
        assert text == "((0.1·open)+(0.4·close))"

    def test_leaf_roundtrip(self, catalog):
        expr = parse("(0.1·open)", catalog)
        assert expr == FactorExpr((OPEN,), 0)

    def test_div_tree(self):
        expr = parse("((0.1·open)/(0.3·low))", FIXTURE_CATALOG)
        assert expr.tokens == (DIV, OPEN, LOW)
        assert expr.option_id == 0

    def test_malformed_errors_at_end(self, catalog):
        with pytest.raises(ParseError, match="position"):
            parse("((0.1·open)+", catalog)

    def test_unknown_feature(self, catalog):
        with pytest.raises(ParseError, match="wavelength"):
            parse("(0.1·wavelength)", catalog)

    def test_weight_not_in_catalog(self, catalog):
        with pytest.raises(ParseError, match="matches no catalog option"):
            parse("(0.77·open)", catalog)

    def test_pow_needs_flag(self, catalog):
        with pytest.raises(ParseError, match="pow"):
            parse("(0.1·open)^(0.4·close)", catalog)

    def test_precedence(self):
        # mul and div bind tighter than sub; pow tighter than mul
        expr = parse("(0.1·open)-(0.1·low)·(0.5·high)·(0.2·close)", FIXTURE_CATALOG)
        assert expr.tokens[0] == SUB
        assert expr.tokens == (SUB, OPEN, MUL, MUL, LOW, HIGH, CLOSE)

    def test_fixture_formulas_roundtrip(self):
        for text, expected_option, needs_pow in FIXTURE_FORMULAS:
            expr = parse(text, FIXTURE_CATALOG, include_pow=needs_pow)
            assert expr.option_id == expected_option
            assert complexity(expr) <= DEFAULT_MAX_LENGTH
            out = serialize(expr, FIXTURE_CATALOG)
            again = parse(out, FIXTURE_CATALOG, include_pow=needs_pow)
            assert again == expr

    def test_roundtrip_random(self, catalog, rng):
        for _ in range(2000):
            expr = random_expression(rng, catalog)
            assert parse(serialize(expr, catalog), catalog) == expr

    def test_explicit_option_id_checked(self, catalog):
        with pytest.raises(ParseError, match="conflicts"):
            parse("(0.1·open)", catalog, option_id=2)
        expr = parse("(0.1·open)", catalog, option_id=0)
        assert expr.option_id == 0

    def test_ascii_operators_accepted(self, catalog):
        a = parse("((0.1·open)-(0.4·close))", catalog)
        b = parse("((0.1·open)−(0.4·close))", catalog)
        assert a == b

