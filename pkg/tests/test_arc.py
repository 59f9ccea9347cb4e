from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrisk.arc import (
    HORIZONTAL,
    Rule,
    RuleSet,
    Transaction,
    build_ruleset,
    class_prior,
    classify_with_rules,
    generate_rules,
    mine_frequent_itemsets,
    score_itemsets,
    select_matching_rule,
    support_threshold_scores,
    tune_support_threshold,
)
from edrisk.metrics import auc


def brute_force_itemsets(transactions, min_support, max_len=None):
    items = sorted(set().union(*[t.items for t in transactions])) if transactions else []
    out = {}
    for k in range(1, (max_len or len(items)) + 1):
        for c in combinations(items, k):
            n = sum(1 for t in transactions if t.items.issuperset(c))
            if n >= min_support:
                out[c] = n
    return out


def brute_force_select(ruleset, items, tie_break="lexicographic"):
    matches = [r for r in ruleset.rules if set(r.antecedent) <= set(items)]
    if not matches:
        return None
    if tie_break == "confidence":
        key = lambda r: (-len(r.antecedent), -r.support, -max(r.confidence), r.antecedent)
    else:
        key = lambda r: (-len(r.antecedent), -r.support, r.antecedent)
    return sorted(matches, key=key)[0]


def test_worked_example_itemsets(worked_transactions):
    found = dict(mine_frequent_itemsets(worked_transactions, 2))
    assert found == {("A",): 4, ("B",): 6, ("C",): 3, ("A", "B"): 3, ("B", "C"): 3}


def test_support_above_count_is_empty(worked_transactions):
    assert mine_frequent_itemsets(worked_transactions, 8) == []


def test_min_support_must_be_positive(worked_transactions):
    with pytest.raises(ValueError):
        mine_frequent_itemsets(worked_transactions, 0)


def test_worked_example_confidences(worked_transactions):
    rs = generate_rules(mine_frequent_itemsets(worked_transactions, 2), worked_transactions)
    by = {r.antecedent: r for r in rs.rules}
    assert by[("A", "B")].confidence == (1 / 3, 2 / 3)
    assert by[("C",)].confidence == (1.0, 0.0)
    assert by[("A",)].confidence == (0.5, 0.5)
    assert rs.class_prior == (4 / 7, 3 / 7)


def test_worked_example_selection(worked_transactions):
    rs = build_ruleset(worked_transactions, 2, max_len=None)
    assert select_matching_rule(rs, {"A", "B", "C", "D"}).antecedent == ("A", "B")
    p0, p1 = classify_with_rules(rs, {"A", "B", "C", "D"})
    assert (round(p1, 2), round(p0, 2)) == (0.67, 0.33)


def test_confidence_tie_break_picks_other_rule(worked_transactions):
    rs = build_ruleset(worked_transactions, 2, max_len=None, tie_break="confidence")
    assert select_matching_rule(rs, {"A", "B", "C", "D"}).antecedent == ("B", "C")


def test_prior_fallback(worked_transactions):
    rs = build_ruleset(worked_transactions, 2, max_len=None)
    assert classify_with_rules(rs, {"E"}) == (4 / 7, 3 / 7)


def test_empty_ruleset():
    assert select_matching_rule(RuleSet([], 1, (0.5, 0.5)), {1, 2}) is None


def test_single_grid_value(worked_transactions):
    assert tune_support_threshold(worked_transactions, [7]) == 7
    with pytest.raises(ValueError):
        tune_support_threshold(worked_transactions, [])


def test_tuning_ties_go_to_larger_threshold():
    # one item, no signal: every threshold scores 0.5
    ts = [Transaction({1}, i % 2 == 0) for i in range(20)]
    assert tune_support_threshold(ts, [1, 2, 4]) == 4


def test_ruleset_text_round_trip(worked_transactions):
    rs = build_ruleset([Transaction({1, 2}, True), Transaction({2, 3}, False), Transaction({1, 2, 3}, True)], 1)
    assert RuleSet.from_text(rs.to_text()) == rs


def test_top_rules_floor_hides_small_rules():
    rs = RuleSet([Rule.from_counts((1,), 100, 30), Rule.from_counts((2,), 3, 3)], 1, (0.9, 0.1))
    assert [r.antecedent for r in rs.top_rules(5)] == [(2,), (1,)]
    assert [r.antecedent for r in rs.top_rules(5, min_support=50)] == [(1,)]


transactions_strategy = st.lists(
    st.tuples(st.frozensets(st.integers(0, 11), max_size=7), st.booleans()),
    max_size=200,
).map(lambda rows: [Transaction(items, y) for items, y in rows])


@settings(max_examples=60, deadline=None)
@given(transactions_strategy, st.integers(1, 5))
def test_mining_matches_powerset(ts, min_support):
    found = dict(mine_frequent_itemsets(ts, min_support))
    assert found == brute_force_itemsets(ts, min_support)
    for itemset in found:
        for k in range(1, len(itemset)):
            assert all(sub in found for sub in combinations(itemset, k))


@settings(max_examples=60, deadline=None)
@given(transactions_strategy, st.integers(1, 5), st.integers(1, 3))
def test_max_len_truncates(ts, min_support, max_len):
    assert dict(mine_frequent_itemsets(ts, min_support, max_len)) == brute_force_itemsets(ts, min_support, max_len)


@settings(max_examples=60, deadline=None)
@given(transactions_strategy, st.integers(1, 4))
def test_rule_confidences_are_conditional_frequencies(ts, min_support):
    rs = build_ruleset(ts, min_support, max_len=None)
    for r in rs.rules:
        matching = [t.outcome for t in ts if t.items.issuperset(r.antecedent)]
        assert r.support == len(matching)
        assert r.confidence[1] == sum(matching) / len(matching)
        assert abs(sum(r.confidence) - 1) <= 1e-12
    assert abs(sum(rs.class_prior) - 1) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(transactions_strategy, st.integers(1, 4), st.frozensets(st.integers(0, 11), max_size=10),
       st.sampled_from(["lexicographic", "confidence"]), st.randoms())
def test_selection_matches_scan_and_ignores_storage_order(ts, s, items, tie_break, rnd):
    rs = build_ruleset(ts, s, max_len=None, tie_break=tie_break)
    expected = brute_force_select(rs, items, tie_break)
    assert select_matching_rule(rs, items) == expected
    shuffled = list(rs.rules)
    rnd.shuffle(shuffled)
    rs2 = RuleSet(shuffled, rs.min_support, rs.class_prior, HORIZONTAL, None, tie_break)
    assert select_matching_rule(rs2, items) == expected
    assert classify_with_rules(rs, items) == (expected.confidence if expected else rs.class_prior)


@settings(max_examples=60, deadline=None)
@given(transactions_strategy, st.integers(1, 5))
def test_raising_support_never_adds_rules(ts, s):
    low = {r.antecedent for r in build_ruleset(ts, s, max_len=None).rules}
    high = {r.antecedent for r in build_ruleset(ts, s + 1, max_len=None).rules}
    assert high <= low


@settings(max_examples=30, deadline=None)
@given(transactions_strategy)
def test_tuned_threshold_is_reevaluated_argmax(ts):
    if len({t.outcome for t in ts}) < 2:
        return
    grid = [1, 2, 3, 5]
    chosen = tune_support_threshold(ts, grid, max_len=3)
    labels = [t.outcome for t in ts]
    scores = {g: auc(score_itemsets(build_ruleset(ts, g, max_len=3), [t.items for t in ts]), labels) for g in grid}
    assert scores == support_threshold_scores(ts, grid, max_len=3)
    assert chosen == max(grid, key=lambda g: (scores[g], g))
