"""Apriori itemset mining and the most-specific-rule classifier.

A rule pairs an antecedent itemset with the outcome frequencies of the
training records that contain it.  To classify a record, the rule with the
largest antecedent contained in the record is chosen; ties go to the larger
support, then to the lexicographically smallest antecedent (or, with
``tie_break="confidence"``, to the higher maximum confidence first).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Hashable, Iterable, Sequence

import numpy as np

from .metrics import auc

LONGITUDINAL = "LONGITUDINAL"
HORIZONTAL = "HORIZONTAL"
TIE_BREAKS = ("lexicographic", "confidence")
DEFAULT_SUPPORT_GRID = (5, 10, 20, 40, 80)
DEFAULT_MAX_LEN = 4
DEFAULT_DISPLAY_SUPPORT = 50

Itemset = tuple  # sorted tuple of items


@dataclass(frozen=True)
class Transaction:
    items: frozenset
    outcome: bool

    def __post_init__(self):
        if not isinstance(self.items, frozenset):
            object.__setattr__(self, "items", frozenset(self.items))


@dataclass(frozen=True)
class Rule:
    antecedent: Itemset
    support: int
    confidence: tuple[float, float]  # (outcome 0, outcome 1)

    @classmethod
    def from_counts(cls, antecedent: Iterable[Hashable], support: int, positives: int) -> "Rule":
        if support < 1:
            raise ValueError("rule support must be at least 1")
        return cls(tuple(sorted(antecedent)), support,
                   ((support - positives) / support, positives / support))

    @property
    def positives(self) -> int:
        return round(self.confidence[1] * self.support)


def _selection_key(rule: Rule, tie_break: str):
    # smaller key wins
    if tie_break == "confidence":
        return (-len(rule.antecedent), -rule.support, -max(rule.confidence), rule.antecedent)
    return (-len(rule.antecedent), -rule.support, rule.antecedent)


class RuleSet:
    def __init__(self, rules: Sequence[Rule], min_support: int, class_prior: tuple[float, float],
                 view: str = HORIZONTAL, max_antecedent_len: int | None = None,
                 tie_break: str = "lexicographic"):
        if tie_break not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
        self.rules = list(rules)
        self.min_support = min_support
        self.class_prior = tuple(class_prior)
        self.view = view
        self.max_antecedent_len = max_antecedent_len
        self.tie_break = tie_break
        self.by_antecedent: dict[frozenset, Rule] = {}
        self.by_size: dict[int, list[Rule]] = defaultdict(list)
        self.items = set()
        for r in self.rules:
            if r.support < min_support:
                raise ValueError(f"rule {r.antecedent} below min_support {min_support}")
            key = frozenset(r.antecedent)
            if key in self.by_antecedent:
                raise ValueError(f"duplicate antecedent {r.antecedent}")
            self.by_antecedent[key] = r
            self.by_size[len(key)].append(r)
            self.items.update(key)
        self.sizes = sorted(self.by_size, reverse=True)

    def __len__(self):
        return len(self.rules)

    def __eq__(self, other):
        return (
            isinstance(other, RuleSet)
            and self.rules == other.rules
            and self.min_support == other.min_support
            and self.class_prior == other.class_prior
            and self.view == other.view
            and self.max_antecedent_len == other.max_antecedent_len
            and self.tie_break == other.tie_break
        )

    def restrict(self, min_support: int) -> "RuleSet":
        """The subset of rules meeting a higher support threshold."""
        if min_support < self.min_support:
            raise ValueError("can only raise the support threshold")
        return RuleSet([r for r in self.rules if r.support >= min_support], min_support,
                       self.class_prior, self.view, self.max_antecedent_len, self.tie_break)

    def with_tie_break(self, tie_break: str) -> "RuleSet":
        return RuleSet(self.rules, self.min_support, self.class_prior, self.view,
                       self.max_antecedent_len, tie_break)

    def top_rules(self, k: int, min_support: int | None = None) -> list[Rule]:
        """Rules ranked by positive-outcome confidence, then support.

        ``min_support`` hides rules below a display floor without changing
        the classifier.
        """
        floor = min_support or 0
        ranked = sorted(
            (r for r in self.rules if r.support >= floor),
            key=lambda r: (-r.confidence[1], -r.support, -len(r.antecedent), r.antecedent),
        )
        return ranked[:k]

    def to_text(self) -> str:
        lines = [
            "# ruleset",
            f"view {self.view}",
            f"min_support {self.min_support}",
            f"max_antecedent_len {self.max_antecedent_len if self.max_antecedent_len else 'none'}",
            f"tie_break {self.tie_break}",
            f"class_prior {float(self.class_prior[0])!r} {float(self.class_prior[1])!r}",
        ]
        for r in self.rules:
            codes = ",".join(str(c) for c in r.antecedent)
            lines.append(f"r {codes} {r.support} {float(r.confidence[0])!r} {float(r.confidence[1])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RuleSet":
        head = {}
        rules = []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "r":
                items = tuple(int(c) if c.lstrip("-").isdigit() else c for c in parts[1].split(","))
                rules.append(Rule(items, int(parts[2]), (float(parts[3]), float(parts[4]))))
            else:
                head[parts[0]] = parts[1:]
        max_len = head["max_antecedent_len"][0]
        return cls(
            rules,
            int(head["min_support"][0]),
            (float(head["class_prior"][0]), float(head["class_prior"][1])),
            head["view"][0],
            None if max_len == "none" else int(max_len),
            head["tie_break"][0],
        )


def _count_level(transactions, candidates: set[Itemset], k: int, universe: set):
    """Support and positive counts for each size-k candidate."""
    support = dict.fromkeys(candidates, 0)
    positives = dict.fromkeys(candidates, 0)
    cand_list = list(candidates)
    for t in transactions:
        items = sorted(t.items & universe)
        if len(items) < k:
            continue
        if comb(len(items), k) <= len(cand_list):
            hits = (c for c in combinations(items, k) if c in support)
        else:
            tset = t.items
            hits = (c for c in cand_list if tset.issuperset(c))
        for c in hits:
            support[c] += 1
            if t.outcome:
                positives[c] += 1
    return support, positives


def _mine(transactions: Sequence[Transaction], min_support: int, max_len: int | None):
    if min_support < 1:
        raise ValueError("min_support must be at least 1")
    found: dict[Itemset, tuple[int, int]] = {}
    item_counts: dict = defaultdict(lambda: [0, 0])
    for t in transactions:
        for item in t.items:
            item_counts[item][0] += 1
            item_counts[item][1] += t.outcome
    level = {}
    for item, (s, p) in item_counts.items():
        if s >= min_support:
            level[(item,)] = (s, p)
    k = 1
    while level:
        found.update(level)
        k += 1
        if max_len is not None and k > max_len:
            break
        prev = sorted(level)
        prev_set = set(prev)
        candidates = set()
        # join itemsets that share their first k-2 items
        by_prefix = defaultdict(list)
        for itemset in prev:
            by_prefix[itemset[:-1]].append(itemset[-1])
        for prefix, tails in by_prefix.items():
            for a, b in combinations(tails, 2):
                cand = prefix + (a, b)
                if all(cand[:i] + cand[i + 1:] in prev_set for i in range(k)):
                    candidates.add(cand)
        if not candidates:
            break
        universe = {item for c in candidates for item in c}
        support, positives = _count_level(transactions, candidates, k, universe)
        level = {c: (support[c], positives[c]) for c in candidates if support[c] >= min_support}
    return found


def _sort_key(itemset):
    return (len(itemset), itemset)


def mine_frequent_itemsets(transactions: Sequence[Transaction], min_support: int,
                           max_len: int | None = None) -> list[tuple[Itemset, int]]:
    """Level-wise Apriori: every non-empty itemset with support >= min_support."""
    found = _mine(transactions, min_support, max_len)
    return [(c, found[c][0]) for c in sorted(found, key=_sort_key)]


def class_prior(transactions: Sequence[Transaction]) -> tuple[float, float]:
    n = len(transactions)
    if n == 0:
        return (0.5, 0.5)
    pos = sum(1 for t in transactions if t.outcome)
    return ((n - pos) / n, pos / n)


def generate_rules(frequent: Sequence[tuple[Itemset, int]], transactions: Sequence[Transaction],
                   view: str = HORIZONTAL, max_antecedent_len: int | None = None,
                   tie_break: str = "lexicographic") -> RuleSet:
    """One rule per frequent itemset, carrying both outcome confidences."""
    by_len = defaultdict(set)
    for itemset, _ in frequent:
        by_len[len(itemset)].add(tuple(sorted(itemset)))
    rules = []
    for k in sorted(by_len):
        cands = by_len[k]
        universe = {i for c in cands for i in c}
        support, positives = _count_level(transactions, cands, k, universe)
        rules += [Rule.from_counts(c, support[c], positives[c]) for c in sorted(cands)]
    min_support = min((r.support for r in rules), default=1)
    return RuleSet(rules, min_support, class_prior(transactions), view, max_antecedent_len, tie_break)


def build_ruleset(transactions: Sequence[Transaction], min_support: int, view: str = HORIZONTAL,
                  max_len: int | None = DEFAULT_MAX_LEN, tie_break: str = "lexicographic") -> RuleSet:
    """Mine and generate rules in one pass over the data."""
    found = _mine(transactions, min_support, max_len)
    rules = [Rule.from_counts(c, *found[c]) for c in sorted(found, key=_sort_key)]
    return RuleSet(rules, min_support, class_prior(transactions), view, max_len, tie_break)


def select_matching_rule(ruleset: RuleSet, items: Iterable[Hashable]) -> Rule | None:
    items = frozenset(items)
    relevant = sorted(items & ruleset.items)
    for k in ruleset.sizes:
        if k > len(relevant):
            continue
        bucket = ruleset.by_size[k]
        if comb(len(relevant), k) <= len(bucket):
            lookup = ruleset.by_antecedent
            matches = [lookup[frozenset(c)] for c in combinations(relevant, k) if frozenset(c) in lookup]
        else:
            matches = [r for r in bucket if items.issuperset(r.antecedent)]
        if matches:
            return min(matches, key=lambda r: _selection_key(r, ruleset.tie_break))
    return None


def classify_with_rules(ruleset: RuleSet, items: Iterable[Hashable]) -> tuple[float, float]:
    """(P(outcome 0), P(outcome 1)) from the selected rule, else the class prior."""
    rule = select_matching_rule(ruleset, items)
    return rule.confidence if rule is not None else ruleset.class_prior


def score_itemsets(ruleset: RuleSet, itemsets: Iterable[Iterable[Hashable]]) -> np.ndarray:
    return np.array([classify_with_rules(ruleset, items)[1] for items in itemsets], dtype=np.float64)


def support_threshold_scores(transactions: Sequence[Transaction], candidate_grid: Sequence[int],
                             view: str = HORIZONTAL, max_len: int | None = DEFAULT_MAX_LEN,
                             tie_break: str = "lexicographic") -> dict[int, float]:
    """Training AUC of the rule classifier at each support threshold."""
    grid = sorted(set(int(g) for g in candidate_grid))
    if not grid:
        raise ValueError("candidate grid is empty")
    labels = [t.outcome for t in transactions]
    base = build_ruleset(transactions, grid[0], view, max_len, tie_break)
    scores = {}
    for threshold in grid:
        rs = base.restrict(threshold)
        scores[threshold] = auc(score_itemsets(rs, (t.items for t in transactions)), labels)
    return scores


def tune_support_threshold(transactions: Sequence[Transaction], candidate_grid: Sequence[int],
                           view: str = HORIZONTAL, max_len: int | None = DEFAULT_MAX_LEN,
                           tie_break: str = "lexicographic") -> int:
    """Grid value with the best training AUC; ties go to the larger threshold."""
    grid = list(candidate_grid)
    if not grid:
        raise ValueError("candidate grid is empty")
    if len(set(grid)) == 1:
        return int(grid[0])
    scores = support_threshold_scores(transactions, grid, view, max_len, tie_break)
    return max(scores, key=lambda s: (scores[s], s))
