"""
Association rules on seven records
==================================

Mine frequent itemsets, turn them into rules and classify a new record
with the most specific matching rule.
"""

from edrisk.arc import Transaction, build_ruleset, classify_with_rules, mine_frequent_itemsets, select_matching_rule

records = [
    ({"A"}, 0),
    ({"B", "C"}, 0),
    ({"A", "B", "D"}, 1),
    ({"B", "E"}, 1),
    ({"B", "A"}, 1),
    ({"C", "B"}, 0),
    ({"B", "A", "C"}, 0),
]
transactions = [Transaction(frozenset(items), bool(y)) for items, y in records]

###############################################################################
# Frequent itemsets at support 2.  D and E appear once each, so neither
# survives, and neither does any pair containing them.

for itemset, support in mine_frequent_itemsets(transactions, 2):
    print("".join(itemset), support)

###############################################################################
# Every frequent itemset becomes one rule carrying both outcome confidences.

rules = build_ruleset(transactions, 2, max_len=None)
print(f"{'antecedent':<12}{'support':>8}{'P(0)':>8}{'P(1)':>8}")
for r in rules.rules:
    print(f"{','.join(r.antecedent):<12}{r.support:>8}{r.confidence[0]:>8.2f}{r.confidence[1]:>8.2f}")

###############################################################################
# A record with items A, B, C, D matches both AB and BC.  They have the same
# size and support, so the default tie-break falls back to code order.

query = {"A", "B", "C", "D"}
print("selected:", select_matching_rule(rules, query).antecedent)
print("P(0), P(1):", classify_with_rules(rules, query))

# preferring confidence instead picks BC, which never saw a positive
print("confidence tie-break:", select_matching_rule(rules.with_tie_break("confidence"), query).antecedent)

###############################################################################
# Nothing matches E alone, so the classifier falls back to the class prior.

print("E only:", classify_with_rules(rules, {"E"}))
