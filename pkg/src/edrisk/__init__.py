"""Admission risk prediction for emergency department visits.

Submodules: ``cohort`` (records, exclusions, labels), ``synth`` (synthetic
cohorts), ``featurize`` (features and itemsets), ``linear`` (logistic
regression, naive Bayes), ``arc`` (association rule classifiers), ``stack``
(split and ensemble), ``metrics`` (AUC, evaluation), ``bundle`` (persistence),
``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
