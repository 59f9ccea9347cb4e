"""
What the combiner sees
======================

The second-stage logistic model is fit on the four base probabilities of the
validation split.  Here we compare that default with log-odds inputs on a
smaller cohort; which one wins changes from seed to seed.
"""

import numpy as np

from edrisk.cohort import apply_exclusions, label_index_visits, link_patient_timelines
from edrisk.metrics import auc
from edrisk.stack import TEST, EnsembleConfig, labels_for, prepare_index_visits, split_dataset, subset_batch, train_ensemble
from edrisk.synth import SynthConfig, generate_synthetic_cohort

kept, _ = apply_exclusions(generate_synthetic_cohort(SynthConfig(n_patients=12000, seed=2)))
timelines = link_patient_timelines(kept)
items = prepare_index_visits(timelines)
labels = labels_for(items, label_index_visits(timelines, 14))
split = split_dataset(items, seed=2)
test = subset_batch(items, labels, split, TEST)

for mode in ("probability", "logit"):
    model, report = train_ensemble(items, labels, split, 14, EnsembleConfig(meta_inputs=mode))
    columns, y = model.score_columns(test)
    row = "  ".join(f"{k} {auc(v, y):.4f}" for k, v in columns.items())
    print(f"{mode:<12}{row}")
    print(" " * 12 + "meta weights " + " ".join(f"{w:+.2f}" for w in model.meta.weights))

###############################################################################
# Naive Bayes outputs pile up near 0 and 1, and the rule classifiers emit a
# handful of distinct values.  Count how many distinct scores each column
# produces on the test split.

for name, scores in columns.items():
    print(f"{name:<9}{len(np.unique(scores)):>7} distinct scores")
