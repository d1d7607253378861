"""ROC-AUC and average precision, cross-checked against brute force.

Run:  python demos/05_metrics_oracles.py
"""

import numpy as np

from promptad.metrics import EvalRecord, pr_auc, roc_auc

rng = np.random.default_rng(0)
scores = np.round(rng.random(40), 2)          # rounded -> plenty of ties
labels = (rng.random(40) < 0.3).astype(int)
labels[0] = 1
labels[1] = 0

rec = EvalRecord(scores, labels)
print("roc_auc:", roc_auc(rec))
print("pr_auc: ", pr_auc(rec))

# O(n^2) pair-counting oracle for ROC
pos, neg = scores[labels == 1], scores[labels == 0]
wins = sum(float(p > n) + 0.5 * float(p == n) for p in pos for n in neg)
print("pair-counting oracle:", wins / (len(pos) * len(neg)))

# exhaustive threshold enumeration for AP
ap, prev_r = 0.0, 0.0
for t in sorted(set(scores), reverse=True):
    predicted = scores >= t
    tp = int((predicted & (labels == 1)).sum())
    precision = tp / predicted.sum()
    recall = tp / labels.sum()
    ap += (recall - prev_r) * precision
    prev_r = recall
print("exhaustive-threshold oracle:", ap)

# degenerate cases follow the tie-grouping convention
print("all scores equal -> roc 0.5:", roc_auc(EvalRecord([1, 1, 1, 1], [1, 0, 1, 0])))
print("all scores equal -> ap = prevalence:", pr_auc(EvalRecord([1, 1, 1, 1], [1, 0, 0, 0])))
