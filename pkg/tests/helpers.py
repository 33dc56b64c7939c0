"""Shared independent oracles used by unit and acceptance tests."""

import math

import numpy as np

from regiontok.errors import DegenerateBatchError
from regiontok.synth import NO_REGION


def brute_force_info_nce(tokens, ids, tau):
    """Double-loop evaluation of the multi-positive contrastive objective."""
    n = len(tokens)
    unit = [t / np.linalg.norm(t) for t in np.asarray(tokens, dtype=np.float64)]
    terms = []
    for i in range(n):
        if ids[i] == NO_REGION:
            continue
        num = 0.0
        den = 0.0
        has_pos = False
        for j in range(n):
            if j == i:
                continue
            sim = float(np.dot(unit[i], unit[j]))
            e = math.exp(sim / tau)
            den += e
            if ids[j] == ids[i] and ids[j] != NO_REGION:
                num += e
                has_pos = True
        if has_pos:
            terms.append(-math.log(num / den))
    if not terms:
        raise DegenerateBatchError("no anchors")
    return sum(terms) / len(terms)
