import attr
import math

from typing import Collection, Sequence, Tuple

import numpy as np

class EvaluationException(Exception): pass

@attr.define(slots=True, frozen=True)
class SliceSpec:
    """Head items are the ceil(head_fraction * n) most train-popular items, ties by index."""
    head_fraction: float = 0.01

    def head_size(self, n_items: int) -> int:
        # guard against 0.01 * 2000 landing a hair above 20
        return min(n_items, math.ceil(round(self.head_fraction * n_items, 9)))

    def head_mask(self, popularity: np.ndarray) -> np.ndarray:
        popularity = np.asarray(popularity)
        order = np.lexsort((np.arange(len(popularity)), -popularity))
        mask = np.zeros(len(popularity), dtype=bool)
        mask[order[:self.head_size(len(popularity))]] = True
        return mask

    def partition(self, popularity: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        head = self.head_mask(popularity)
        return head, ~head

def recall_at_k(ranked: Sequence[int], relevant: Collection[int], k: int) -> float:
    if k < 1:
        raise EvaluationException(f'k must be positive (got {k})')
    if not relevant:
        raise EvaluationException('relevant set is empty')
    relevant = set(relevant)
    hits = len(relevant.intersection(ranked[:k]))
    return hits / len(relevant)
