import math

from typing import List, Sequence, Tuple

import numpy as np
from scipy import special

from .metrics import EvaluationException

def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))

def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """
        Two-sided paired t-test on a - b. All-zero differences give (nan, 1.0); zero
        variance with a nonzero mean gives an infinite statistic and p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationException(f'paired samples differ in shape: {a.shape} vs {b.shape}')
    if len(a) < 2:
        raise EvaluationException('paired t-test needs at least two cases')
    diff = a - b
    if not diff.any():
        return math.nan, 1.0
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(len(diff)))
    return float(t), t_sf_two_sided(t, len(diff) - 1)

def bonferroni(p_values: Sequence[float], m: int) -> List[float]:
    if m < len(p_values):
        raise EvaluationException(f'bonferroni needs m >= {len(p_values)} comparisons (got {m})')
    if any(not 0 <= p <= 1 for p in p_values):
        raise EvaluationException('p-values must lie in [0, 1]')
    return [min(1.0, m * p) for p in p_values]

def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise EvaluationException('no values to summarize')
    return float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0
