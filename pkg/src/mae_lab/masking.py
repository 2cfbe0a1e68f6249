"""Mask planners: uniform random masking and hybrid content-aware masking.

Randomness comes from ``numpy.random.Generator`` (PCG64 bit generator via
``default_rng``). Passing an integer seed builds a fresh generator, so a plan
is a pure function of (variances, ratio, seed).

Rounding: the saliency pool size rounds up, the high-saliency quota rounds
down, so the quota never exceeds the pool.
"""

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

HIGH_FRACTION = 0.7
POOL_TOTAL_FRACTION = 0.5


@dataclass
class MaskPlan:
    n_total: int
    masked: np.ndarray
    visible: np.ndarray
    strategy: str
    seed: object = None

    def __post_init__(self):
        self.masked = np.sort(np.asarray(self.masked, dtype=np.int64))
        self.visible = np.sort(np.asarray(self.visible, dtype=np.int64))

    def validate(self):
        both = np.concatenate([self.masked, self.visible])
        if both.size != self.n_total or not np.array_equal(np.sort(both), np.arange(self.n_total)):
            raise ValueError("masked and visible do not partition 0..n_total-1")

    def mask_vector(self):
        m = np.zeros(self.n_total, dtype=bool)
        m[self.masked] = True
        return m

    def to_json(self, sample_id):
        return json.dumps({
            "sample_id": sample_id,
            "strategy": self.strategy,
            "seed": self.seed,
            "masked": self.masked.tolist(),
        })


def _frac(x):
    return Fraction(x).limit_denominator(1_000_000)


def _floor_mul(frac, n):
    f = _frac(frac)
    return (f.numerator * n) // f.denominator


def mask_count(n_total, ratio):
    """floor(ratio * n_total) clamped to [1, n_total - 1]."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if n_total < 2:
        raise ValueError(f"n_total must be >= 2, got {n_total}")
    return min(max(_floor_mul(ratio, n_total), 1), n_total - 1)


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def _plan(n_total, masked, strategy, seed):
    keep = np.ones(n_total, dtype=bool)
    keep[masked] = False
    return MaskPlan(n_total, masked, np.flatnonzero(keep), strategy, seed)


def random_mask(n_total, ratio, rng):
    rng, seed = _as_rng(rng)
    k = mask_count(n_total, ratio)
    masked = rng.permutation(n_total)[:k]
    return _plan(n_total, masked, "random", seed)


def pool_size(n_masked, n_total):
    """ceil(max(0.7 * n_masked, 0.5 * n_total)), evaluated exactly."""
    # compare as exact rationals before rounding
    a = _frac(HIGH_FRACTION) * n_masked
    b = _frac(POOL_TOTAL_FRACTION) * n_total
    m = max(a, b)
    return min(-((-m.numerator) // m.denominator), n_total)


def saliency_pool(variances, n_masked, n_total):
    """Indices of the ``pool_size`` highest-variance patches, ties to lower index."""
    v = np.asarray(variances, dtype=np.float64)
    if v.shape != (n_total,):
        raise ValueError(f"expected {n_total} variances, got shape {v.shape}")
    size = pool_size(n_masked, n_total)
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:size])


def content_aware_mask(variances, ratio, rng, high_fraction=HIGH_FRACTION):
    """Hybrid plan: ``floor(high_fraction * n_masked)`` from the saliency pool,
    the rest uniformly from outside it.

    If the outside set is too small for the remainder, the shortfall is drawn
    from pool indices not already chosen.
    """
    rng, seed = _as_rng(rng)
    v = np.asarray(variances, dtype=np.float64)
    n_total = v.shape[0]
    n_masked = mask_count(n_total, ratio)
    pool = saliency_pool(v, n_masked, n_total)
    quota = min(_floor_mul(high_fraction, n_masked), pool.size)
    in_pool = np.zeros(n_total, dtype=bool)
    in_pool[pool] = True
    outside = np.flatnonzero(~in_pool)

    perm = rng.permutation(pool.size)
    high = pool[perm[:quota]]
    rest = n_masked - quota
    if rest <= outside.size:
        low = outside[rng.permutation(outside.size)[:rest]]
    else:
        spare = pool[perm[quota:]]
        extra = spare[rng.permutation(spare.size)[:rest - outside.size]]
        low = np.concatenate([outside, extra])
    return _plan(n_total, np.concatenate([high, low]), "content_aware", seed)


def plan_mask(strategy, variances, ratio, rng, high_fraction=HIGH_FRACTION):
    if strategy == "random":
        return random_mask(len(variances), ratio, rng)
    if strategy == "content_aware":
        return content_aware_mask(variances, ratio, rng, high_fraction)
    raise ValueError(f"unknown mask strategy {strategy!r}")
