"""Shared types and statistical primitives for privacy auditing.

Everything here is a pure function of its arguments. Randomness always
comes in through an explicit seed, and per-sample generators are derived
with :func:`derive_rng` so that parallel workers reproduce the exact
streams a serial run would use.
"""
from __future__ import annotations

import dataclasses
import enum
import math
import sys
from collections.abc import Sequence
from typing import Any

import numpy as np
import scipy.stats

_norm = scipy.stats.norm
_beta = scipy.stats.beta


class NeighborDef(str, enum.Enum):
    """How two neighboring datasets are allowed to differ."""

    REPLACE_ONE = "replace_one"
    ADD_REMOVE = "add_remove"


class IntervalMethod(str, enum.Enum):
    KATZ_LOG = "katz_log"
    CLOPPER_PEARSON_RATIO = "clopper_pearson_ratio"


class Phase(enum.IntEnum):
    """Seed-stream tags. Distinct values keep the streams disjoint."""

    ATTACK = 0
    SEARCH = 1
    VERIFY = 2
    POSTERIOR = 3


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed_sequence(master_seed: int, *tags: int) -> np.random.SeedSequence:
    """Child seed sequence addressed by ``tags`` under ``master_seed``.

    The tags become the spawn key, so any two distinct tag tuples yield
    statistically independent streams regardless of evaluation order.
    """
    if master_seed < 0 or master_seed >= 2**64:
        raise ValueError(f"master_seed must be a 64-bit unsigned int, got {master_seed}")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(t) for t in tags))


def derive_rng(master_seed: int, *tags: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``(master_seed, *tags)``."""
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, *tags)))


def derive_uint64(master_seed: int, *tags: int) -> int:
    return int(derive_seed_sequence(master_seed, *tags).generate_state(1, np.uint64)[0])


def as_rng(seed: Any) -> np.random.Generator:
    """Accepts an int, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PrivacySpec:
    """An (epsilon, delta) guarantee."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Binary-labelled feature matrix plus the constraint sets around it.

    Attributes:
      features: n x d float matrix.
      labels: length-n vector in {0, 1}.
      bounds: d x 2 array of per-feature (min, max); the hyper-rectangle
        constraint.
      l2_radius: radius of the origin-centred L2 ball holding every row.
      categorical: per-feature flag, True for one-hot columns.
      feature_names: optional column names, carried for reporting.
    """

    features: np.ndarray
    labels: np.ndarray
    bounds: np.ndarray
    l2_radius: float
    categorical: tuple[bool, ...] = ()
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.shape != (x.shape[0],):
            raise ValueError("labels must be a vector with one entry per row")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (x.shape[1], 2):
            raise ValueError(f"bounds must have shape (d, 2), got {b.shape}")
        n = x.shape[0]
        if n < 2:
            raise ValueError("a dataset needs at least two rows")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if np.any(b[:, 0] > b[:, 1]):
            raise ValueError("every bound needs min <= max")
        tol = 1e-9 * max(1.0, float(np.max(np.abs(b))))
        if np.any(x < b[:, 0] - tol) or np.any(x > b[:, 1] + tol):
            raise ValueError("some rows fall outside the declared bounds")
        if len(np.unique(y)) != 2:
            raise ValueError("both classes must be present")
        max_norm = float(np.max(np.linalg.norm(x, axis=1)))
        if self.l2_radius < max_norm * (1 - 1e-12):
            raise ValueError(f"l2_radius {self.l2_radius} < max row norm {max_norm}")
        cat = tuple(bool(c) for c in self.categorical) or (False,) * x.shape[1]
        if len(cat) != x.shape[1]:
            raise ValueError("categorical mask length must equal the feature count")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(x.shape[1]))
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y.astype(np.int64)))
        object.__setattr__(self, "bounds", _frozen(b))
        object.__setattr__(self, "l2_radius", float(self.l2_radius))
        object.__setattr__(self, "categorical", cat)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_arrays(cls, features, labels, bounds=None, l2_radius=None, **kw) -> Dataset:
        """Builds a dataset, taking bounds and radius from the data when omitted."""
        x = np.asarray(features, dtype=float)
        if bounds is None:
            bounds = np.stack([x.min(axis=0), x.max(axis=0)], axis=1)
        if l2_radius is None:
            l2_radius = float(np.max(np.linalg.norm(x, axis=1)))
        return cls(x, np.asarray(labels), np.asarray(bounds, dtype=float), l2_radius, **kw)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def widths(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=2)

    def with_rows(self, features, labels) -> Dataset:
        """Same constraint sets, different rows (used for poisoned copies)."""
        return Dataset(features, labels, self.bounds, self.l2_radius,
                       self.categorical, self.feature_names)

    def equals(self, other: Dataset) -> bool:
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.bounds, other.bounds)
            and self.l2_radius == other.l2_radius
            and self.categorical == other.categorical
        )

    def to_json_dict(self) -> dict:
        return {
            "schema": "dpaudit-dataset/1",
            "n": self.n,
            "d": self.d,
            "feature_names": list(self.feature_names),
            "categorical": list(self.categorical),
            "bounds": self.bounds.tolist(),
            "l2_radius": self.l2_radius,
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> Dataset:
        if obj.get("schema") != "dpaudit-dataset/1":
            raise ValueError(f"unsupported dataset schema {obj.get('schema')!r}")
        return cls(
            np.asarray(obj["features"], dtype=float).reshape(obj["n"], obj["d"]),
            np.asarray(obj["labels"]),
            np.asarray(obj["bounds"], dtype=float),
            float(obj["l2_radius"]),
            tuple(obj["categorical"]),
            tuple(obj["feature_names"]),
        )


@dataclasses.dataclass(frozen=True)
class NeighborPair:
    """Original dataset, its poisoned neighbour, and how they differ."""

    original: Dataset
    poisoned: Dataset
    k: int
    neighbor_def: NeighborDef
    witness: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        a, b = self.original, self.poisoned
        if self.neighbor_def is NeighborDef.REPLACE_ONE:
            if a.n != b.n:
                raise ValueError("ReplaceOne neighbours must have equal size")
            differ = int(np.sum(np.any(a.features != b.features, axis=1) | (a.labels != b.labels)))
            if differ != self.k:
                raise ValueError(f"datasets differ in {differ} rows, expected k={self.k}")
        else:
            small, big = (a, b) if a.n <= b.n else (b, a)
            if big.n - small.n > self.k or big.n == small.n:
                raise ValueError("AddRemove neighbours must differ in size by 1..k rows")
            if not (np.array_equal(big.features[: small.n], small.features)
                    and np.array_equal(big.labels[: small.n], small.labels)):
                raise ValueError("AddRemove neighbours must share their common rows")


@dataclasses.dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: IntervalMethod

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.lower > self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclasses.dataclass(frozen=True)
class KPolicy:
    """Maps an audited epsilon to the number of poisoned copies k.

    ``steps`` is a sorted sequence of ``(eps_upper_inclusive, k)``; the
    first step whose bound covers epsilon wins.
    """

    steps: tuple[tuple[float, int], ...]

    def __post_init__(self):
        steps = tuple((float(u), int(k)) for u, k in self.steps)
        if not steps:
            raise ValueError("k policy needs at least one step")
        if any(k < 1 for _, k in steps):
            raise ValueError("k must be >= 1")
        if any(b[0] <= a[0] for a, b in zip(steps, steps[1:])):
            raise ValueError("k policy bounds must be strictly increasing")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def default(cls) -> KPolicy:
        return cls(((2.0, 8), (8.0, 2), (math.inf, 1)))

    @classmethod
    def constant(cls, k: int) -> KPolicy:
        return cls(((math.inf, k),))

    def select(self, epsilon: float) -> int:
        for upper, k in self.steps:
            if epsilon <= upper:
                return k
        raise ValueError(f"k policy does not cover epsilon={epsilon}")

    def to_json(self) -> list:
        return [[("inf" if math.isinf(u) else u), k] for u, k in self.steps]

    @classmethod
    def from_json(cls, obj: Sequence) -> KPolicy:
        return cls(tuple((math.inf if u in ("inf", math.inf) else float(u), int(k)) for u, k in obj))


def default_min_prob(samples_n: int) -> float:
    return max(0.01, 10.0 / samples_n)


@dataclasses.dataclass(frozen=True)
class AuditConfig:
    """Everything the estimator needs besides the mechanism and the pair.

    Attributes:
      spec: the claimed guarantee being audited.
      samples_n: retrainings per dataset per phase.
      alpha: confidence parameter; lower bounds use z_{alpha/2}.
      min_prob_r: thresholds whose denominator frequency falls below this
        are skipped. Defaults to max(0.01, 10/N).
      k_policy: poisoned-copy schedule.
      master_seed: root of every random stream in the audit.
      neighbor_def: neighbour notion the attack constructs.
      hidden_units: 0 for a linear posterior classifier, otherwise the
        width of a single tanh hidden layer.
      posterior_ridge: L2 penalty of the posterior classifier.
      delta_split: estimation with delta > 0; not supported.
      workers: process count for sample generation.
    """

    spec: PrivacySpec
    samples_n: int = 10_000
    alpha: float = 0.05
    min_prob_r: float | None = None
    k_policy: KPolicy = dataclasses.field(default_factory=KPolicy.default)
    master_seed: int = 0
    neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE
    hidden_units: int = 0
    posterior_ridge: float = 1e-4
    delta_split: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.samples_n < 2:
            raise ValueError("samples_n must be >= 2")
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 0.5]")
        r = default_min_prob(self.samples_n) if self.min_prob_r is None else float(self.min_prob_r)
        if not (1.0 / self.samples_n <= r < 1.0):
            raise ValueError(f"min_prob_r must lie in [1/N, 1), got {r}")
        object.__setattr__(self, "min_prob_r", r)
        if self.hidden_units < 0 or self.posterior_ridge < 0:
            raise ValueError("hidden_units and posterior_ridge must be non-negative")
        if self.delta_split:
            raise ValueError("delta > 0 estimation (delta_split) is not implemented")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        self.k_policy.select(self.spec.epsilon)
        object.__setattr__(self, "neighbor_def", NeighborDef(self.neighbor_def))

    def replace(self, **changes) -> AuditConfig:
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class AuditResult:
    """Outcome of one audit.

    ``eps_lb`` is already divided by k. ``used_complement`` means the
    verified set was the lower-score region with the poisoned dataset in
    the numerator.
    """

    eps_lb: float
    threshold_t: float
    used_complement: bool
    n1: int
    n0: int
    samples_n: int
    k: int
    interval: ConfidenceInterval
    search_eps_lb: float = -math.inf
    witness: dict = dataclasses.field(default_factory=dict)

    @property
    def detected(self) -> bool:
        return self.eps_lb > -math.inf

    def to_json_dict(self) -> dict:
        return {
            "eps_lb": _json_float(self.eps_lb),
            "threshold": self.threshold_t,
            "used_complement": self.used_complement,
            "n1": self.n1,
            "n0": self.n0,
            "N": self.samples_n,
            "k": self.k,
            "search_eps_lb": _json_float(self.search_eps_lb),
            "interval": [_json_float(self.interval.lower), _json_float(self.interval.upper)],
        }


def _json_float(v: float):
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return float(v)


# ---------------------------------------------------------------------------
# Statistical primitives
# ---------------------------------------------------------------------------


def z_crit(alpha: float) -> float:
    """Upper alpha/2 critical value of the standard normal."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(_norm.isf(alpha / 2.0))


def group_privacy_bound(spec: PrivacySpec, k: int, p_prime: float) -> float:
    """Upper bound on P(M(D) in S) when D, D' differ in k rows.

    Uses the closed-form geometric sum for delta; when 1 - e^eps is too
    small to divide by accurately the series is summed directly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 <= p_prime <= 1.0:
        raise ValueError("p_prime must be a probability")
    eps, delta = spec.epsilon, spec.delta
    head = math.exp(k * eps) * p_prime
    if delta == 0.0:
        return head
    if k == 1:
        return head + delta
    denom = -math.expm1(eps)
    if abs(denom) < sys.float_info.min:
        return head + delta * math.fsum(math.exp(j * eps) for j in range(k))
    return head + delta * (-math.expm1(k * eps)) / denom


def _validate_counts(n1, n0, samples_n):
    if samples_n < 1:
        raise ValueError("samples_n must be positive")
    if not (0 <= n1 <= samples_n and 0 <= n0 <= samples_n):
        raise ValueError(f"counts ({n1}, {n0}) outside [0, {samples_n}]")


def katz_log_interval(n1: int, n0: int, samples_n: int, alpha: float) -> ConfidenceInterval:
    """Katz log interval for ln(p1 / p0) from two binomial counts.

    A zero count in either slot gives lower = -inf; the audit clamps
    n0 to 1 before calling. Upper ends use n1 clamped to 1, and are +inf
    when n0 is zero.
    """
    _validate_counts(n1, n0, samples_n)
    z = z_crit(alpha)
    level = 1.0 - alpha
    if n1 == 0 and n0 == 0:
        return ConfidenceInterval(-math.inf, math.inf, level, IntervalMethod.KATZ_LOG)
    if n1 == 0:
        return ConfidenceInterval(-math.inf, _katz_upper(1, n0, samples_n, z), level,
                                  IntervalMethod.KATZ_LOG)
    if n0 == 0:
        return ConfidenceInterval(-math.inf, math.inf, level, IntervalMethod.KATZ_LOG)
    center = math.log(n1 / n0)
    var = 1.0 / n1 + 1.0 / n0 - 2.0 / samples_n
    half = z * math.sqrt(max(var, 0.0))
    return ConfidenceInterval(center - half, center + half, level, IntervalMethod.KATZ_LOG)


def _katz_lower(n1, n0, samples_n, z):
    return math.log(n1 / n0) - z * math.sqrt(max(1.0 / n1 + 1.0 / n0 - 2.0 / samples_n, 0.0))


def _katz_upper(n1, n0, samples_n, z):
    return math.log(n1 / n0) + z * math.sqrt(max(1.0 / n1 + 1.0 / n0 - 2.0 / samples_n, 0.0))


def katz_lower_bounds(n1: np.ndarray, n0: np.ndarray, samples_n: int, alpha: float) -> np.ndarray:
    """Vectorised Katz lower bound; entries with a zero count are -inf."""
    n1 = np.asarray(n1, dtype=float)
    n0 = np.asarray(n0, dtype=float)
    ok = (n1 > 0) & (n0 > 0)
    out = np.full(np.broadcast(n1, n0).shape, -np.inf)
    a, b = np.broadcast_arrays(n1, n0)
    a, b = a[ok], b[ok]
    var = np.maximum(1.0 / a + 1.0 / b - 2.0 / samples_n, 0.0)
    out[ok] = np.log(a / b) - z_crit(alpha) * np.sqrt(var)
    return out


def clopper_pearson_bounds(successes, trials: int, alpha: float):
    """One-sided (1 - alpha/2) Clopper-Pearson lower and upper bounds."""
    x = np.asarray(successes, dtype=float)
    lo = np.where(x > 0, _beta.ppf(alpha / 2.0, np.maximum(x, 1), trials - x + 1), 0.0)
    hi = np.where(x < trials, _beta.isf(alpha / 2.0, x + 1, np.maximum(trials - x, 1)), 1.0)
    return lo, hi


def clopper_pearson_ratio_lb(n1: int, n0: int, samples_n: int, alpha: float) -> float:
    """ln(CP-lower(p1) / CP-upper(p0)); the conservative baseline bound."""
    _validate_counts(n1, n0, samples_n)
    lo1, _ = clopper_pearson_bounds(n1, samples_n, alpha)
    _, hi0 = clopper_pearson_bounds(n0, samples_n, alpha)
    if lo1 <= 0.0:
        return -math.inf
    return math.log(float(lo1) / float(hi0))


def clopper_pearson_ratio_interval(n1: int, n0: int, samples_n: int, alpha: float) -> ConfidenceInterval:
    _validate_counts(n1, n0, samples_n)
    lo1, hi1 = clopper_pearson_bounds(n1, samples_n, alpha)
    lo0, hi0 = clopper_pearson_bounds(n0, samples_n, alpha)
    lower = math.log(lo1 / hi0) if lo1 > 0 else -math.inf
    upper = math.log(hi1 / lo0) if lo0 > 0 else math.inf
    return ConfidenceInterval(lower, upper, 1.0 - alpha, IntervalMethod.CLOPPER_PEARSON_RATIO)


def max_detectable_eps(samples_n: int, alpha: float) -> float:
    """Largest lower bound the estimator can ever report (n1 = N, n0 = 1)."""
    if samples_n < 2:
        raise ValueError("samples_n must be >= 2")
    return math.log(samples_n) - z_crit(alpha) * math.sqrt(1.0 - 1.0 / samples_n)


def katz_lower_supremum(samples_n: int, alpha: float) -> float:
    """Largest Katz lower bound over every count pair with N samples.

    Equals ``max_detectable_eps`` for the usual confidence levels, but for
    small alpha (or tiny N) a pair such as (N, 2) or (N, N) can exceed
    it, so hard ceiling checks use this value.
    """
    if samples_n < 2:
        raise ValueError("samples_n must be >= 2")
    n0 = np.arange(1, samples_n + 1)
    return float(np.max(katz_lower_bounds(np.full(n0.shape, samples_n), n0, samples_n, alpha)))


def coverage_simulate(
    p1: float,
    p0: float,
    samples_n: int,
    alpha: float,
    trials: int,
    method: IntervalMethod | str,
    seed=None,
) -> float:
    """Fraction of simulated count pairs whose interval covers ln(p1/p0).

    Zero counts follow the audit policy: n0 = 0 is clamped to 1 and
    n1 = 0 makes the lower end -inf (its upper end is computed with
    n1 clamped to 1).
    """
    if not (0 < p1 < 1 and 0 < p0 < 1):
        raise ValueError("p1 and p0 must lie in (0, 1)")
    if trials < 1000:
        raise ValueError("trials must be >= 1000")
    method = IntervalMethod(method)
    rng = as_rng(seed)
    n1 = rng.binomial(samples_n, p1, size=trials)
    n0 = rng.binomial(samples_n, p0, size=trials)
    truth = math.log(p1 / p0)
    if method is IntervalMethod.KATZ_LOG:
        a = np.maximum(n1, 1).astype(float)
        b = np.maximum(n0, 1).astype(float)
        half = z_crit(alpha) * np.sqrt(np.maximum(1 / a + 1 / b - 2 / samples_n, 0.0))
        center = np.log(a / b)
        lower = np.where(n1 == 0, -np.inf, center - half)
        upper = center + half
    else:
        lo1, hi1 = clopper_pearson_bounds(n1, samples_n, alpha)
        lo0, hi0 = clopper_pearson_bounds(n0, samples_n, alpha)
        with np.errstate(divide="ignore"):
            lower = np.where(lo1 > 0, np.log(lo1 / hi0), -np.inf)
            upper = np.where(lo0 > 0, np.log(hi1 / lo0), np.inf)
    return float(np.mean((lower <= truth) & (truth <= upper)))
