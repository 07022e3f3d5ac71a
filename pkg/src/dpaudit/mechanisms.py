"""Reference DP learners and their summary functions.

Each learner is a pure function of (data, privacy spec, hyperparameters,
seed). Every learner also takes ``noise_multiplier``; values below 1
shrink the noise and so break the stated guarantee on purpose, which is
how the violation-detection tests get a known-bad mechanism.

Learners are split into a deterministic ``prepare`` step (statistics that
do not depend on the seed) and a randomized release step, so that an
audit drawing thousands of samples does the expensive part once.
"""
from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np
from scipy.special import expit

from dpaudit.core import Dataset, NeighborDef, PrivacySpec, as_rng

LOGISTIC_CURVATURE = 0.25  # bound on the second derivative of the logistic loss
NEWTON_MAX_ITER = 500
NEWTON_GRAD_TOL = 1e-8


class MechanismError(RuntimeError):
    pass


class ConvergenceError(MechanismError):
    pass


class Constraint(str, enum.Enum):
    RECTANGLE = "rectangle"
    L2_BALL = "l2_ball"


class MechanismKind(str, enum.Enum):
    LAPLACE_MEAN = "laplace_mean"
    GAUSSIAN_NB = "gaussian_nb"
    LOGREG_OUTPUT = "logreg_output"
    LOGREG_OBJECTIVE = "logreg_objective"
    RANDOM_FOREST = "random_forest"

    @property
    def constraint(self) -> Constraint:
        if self in (MechanismKind.LOGREG_OUTPUT, MechanismKind.LOGREG_OBJECTIVE):
            return Constraint.L2_BALL
        return Constraint.RECTANGLE

    @property
    def native_neighbor_def(self) -> NeighborDef:
        if self is MechanismKind.RANDOM_FOREST:
            return NeighborDef.ADD_REMOVE
        return NeighborDef.REPLACE_ONE


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def laplace_noise(scale: float, seed=None, size=None):
    """Laplace(0, scale) draw(s)."""
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    out = as_rng(seed).laplace(0.0, scale, size=size)
    return float(out) if size is None else out


def exponential_probabilities(utilities, epsilon: float, sensitivity: float) -> np.ndarray:
    """Selection probabilities proportional to exp(eps * u / (2 * sensitivity))."""
    u = np.asarray(utilities, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("need a non-empty vector of utilities")
    if not np.all(np.isfinite(u)):
        raise ValueError("utilities must be finite")
    if not (epsilon > 0 and sensitivity > 0):
        raise ValueError("epsilon and sensitivity must be positive")
    logits = epsilon * u / (2.0 * sensitivity)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def exponential_choice(utilities, epsilon: float, sensitivity: float, seed=None) -> int:
    """Index sampled by the exponential mechanism."""
    p = exponential_probabilities(utilities, epsilon, sensitivity)
    u = as_rng(seed).random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, p.size - 1)


def rf_majority_probability(j, epsilon: float):
    """P(leaf takes its majority label) for majority excess ``j``.

    Utility is 1 for the majority label and 0 otherwise, with sensitivity
    e^{-j eps}; so the probability is sigmoid(eps * e^{j eps} / 2). An
    empty or tied leaf (j = 0) is labelled uniformly.
    """
    j = np.asarray(j, dtype=float)
    with np.errstate(over="ignore"):
        logit = 0.5 * epsilon * np.exp(np.minimum(j * epsilon, 700.0))
    return np.where(j > 0, expit(logit), 0.5)


def _random_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def gamma_norm_noise(rng: np.random.Generator, dim: int, scale: float) -> np.ndarray:
    """Vector with density proportional to exp(-||b|| / scale)."""
    return rng.gamma(dim, scale) * _random_direction(rng, dim)


class BudgetLedger:
    """Records each release's share of epsilon and checks the total."""

    def __init__(self, total: float):
        self.total = total
        self.entries: list[tuple[str, float]] = []

    def spend(self, name: str, eps: float) -> float:
        self.entries.append((name, eps))
        return eps

    def close(self) -> tuple[tuple[str, float], ...]:
        spent = math.fsum(e for _, e in self.entries)
        if not math.isclose(spent, self.total, rel_tol=1e-12):
            raise MechanismError(f"budget ledger spent {spent}, expected {self.total}")
        return tuple(self.entries)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class LaplaceMeanModel:
    mean: np.ndarray


@dataclasses.dataclass(frozen=True)
class NBModel:
    """Gaussian naive Bayes parameters; row index is the class."""

    mu: np.ndarray
    sigma2: np.ndarray
    prior: np.ndarray
    raw_counts: np.ndarray | None = None
    budget: tuple[tuple[str, float], ...] = ()

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        ll = -0.5 * (np.log(2 * np.pi * self.sigma2)[None] + (x[:, None, :] - self.mu[None]) ** 2 / self.sigma2[None]).sum(-1)
        ll += np.log(np.clip(self.prior, 1e-300, None))[None]
        ll -= ll.max(axis=1, keepdims=True)
        p = np.exp(ll)
        return p[:, 1] / p.sum(axis=1)


@dataclasses.dataclass(frozen=True)
class LRModel:
    """Logistic regression on the feature map [x / R, 1] / sqrt(2)."""

    theta: np.ndarray
    regularization_c: float
    l2_radius: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return lr_feature_map(np.atleast_2d(x), self.l2_radius) @ self.theta

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.decision(x))


@dataclasses.dataclass(frozen=True)
class RFModel:
    """Random forest stored as heap-ordered arrays.

    Node i has children 2i+1 and 2i+2; ``feature`` and ``threshold`` have
    shape (m, 2^depth - 1), ``leaf_label`` has shape (m, 2^depth).
    A point goes right when x[feature] > threshold.
    """

    feature: np.ndarray
    threshold: np.ndarray
    leaf_label: np.ndarray
    depth: int

    @property
    def m(self) -> int:
        return self.feature.shape[0]

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        """Leaf reached by each point in each tree, shape (m, n)."""
        x = np.atleast_2d(x)
        node = np.zeros((self.m, x.shape[0]), dtype=np.int64)
        trees = np.arange(self.m)[:, None]
        for _ in range(self.depth):
            f = self.feature[trees, node]
            go_right = x[np.arange(x.shape[0])[None, :], f] > self.threshold[trees, node]
            node = 2 * node + 1 + go_right
        return node - (2**self.depth - 1)

    def leaf_index_in(self, x: np.ndarray, trees: np.ndarray) -> np.ndarray:
        """Leaf reached by row i in tree ``trees[i]``."""
        rows = np.arange(x.shape[0])
        node = np.zeros(x.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            go_right = x[rows, self.feature[trees, node]] > self.threshold[trees, node]
            node = 2 * node + 1 + go_right
        return node - (2**self.depth - 1)

    def tree_votes(self, x: np.ndarray) -> np.ndarray:
        leaves = self.leaf_index(x)
        return self.leaf_label[np.arange(self.m)[:, None], leaves]


# ---------------------------------------------------------------------------
# Laplace mean
# ---------------------------------------------------------------------------


def train_laplace_mean(data: Dataset, spec: PrivacySpec, seed=None, noise_multiplier: float = 1.0):
    """Feature mean with Laplace noise; L1 sensitivity sum(widths) / n."""
    return _release_laplace_mean(_prepare_laplace_mean(data), spec, as_rng(seed), noise_multiplier)


def _prepare_laplace_mean(data: Dataset):
    return data.features.mean(axis=0), float(data.widths.sum()) / data.n


def _release_laplace_mean(state, spec, rng, mult):
    mean, l1 = state
    if l1 == 0:
        return LaplaceMeanModel(mean.copy())
    return LaplaceMeanModel(mean + rng.laplace(0.0, mult * l1 / spec.epsilon, size=mean.shape))


# ---------------------------------------------------------------------------
# Gaussian naive Bayes
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class _NBStats:
    mu: np.ndarray
    var: np.ndarray
    counts: np.ndarray
    n: int
    mu_l1: float
    var_l1: float
    floor: np.ndarray


def nb_sensitivities(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-class, per-feature ReplaceOne sensitivities of the ML mean and variance.

    Mean: width / n_y. Variance: width^2 (n_y - 1) / n_y^2.
    """
    n_y = data.class_counts().astype(float)[:, None]
    w = data.widths[None, :]
    return w / n_y, w**2 * (n_y - 1) / n_y**2


def _prepare_nb(data: Dataset) -> _NBStats:
    counts = data.class_counts()
    if counts.min() < 2:
        raise MechanismError("each class needs at least two rows for a variance estimate")
    mu = np.stack([data.features[data.labels == y].mean(axis=0) for y in (0, 1)])
    var = np.stack([data.features[data.labels == y].var(axis=0) for y in (0, 1)])
    s_mu, s_var = nb_sensitivities(data)
    floor = np.maximum(1e-9 * data.widths**2, 1e-300)
    return _NBStats(mu, var, counts, data.n, float(s_mu.sum()), float(s_var.sum()), floor)


def _release_nb(st: _NBStats, spec: PrivacySpec, rng, leaky_counts: bool, mult: float) -> NBModel:
    ledger = BudgetLedger(spec.epsilon)
    eps_mu = ledger.spend("mu", spec.epsilon / 3)
    eps_var = ledger.spend("sigma2", spec.epsilon / 3)
    eps_pi = ledger.spend("prior", spec.epsilon / 3)
    budget = ledger.close()
    d = st.mu.shape[1]
    mu = st.mu + (rng.laplace(0.0, mult * st.mu_l1 / eps_mu, size=(2, d)) if st.mu_l1 > 0 else 0.0)
    var = st.var + (rng.laplace(0.0, mult * st.var_l1 / eps_var, size=(2, d)) if st.var_l1 > 0 else 0.0)
    var = np.maximum(var, st.floor[None, :])
    # Only pi_1 is released; pi_0 = 1 - pi_1 is post-processing.
    pi1 = st.counts[1] / st.n + rng.laplace(0.0, mult * (1.0 / st.n) / eps_pi)
    pi1 = min(max(pi1, 0.0), 1.0)
    prior = np.array([1.0 - pi1, pi1])
    raw = prior * st.n if leaky_counts else None
    return NBModel(mu, var, prior, raw, budget)


def train_dp_nb(data: Dataset, spec: PrivacySpec, leaky_counts: bool = False, seed=None,
                noise_multiplier: float = 1.0) -> NBModel:
    """Gaussian naive Bayes with Laplace-perturbed sufficient statistics.

    The budget is split evenly between the means, the variances and the
    class prior. Within the mean (and variance) block every coordinate gets
    Laplace noise scaled to the L1 sensitivity of the whole 2 x d block,
    because one replaced row can move both classes' statistics. The
    variance is floored at 1e-9 * width^2.

    In leaky mode the model also exposes per-class counts n * prior. They
    are derived from the noisy prior, but they always sum to the true n,
    so the dataset size leaks.
    """
    return _release_nb(_prepare_nb(data), spec, as_rng(seed), leaky_counts, noise_multiplier)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------


def lr_feature_map(x: np.ndarray, l2_radius: float) -> np.ndarray:
    """Scales rows into the unit ball and appends an intercept column."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = l2_radius if l2_radius > 0 else 1.0
    return np.hstack([x / r, np.ones((x.shape[0], 1))]) / math.sqrt(2.0)


def fit_logreg(xt: np.ndarray, y: np.ndarray, lam: float, linear=None, extra_l2: float = 0.0,
               sample_weight=None, max_iter: int = NEWTON_MAX_ITER, tol: float = NEWTON_GRAD_TOL):
    """Newton's method on mean logistic loss + (lam + extra_l2)/2 ||theta||^2 + linear.theta.

    Returns (theta, converged). Mean loss is weighted by ``sample_weight``
    normalised by the row count (so duplicated rows count twice).
    """
    n, dim = xt.shape
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    wts = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    reg = lam + extra_l2
    lin = np.zeros(dim) if linear is None else linear

    def objective(th):
        margins = s * (xt @ th)
        return float(wts @ np.logaddexp(0.0, -margins)) / n + 0.5 * reg * th @ th + lin @ th

    theta = np.zeros(dim)
    f = objective(theta)
    for _ in range(max_iter):
        z = xt @ theta
        p = expit(z)
        grad = xt.T @ (wts * (p - (s > 0))) / n + reg * theta + lin
        if np.max(np.abs(grad)) < tol:
            return theta, True
        h = (xt.T * (wts * p * (1 - p))) @ xt / n + reg * np.eye(dim)
        step = np.linalg.solve(h, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * grad @ step or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    return theta, False


def _check_lr_inputs(data: Dataset, c: float):
    if not c > 0:
        raise ValueError("regularization c must be positive")
    if data.l2_radius <= 0:
        raise MechanismError("l2_radius must be positive for logistic regression")


def _prepare_lr(data: Dataset, c: float):
    _check_lr_inputs(data, c)
    return lr_feature_map(data.features, data.l2_radius), data.labels, 1.0 / (data.n * c)


def nonprivate_lr(data: Dataset, c: float) -> LRModel:
    xt, y, lam = _prepare_lr(data, c)
    theta, ok = fit_logreg(xt, y, lam)
    if not ok:
        raise ConvergenceError(f"non-private logistic regression did not converge (c={c})")
    return LRModel(theta, c, data.l2_radius)


def _release_lr_output(state, spec, rng, c, mult, l2_radius):
    theta_hat, n, lam = state
    scale = mult * 2.0 / (n * lam * spec.epsilon)
    return LRModel(theta_hat + gamma_norm_noise(rng, theta_hat.size, scale), c, l2_radius)


def train_dp_lr_output(data: Dataset, spec: PrivacySpec, c: float = 0.01, seed=None,
                       noise_multiplier: float = 1.0) -> LRModel:
    """Output perturbation: non-private fit plus noise of norm Gamma(d, 2/(n lam eps))."""
    xt, y, lam = _prepare_lr(data, c)
    theta, ok = fit_logreg(xt, y, lam)
    if not ok:
        raise ConvergenceError(f"output perturbation fit did not converge (eps={spec.epsilon}, c={c})")
    return _release_lr_output((theta, data.n, lam), spec, as_rng(seed), c, noise_multiplier,
                              data.l2_radius)


def objective_perturbation_params(n: int, lam: float, epsilon: float) -> tuple[float, float]:
    """(eps', extra ridge Delta) for objective perturbation with the logistic loss."""
    q = LOGISTIC_CURVATURE / (n * lam)
    eps_p = epsilon - math.log1p(2 * q + q * q)
    if eps_p > 0:
        return eps_p, 0.0
    delta = LOGISTIC_CURVATURE / (n * math.expm1(epsilon / 4)) - lam
    return epsilon / 2, max(delta, 0.0)


def _release_lr_objective(state, spec, rng, c, mult, l2_radius):
    xt, y, lam = state
    n = xt.shape[0]
    eps_p, delta = objective_perturbation_params(n, lam, spec.epsilon)
    b = mult * gamma_norm_noise(rng, xt.shape[1], 2.0 / eps_p)
    theta, ok = fit_logreg(xt, y, lam, linear=b / n, extra_l2=delta)
    if not ok:
        raise ConvergenceError(
            f"objective perturbation did not converge within {NEWTON_MAX_ITER} iterations "
            f"(eps={spec.epsilon}, c={c}); try a larger c")
    return LRModel(theta, c, l2_radius)


def train_dp_lr_objective(data: Dataset, spec: PrivacySpec, c: float = 1.0, seed=None,
                          noise_multiplier: float = 1.0) -> LRModel:
    """Objective perturbation: a random linear term b.theta / n is added before fitting."""
    return _release_lr_objective(_prepare_lr(data, c), spec, as_rng(seed), c, noise_multiplier,
                                 data.l2_radius)


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------


def rf_split_features(data: Dataset) -> np.ndarray:
    feats = np.flatnonzero(~np.asarray(data.categorical, dtype=bool))
    if feats.size == 0:
        raise MechanismError("random forest needs at least one numeric feature")
    return feats


def rf_tree_assignment(n: int, m: int) -> np.ndarray:
    """Row i trains tree i mod m, so trees see disjoint rows."""
    return np.arange(n) % m


def _rf_structure(bounds: np.ndarray, feats: np.ndarray, m: int, depth: int, rng):
    n_internal = 2**depth - 1
    feat_u = rng.random((m, n_internal))
    thr_u = rng.random((m, n_internal))
    leaf_u = rng.random((m, 2**depth))
    feature = feats[np.minimum((feat_u * feats.size).astype(np.int64), feats.size - 1)]
    lo = np.broadcast_to(bounds[:, 0], (m, bounds.shape[0])).copy()
    hi = np.broadcast_to(bounds[:, 1], (m, bounds.shape[0])).copy()
    threshold = np.empty((m, n_internal))
    # Walk the heap level by level, carrying each node's box.
    boxes_lo, boxes_hi = lo[:, None, :], hi[:, None, :]
    trees = np.arange(m)[:, None]
    for level in range(depth):
        start = 2**level - 1
        idx = np.arange(start, 2 * start + 1)
        f = feature[:, idx]
        a = np.take_along_axis(boxes_lo, f[..., None], axis=2)[..., 0]
        b = np.take_along_axis(boxes_hi, f[..., None], axis=2)[..., 0]
        thr = a + thr_u[:, idx] * (b - a)
        threshold[:, idx] = thr
        left_hi = boxes_hi.copy()
        right_lo = boxes_lo.copy()
        cols = np.arange(idx.size)[None, :]
        left_hi[trees, cols, f] = thr
        right_lo[trees, cols, f] = thr
        boxes_lo = np.stack([boxes_lo, right_lo], axis=2).reshape(m, -1, bounds.shape[0])
        boxes_hi = np.stack([left_hi, boxes_hi], axis=2).reshape(m, -1, bounds.shape[0])
    return feature, threshold, leaf_u


def rf_leaf_counts(model_like: RFModel, x: np.ndarray, y: np.ndarray, tree_of_row: np.ndarray):
    """Per-tree, per-leaf label counts, shape (m, 2^depth, 2)."""
    m, n_leaves = model_like.m, 2**model_like.depth
    leaves = model_like.leaf_index_in(x, tree_of_row)
    flat = (tree_of_row * n_leaves + leaves) * 2 + y
    return np.bincount(flat, minlength=m * n_leaves * 2).reshape(m, n_leaves, 2)


def rf_effective_epsilon(epsilon: float, neighbor_def: NeighborDef, noise_multiplier: float) -> float:
    """Exponent used in the leaf rule; ReplaceOne spends half per side."""
    eps = epsilon / noise_multiplier
    return eps / 2 if NeighborDef(neighbor_def) is NeighborDef.REPLACE_ONE else eps


def train_dp_rf(data: Dataset, spec: PrivacySpec, m: int = 15, depth: int = 10,
                neighbor_def: NeighborDef = NeighborDef.ADD_REMOVE, seed=None,
                noise_multiplier: float = 1.0) -> RFModel:
    """Random-split forest with exponential-mechanism leaf labels.

    Splits are drawn from the bounds alone (uniform numeric feature,
    uniform threshold inside the node's box), so they never depend on the
    rows. Rows are dealt to trees round robin and each tree labels its
    leaves from its own rows with the full budget (disjoint subsets).
    ``neighbor_def`` picks the sensitivity convention of the leaf rule.
    """
    if m < 1 or depth < 1:
        raise ValueError("m and depth must be >= 1")
    if depth > 16:
        raise ValueError("depth > 16 is not supported")
    rng = as_rng(seed)
    feature, threshold, leaf_u = _rf_structure(data.bounds, rf_split_features(data), m, depth, rng)
    skeleton = RFModel(feature, threshold, np.zeros((m, 2**depth), dtype=np.int64), depth)
    counts = rf_leaf_counts(skeleton, data.features, data.labels, rf_tree_assignment(data.n, m))
    c0, c1 = counts[..., 0], counts[..., 1]
    eps = rf_effective_epsilon(spec.epsilon, neighbor_def, noise_multiplier)
    p_major = rf_majority_probability(np.abs(c1 - c0), eps)
    p_one = np.where(c1 > c0, p_major, np.where(c0 > c1, 1.0 - p_major, 0.5))
    labels = (leaf_u < p_one).astype(np.int64)
    return RFModel(feature, threshold, labels, depth)


def rf_probe_votes(data: Dataset, spec: PrivacySpec, probe, m: int = 15, depth: int = 10,
                   neighbor_def: NeighborDef = NeighborDef.ADD_REMOVE, seed=None,
                   noise_multiplier: float = 1.0) -> np.ndarray:
    """Per-tree labels at ``probe``; equal to ``train_dp_rf(...).tree_votes(probe)``.

    Consumes the same random draws as :func:`train_dp_rf` but only builds
    the root-to-leaf path of the probe in each tree.
    """
    rng = as_rng(seed)
    feats = rf_split_features(data)
    n_internal = 2**depth - 1
    feat_u = rng.random((m, n_internal))
    thr_u = rng.random((m, n_internal))
    leaf_u = rng.random((m, 2**depth))
    probe = np.asarray(probe, dtype=float)
    x, y = data.features, data.labels
    tree_of_row = rf_tree_assignment(data.n, m)
    rows = np.arange(data.n)
    trees = np.arange(m)
    lo = np.tile(data.bounds[:, 0], (m, 1))
    hi = np.tile(data.bounds[:, 1], (m, 1))
    node = np.zeros(m, dtype=np.int64)
    on_path = np.ones(data.n, dtype=bool)
    for _ in range(depth):
        f = feats[np.minimum((feat_u[trees, node] * feats.size).astype(np.int64), feats.size - 1)]
        a, b = lo[trees, f], hi[trees, f]
        thr = a + thr_u[trees, node] * (b - a)
        right = probe[f] > thr
        lo[trees[right], f[right]] = thr[right]
        hi[trees[~right], f[~right]] = thr[~right]
        on_path &= (x[rows, f[tree_of_row]] > thr[tree_of_row]) == right[tree_of_row]
        node = 2 * node + 1 + right
    leaf = node - n_internal
    hit = tree_of_row[on_path]
    c1 = np.bincount(hit, weights=y[on_path], minlength=m)
    c0 = np.bincount(hit, minlength=m) - c1
    eps = rf_effective_epsilon(spec.epsilon, neighbor_def, noise_multiplier)
    p_major = rf_majority_probability(np.abs(c1 - c0), eps)
    p_one = np.where(c1 > c0, p_major, np.where(c0 > c1, 1.0 - p_major, 0.5))
    return (leaf_u[trees, leaf] < p_one).astype(np.int64)


# ---------------------------------------------------------------------------
# Summaries and the mechanism descriptor
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SummarySpec:
    """Selects the summary vector; ``expected_dim`` pins its length."""

    include_raw_counts: bool = True
    expected_dim: int | None = None


def summarize(kind: MechanismKind, model, spec: SummarySpec = SummarySpec(), probe_point=None) -> np.ndarray:
    """Embeds a trained model as a real vector."""
    kind = MechanismKind(kind)
    if kind is MechanismKind.LAPLACE_MEAN:
        out = np.asarray(model.mean, dtype=float)
    elif kind is MechanismKind.GAUSSIAN_NB:
        parts = [model.mu.ravel(), model.sigma2.ravel(), model.prior]
        if spec.include_raw_counts and model.raw_counts is not None:
            parts.append(model.raw_counts)
        out = np.concatenate(parts)
    elif kind in (MechanismKind.LOGREG_OUTPUT, MechanismKind.LOGREG_OBJECTIVE):
        out = np.asarray(model.theta, dtype=float)
    else:
        if probe_point is None:
            raise ValueError("random forest summary needs a probe point")
        out = model.tree_votes(np.asarray(probe_point, dtype=float)[None, :])[:, 0].astype(float)
    if spec.expected_dim is not None and out.size != spec.expected_dim:
        raise ValueError(f"summary has dimension {out.size}, audit expects {spec.expected_dim}")
    if not np.all(np.isfinite(out)):
        raise MechanismError("summary vector has non-finite entries")
    return out


@dataclasses.dataclass(frozen=True)
class Mechanism:
    """A configured learner: kind plus hyperparameters.

    Attributes:
      kind: which learner.
      noise_multiplier: scales all noise; 1.0 is the correct mechanism.
      c: inverse regularization for the logistic-regression kinds; None
        picks 0.01 for output and 1.0 for objective perturbation.
      leaky_counts: naive Bayes exposes per-class counts.
      m, depth: forest size.
      rf_neighbor_def: sensitivity convention of the forest's leaf rule.
    """

    kind: MechanismKind
    noise_multiplier: float = 1.0
    c: float | None = None
    leaky_counts: bool = False
    m: int = 15
    depth: int = 10
    rf_neighbor_def: NeighborDef = NeighborDef.ADD_REMOVE

    def __post_init__(self):
        object.__setattr__(self, "kind", MechanismKind(self.kind))
        object.__setattr__(self, "rf_neighbor_def", NeighborDef(self.rf_neighbor_def))
        if not self.noise_multiplier > 0:
            raise ValueError("noise_multiplier must be positive")
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")

    @property
    def reg_c(self) -> float:
        if self.c is not None:
            return self.c
        return 0.01 if self.kind is MechanismKind.LOGREG_OUTPUT else 1.0

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "noise_multiplier": self.noise_multiplier,
            "c": self.reg_c if self.kind.constraint is Constraint.L2_BALL else None,
            "leaky_counts": self.leaky_counts,
            "m": self.m,
            "depth": self.depth,
            "rf_neighbor_def": self.rf_neighbor_def.value,
        }

    def train(self, data: Dataset, spec: PrivacySpec, seed=None):
        k, mult = self.kind, self.noise_multiplier
        if k is MechanismKind.LAPLACE_MEAN:
            return train_laplace_mean(data, spec, seed, mult)
        if k is MechanismKind.GAUSSIAN_NB:
            return train_dp_nb(data, spec, self.leaky_counts, seed, mult)
        if k is MechanismKind.LOGREG_OUTPUT:
            return train_dp_lr_output(data, spec, self.reg_c, seed, mult)
        if k is MechanismKind.LOGREG_OBJECTIVE:
            return train_dp_lr_objective(data, spec, self.reg_c, seed, mult)
        return train_dp_rf(data, spec, self.m, self.depth, self.rf_neighbor_def, seed, mult)

    def prepare(self, data: Dataset, spec: PrivacySpec):
        """Seed-independent state for :meth:`release`."""
        k = self.kind
        if k is MechanismKind.LAPLACE_MEAN:
            return _prepare_laplace_mean(data)
        if k is MechanismKind.GAUSSIAN_NB:
            return _prepare_nb(data)
        if k is MechanismKind.LOGREG_OUTPUT:
            xt, y, lam = _prepare_lr(data, self.reg_c)
            theta, ok = fit_logreg(xt, y, lam)
            if not ok:
                raise ConvergenceError(
                    f"output perturbation fit did not converge (eps={spec.epsilon}, c={self.reg_c})")
            return theta, data.n, lam
        if k is MechanismKind.LOGREG_OBJECTIVE:
            return _prepare_lr(data, self.reg_c)
        return data

    def release(self, state, data: Dataset, spec: PrivacySpec, rng: np.random.Generator):
        """Same model as ``train(data, spec, rng)`` for a fresh ``rng``."""
        k, mult = self.kind, self.noise_multiplier
        if k is MechanismKind.LAPLACE_MEAN:
            return _release_laplace_mean(state, spec, rng, mult)
        if k is MechanismKind.GAUSSIAN_NB:
            return _release_nb(state, spec, rng, self.leaky_counts, mult)
        if k is MechanismKind.LOGREG_OUTPUT:
            return _release_lr_output(state, spec, rng, self.reg_c, mult, data.l2_radius)
        if k is MechanismKind.LOGREG_OBJECTIVE:
            return _release_lr_objective(state, spec, rng, self.reg_c, mult, data.l2_radius)
        return train_dp_rf(state, spec, self.m, self.depth, self.rf_neighbor_def, rng, mult)

    def release_summary(self, state, data: Dataset, spec: PrivacySpec, rng: np.random.Generator,
                        sspec: SummarySpec, probe=None) -> np.ndarray:
        """``summarize(release(...))``, with a shortcut for forests."""
        if self.kind is MechanismKind.RANDOM_FOREST:
            if probe is None:
                raise ValueError("random forest summary needs a probe point")
            out = rf_probe_votes(data, spec, probe, self.m, self.depth, self.rf_neighbor_def, rng,
                                 self.noise_multiplier).astype(float)
            if sspec.expected_dim is not None and out.size != sspec.expected_dim:
                raise ValueError(f"summary has dimension {out.size}, audit expects {sspec.expected_dim}")
            return out
        return summarize(self.kind, self.release(state, data, spec, rng), sspec, probe)

    def summary_spec(self, d: int) -> SummarySpec:
        return SummarySpec(True, self.summary_dim(d))

    def summary_dim(self, d: int) -> int:
        k = self.kind
        if k is MechanismKind.LAPLACE_MEAN:
            return d
        if k is MechanismKind.GAUSSIAN_NB:
            return 4 * d + 2 + (2 if self.leaky_counts else 0)
        if k is MechanismKind.RANDOM_FOREST:
            return self.m
        return d + 1
