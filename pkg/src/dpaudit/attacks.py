"""Poisoning attacks that build the neighbouring pair (D, D').

Each attack picks a crafted point (x*, y*) and ranked victim rows. Under
ReplaceOne the top k victims are overwritten with copies of (x*, y*);
under AddRemove k copies are appended. The witness dict records what was
done and carries the probe point used by forest summaries.
"""
from __future__ import annotations

import dataclasses
import enum

import numpy as np
from scipy.special import expit

from dpaudit.core import Dataset, KPolicy, NeighborDef, NeighborPair, as_rng
from dpaudit.mechanisms import fit_logreg, lr_feature_map, rf_majority_probability


class AttackError(RuntimeError):
    pass


class AttackKind(str, enum.Enum):
    INFLUENCE_PGA = "influence_pga"
    NB_CORNER_FLIP = "nb_corner_flip"
    NB_CORNER_MEAN = "nb_corner_mean"  # mean-only variant: moves the point, keeps its label
    RF_ISOLATION_FLIP = "rf_isolation_flip"
    CLIPBKD = "clipbkd"
    SWAP_X = "swap_x"


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    """Attack choice and knobs. ``pga_step_size`` None means 0.05 * ball radius."""

    kind: AttackKind
    k: int = 1
    pga_steps: int = 200
    pga_step_size: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.pga_steps < 1:
            raise ValueError("pga_steps must be positive")
        if self.pga_step_size is not None and not self.pga_step_size > 0:
            raise ValueError("pga_step_size must be positive")


@dataclasses.dataclass(frozen=True)
class LRParams:
    """Surrogate logistic regression used by the LR attacks."""

    c: float = 0.01


def select_k(epsilon_th: float, policy: KPolicy | None = None) -> int:
    return (policy or KPolicy.default()).select(epsilon_th)


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------


def _build_pair(data: Dataset, victims, x_star, y_star: int, k: int, neighbor_def: NeighborDef,
                widen_bounds: bool, witness: dict) -> NeighborPair:
    x_star = np.asarray(x_star, dtype=float)
    neighbor_def = NeighborDef(neighbor_def)
    bounds = data.bounds
    if widen_bounds:
        bounds = np.stack([np.minimum(bounds[:, 0], x_star), np.maximum(bounds[:, 1], x_star)], axis=1)
    radius = max(data.l2_radius, float(np.linalg.norm(x_star)))
    if neighbor_def is NeighborDef.REPLACE_ONE:
        chosen = [int(v) for v in victims if not (np.array_equal(data.features[v], x_star)
                                                  and data.labels[v] == y_star)][:k]
        if len(chosen) < k:
            raise AttackError(f"only {len(chosen)} usable victim rows for k={k}")
        x = np.array(data.features)
        y = np.array(data.labels)
        x[chosen] = x_star
        y[chosen] = y_star
    else:
        chosen = []
        x = np.vstack([data.features, np.tile(x_star, (k, 1))])
        y = np.concatenate([data.labels, np.full(k, y_star)])
    poisoned = Dataset(x, y, bounds, radius, data.categorical, data.feature_names)
    original = data
    if widen_bounds or radius != data.l2_radius:
        original = Dataset(data.features, data.labels, bounds, radius, data.categorical,
                           data.feature_names)
    witness = dict(witness, victims=chosen, x_star=x_star.tolist(), y_star=int(y_star), k=k,
                   neighbor_def=neighbor_def.value, probe=x_star.tolist())
    return NeighborPair(original, poisoned, k, neighbor_def, witness)


def corner_distances(data: Dataset) -> np.ndarray:
    """L-infinity distance from each row to the nearest corner of the bounds."""
    lo, hi = data.bounds[:, 0], data.bounds[:, 1]
    per_axis = np.minimum(data.features - lo, hi - data.features)
    return per_axis.max(axis=1)


def _ranked(scores: np.ndarray, descending: bool = False) -> np.ndarray:
    return np.argsort(-scores if descending else scores, kind="stable")


# ---------------------------------------------------------------------------
# Naive Bayes
# ---------------------------------------------------------------------------


def nb_corner_flip_attack(data: Dataset, spec: AttackSpec,
                          neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Flips the label of the row nearest a corner of the bounding box.

    Further victims (k > 1) are the next-nearest rows of the same class,
    so every replacement is a label flip of the same kind.
    """
    dist = corner_distances(data)
    top = int(_ranked(dist)[0])
    y = int(data.labels[top])
    order = [int(i) for i in _ranked(dist) if data.labels[i] == y]
    return _build_pair(data, order, data.features[top], 1 - y, spec.k, neighbor_def, False,
                       {"attack": AttackKind.NB_CORNER_FLIP.value, "seed_row": top,
                        "corner_distance": float(dist[top])})


def nb_corner_mean_attack(data: Dataset, spec: AttackSpec,
                          neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Mean-only variant: moves the corner row to the opposite corner, label unchanged."""
    dist = corner_distances(data)
    top = int(_ranked(dist)[0])
    y = int(data.labels[top])
    lo, hi = data.bounds[:, 0], data.bounds[:, 1]
    x = data.features[top]
    near_lo = (x - lo) <= (hi - x)
    x_star = np.where(near_lo, hi, lo)
    order = [int(i) for i in _ranked(dist) if data.labels[i] == y]
    return _build_pair(data, order, x_star, y, spec.k, neighbor_def, False,
                       {"attack": AttackKind.NB_CORNER_MEAN.value, "seed_row": top})


# ---------------------------------------------------------------------------
# Logistic regression: influence functions
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class InfluenceContext:
    """Quantities of a converged non-private fit needed for influence.

    ``hessian_inv`` is (X^T W X + reg I)^{-1} for the sum-form objective
    sum_i loss_i + reg/2 ||theta||^2, where reg = n * lambda = 1 / c.
    Vectors live in the model's feature space (see ``lr_feature_map``).
    """

    w_diag: np.ndarray
    hessian_inv: np.ndarray
    theta_hat: np.ndarray
    l2_radius: float = 1.0


def build_influence_context(data: Dataset, lr_params: LRParams = LRParams()) -> InfluenceContext:
    xt = lr_feature_map(data.features, data.l2_radius)
    n = xt.shape[0]
    reg = 1.0 / lr_params.c
    theta, ok = fit_logreg(xt, data.labels, reg / n)
    if not ok:
        raise AttackError(f"surrogate fit did not converge (c={lr_params.c})")
    p = expit(xt @ theta)
    w = p * (1 - p)
    h = (xt.T * w) @ xt + reg * np.eye(xt.shape[1])
    try:
        h_inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise AttackError("singular Hessian in influence computation") from exc
    if not np.all(np.isfinite(h_inv)):
        raise AttackError("singular Hessian in influence computation")
    return InfluenceContext(w, (h_inv + h_inv.T) / 2, theta, data.l2_radius)


def influence_vector(ctx: InfluenceContext, x, y: int) -> np.ndarray:
    """(y - y_hat) H^{-1} x for a point already in model feature space."""
    x = np.asarray(x, dtype=float)
    y_hat = expit(float(x @ ctx.theta_hat))
    return (y - y_hat) * (ctx.hessian_inv @ x)


def influence_of_row(ctx: InfluenceContext, x_raw, y: int) -> np.ndarray:
    return influence_vector(ctx, lr_feature_map(x_raw, ctx.l2_radius)[0], y)


def _influence_sq_and_grad(ctx: InfluenceContext, x_raw: np.ndarray, y: int):
    """||I(x)||^2 and its gradient with respect to the raw features."""
    r = ctx.l2_radius
    xt = lr_feature_map(x_raw, r)[0]
    h2 = ctx.hessian_inv @ ctx.hessian_inv
    p = expit(float(xt @ ctx.theta_hat))
    resid = y - p
    quad = float(xt @ h2 @ xt)
    value = resid**2 * quad
    grad_t = -2 * resid * p * (1 - p) * quad * ctx.theta_hat + 2 * resid**2 * (h2 @ xt)
    return value, grad_t[:-1] / (r * np.sqrt(2.0))


def _project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(x)
    return x if norm <= radius else x * (radius / norm)


def pga_maximize_influence(ctx: InfluenceContext, x_init, y: int, steps: int, step_size: float):
    """Projected normalised-gradient ascent on ||I(x)||^2; returns the best iterate."""
    x = _project_ball(np.asarray(x_init, dtype=float), ctx.l2_radius)
    best_x, (best_v, _) = x.copy(), _influence_sq_and_grad(ctx, x, y)
    for _ in range(steps):
        v, g = _influence_sq_and_grad(ctx, x, y)
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            raise AttackError(f"PGA diverged (non-finite influence); reduce pga_step_size below {step_size}")
        if v > best_v:
            best_v, best_x = v, x.copy()
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        x = _project_ball(x + step_size * g / gn, ctx.l2_radius)
    v, _ = _influence_sq_and_grad(ctx, x, y)
    if v > best_v:
        best_v, best_x = v, x.copy()
    return best_x, float(np.sqrt(best_v))


def influence_attack(data: Dataset, spec: AttackSpec, lr_params: LRParams = LRParams(),
                     neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Influence-maximising poison for logistic regression.

    The seed row is the one nearest a corner of the bounding box. x* starts
    at the mean of the other class and is pushed by projected gradient
    ascent inside the L2 ball; both labels are tried and the label whose
    optimised point has the larger influence norm is kept.
    """
    ctx = build_influence_context(data, lr_params)
    dist = corner_distances(data)
    order = _ranked(dist)
    top = int(order[0])
    y0 = int(data.labels[top])
    x_init = data.features[data.labels == 1 - y0].mean(axis=0)
    step = spec.pga_step_size or 0.05 * data.l2_radius
    init_norm = {}
    best = None
    for y_star in (1 - y0, y0):
        x_opt, norm = pga_maximize_influence(ctx, x_init, y_star, spec.pga_steps, step)
        init_norm[y_star] = float(np.linalg.norm(influence_of_row(ctx, _project_ball(x_init, data.l2_radius), y_star)))
        if best is None or norm > best[1]:
            best = (x_opt, norm, y_star)
    x_star, norm, y_star = best
    return _build_pair(data, order, x_star, y_star, spec.k, neighbor_def, True,
                       {"attack": AttackKind.INFLUENCE_PGA.value, "seed_row": top,
                        "influence_norm": norm, "initial_influence_norm": init_norm[y_star]})


def clipbkd_attack(data: Dataset, spec: AttackSpec, lr_params: LRParams = LRParams(),
                   neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Poison along the least-variance direction at the median row norm.

    The label is the one the surrogate model finds least likely at x*.
    Victims are the rows with the smallest influence norm.
    """
    x = data.features
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    v = vecs[:, int(np.argmin(vals))]
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        v = -v
    x_star = float(np.median(np.linalg.norm(x, axis=1))) * v
    ctx = build_influence_context(data, lr_params)
    p1 = expit(float(lr_feature_map(x_star, data.l2_radius)[0] @ ctx.theta_hat))
    y_star = 1 if p1 < 0.5 else 0
    norms = np.array([np.linalg.norm(influence_of_row(ctx, xi, yi)) for xi, yi in zip(x, data.labels)])
    return _build_pair(data, _ranked(norms), x_star, y_star, spec.k, neighbor_def, True,
                       {"attack": AttackKind.CLIPBKD.value, "eigenvalue": float(vals.min())})


def swap_x_attack(data: Dataset, seed, spec: AttackSpec,
                  neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Random victim gets the features of a random opposite-class row, label kept."""
    rng = as_rng(seed)
    first = int(rng.integers(data.n))
    y = int(data.labels[first])
    donor = int(rng.choice(np.flatnonzero(data.labels == 1 - y)))
    x_star = data.features[donor]
    same = np.flatnonzero((data.labels == y) & np.any(data.features != x_star, axis=1))
    rest = rng.permutation(same[same != first])
    order = [first] + [int(i) for i in rest]
    return _build_pair(data, order, x_star, y, spec.k, neighbor_def, False,
                       {"attack": AttackKind.SWAP_X.value, "donor_row": donor})


# ---------------------------------------------------------------------------
# Random forest
# ---------------------------------------------------------------------------


def l1_isolation_scores(data: Dataset) -> np.ndarray:
    """Sum of L1 distances from each row to every other row."""
    x = data.features
    return np.array([np.abs(x - row).sum() for row in x])


def rf_leaf_label_probability(n_orig: int, n_other: int, epsilon: float) -> float:
    """P(a leaf holding these counts is labelled with the "orig" label)."""
    p = float(rf_majority_probability(abs(n_orig - n_other), epsilon))
    if n_orig > n_other:
        return p
    if n_orig < n_other:
        return 1.0 - p
    return 0.5


def rf_leaf_change_ratios(epsilon: float, j_values=(1, 2, 3, 4), minority: int = 1) -> dict:
    """P_D(orig) / P_D'(orig) for every single-row change of one leaf.

    In D the leaf has ``minority + j`` rows of the orig label and
    ``minority`` of the other. "flip" relabels one orig row (excess drops
    by 2); "equalize" removes one orig row (excess drops by 1).
    """
    out = {}
    for j in j_values:
        a, b = minority + j, minority
        before = rf_leaf_label_probability(a, b, epsilon)
        out[(j, "flip")] = before / rf_leaf_label_probability(a - 1, b + 1, epsilon)
        out[(j, "equalize")] = before / rf_leaf_label_probability(a - 1, b, epsilon)
    return out


def rf_isolation_flip_attack(data: Dataset, spec: AttackSpec,
                             neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE) -> NeighborPair:
    """Flips the label of the most isolated row (L1); ties go to the lowest index."""
    scores = l1_isolation_scores(data)
    order = _ranked(scores, descending=True)
    top = int(order[0])
    y = int(data.labels[top])
    return _build_pair(data, order, data.features[top], 1 - y, spec.k, neighbor_def, False,
                       {"attack": AttackKind.RF_ISOLATION_FLIP.value, "seed_row": top})


def run_attack(data: Dataset, spec: AttackSpec, neighbor_def: NeighborDef, seed=None,
               lr_params: LRParams = LRParams()) -> NeighborPair:
    kind = spec.kind
    if kind is AttackKind.INFLUENCE_PGA:
        return influence_attack(data, spec, lr_params, neighbor_def)
    if kind is AttackKind.NB_CORNER_FLIP:
        return nb_corner_flip_attack(data, spec, neighbor_def)
    if kind is AttackKind.NB_CORNER_MEAN:
        return nb_corner_mean_attack(data, spec, neighbor_def)
    if kind is AttackKind.RF_ISOLATION_FLIP:
        return rf_isolation_flip_attack(data, spec, neighbor_def)
    if kind is AttackKind.CLIPBKD:
        return clipbkd_attack(data, spec, lr_params, neighbor_def)
    return swap_x_attack(data, seed, spec, neighbor_def)
