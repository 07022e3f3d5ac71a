"""Sample generation, posterior classifier, threshold search and verification.

The estimator turns a neighbouring pair into a lower bound on epsilon:

1. draw N summaries from each of M(D) and M(D') (search phase);
2. fit a classifier for p(D | z);
3. scan thresholds on the classifier score for the set with the best
   Katz lower bound, subject to the min-probability floor r, trying both
   {score >= t} with D in the numerator and {score <= t} with D' in the
   numerator;
4. count hits of the frozen set on N fresh samples per arm (verify phase)
   and report the Katz lower bound divided by k.
"""
from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import math

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from dpaudit.attacks import AttackSpec, LRParams, run_attack, select_k
from dpaudit.core import (
    AuditConfig,
    AuditResult,
    Dataset,
    Phase,
    PrivacySpec,
    derive_rng,
    derive_seed_sequence,
    derive_uint64,
    katz_log_interval,
    katz_lower_bounds,
)
from dpaudit.mechanisms import Mechanism

ARM_D = 0
ARM_DPRIME = 1
POSTERIOR_MAX_ITER = 300
POSTERIOR_RIDGE = 1e-4


class AuditError(RuntimeError):
    """Failure inside one audit stage; ``stage`` names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def stream_key(master_seed: int, phase: int, arm: int) -> np.ndarray:
    """Philox key for one (phase, arm) stream."""
    return derive_seed_sequence(master_seed, int(phase), int(arm)).generate_state(2, np.uint64)


def sample_rng(key: np.ndarray, index: int) -> np.random.Generator:
    """Generator for sample ``index`` of a stream: the index sits in a counter word
    the generator never advances into, so samples cannot overlap."""
    counter = np.array([0, 0, index, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclasses.dataclass(frozen=True)
class SampleBatch:
    from_d: np.ndarray
    from_dprime: np.ndarray
    phase: Phase

    def __post_init__(self):
        if self.from_d.shape != self.from_dprime.shape:
            raise ValueError("both arms need the same number of samples and dimension")

    @property
    def n(self) -> int:
        return self.from_d.shape[0]

    def swapped(self) -> SampleBatch:
        return SampleBatch(self.from_dprime, self.from_d, self.phase)


def _sample_range(data: Dataset, mech: Mechanism, spec: PrivacySpec, key, arm, start, stop,
                  probe, master_seed, phase):
    state = mech.prepare(data, spec)
    sspec = mech.summary_spec(data.d)
    out = np.empty((stop - start, sspec.expected_dim))
    for i in range(start, stop):
        try:
            out[i - start] = mech.release_summary(state, data, spec, sample_rng(key, i), sspec, probe)
        except Exception as exc:
            raise RuntimeError(
                f"training failed for seed (master={master_seed}, phase={int(phase)}, "
                f"arm={arm}, index={i}): {exc}") from exc
    return out


def _chunks(n: int, parts: int):
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def generate_samples(pair, mech: Mechanism, spec: PrivacySpec, n: int, phase: Phase,
                     master_seed: int, workers: int = 1, probe=None) -> SampleBatch:
    """2n retrainings; sample i of each arm always uses the same seed, so the
    batch is identical for any worker count."""
    if n < 1:
        raise ValueError("n must be positive")
    phase = Phase(phase)
    arms = ((ARM_D, pair.original), (ARM_DPRIME, pair.poisoned))
    if probe is None and getattr(pair, "witness", None):
        probe = pair.witness.get("probe")
    jobs = []
    for arm, data in arms:
        key = stream_key(master_seed, phase, arm)
        for a, b in _chunks(n, max(1, workers)):
            jobs.append((data, mech, spec, key, arm, a, b, probe, master_seed, phase))
    if workers <= 1:
        parts = [_sample_range(*j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_range, *zip(*jobs)))
    half = len(parts) // 2
    return SampleBatch(np.vstack(parts[:half]), np.vstack(parts[half:]), phase)


# ---------------------------------------------------------------------------
# Posterior classifier
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PosteriorModel:
    """Standardise-then-classify model for p(D | z).

    ``params`` is (w, b) for the linear model or (W1, b1, w2, b2) with a
    tanh hidden layer. A degenerate model always answers 0.5.
    """

    mean: np.ndarray
    scale: np.ndarray
    params: tuple
    hidden_units: int = 0
    degenerate: bool = False

    def logit(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        if self.degenerate:
            return np.zeros(z.shape[0])
        u = (z - self.mean) / self.scale
        if self.hidden_units == 0:
            w, b = self.params
            return u @ w + b
        w1, b1, w2, b2 = self.params
        return np.tanh(u @ w1 + b1) @ w2 + b2

    def score(self, z: np.ndarray) -> np.ndarray:
        return expit(self.logit(z))


def _unpack(theta, m, h):
    if h == 0:
        return theta[:m], theta[m]
    i = 0
    w1 = theta[i:i + m * h].reshape(m, h); i += m * h
    b1 = theta[i:i + h]; i += h
    w2 = theta[i:i + h]; i += h
    return w1, b1, w2, theta[i]


def _posterior_loss(theta, u, y, h, ridge):
    n, m = u.shape
    s = 2.0 * y - 1.0
    if h == 0:
        w, b = _unpack(theta, m, 0)
        z = u @ w + b
        loss = np.logaddexp(0.0, -s * z).mean() + 0.5 * ridge * w @ w
        dz = -s * expit(-s * z) / n
        return loss, np.concatenate([u.T @ dz + ridge * w, [dz.sum()]])
    w1, b1, w2, b2 = _unpack(theta, m, h)
    a = np.tanh(u @ w1 + b1)
    z = a @ w2 + b2
    loss = np.logaddexp(0.0, -s * z).mean() + 0.5 * ridge * (np.sum(w1**2) + w2 @ w2)
    dz = -s * expit(-s * z) / n
    dw2 = a.T @ dz + ridge * w2
    da = np.outer(dz, w2) * (1 - a**2)
    dw1 = u.T @ da + ridge * w1
    return loss, np.concatenate([dw1.ravel(), da.sum(axis=0), dw2, [dz.sum()]])


def fit_posterior(batch: SampleBatch, seed=0, hidden_units: int = 0,
                  ridge: float = POSTERIOR_RIDGE, max_iter: int = POSTERIOR_MAX_ITER) -> PosteriorModel:
    """Logistic-loss classifier with label 1 = drawn from D, full batch L-BFGS."""
    # Lexicographic row order per arm makes the floating-point path order free.
    arms = [a[np.lexsort(a.T[::-1])] for a in (batch.from_d, batch.from_dprime)]
    z = np.vstack(arms)
    y = np.concatenate([np.ones(batch.n), np.zeros(batch.n)])
    mean = z.mean(axis=0)
    scale = z.std(axis=0)
    m = z.shape[1]
    if np.all(scale == 0):
        return PosteriorModel(mean, np.ones(m), (np.zeros(m), 0.0), 0, True)
    scale = np.where(scale > 0, scale, 1.0)
    u = (z - mean) / scale
    h = int(hidden_units)
    if h == 0:
        theta0 = np.zeros(m + 1)
    else:
        rng = derive_rng(int(seed) % 2**64, Phase.POSTERIOR)
        theta0 = np.concatenate([rng.normal(0, 1 / math.sqrt(m), m * h), np.zeros(h),
                                 rng.normal(0, 1 / math.sqrt(h), h), [0.0]])
    res = minimize(_posterior_loss, theta0, args=(u, y, h, ridge), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-15})
    return PosteriorModel(mean, scale, _unpack(res.x, m, h), h, False)


# ---------------------------------------------------------------------------
# Threshold search
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ThresholdSearchResult:
    """Best set found on the search batch.

    The set is {score >= threshold} with D in the numerator, or, when
    ``used_complement``, {score <= threshold} with D' in the numerator.
    ``logit_threshold`` is the same cut on the logit scale.
    """

    threshold_t: float
    eps_lb_search: float
    n1: int
    n0: int
    used_complement: bool
    c_hat: float
    logit_threshold: float


def _min_count(r: float, n: int) -> int:
    return int(math.ceil(r * n - 1e-9))


def _scan(s_num, s_den, n, alpha, r, upper: bool):
    """Katz bound for every unique-score cut; upper selects {s >= t}, else {s <= t}."""
    cand = np.unique(np.concatenate([s_num, s_den]))
    a, b = np.sort(s_num), np.sort(s_den)
    if upper:
        n1 = n - np.searchsorted(a, cand, side="left")
        n0 = n - np.searchsorted(b, cand, side="left")
    else:
        n1 = np.searchsorted(a, cand, side="right")
        n0 = np.searchsorted(b, cand, side="right")
    eps = katz_lower_bounds(n1, n0, n, alpha)
    eps[n0 < _min_count(r, n)] = -np.inf
    return cand, n1, n0, eps


def threshold_search(scores_d, scores_dprime, alpha: float, min_prob_r: float):
    """Scan every observed score as a cut for both set orientations.

    Returns (threshold, eps, n1, n0, used_complement). Among equal bounds
    the upper-set orientation and the lowest cut win. eps is -inf when no
    cut satisfies the floor.
    """
    s1 = np.asarray(scores_d, dtype=float)
    s0 = np.asarray(scores_dprime, dtype=float)
    n = s1.size
    if s0.size != n:
        raise ValueError("arms need equal sample counts")
    cand, n1, n0, eps = _scan(s1, s0, n, alpha, min_prob_r, upper=True)
    cand_c, n1c, n0c, eps_c = _scan(s0, s1, n, alpha, min_prob_r, upper=False)
    i, j = int(np.argmax(eps)), int(np.argmax(eps_c))
    if eps_c[j] > eps[i]:
        return float(cand_c[j]), float(eps_c[j]), int(n1c[j]), int(n0c[j]), True
    return float(cand[i]), float(eps[i]), int(n1[i]), int(n0[i]), False


def optimize_threshold(model: PosteriorModel, batch: SampleBatch, cfg: AuditConfig) -> ThresholdSearchResult:
    l1, l0 = model.logit(batch.from_d), model.logit(batch.from_dprime)
    t, eps, n1, n0, comp = threshold_search(l1, l0, cfg.alpha, cfg.min_prob_r)
    return ThresholdSearchResult(float(expit(t)), eps, n1, n0, comp, n0 / batch.n, t)


def count_in_set(logits_d, logits_dprime, search: ThresholdSearchResult) -> tuple[int, int]:
    """(numerator hits, denominator hits) of the frozen set."""
    t = search.logit_threshold
    if search.used_complement:
        return int(np.sum(logits_dprime <= t)), int(np.sum(logits_d <= t))
    return int(np.sum(logits_d >= t)), int(np.sum(logits_dprime >= t))


def estimate_from_counts(n1: int, n0: int, n: int, alpha: float, k: int):
    """Clamp n0 = 0 to 1; n1 = 0 gives -inf. Returns (eps_lb / k, interval)."""
    interval = katz_log_interval(n1, max(n0, 1), n, alpha)
    return interval.lower / k, interval


def verify_final(pair, mech: Mechanism, search: ThresholdSearchResult, model: PosteriorModel,
                 cfg: AuditConfig, k: int | None = None) -> AuditResult:
    """Counts the frozen set on fresh samples and reports the bound divided by k."""
    k = pair.k if k is None else k
    batch = generate_samples(pair, mech, cfg.spec, cfg.samples_n, Phase.VERIFY, cfg.master_seed,
                             cfg.workers)
    n1, n0 = count_in_set(model.logit(batch.from_d), model.logit(batch.from_dprime), search)
    eps, interval = estimate_from_counts(n1, n0, cfg.samples_n, cfg.alpha, k)
    return AuditResult(eps, search.threshold_t, search.used_complement, n1, n0, cfg.samples_n, k,
                       interval, search.eps_lb_search / k)


def audit_pair(data: Dataset, mech: Mechanism, attack: AttackSpec, cfg: AuditConfig,
               lr_params: LRParams | None = None) -> AuditResult:
    """Attack, search, fit, optimise and verify; errors carry the stage name."""
    try:
        k = select_k(cfg.spec.epsilon, cfg.k_policy)
    except ValueError as exc:
        raise AuditError("select_k", str(exc)) from exc
    try:
        pair = run_attack(data, dataclasses.replace(attack, k=k), cfg.neighbor_def,
                          seed=derive_rng(cfg.master_seed, Phase.ATTACK),
                          lr_params=lr_params or LRParams(mech.reg_c))
    except Exception as exc:
        raise AuditError("attack", str(exc)) from exc
    try:
        search_batch = generate_samples(pair, mech, cfg.spec, cfg.samples_n, Phase.SEARCH,
                                        cfg.master_seed, cfg.workers)
    except Exception as exc:
        raise AuditError("search", str(exc)) from exc
    try:
        model = fit_posterior(search_batch, derive_uint64(cfg.master_seed, Phase.POSTERIOR),
                              cfg.hidden_units, cfg.posterior_ridge)
    except Exception as exc:
        raise AuditError("fit", str(exc)) from exc
    try:
        search = optimize_threshold(model, search_batch, cfg)
    except Exception as exc:
        raise AuditError("optimize", str(exc)) from exc
    try:
        result = verify_final(pair, mech, search, model, cfg, k)
    except Exception as exc:
        raise AuditError("verify", str(exc)) from exc
    witness = dict(pair.witness)
    witness.update(
        set="score <= t, D' numerator" if search.used_complement else "score >= t, D numerator",
        threshold=search.threshold_t,
        search_counts=[search.n1, search.n0],
        posterior_degenerate=model.degenerate,
        n_original=pair.original.n,
        n_poisoned=pair.poisoned.n,
    )
    return dataclasses.replace(result, witness=witness)


def result_to_json(result: AuditResult, **extra) -> str:
    """One JSON line for an audit result, keys sorted for byte stability."""
    record = dict(result.to_json_dict(), witness=result.witness, **extra)
    return json.dumps(record, sort_keys=True)
