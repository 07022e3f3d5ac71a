"""Tests for sampling, the posterior classifier, threshold search and verification."""

import itertools
import math
import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from dpaudit import estimator
from dpaudit.attacks import AttackKind, AttackSpec
from dpaudit.core import (
    AuditConfig,
    KPolicy,
    Phase,
    PrivacySpec,
    katz_log_interval,
    katz_lower_supremum,
    max_detectable_eps,
)
from dpaudit.data import preprocess, synth_blobs
from dpaudit.estimator import (
    AuditError,
    SampleBatch,
    audit_pair,
    count_in_set,
    estimate_from_counts,
    fit_posterior,
    generate_samples,
    optimize_threshold,
    result_to_json,
    sample_rng,
    stream_key,
    threshold_search,
    verify_final,
)
from dpaudit.mechanisms import Mechanism, MechanismKind


@pytest.fixture(scope="module")
def blobs():
    return preprocess(synth_blobs(60, 2, 2.0, 1))


def _same_pair(data):
    return types.SimpleNamespace(original=data, poisoned=data, k=1, witness={})


def _oracle_search(s1, s0, alpha, r):
    """Every cut, both orientations, by direct counting."""
    n = len(s1)
    floor = math.ceil(r * n - 1e-9)
    best = -math.inf
    for t in np.unique(np.concatenate([s1, s0])):
        for num, den, upper in ((s1, s0, True), (s0, s1, False)):
            n1 = int(np.sum(num >= t)) if upper else int(np.sum(num <= t))
            n0 = int(np.sum(den >= t)) if upper else int(np.sum(den <= t))
            if n0 < floor or n1 == 0:
                continue
            best = max(best, katz_log_interval(n1, n0, n, alpha).lower)
    return best


class TestSampling:
    def test_deterministic_and_worker_independent(self, blobs):
        mech = Mechanism(MechanismKind.GAUSSIAN_NB)
        pair = _same_pair(blobs)
        a = generate_samples(pair, mech, PrivacySpec(1.0), 40, Phase.SEARCH, 11)
        b = generate_samples(pair, mech, PrivacySpec(1.0), 40, Phase.SEARCH, 11)
        c = generate_samples(pair, mech, PrivacySpec(1.0), 40, Phase.SEARCH, 11, workers=3)
        np.testing.assert_array_equal(a.from_d, b.from_d)
        np.testing.assert_array_equal(a.from_d, c.from_d)
        np.testing.assert_array_equal(a.from_dprime, c.from_dprime)

    def test_prefix_stable(self, blobs):
        mech = Mechanism(MechanismKind.LAPLACE_MEAN)
        pair = _same_pair(blobs)
        small = generate_samples(pair, mech, PrivacySpec(1.0), 10, Phase.VERIFY, 2)
        big = generate_samples(pair, mech, PrivacySpec(1.0), 25, Phase.VERIFY, 2)
        np.testing.assert_array_equal(small.from_d, big.from_d[:10])

    def test_identical_datasets_are_exchangeable(self, blobs):
        mech = Mechanism(MechanismKind.LAPLACE_MEAN)
        batch = generate_samples(_same_pair(blobs), mech, PrivacySpec(1.0), 2000, Phase.SEARCH, 5)
        for j in range(blobs.d):
            assert ks_2samp(batch.from_d[:, j], batch.from_dprime[:, j]).pvalue > 0.01

    def test_streams_disjoint(self):
        keys = {(p, a): tuple(stream_key(9, p, a)) for p in Phase for a in (0, 1)}
        assert len(set(keys.values())) == len(keys)
        draws = [sample_rng(np.array(k, dtype=np.uint64), i).integers(0, 2**63, 4)
                 for k in keys.values() for i in range(100)]
        flat = np.concatenate(draws)
        assert len(np.unique(flat)) == flat.size

    def test_failure_names_seed(self, blobs, monkeypatch):
        def boom(*a, **k):
            raise ValueError("bad")

        monkeypatch.setattr(Mechanism, "release_summary", boom)
        with pytest.raises(RuntimeError, match=r"master=3, phase=1, arm=0, index=0"):
            generate_samples(_same_pair(blobs), Mechanism("laplace_mean"), PrivacySpec(1.0), 5,
                             Phase.SEARCH, 3)


class TestPosterior:
    def test_separable(self):
        rng = np.random.default_rng(0)
        batch = SampleBatch(rng.uniform(1, 2, (200, 1)), rng.uniform(-2, -1, (200, 1)), Phase.SEARCH)
        model = fit_posterior(batch)
        assert model.logit(batch.from_d).min() > model.logit(batch.from_dprime).max()
        s = model.score(np.vstack([batch.from_d, batch.from_dprime]))
        assert np.all((s > 0) & (s < 1))

    def test_uninformative(self):
        rng = np.random.default_rng(1)
        batch = SampleBatch(rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3)), Phase.SEARCH)
        model = fit_posterior(batch)
        all_scores = model.score(np.vstack([batch.from_d, batch.from_dprime]))
        assert all_scores.mean() == pytest.approx(0.5, abs=0.02)

    @pytest.mark.parametrize("hidden", [0, 4])
    def test_permutation_invariant(self, hidden):
        rng = np.random.default_rng(2)
        a, b = rng.normal(0.3, 1, (300, 2)), rng.normal(0, 1, (300, 2))
        perm = rng.permutation(300)
        m1 = fit_posterior(SampleBatch(a, b, Phase.SEARCH), seed=4, hidden_units=hidden)
        m2 = fit_posterior(SampleBatch(a[perm], b[perm], Phase.SEARCH), seed=4, hidden_units=hidden)
        probe = rng.normal(size=(50, 2))
        np.testing.assert_allclose(m1.score(probe), m2.score(probe), atol=1e-9)

    def test_degenerate_batch(self):
        batch = SampleBatch(np.ones((10, 3)), np.ones((10, 3)), Phase.SEARCH)
        model = fit_posterior(batch)
        assert model.degenerate
        np.testing.assert_array_equal(model.score(np.zeros((4, 3))), 0.5)

    def test_swapped_arms_negate_logits(self):
        rng = np.random.default_rng(3)
        batch = SampleBatch(rng.normal(0.5, 1, (400, 3)), rng.normal(0, 1, (400, 3)), Phase.SEARCH)
        z = rng.normal(size=(20, 3))
        np.testing.assert_allclose(fit_posterior(batch).logit(z), -fit_posterior(batch.swapped()).logit(z),
                                   atol=1e-9)


class TestThresholdSearch:
    def test_identical_scores(self):
        t, eps, n1, n0, comp = threshold_search(np.full(50, 0.3), np.full(50, 0.3), 0.05, 0.02)
        assert (t, n1, n0, comp) == (0.3, 50, 50, False)
        assert eps == katz_log_interval(50, 50, 50, 0.05).lower

    def test_boundary_example(self):
        n, r = 1000, 0.01
        rng = np.random.default_rng(0)
        s1 = rng.uniform(0.9, 1.0, n)
        s0 = rng.uniform(0.0, 0.1, n)
        s0[:10] = rng.uniform(0.9, 1.0, 10)  # exactly r * N crossers
        t, eps, n1, n0, comp = threshold_search(s1, s0, 0.05, r)
        assert not comp
        assert n0 == 10
        assert t == pytest.approx(np.sort(np.concatenate([s1, s0[:10]]))[0])
        assert eps == pytest.approx(katz_log_interval(n, 10, n, 0.05).lower, abs=1e-12)
        assert eps == pytest.approx(_oracle_search(s1, s0, 0.05, r), abs=1e-12)

    def test_floor_blocks_everything(self):
        t, eps, n1, n0, comp = threshold_search(np.arange(5.0), np.arange(5.0) + 10, 0.05, 0.99)
        assert eps == -math.inf or n0 >= 5

    @settings(max_examples=60, deadline=None)
    @given(st.integers(4, 40).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 12), min_size=n, max_size=n),
        st.lists(st.integers(0, 12), min_size=n, max_size=n))),
        st.sampled_from([0.05, 0.1, 0.3]))
    def test_matches_exhaustive_oracle(self, scores, r):
        s1, s0 = (np.asarray(s, dtype=float) for s in scores)
        _, eps, n1, n0, comp = threshold_search(s1, s0, 0.05, r)
        assert eps == pytest.approx(_oracle_search(s1, s0, 0.05, r), abs=1e-12)
        if eps > -math.inf:
            assert n0 >= math.ceil(r * len(s1) - 1e-9)
            assert eps <= katz_lower_supremum(len(s1), 0.05) + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_swap_and_negate_flips_orientation(self, seed):
        rng = np.random.default_rng(seed)
        s1, s0 = rng.normal(0.4, 1, 300), rng.normal(0, 1, 300)
        a = threshold_search(s1, s0, 0.05, 0.01)
        b = threshold_search(-s0, -s1, 0.05, 0.01)
        if a[1] > -math.inf:
            assert b[1] == a[1]
            assert b[4] != a[4]
            assert (b[2], b[3]) == (a[2], a[3])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s1, s0 = rng.normal(0.3, 1, 200), rng.normal(0, 1, 200)
        f = lambda s: np.exp(s) + s**3  # noqa: E731 - strictly increasing
        a = threshold_search(s1, s0, 0.05, 0.05)
        b = threshold_search(f(s1), f(s0), 0.05, 0.05)
        assert a[1:] == b[1:]

    def test_counts_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        s1, s0 = rng.normal(0.3, 1, 500), rng.normal(0, 1, 500)
        _, n1, n0, _ = estimator._scan(s1, s0, 500, 0.05, 0.01, upper=True)
        assert np.all(np.diff(n1) <= 0) and np.all(np.diff(n0) <= 0)

    def test_quantile_consistency(self):
        rng = np.random.default_rng(5)
        batch = SampleBatch(rng.normal(1, 1, (800, 2)), rng.normal(0, 1, (800, 2)), Phase.SEARCH)
        model = fit_posterior(batch)
        cfg = AuditConfig(PrivacySpec(1.0), samples_n=800)
        res = optimize_threshold(model, batch, cfg)
        assert res.c_hat >= cfg.min_prob_r
        assert (res.n1, res.n0) == count_in_set(model.logit(batch.from_d), model.logit(batch.from_dprime), res)
        assert res.c_hat == res.n0 / batch.n
        assert 0.0 <= res.threshold_t <= 1.0

    def test_swapped_batch_flips_complement(self):
        rng = np.random.default_rng(6)
        batch = SampleBatch(rng.normal(0.6, 1, (600, 2)), rng.normal(0, 1, (600, 2)), Phase.SEARCH)
        cfg = AuditConfig(PrivacySpec(1.0), samples_n=600)
        a = optimize_threshold(fit_posterior(batch), batch, cfg)
        b = optimize_threshold(fit_posterior(batch.swapped()), batch.swapped(), cfg)
        assert a.used_complement != b.used_complement
        assert a.eps_lb_search == pytest.approx(b.eps_lb_search, abs=1e-12)


class TestVerification:
    def test_k_halves(self):
        one, _ = estimate_from_counts(300, 40, 1000, 0.05, 1)
        two, _ = estimate_from_counts(300, 40, 1000, 0.05, 2)
        assert two == one / 2

    def test_zero_counts(self):
        assert estimate_from_counts(0, 10, 100, 0.05, 1)[0] == -math.inf
        assert estimate_from_counts(50, 0, 100, 0.05, 1)[0] == katz_log_interval(50, 1, 100, 0.05).lower

    def test_null_soundness(self, blobs):
        mech = Mechanism(MechanismKind.LAPLACE_MEAN)
        pair = _same_pair(blobs)
        positives = 0
        for rep in range(20):
            cfg = AuditConfig(PrivacySpec(1.0), samples_n=1000, master_seed=rep)
            batch = generate_samples(pair, mech, cfg.spec, 1000, Phase.SEARCH, rep)
            model = fit_posterior(batch)
            search = optimize_threshold(model, batch, cfg)
            res = verify_final(pair, mech, search, model, cfg, k=1)
            positives += res.eps_lb > 0
            assert res.eps_lb <= max_detectable_eps(1000, 0.05)
        assert positives <= 2


class TestAuditPair:
    def test_end_to_end(self, blobs):
        cfg = AuditConfig(PrivacySpec(4.0), samples_n=300, master_seed=1)
        res = audit_pair(blobs, Mechanism("gaussian_nb"), AttackSpec("nb_corner_flip"), cfg)
        assert res.k == 2
        assert 0 <= res.n1 <= 300 and 0 <= res.n0 <= 300
        assert res.eps_lb * res.k <= max_detectable_eps(300, 0.05) + 1e-12
        assert res.witness["attack"] == "nb_corner_flip"
        assert len(res.witness["victims"]) == 2
        again = audit_pair(blobs, Mechanism("gaussian_nb"), AttackSpec("nb_corner_flip"), cfg)
        assert result_to_json(res) == result_to_json(again)

    def test_stage_labels(self, blobs, monkeypatch):
        def broken(*a, **k):
            raise ValueError("nope")

        monkeypatch.setattr(estimator, "run_attack", broken)
        cfg = AuditConfig(PrivacySpec(1.0), samples_n=200)
        with pytest.raises(AuditError) as info:
            audit_pair(blobs, Mechanism("gaussian_nb"), AttackSpec("nb_corner_flip"), cfg)
        assert info.value.stage == "attack"

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**64 - 1), st.sampled_from([0.5, 2.0, 20.0]),
           st.sampled_from(list(itertools.product([AttackKind.NB_CORNER_FLIP, AttackKind.SWAP_X], [1, 2]))))
    def test_never_exceeds_ceiling(self, seed, eps, attack_k):
        data = preprocess(synth_blobs(40, 2, 3.0, 2))
        attack, k = attack_k
        cfg = AuditConfig(PrivacySpec(eps), samples_n=60, master_seed=seed, k_policy=KPolicy.constant(k))
        res = audit_pair(data, Mechanism("laplace_mean"), AttackSpec(attack), cfg)
        assert res.eps_lb * k <= max_detectable_eps(60, 0.05) + 1e-12
