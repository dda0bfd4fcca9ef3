"""Loss values, loss gradients and semi-hard mining tests."""

import numpy as np
import pytest

from probpose import nn
from probpose.objective import (
    Calibration,
    TrainingConfig,
    TripletBatch,
    gaussian_prior_loss,
    matching_losses_from_samples,
    mc_match_probability,
    mc_probability_from_samples,
    mc_probability_matrix,
    mine_semi_hard_negatives,
    point_match_probability,
    positive_pairwise_loss,
    prior_loss_terms,
    total_loss,
    triplet_ratio_loss,
)

TINY = 1e-300


def point_embedding(vec):
    """Zero-variance Gaussian at a fixed location."""
    vec = np.asarray(vec, dtype=np.float64)
    return nn.GaussianEmbedding(vec, np.full(vec.shape, TINY))


def point_batch(vectors):
    arr = np.asarray(vectors, dtype=np.float64)
    return nn.GaussianBatch(arr, np.full(arr.shape, TINY))


def distance_for_probability(p, cal):
    """Invert p = sigmoid(-a d + b)."""
    return (cal.b - np.log(p / (1 - p))) / cal.a


class TestConfig:
    def test_defaults_match_reference_setting(self):
        cfg = TrainingConfig()
        assert cfg.kappa == 0.1
        assert cfg.beta == 2.0
        assert cfg.num_samples == 20
        assert cfg.embedding_dim == 16
        assert (cfg.w_ratio, cfg.w_positive, cfg.w_prior) == (1.0, 0.005, 0.001)
        assert cfg.prob_clip == (0.05, 0.95)
        assert cfg.batch_size == 256
        assert cfg.learning_rate == 0.02
        assert cfg.dropout_q == 0.2
        assert (cfg.azimuth_range_deg, cfg.elevation_range_deg, cfg.roll_range_deg) == (
            180.0, 30.0, 30.0,
        )
        assert abs(cfg.margin - np.log(2.0)) < 1e-15

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            TrainingConfig(kappa=0.0)
        with pytest.raises(ValueError):
            TrainingConfig(beta=1.0)
        with pytest.raises(ValueError):
            TrainingConfig(num_samples=0)
        with pytest.raises(ValueError):
            TrainingConfig(prob_clip=(0.0, 0.95))
        with pytest.raises(ValueError):
            TrainingConfig(w_prior=-0.1)


class TestPointProbability:
    def test_equal_points_b_zero(self):
        cal = Calibration(a=1.0, b=0.0)
        z = np.array([0.3, -0.4])
        assert point_match_probability(z, z, cal) == 0.5

    def test_arithmetic_case(self):
        cal = Calibration(a=1.0, b=2.0)
        zi = np.zeros(3)
        zj = np.array([2.0, 0.0, 0.0])
        assert abs(point_match_probability(zi, zj, cal) - 0.5) < 1e-15

    def test_monotone_decreasing_in_distance(self):
        cal = Calibration(a=2.0, b=1.0)
        probs = [
            point_match_probability(np.zeros(2), np.array([d, 0.0]), cal)
            for d in np.linspace(0, 5, 20)
        ]
        assert all(x > y for x, y in zip(probs, probs[1:]))

    def test_clip_bounds(self):
        cal = Calibration(a=1.0, b=10.0)
        p = point_match_probability(np.zeros(2), np.zeros(2), cal, clip=(0.05, 0.95))
        assert p == 0.95

    def test_calibration_a_stays_positive(self):
        cal = Calibration(a=0.5, b=0.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            for p in cal.parameters():
                p.grad = rng.normal(size=p.value.shape) * 10
            nn.adagrad_step(cal.parameters(), 0.5)
        assert cal.a > 0


class TestMCProbability:
    def test_zero_variance_equals_point_kernel(self):
        cal = Calibration(a=1.3, b=0.7)
        ei = point_embedding([0.5, 1.0])
        ej = point_embedding([-0.5, 0.2])
        rng = np.random.default_rng(1)
        mc = mc_match_probability(ei, ej, 20, cal, rng)
        point = point_match_probability(ei.mean, ej.mean, cal)
        assert mc == point

    def test_k1_single_pair(self):
        cal = Calibration()
        rng = np.random.default_rng(2)
        ei = nn.GaussianEmbedding(np.zeros(2), np.ones(2))
        ej = nn.GaussianEmbedding(np.ones(2), np.ones(2))
        zi = nn.sample_embeddings(ei, 1, np.random.default_rng(3))
        zj = nn.sample_embeddings(ej, 1, np.random.default_rng(4))
        expected = point_match_probability(zi[0], zj[0], cal)
        got = mc_probability_from_samples(zi, zj, cal)
        assert abs(got - expected) < 1e-15

    def test_estimator_consistency_small(self):
        cal = Calibration(a=1.0, b=0.5)
        rng = np.random.default_rng(5)
        for _ in range(5):
            ei = nn.GaussianEmbedding(rng.normal(size=4), rng.uniform(0.2, 1.5, 4))
            ej = nn.GaussianEmbedding(rng.normal(size=4), rng.uniform(0.2, 1.5, 4))
            ref = mc_match_probability(ei, ej, 4000, cal, np.random.default_rng(100))
            ests = [
                mc_match_probability(ei, ej, 200, cal, np.random.default_rng(200 + r))
                for r in range(12)
            ]
            se = np.std(ests, ddof=1)
            assert abs(ests[0] - ref) <= 3 * max(se, 1e-9)

    def test_matrix_agrees_with_pairwise(self):
        cal = Calibration(a=0.8, b=0.3)
        rng = np.random.default_rng(6)
        sa = rng.normal(size=(3, 5, 4))
        sb = rng.normal(size=(4, 5, 4))
        mat = mc_probability_matrix(sa, sb, cal, clip=(0.05, 0.95))
        for i in range(3):
            for j in range(4):
                expected = mc_probability_from_samples(sa[i], sb[j], cal, (0.05, 0.95))
                assert abs(mat[i, j] - expected) < 1e-12

    def test_probability_in_unit_interval(self):
        cal = Calibration(a=2.0, b=-1.0)
        rng = np.random.default_rng(7)
        ei = nn.GaussianEmbedding(rng.normal(size=3), np.ones(3))
        ej = nn.GaussianEmbedding(rng.normal(size=3), np.ones(3))
        p = mc_match_probability(ei, ej, 50, cal, rng)
        assert 0.0 < p < 1.0


class TestTripletRatioLoss:
    def setup_method(self):
        self.cfg = TrainingConfig(num_samples=8)
        self.cal = Calibration(a=1.0, b=2.0)

    def _loss(self, p_pos, p_neg):
        d_pos = distance_for_probability(p_pos, self.cal)
        d_neg = distance_for_probability(p_neg, self.cal)
        anchors = point_batch([[0.0, 0.0]])
        positives = point_batch([[d_pos, 0.0]])
        negatives = point_batch([[d_neg, 0.0]])
        return triplet_ratio_loss(
            anchors, positives, negatives, self.cfg, self.cal,
            np.random.default_rng(0),
        )

    def test_probability_ratio_at_margin_gives_zero(self):
        # p+ = beta * p-: hinge sits exactly at its boundary
        assert abs(self._loss(0.6, 0.3)) < 1e-9

    def test_equal_probabilities_give_log_beta(self):
        assert abs(self._loss(0.4, 0.4) - np.log(2.0)) < 1e-12

    def test_identical_embeddings_give_margin(self):
        e = point_batch([[0.5, 0.5]])
        loss = triplet_ratio_loss(
            e, e, e, self.cfg, self.cal, np.random.default_rng(1)
        )
        assert abs(loss - np.log(2.0)) < 1e-15

    def test_violating_triplet_positive_loss(self):
        assert self._loss(0.3, 0.6) > np.log(2.0) - 1e-12

    def test_sums_over_triplets(self):
        a = point_batch([[0.0, 0.0], [0.0, 0.0]])
        p = point_batch([[1.0, 0.0], [1.0, 0.0]])
        n = point_batch([[1.0, 0.0], [1.0, 0.0]])
        loss = triplet_ratio_loss(a, p, n, self.cfg, self.cal, np.random.default_rng(2))
        assert abs(loss - 2 * np.log(2.0)) < 1e-12


class TestPositivePairwiseLoss:
    def test_clip_boundary_value(self):
        cfg = TrainingConfig(num_samples=4)
        cal = Calibration(a=1.0, b=6.0)  # sigmoid(6) ~ 0.9975 -> clipped
        e = point_batch([[0.0, 0.0]])
        loss = positive_pairwise_loss(e, e, cfg, cal, np.random.default_rng(0))
        assert abs(loss - (-np.log(0.95))) < 1e-15

    def test_probability_half_gives_log2(self):
        cfg = TrainingConfig(num_samples=4)
        cal = Calibration(a=1.0, b=0.0)
        e = point_batch([[0.3, -0.7]])
        loss = positive_pairwise_loss(e, e, cfg, cal, np.random.default_rng(0))
        assert abs(loss - np.log(2.0)) < 1e-15

    def test_decreasing_in_matching_probability(self):
        cfg = TrainingConfig(num_samples=4)
        cal = Calibration(a=1.0, b=2.0)
        anchors = point_batch([[0.0, 0.0]])
        losses = [
            positive_pairwise_loss(
                anchors, point_batch([[d, 0.0]]), cfg, cal, np.random.default_rng(0)
            )
            for d in (0.5, 1.0, 2.0, 3.0)
        ]
        assert all(x < y for x, y in zip(losses, losses[1:]))


class TestPriorLoss:
    def test_standard_normal_gives_zero(self):
        batch = nn.GaussianBatch(np.zeros((3, 4)), np.ones((3, 4)))
        assert gaussian_prior_loss(batch) == 0.0

    def test_variance_e_closed_form(self):
        batch = nn.GaussianBatch(np.zeros((1, 1)), np.full((1, 1), np.e))
        expected = (np.e - 2.0) / 2.0
        assert abs(gaussian_prior_loss(batch) - expected) < 1e-12

    def test_strictly_positive_off_standard(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            mean = rng.normal(size=(1, 3)) * 0.5
            var = rng.uniform(0.3, 3.0, size=(1, 3))
            if np.allclose(mean, 0) and np.allclose(var, 1):
                continue
            assert gaussian_prior_loss(nn.GaussianBatch(mean, var)) > 0


class TestTotalLoss:
    def _batch(self, rng):
        mk = lambda: nn.GaussianBatch(rng.normal(size=(4, 3)), rng.uniform(0.5, 2, (4, 3)))
        return TripletBatch(mk(), mk(), mk())

    def test_zero_weights_zero_loss(self):
        cfg = TrainingConfig(w_ratio=0.0, w_positive=0.0, w_prior=0.0, num_samples=4)
        cal = Calibration()
        batch = self._batch(np.random.default_rng(9))
        assert total_loss(batch, cfg, cal, np.random.default_rng(0)) == 0.0

    def test_ratio_only_matches_ratio_loss(self):
        cfg = TrainingConfig(w_positive=0.0, w_prior=0.0, num_samples=4)
        cal = Calibration()
        batch = self._batch(np.random.default_rng(10))
        got = total_loss(batch, cfg, cal, np.random.default_rng(7))
        expected = triplet_ratio_loss(
            batch.anchors, batch.positives, batch.negatives, cfg, cal,
            np.random.default_rng(7),
        )
        assert got == expected

    def test_deterministic_under_seed(self):
        cfg = TrainingConfig(num_samples=6)
        cal = Calibration()
        batch = self._batch(np.random.default_rng(11))
        a = total_loss(batch, cfg, cal, np.random.default_rng(42))
        b = total_loss(batch, cfg, cal, np.random.default_rng(42))
        assert a == b

    def test_nonnegative(self):
        cfg = TrainingConfig(num_samples=4)
        cal = Calibration()
        for seed in range(5):
            batch = self._batch(np.random.default_rng(seed))
            assert total_loss(batch, cfg, cal, np.random.default_rng(seed)) >= 0.0


class TestObjectiveGradients:
    def test_sample_level_gradients_match_fd(self):
        """Full matching + prior losses, gradients vs central FD."""
        rng = np.random.default_rng(12)
        n, k, d = 3, 5, 4
        cfg = TrainingConfig(num_samples=k)
        mean = {s: rng.normal(size=(n, d)) for s in "apn"}
        var = {s: rng.uniform(0.4, 1.8, size=(n, d)) for s in "apn"}
        eps = {s: rng.standard_normal((n, k, d)) for s in "apn"}
        cal = Calibration(a=1.2, b=0.8)

        params = []
        arrays = {}
        for s in "apn":
            for kind, store in (("mean", mean), ("var", var)):
                p = nn.Parameter(f"{kind}_{s}", store[s])
                params.append(p)
                arrays[p.name] = store[s]
        params += cal.parameters()

        def compute(with_grads):
            z = {
                s: mean[s][:, None, :] + eps[s] * np.sqrt(var[s])[:, None, :]
                for s in "apn"
            }
            breakdown, grads = matching_losses_from_samples(
                z["a"], z["p"], z["n"], cfg, cal, with_grads=with_grads
            )
            loss = breakdown.total
            prior_total = 0.0
            prior_grads = {}
            for s in "ap":
                batch = nn.GaussianBatch(mean[s], var[s])
                pl, dmu, dvar = prior_loss_terms(batch, with_grads=True)
                prior_total += pl
                prior_grads[s] = (dmu, dvar)
            loss = loss + cfg.w_prior * prior_total
            return loss, grads, prior_grads

        def value_fn():
            return compute(False)[0]

        def grad_fn():
            nn.zero_gradients(params)
            loss, grads, prior_grads = compute(True)
            for s, dz in (("a", grads.d_anchor), ("p", grads.d_positive),
                          ("n", grads.d_negative)):
                dmu, dvar = nn.sample_gradients(dz, eps[s], var[s])
                if s in prior_grads:
                    dmu = dmu + cfg.w_prior * prior_grads[s][0]
                    dvar = dvar + cfg.w_prior * prior_grads[s][1]
                next(p for p in params if p.name == f"mean_{s}").grad += dmu
                next(p for p in params if p.name == f"var_{s}").grad += dvar
            cal.raw_a.grad += grads.d_raw_a
            cal.raw_b.grad += grads.d_b
            return loss

        report = nn.gradient_check(
            value_fn, grad_fn, params, np.random.default_rng(13),
            num_coords=150, step=1e-6,
        )
        assert report.max_rel_error < 1e-4, (report.worst_name, report.max_rel_error)


class TestMining:
    def _setup(self, cal=None):
        self.cfg = TrainingConfig(num_samples=2)
        self.cal = cal or Calibration(a=1.0, b=0.0)

    def _samples(self, locations):
        batch = point_batch(locations)
        z, _ = nn.sample_batch(batch, 2, np.random.default_rng(0), return_eps=True)
        return z

    def test_single_semi_hard_candidate_chosen(self):
        self._setup()
        anchors = self._samples([[0.0, 0.0]])
        # positive at distance 1; candidates at 0.5 (too close) and 1.5 (band)
        cands = self._samples([[1.0, 0.0], [0.5, 0.0], [1.5, 0.0]])
        eligible = np.array([[False, True, True]])
        res = mine_semi_hard_negatives(
            anchors, cands, eligible, self.cfg, self.cal,
            positive_index=np.array([0]),
        )
        assert res.negative_index[0] == 2
        assert res.semi_hard[0]

    def test_closest_in_band_wins(self):
        self._setup()
        anchors = self._samples([[0.0, 0.0]])
        cands = self._samples([[1.0, 0.0], [2.5, 0.0], [1.5, 0.0], [2.0, 0.0]])
        eligible = np.array([[False, True, True, True]])
        res = mine_semi_hard_negatives(
            anchors, cands, eligible, self.cfg, self.cal,
            positive_index=np.array([0]),
        )
        assert res.negative_index[0] == 2

    def test_hardest_fallback(self):
        self._setup()
        anchors = self._samples([[0.0, 0.0]])
        # no candidate farther than the positive: fall back to max distance
        cands = self._samples([[2.0, 0.0], [0.5, 0.0], [0.8, 0.0]])
        eligible = np.array([[False, True, True]])
        res = mine_semi_hard_negatives(
            anchors, cands, eligible, self.cfg, self.cal,
            positive_index=np.array([0]),
        )
        assert res.negative_index[0] == 2
        assert not res.semi_hard[0]

    def test_no_eligible_candidate_skipped(self):
        self._setup()
        anchors = self._samples([[0.0, 0.0]])
        cands = self._samples([[1.0, 0.0]])
        eligible = np.array([[False]])
        res = mine_semi_hard_negatives(
            anchors, cands, eligible, self.cfg, self.cal,
            positive_index=np.array([0]),
        )
        assert res.negative_index[0] == -1
        assert res.num_skipped == 1

    def test_matches_exhaustive_scan(self):
        """Vectorized mining equals a per-anchor brute-force scan."""
        rng = np.random.default_rng(14)
        cfg = TrainingConfig(num_samples=3)
        cal = Calibration(a=0.9, b=0.4)
        n = 32
        mean = rng.normal(size=(n, 4))
        var = rng.uniform(0.3, 1.5, size=(n, 4))
        anchors = nn.GaussianBatch(mean, var)
        cands = nn.GaussianBatch(mean + rng.normal(size=(n, 4)) * 0.3, var)
        za = nn.sample_batch(anchors, 3, np.random.default_rng(15))
        zc = nn.sample_batch(cands, 3, np.random.default_rng(16))
        eligible = rng.random((n, n)) < 0.5
        eligible[np.arange(n), np.arange(n)] = False

        res = mine_semi_hard_negatives(za, zc, eligible, cfg, cal)

        for i in range(n):
            dpos = -np.log(mc_probability_from_samples(za[i], zc[i], cal, cfg.prob_clip))
            dists = np.array([
                -np.log(mc_probability_from_samples(za[i], zc[j], cal, cfg.prob_clip))
                for j in range(n)
            ])
            elig = np.nonzero(eligible[i])[0]
            if elig.size == 0:
                assert res.negative_index[i] == -1
                continue
            band = elig[dists[elig] > dpos]
            if band.size:
                expected = band[np.argmin(dists[band])]
            else:
                expected = elig[np.argmax(dists[elig])]
            assert res.negative_index[i] == expected

    def test_deterministic(self):
        rng = np.random.default_rng(17)
        cfg = TrainingConfig(num_samples=2)
        cal = Calibration()
        za = rng.normal(size=(8, 2, 3))
        zc = rng.normal(size=(8, 2, 3))
        eligible = rng.random((8, 8)) < 0.6
        a = mine_semi_hard_negatives(za, zc, eligible, cfg, cal)
        b = mine_semi_hard_negatives(za, zc, eligible, cfg, cal)
        assert np.array_equal(a.negative_index, b.negative_index)
