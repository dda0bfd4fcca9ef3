"""Camera augmentation and occlusion augmentation tests.

Statistical behavior is checked with seeded generators: per-joint drop
rates, azimuth uniformity (chi-squared) and the structured sampler's
full-pattern distribution against exact chain-rule enumeration.
"""

import numpy as np
import pytest
import scipy.stats

from probpose import augmentation as aug
from probpose import geometry as geo
from probpose.skeleton import NUM_JOINTS_2D, TORSO_2D_INDEX, Joint2D, Pose2D, Pose3D


def body_pose3d(rng=None, wobble=0.0):
    base = np.array([
        [0, 0, 0], [0, 0.25, 0], [0, 0.5, 0], [0, 0.68, 0],
        [0.18, 0.5, 0], [-0.18, 0.5, 0], [0.32, 0.3, 0], [-0.32, 0.3, 0],
        [0.4, 0.1, 0], [-0.4, 0.1, 0],
        [0.11, 0, 0], [-0.11, 0, 0], [0.13, -0.4, 0], [-0.13, -0.4, 0],
        [0.15, -0.8, 0], [-0.15, -0.8, 0],
    ], dtype=float)
    if wobble and rng is not None:
        base = base + rng.normal(size=base.shape) * wobble
    return geo.normalize_pose3d(Pose3D(base))


def full_pose2d(rng):
    return Pose2D(rng.normal(size=(NUM_JOINTS_2D, 2)))


def masks_to_key(mask):
    return "".join("1" if v else "0" for v in mask)


class TestCameraAugment:
    def test_zero_ranges_give_unrotated_projection(self):
        pose = body_pose3d()
        rng = np.random.default_rng(0)
        a, b = aug.camera_augment(pose, (0.0, 0.0, 0.0), rng)
        unrotated = geo.normalize_pose2d(geo.project_pose(pose))
        assert np.allclose(a.coords, unrotated.coords, atol=1e-12)
        assert np.allclose(b.coords, unrotated.coords, atol=1e-12)

    def test_pair_comes_from_same_3d_pose(self):
        pose = body_pose3d()
        rng = np.random.default_rng(1)
        a, b = aug.camera_augment(pose, (180.0, 30.0, 30.0), rng)
        # both views exist and are normalized; the source 3D pose matches itself
        assert geo.np_mpjpe(pose, pose) < 1e-12
        assert not np.allclose(a.coords, b.coords)

    def test_azimuth_uniformity_chi_squared(self):
        rng = np.random.default_rng(2)
        n = 10**5
        azimuths = np.empty(n)
        for i in range(n):
            r = aug.sample_view_rotation((180.0, 30.0, 30.0), rng)
            m = r.matrix
            azimuths[i] = np.degrees(np.arctan2(-m[2, 0], m[2, 2]))
        bins = 20
        counts, _ = np.histogram(azimuths, bins=bins, range=(-180.0, 180.0))
        expected = n / bins
        chi2 = ((counts - expected) ** 2 / expected).sum()
        critical = scipy.stats.chi2.ppf(0.99, df=bins - 1)
        assert chi2 < critical

    def test_outputs_are_normalized(self):
        pose = body_pose3d()
        rng = np.random.default_rng(3)
        a, _ = aug.camera_augment(pose, (180.0, 30.0, 30.0), rng)
        renorm = geo.normalize_pose2d(a)
        assert np.allclose(a.coords, renorm.coords, atol=1e-12)

    def test_reproducible_under_seed(self):
        pose = body_pose3d()
        a1, b1 = aug.camera_augment(pose, (180.0, 30.0, 30.0), np.random.default_rng(7))
        a2, b2 = aug.camera_augment(pose, (180.0, 30.0, 30.0), np.random.default_rng(7))
        assert np.array_equal(a1.coords, a2.coords)
        assert np.array_equal(b1.coords, b2.coords)


class TestIndependentDropout:
    def test_q_zero_identity(self):
        pose = full_pose2d(np.random.default_rng(4))
        out = aug.independent_dropout(pose, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.visibility, pose.visibility)

    def test_q_one_only_torso_visible(self):
        pose = full_pose2d(np.random.default_rng(5))
        out = aug.independent_dropout(pose, 1.0, np.random.default_rng(0))
        assert out.visibility.sum() == 4
        assert out.visibility[TORSO_2D_INDEX].all()

    def test_empirical_rate(self):
        rng = np.random.default_rng(6)
        pose = full_pose2d(rng)
        q = 0.2
        n = 10**5
        drops = np.zeros(NUM_JOINTS_2D)
        for _ in range(n):
            out = aug.independent_dropout(pose, q, rng)
            drops += ~out.visibility
        rates = drops / n
        non_torso = [j for j in range(13) if j not in set(TORSO_2D_INDEX.tolist())]
        assert np.all(np.abs(rates[non_torso] - q) < 0.005)
        assert np.all(rates[TORSO_2D_INDEX] == 0.0)

    def test_masked_joints_zeroed(self):
        pose = full_pose2d(np.random.default_rng(7))
        out = aug.independent_dropout(pose, 1.0, np.random.default_rng(1))
        assert np.all(out.coords[~out.visibility] == 0.0)


class TestThresholdVisibility:
    def test_threshold_zero_identity(self):
        pose = full_pose2d(np.random.default_rng(8))
        conf = np.random.default_rng(9).uniform(0, 1, 13)
        out = aug.threshold_visibility(pose, conf, 0.0)
        assert out.visibility.all()

    def test_threshold_one_only_torso(self):
        pose = full_pose2d(np.random.default_rng(10))
        conf = np.random.default_rng(11).uniform(0, 0.99, 13)
        out = aug.threshold_visibility(pose, conf, 1.0)
        assert out.visibility.sum() == 4

    def test_exact_masking(self):
        pose = full_pose2d(np.random.default_rng(12))
        conf = np.full(13, 0.9)
        conf[Joint2D.NOSE] = 0.2
        conf[Joint2D.LEFT_WRIST] = 0.4
        conf[Joint2D.LEFT_HIP] = 0.1  # torso: exempt
        out = aug.threshold_visibility(pose, conf, 0.5)
        expected = np.ones(13, dtype=bool)
        expected[Joint2D.NOSE] = False
        expected[Joint2D.LEFT_WRIST] = False
        assert np.array_equal(out.visibility, expected)


class TestStructuredDropout:
    def test_point_mass_prior_is_identity(self):
        prior = aug.VisibilityPrior.point_mass_full_visibility()
        pose = full_pose2d(np.random.default_rng(13))
        out = aug.structured_dropout(pose, prior, np.random.default_rng(0))
        assert out.visibility.all()

    def test_nose_drop_rate(self):
        tables = {name: {"1" * len(j): 1.0} for name, j in aug.CLIQUES}
        tables["head"] = {"1": 0.7, "0": 0.3}
        prior = aug.VisibilityPrior(tables)
        masks, fallbacks = aug.structured_visibility_masks(
            10**6, prior, np.random.default_rng(14)
        )
        assert fallbacks == 0
        rate = 1.0 - masks[:, int(Joint2D.NOSE)].mean()
        assert abs(rate - 0.3) < 0.005

    def test_overlapping_cliques_follow_chain_rule(self):
        # left knee is shared by the upper/lower leg cliques, so the
        # lower table is conditioned on the upper outcome
        tables = {name: {"1" * len(j): 1.0} for name, j in aug.CLIQUES}
        tables["upper_legs"] = {"1111": 0.6, "1101": 0.4}  # left knee drops 40%
        tables["lower_legs"] = {"1111": 0.5, "1100": 0.1, "0101": 0.3, "0100": 0.1}
        prior = aug.VisibilityPrior(tables)
        exact = aug.enumerate_structured_distribution(prior)
        n = 2 * 10**5
        masks, _ = aug.structured_visibility_masks(n, prior, np.random.default_rng(15))
        counts = {}
        for key in map(masks_to_key, masks):
            counts[key] = counts.get(key, 0) + 1
        tv = 0.0
        seen = set()
        for key, p in exact.items():
            tv += abs(counts.get(key, 0) / n - p)
            seen.add(key)
        for key, c in counts.items():
            if key not in seen:
                tv += c / n
        assert tv / 2 < 0.015

    def test_conditioning_restricts_support(self):
        # upper legs always drop the left knee; the lower table only
        # has left-knee-visible patterns -> empty support -> fallback
        tables = {name: {"1" * len(j): 1.0} for name, j in aug.CLIQUES}
        tables["upper_legs"] = {"1101": 1.0}
        tables["lower_legs"] = {"1111": 1.0}
        prior = aug.VisibilityPrior(tables)
        masks, fallbacks = aug.structured_visibility_masks(
            1000, prior, np.random.default_rng(16)
        )
        assert fallbacks == 1000
        # fallback fills remaining lower-leg joints as visible
        assert masks[:, int(Joint2D.LEFT_ANKLE)].all()
        assert not masks[:, int(Joint2D.LEFT_KNEE)].any()

    def test_enumeration_sums_to_one(self):
        prior = aug.default_visibility_prior()
        exact = aug.enumerate_structured_distribution(prior)
        assert abs(sum(exact.values()) - 1.0) < 1e-9
        for bits in exact:
            arr = np.array([c == "1" for c in bits])
            assert arr[TORSO_2D_INDEX].all()

    def test_existing_invisibility_preserved(self):
        prior = aug.VisibilityPrior.point_mass_full_visibility()
        vis = np.ones(13, dtype=bool)
        vis[Joint2D.NOSE] = False
        pose = Pose2D(np.random.default_rng(17).normal(size=(13, 2)), vis)
        out = aug.structured_dropout(pose, prior, np.random.default_rng(0))
        assert not out.visibility[Joint2D.NOSE]


class TestEstimatePrior:
    def test_all_visible_stream_gives_point_mass(self):
        masks = np.ones((100, 13), dtype=bool)
        prior = aug.estimate_visibility_prior(masks)
        for name, joints in aug.CLIQUES:
            assert prior.clique_tables[name] == {"1" * len(joints): 1.0}
        assert prior.full_patterns[0] == ("1" * 13, 1.0)

    def test_counting_example(self):
        # 70% fully visible, 30% left wrist+elbow dropped
        full = np.ones((70, 13), dtype=bool)
        dropped = np.ones((30, 13), dtype=bool)
        dropped[:, [int(Joint2D.LEFT_ELBOW), int(Joint2D.LEFT_WRIST)]] = False
        prior = aug.estimate_visibility_prior(np.concatenate([full, dropped]))
        # left_arm bit order: (shoulder, elbow, wrist, hip)
        assert prior.clique_tables["left_arm"] == pytest.approx(
            {"1111": 0.7, "1001": 0.3}
        )
        assert prior.clique_tables["right_arm"] == {"1111": 1.0}

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError):
            aug.estimate_visibility_prior(np.ones((0, 13), dtype=bool))

    def test_roundtrip_self_consistency(self):
        rng = np.random.default_rng(18)
        prior = aug.default_visibility_prior()
        masks, _ = aug.structured_visibility_masks(10**5, prior, rng)
        re_estimated = aug.estimate_visibility_prior(masks, top_k=50)
        for name, _ in aug.CLIQUES:
            table_a = prior.clique_tables[name]
            table_b = re_estimated.clique_tables[name]
            keys = set(table_a) | set(table_b)
            tv = sum(abs(table_a.get(k, 0.0) - table_b.get(k, 0.0)) for k in keys) / 2
            assert tv < 0.015, name

    def test_top_k_limit(self):
        rng = np.random.default_rng(19)
        masks = rng.random((5000, 13)) < 0.8
        prior = aug.estimate_visibility_prior(masks, top_k=10)
        assert len(prior.full_patterns) == 10
        freqs = [f for _, f in prior.full_patterns]
        assert freqs == sorted(freqs, reverse=True)


class TestPriorFile:
    def test_roundtrip(self, tmp_path):
        prior = aug.default_visibility_prior()
        path = tmp_path / "prior.txt"
        aug.save_visibility_prior(path, prior)
        loaded = aug.load_visibility_prior(path)
        assert loaded.clique_tables == prior.clique_tables
        assert loaded.full_patterns == prior.full_patterns

    def test_header_required(self, tmp_path):
        path = tmp_path / "prior.txt"
        path.write_text("clique,head,1,1.0\n")
        with pytest.raises(aug.PriorFormatError):
            aug.load_visibility_prior(path)

    def test_non_normalized_rejected(self, tmp_path):
        prior = aug.default_visibility_prior()
        path = tmp_path / "prior.txt"
        aug.save_visibility_prior(path, prior)
        text = path.read_text().replace("clique,head,0,0.2", "clique,head,0,0.3")
        path.write_text(text)
        with pytest.raises(aug.PriorFormatError):
            aug.load_visibility_prior(path)

    def test_small_slack_renormalized(self, tmp_path):
        prior = aug.default_visibility_prior()
        path = tmp_path / "prior.txt"
        aug.save_visibility_prior(path, prior)
        text = path.read_text().replace("clique,head,0,0.2", "clique,head,0,0.2000000001")
        path.write_text(text)
        loaded = aug.load_visibility_prior(path)
        total = sum(loaded.clique_tables["head"].values())
        assert abs(total - 1.0) < 1e-12

    def test_torso_point_mass_enforced(self):
        tables = {name: {"1" * len(j): 1.0} for name, j in aug.CLIQUES}
        tables["torso"] = {"1111": 0.9, "1011": 0.1}
        with pytest.raises(aug.PriorFormatError):
            aug.VisibilityPrior(tables)


class TestOcclusionStrategy:
    def test_none_is_identity(self):
        strategy = aug.OcclusionStrategy(kind="none")
        pose = full_pose2d(np.random.default_rng(20))
        out = strategy.apply(pose, np.random.default_rng(0))
        assert np.array_equal(out.visibility, pose.visibility)

    def test_threshold_only(self):
        strategy = aug.OcclusionStrategy(kind="threshold_only", confidence_threshold=0.5)
        pose = full_pose2d(np.random.default_rng(21))
        conf = np.full(13, 0.9)
        conf[int(Joint2D.NOSE)] = 0.1
        out = strategy.apply(pose, np.random.default_rng(0), confidences=conf)
        assert not out.visibility[Joint2D.NOSE]
        assert out.visibility.sum() == 12

    def test_structured_gets_default_prior(self):
        strategy = aug.OcclusionStrategy(kind="structured")
        assert strategy.prior is not None

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            aug.OcclusionStrategy(kind="banana")

    def test_torso_always_visible_in_every_strategy(self):
        rng = np.random.default_rng(22)
        pose = full_pose2d(rng)
        conf = rng.uniform(0, 1, 13)
        for kind in ("none", "threshold_only", "independent", "structured"):
            strategy = aug.OcclusionStrategy(kind=kind, q=0.9)
            out = strategy.apply(pose, rng, confidences=conf)
            assert out.visibility[TORSO_2D_INDEX].all()
            assert np.all(out.coords[~out.visibility] == 0.0)
