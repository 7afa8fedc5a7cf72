"""Exact transport distances, class distance matrices, and t-SNE."""

import numpy as np
import pytest

from proxbundle.data import LabeledFeatures
from proxbundle.errors import UsageError
from proxbundle.geometry import (
    TsneConfig,
    class_distance_matrix,
    joint_probabilities,
    mean_intra_class_distance,
    separability_report,
    tsne_embed,
    wasserstein1,
)
from proxbundle.rng import Rng

from oracles import w1_brute_force_tables, w1_by_assignment


class TestWasserstein1:
    def test_identical_point_sets(self, rng):
        x = rng.normal(4, 3)
        plan = wasserstein1(x, x)
        assert plan.cost == pytest.approx(0.0, abs=1e-12)

    def test_two_unit_masses(self):
        plan = wasserstein1(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
        assert plan.cost == pytest.approx(5.0, abs=1e-12)
        np.testing.assert_allclose(plan.plan, [[1.0]], atol=1e-12)

    def test_matches_assignment_oracle(self, rng):
        for _ in range(30):
            p = 2 + int(rng.uniform() * 4)
            q = 2 + int(rng.uniform() * 4)
            x, y = rng.normal(p, 3), rng.normal(q, 3)
            assert wasserstein1(x, y).cost == pytest.approx(
                w1_by_assignment(x, y), abs=1e-9
            )

    def test_matches_brute_force_tables(self, rng):
        for _ in range(5):
            p = 2 + int(rng.uniform() * 2)
            q = 2 + int(rng.uniform() * 2)
            x, y = rng.normal(p, 2), rng.normal(q, 2)
            assert wasserstein1(x, y).cost == pytest.approx(
                w1_brute_force_tables(x, y), abs=1e-9
            )

    def test_marginal_constraints(self, rng):
        for _ in range(20):
            p = 2 + int(rng.uniform() * 4)
            q = 2 + int(rng.uniform() * 4)
            plan = wasserstein1(rng.normal(p, 3), rng.normal(q, 3)).plan
            np.testing.assert_allclose(plan.sum(axis=1), 1.0 / p, atol=1e-9)
            np.testing.assert_allclose(plan.sum(axis=0), 1.0 / q, atol=1e-9)
            assert plan.min() >= -1e-12

    def test_cost_is_plan_contraction(self, rng):
        x, y = rng.normal(4, 2), rng.normal(3, 2)
        res = wasserstein1(x, y)
        c = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
        assert res.cost == float(np.sum(res.plan * c))

    def test_custom_weights(self, rng):
        x, y = rng.normal(3, 2), rng.normal(4, 2)
        mu = np.array([0.5, 0.25, 0.25])
        nu = np.array([0.25, 0.25, 0.25, 0.25])
        plan = wasserstein1(x, y, mu, nu).plan
        np.testing.assert_allclose(plan.sum(axis=1), mu, atol=1e-9)
        np.testing.assert_allclose(plan.sum(axis=0), nu, atol=1e-9)

    def test_symmetry(self, rng):
        for _ in range(10):
            x, y = rng.normal(4, 3), rng.normal(5, 3)
            assert wasserstein1(x, y).cost == pytest.approx(
                wasserstein1(y, x).cost, abs=1e-9
            )

    def test_triangle_inequality(self, rng):
        for _ in range(10):
            a, b, c = rng.normal(4, 3), rng.normal(5, 3), rng.normal(3, 3)
            ab = wasserstein1(a, b).cost
            bc = wasserstein1(b, c).cost
            ac = wasserstein1(a, c).cost
            assert ac <= ab + bc + 1e-7

    def test_rotation_invariance(self, rng):
        x, y = rng.normal(5, 3), rng.normal(4, 3)
        q, _ = np.linalg.qr(rng.normal(3, 3))
        base = wasserstein1(x, y).cost
        rotated = wasserstein1(x @ q, y @ q).cost
        assert rotated == pytest.approx(base, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(UsageError):
            wasserstein1(np.zeros((0, 2)), np.ones((2, 2)))

    def test_mismatched_masses_rejected(self, rng):
        with pytest.raises(UsageError):
            wasserstein1(rng.normal(2, 2), rng.normal(2, 2),
                         np.array([0.5, 0.5]), np.array([0.5, 0.6]))


class TestClassDistanceMatrix:
    def test_coinciding_classes(self, rng):
        pts = rng.normal(3, 10)
        feats = np.concatenate([pts, pts], axis=1)
        labels = np.array([0] * 10 + [1] * 10)
        dm = class_distance_matrix(LabeledFeatures(feats, labels))
        assert dm[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_translation_equals_shift_norm(self, rng):
        pts = rng.normal(3, 8)
        t = np.array([1.0, -2.0, 2.0])
        feats = np.concatenate([pts, pts + t[:, None]], axis=1)
        labels = np.array([0] * 8 + [1] * 8)
        dm = class_distance_matrix(LabeledFeatures(feats, labels))
        assert dm[0, 1] == pytest.approx(np.linalg.norm(t), abs=1e-9)

    def test_translation_upper_bound(self, rng):
        pts = rng.normal(3, 8)
        other = pts + 0.1 * rng.normal(3, 8)
        t = np.array([0.5, 0.5, -1.0])
        feats = np.concatenate([pts, other + t[:, None]], axis=1)
        labels = np.array([0] * 8 + [1] * 8)
        dm = class_distance_matrix(LabeledFeatures(feats, labels))
        bound = wasserstein1(pts.T, other.T).cost + np.linalg.norm(t)
        assert dm[0, 1] <= bound + 1e-9

    def test_three_gaussians_match_pairwise_oracle(self, rng):
        feats, labels = [], []
        for c in range(3):
            center = rng.normal(4) * 3.0
            for _ in range(5):
                feats.append(center + rng.normal(4))
                labels.append(c)
        lf = LabeledFeatures(np.stack(feats, axis=1), np.array(labels))
        dm = class_distance_matrix(lf)
        assert np.array_equal(dm, dm.T) and np.all(np.diag(dm) == 0.0)
        for i in range(3):
            for j in range(i + 1, 3):
                oracle = w1_by_assignment(lf.class_columns(i).T, lf.class_columns(j).T)
                assert dm[i, j] == pytest.approx(oracle, abs=1e-9)

    def test_needs_two_classes(self, rng):
        with pytest.raises(UsageError):
            class_distance_matrix(LabeledFeatures(rng.normal(3, 4), np.zeros(4)))


class TestSeparabilityReport:
    def test_identical_pre_post_zero_deltas(self, rng):
        feats = rng.normal(4, 12)
        labels = np.array([0, 1, 2] * 4)
        lf = LabeledFeatures(feats, labels)
        report = separability_report(lf, lf)
        assert report["mean_intra"]["delta"] == 0.0
        assert report["mean_inter_w1"]["delta"] == 0.0

    def test_contraction_halves_intra(self, rng):
        feats = rng.normal(4, 12)
        labels = np.array([0] * 6 + [1] * 6)
        pre = LabeledFeatures(feats, labels)
        contracted = feats.copy()
        for c in (0, 1):
            cols = labels == c
            mean = feats[:, cols].mean(axis=1, keepdims=True)
            contracted[:, cols] = mean + 0.5 * (feats[:, cols] - mean)
        post = LabeledFeatures(contracted, labels)
        report = separability_report(pre, post)
        assert report["mean_intra"]["post"] == pytest.approx(
            0.5 * report["mean_intra"]["pre"], rel=1e-9
        )

    def test_mismatched_labels_rejected(self, rng):
        a = LabeledFeatures(rng.normal(3, 4), np.array([0, 0, 1, 1]))
        b = LabeledFeatures(rng.normal(3, 4), np.array([0, 1, 1, 1]))
        with pytest.raises(UsageError):
            separability_report(a, b)


def blob_fixture(m_per=17, classes=3, dim=10, seed=77):
    r = Rng(seed)
    pts, labels = [], []
    count = [m_per, m_per, 50 - 2 * m_per]
    for c in range(classes):
        center = r.normal(dim) * 4.0
        for _ in range(count[c]):
            pts.append(center + 0.5 * r.normal(dim))
            labels.append(c)
    return np.stack(pts, axis=1), np.array(labels)


class TestTsne:
    def test_p_matrix_contract(self):
        feats, _ = blob_fixture()
        p, converged = joint_probabilities(feats, 15.0)
        assert converged.all()
        np.testing.assert_allclose(p, p.T, atol=1e-15)
        assert np.all(p >= 0.0)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_perplexity_hit_within_tolerance(self):
        feats, _ = blob_fixture()
        m = feats.shape[1]
        x = feats.T
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        from proxbundle.geometry import _conditional_row

        for i in range(m):
            row, ok = _conditional_row(np.delete(d2[i], i), 15.0)
            assert ok
            nz = row > 0
            perp = 2.0 ** (-np.sum(row[nz] * np.log2(row[nz])))
            assert abs(perp - 15.0) <= 1e-5

    def test_two_points_forced_half(self):
        feats = np.array([[0.0, 1.0], [0.0, 0.0]])
        p, _ = joint_probabilities(feats, 0.5)
        np.testing.assert_allclose(p[0, 1], 0.5, atol=1e-12)
        np.testing.assert_allclose(p[1, 0], 0.5, atol=1e-12)

    def test_kl_nonnegative_and_descends_after_exaggeration(self):
        feats, _ = blob_fixture()
        cfg = TsneConfig(perplexity=15.0, iterations=300, seed=3)
        emb, kl = tsne_embed(feats, cfg)
        assert emb.shape == (50, 2)
        assert all(v >= 0.0 for v in kl)
        post = kl[cfg.exaggeration_iters:]
        assert all(b <= a for a, b in zip(post, post[1:]))

    def test_q_normalization(self, rng):
        # q over any embedding sums to 1 across i != j pairs
        y = rng.normal(12, 2)
        diff = y[:, None, :] - y[None, :, :]
        w = 1.0 / (1.0 + (diff * diff).sum(axis=2))
        np.fill_diagonal(w, 0.0)
        q = w / w.sum()
        assert q.sum() == pytest.approx(1.0, abs=1e-12)

    def test_perplexity_bounds_checked(self):
        feats, _ = blob_fixture()
        with pytest.raises(UsageError):
            tsne_embed(feats, TsneConfig(perplexity=49.0))
        with pytest.raises(UsageError):
            joint_probabilities(feats, 0.0)

    def test_embedding_deterministic(self):
        feats, _ = blob_fixture()
        cfg = TsneConfig(iterations=60, seed=9)
        e1, k1 = tsne_embed(feats, cfg)
        e2, k2 = tsne_embed(feats, cfg)
        assert e1.tobytes() == e2.tobytes()
        assert k1 == k2


class TestIntraClassDistance:
    def test_single_member_class_zero(self):
        lf = LabeledFeatures(np.ones((2, 3)), np.array([0, 0, 1]))
        out = mean_intra_class_distance(lf)
        assert out[1] == 0.0
