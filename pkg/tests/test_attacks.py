import os
import sys
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from loguru import logger

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import linear_net, small_convnet
from src.attacks import (
    AttackSpec,
    QueryOnlyVictim,
    WhiteBoxVictim,
    attack_batch,
    audit_record,
    cw,
    dlr_loss,
    fgsm,
    margin_loss,
    nes_gradient,
    pgd,
    project_lp,
    run_attack,
    snap_linear,
    square,
    square_side,
    zo_sign_gradient,
)
from src.datasets import SyntheticSpec, synth_dataset
from src.diffnet import cross_entropy
from src.errors import AttackBatchError, ConfigurationError, UnsupportedConfigurationError

DATA = synth_dataset(SyntheticSpec(classes=4, image_size=8, noise_std=0.05, samples_per_class=3), stream=1)


def _victim(seed=0):
    return WhiteBoxVictim(linear_net(num_classes=4, seed=seed))


def _threshold_victim():
    """Two classes; class 1 wins once the pixel sum exceeds 40."""

    net = linear_net(num_classes=2)
    net.params["1.weight"][...] = 0.0
    net.params["1.weight"][1] = 1.0
    net.params["1.bias"][...] = [0.0, -40.0]
    return WhiteBoxVictim(net)


def _ce(victim, x, y):
    return cross_entropy(victim.logits(x[None]).astype(np.float64), np.array([y]), reduction="sum")[0]


class TestProjection(unittest.TestCase):
    """Projection sur les boules ℓ∞ et ℓ2."""

    def test_linf_clamps(self):
        v = np.array([0.5, -0.2, -0.9], dtype=np.float32)
        np.testing.assert_array_equal(project_lp(v, "linf", 0.3), [0.3, -0.2, -0.3])

    def test_l2_scales(self):
        v = np.array([3.0, 4.0])
        np.testing.assert_allclose(project_lp(v, "l2", 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(project_lp(np.array([0.3, 0.4]), "l2", 1.0), [0.3, 0.4])

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            project_lp(np.zeros(3), "l1", 1.0)
        with self.assertRaises(ConfigurationError):
            project_lp(np.zeros(3), "l2", -1.0)


@given(
    arrays(np.float64, 3, elements=st.floats(-3, 3)),
    st.floats(0.05, 2.0),
    st.sampled_from(["linf", "l2"]),
)
@settings(max_examples=60, deadline=None)
def test_projection_is_the_nearest_ball_point(v, eps, norm):
    p = project_lp(v, norm, eps)
    size = np.abs(p).max() if norm == "linf" else np.linalg.norm(p)
    assert size <= eps * (1 + 1e-9) + 1e-12
    np.testing.assert_allclose(project_lp(p, norm, eps), p, rtol=0, atol=1e-12)
    # no sampled point of the ball is closer to v than the projection
    rng = np.random.default_rng(0)
    if norm == "linf":
        candidates = rng.uniform(-eps, eps, size=(2000, 3))
    else:
        d = rng.standard_normal((2000, 3))
        candidates = d / np.linalg.norm(d, axis=1, keepdims=True) * eps * rng.uniform(size=(2000, 1)) ** (1 / 3)
    best = np.linalg.norm(candidates - v, axis=1).min()
    assert np.linalg.norm(p - v) <= best + 1e-3


class TestSpecs(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            AttackSpec("deepfool", eps=0.1)
        with self.assertRaises(ConfigurationError):
            AttackSpec("fgsm", eps=-0.1)
        with self.assertRaises(ConfigurationError):
            AttackSpec("pgd-linf", eps=0.1, steps=0)
        with self.assertRaises(ConfigurationError):
            AttackSpec("nes", eps=0.1, mu=0.0)
        with self.assertRaises(ConfigurationError):
            AttackSpec("cw-l2", c=0.0)

    def test_step_size_pairs(self):
        self.assertAlmostEqual(AttackSpec.from_table("pgd-linf", 8 / 255).alpha, 1 / 255)
        self.assertAlmostEqual(AttackSpec.from_table("pgd-linf", 12 / 255).alpha, 2 / 255)
        self.assertAlmostEqual(AttackSpec.from_table("pgd-l2", 0.5).alpha, 0.1)
        self.assertAlmostEqual(AttackSpec.from_table("pgd-linf", 0.3).alpha, 2.5 * 0.3 / 10)

    def test_table_defaults(self):
        spec = AttackSpec.from_table("cw-l2", 10.0)
        self.assertEqual((spec.c, spec.max_iters, spec.norm), (10.0, 50, "l2"))
        self.assertEqual(AttackSpec.from_table("square-linf", 8 / 255, max_queries=None).max_queries, 5000)
        self.assertEqual(AttackSpec.from_table("pgd-linf", 8 / 255).label, "pgd-linf@8/255")
        self.assertEqual(AttackSpec.from_dict(spec.to_dict()).spec_hash(), spec.spec_hash())

    def _pgd_warnings(self, spec):
        messages = []
        sink = logger.add(messages.append, level="WARNING")
        try:
            pgd(_victim(), DATA.images[0], int(DATA.labels[0]), spec)
        finally:
            logger.remove(sink)
        return [m for m in messages if "Non-standard PGD" in m]

    def test_unusual_pair_is_logged(self):
        self.assertTrue(self._pgd_warnings(AttackSpec("pgd-linf", eps=8 / 255, alpha=0.1)))

    def test_tabulated_setting_is_quiet(self):
        self.assertEqual(self._pgd_warnings(AttackSpec("pgd-linf", eps=8 / 255, alpha=1 / 255, steps=10)), [])
        self.assertEqual(self._pgd_warnings(AttackSpec.from_table("pgd-l2", 0.5)), [])

    def test_off_table_step_count_is_logged(self):
        for spec in (AttackSpec("pgd-linf", eps=8 / 255, alpha=1 / 255, steps=5),
                     AttackSpec("pgd-linf", eps=8 / 255, alpha=0.1, steps=5)):
            with self.subTest(steps=spec.steps, alpha=spec.alpha):
                warnings = self._pgd_warnings(spec)
                self.assertEqual(len(warnings), 1)
                self.assertIn("steps=5", warnings[0])


class TestWhiteBox(unittest.TestCase):
    def test_fgsm_increases_the_loss_of_a_linear_model(self):
        victim = _victim()
        spec = AttackSpec("fgsm", eps=8 / 255)
        for x, y in zip(DATA.images, DATA.labels):
            rec = fgsm(victim, x, int(y), spec.eps)
            self.assertEqual(audit_record(rec, spec), [])
            self.assertGreaterEqual(_ce(victim, rec.x_adv, rec.label), _ce(victim, x, int(y)) - 1e-5)

    def test_pgd_stays_in_the_ball(self):
        victim = WhiteBoxVictim(small_convnet())
        for method, eps in (("pgd-linf", 8 / 255), ("pgd-l2", 0.5), ("pgd-dlr-linf", 16 / 255), ("pgd-dlr-l2", 1.0)):
            spec = AttackSpec.from_table(method, eps)
            with self.subTest(method=method):
                for i, (x, y) in enumerate(zip(DATA.images, DATA.labels)):
                    rec = pgd(victim, x, int(y), spec, np.random.default_rng(i))
                    self.assertEqual(audit_record(rec, spec), [])
                    self.assertEqual(rec.steps, 10)

    def test_pgd_without_random_start_is_deterministic(self):
        spec = AttackSpec("pgd-linf", eps=8 / 255, alpha=1 / 255, random_init=False)
        a = pgd(_victim(), DATA.images[0], int(DATA.labels[0]), spec, np.random.default_rng(1))
        b = pgd(_victim(), DATA.images[0], int(DATA.labels[0]), spec, np.random.default_rng(2))
        np.testing.assert_array_equal(a.x_adv, b.x_adv)

    def test_cw_keeps_the_smallest_successful_iterate(self):
        x = np.full((3, 8, 8), 0.2, dtype=np.float32)
        rec = cw(_threshold_victim(), x, 0, c=10.0, kappa=0.0, lr=0.01, iters=50)
        self.assertTrue(rec.success)
        first_success = 0.1 * np.sqrt(x.size)
        expected = first_success * 0.98 ** 49
        self.assertLess(np.linalg.norm(rec.delta), first_success)
        self.assertAlmostEqual(float(np.linalg.norm(rec.delta)), expected, delta=1e-3 * expected)
        self.assertEqual(audit_record(rec, AttackSpec("cw-l2", c=10.0)), [])

    def test_cw_without_iterations_returns_the_clean_image(self):
        x = np.full((3, 8, 8), 0.2, dtype=np.float32)
        rec = cw(_threshold_victim(), x, 0, c=1.0, iters=0)
        self.assertFalse(rec.success)
        np.testing.assert_array_equal(rec.delta, np.zeros_like(x))


class TestBlackBox(unittest.TestCase):
    def test_square_side_schedule(self):
        sides = [square_side(i, 1000, 32, 32, 0.08) for i in (0, 99, 100, 250, 500, 900)]
        self.assertEqual(sides, [9, 9, 4, 2, 1, 1])
        self.assertEqual(square_side(0, 10, 4, 4, 1.0), 4)

    def test_square_trace_and_budget(self):
        victim = QueryOnlyVictim.from_network(small_convnet(seed=3))
        for method, eps in (("square-linf", 16 / 255), ("square-l2", 1.0)):
            spec = AttackSpec(method, eps=eps, max_queries=60, p_init=0.3)
            with self.subTest(method=method):
                for i, (x, y) in enumerate(zip(DATA.images[:4], DATA.labels[:4])):
                    rec = square(victim, x, int(y), spec, np.random.default_rng(i))
                    self.assertEqual(audit_record(rec, spec), [])
                    self.assertLessEqual(rec.queries, 60)
                    self.assertEqual(len(rec.trace), rec.queries)
                    self.assertTrue(np.all(np.diff(rec.trace) <= 0))
                    if rec.queries < 60:
                        self.assertTrue(rec.success)

    def test_square_refuses_other_methods(self):
        with self.assertRaises(UnsupportedConfigurationError):
            square(_victim(), DATA.images[0], 0, AttackSpec("fgsm", eps=0.1))

    def test_query_counter(self):
        victim = QueryOnlyVictim.from_network(linear_net())
        victim.logits(DATA.images[:5])
        self.assertEqual(victim.queries, 5)

    def test_zoo_query_accounting(self):
        victim = QueryOnlyVictim.from_network(linear_net(seed=2))
        for method, per_iter in (("nes", 2 * 5), ("zo-signsgd", 5 + 1)):
            spec = AttackSpec(method, eps=4 / 255, q=5, mu=0.01, lr=1e-4, max_iters=3)
            with self.subTest(method=method):
                rec = run_attack(victim, DATA.images[0], int(DATA.labels[0]), spec, np.random.default_rng(0))
                self.assertEqual(audit_record(rec, spec), [])
                self.assertLessEqual(rec.queries, 3 * per_iter)
                self.assertEqual(rec.queries % per_iter, 0)

    def test_nes_spends_two_queries_per_direction(self):
        def stubborn(x):
            out = np.zeros((len(x), 4), dtype=np.float32)
            out[:, 0] = 5.0 + x.reshape(len(x), -1).mean(axis=1)
            return out

        oracle = QueryOnlyVictim(stubborn)
        spec = AttackSpec("nes", eps=4 / 255, q=5, mu=0.01, lr=1e-3, max_iters=3)
        rec = run_attack(oracle, DATA.images[0], 0, spec, np.random.default_rng(0))
        self.assertFalse(rec.success)
        self.assertEqual(rec.queries, 3 * 2 * 5)
        # the final record check is the only query outside the budget
        self.assertEqual(oracle.queries, rec.queries + 1)
        self.assertEqual(len(rec.trace), 3)


@pytest.mark.parametrize("estimator,cost", [(nes_gradient, lambda q: 2 * q), (zo_sign_gradient, lambda q: q + 1)])
def test_gradient_estimators_on_a_quadratic(estimator, cost):
    centre = np.linspace(-1.0, 1.0, 10)
    calls = []

    def loss_fn(points):
        calls.append(len(points))
        return 0.5 * ((points - centre) ** 2).sum(axis=1)

    point = np.zeros(10)
    grad, used = estimator(loss_fn, point, 0.01, 400, np.random.default_rng(0))
    true = point - centre
    cosine = grad @ true / (np.linalg.norm(grad) * np.linalg.norm(true))
    assert cosine > 0.9
    assert used == cost(400) == sum(calls)


@pytest.mark.parametrize("estimator", [nes_gradient, zo_sign_gradient])
def test_estimator_alignment_grows_with_directions(estimator):
    centre = np.linspace(-1.0, 1.0, 10)

    def loss_fn(points):
        return 0.5 * ((points - centre) ** 2).sum(axis=1) + 0.1 * np.sin(points).sum(axis=1)

    point = np.zeros(10)
    true = point - centre + 0.1 * np.cos(point)
    medians = []
    for q in (10, 100, 1000):
        cosines = []
        for seed in range(3):
            grad, _ = estimator(loss_fn, point, 0.01, q, np.random.default_rng(seed))
            cosines.append(grad @ true / (np.linalg.norm(grad) * np.linalg.norm(true)))
        medians.append(float(np.median(cosines)))
    assert medians[0] < medians[1] < medians[2]
    assert medians[1] > 0.9


def test_dlr_loss_is_scale_invariant():
    logits = np.array([3.0, 1.0, 0.0, -1.0])
    assert dlr_loss(logits, 0) == pytest.approx(-2 / 3)
    assert dlr_loss(logits, 1) == pytest.approx(2 / 3)
    assert dlr_loss(logits * 10 + 4, 1) == pytest.approx(2 / 3)
    with pytest.raises(ConfigurationError):
        dlr_loss(logits[:2], 0)


def test_margin_loss_and_snap():
    logits = np.array([[2.0, 1.0, 0.0], [0.0, 3.0, 1.0]])
    np.testing.assert_allclose(margin_loss(logits, np.array([0, 0])), [1.0, -3.0])
    x = np.full((2, 2), 0.1, dtype=np.float32)
    x_adv, delta = snap_linear(x, x + np.float32(1 / 255))
    np.testing.assert_array_equal(x + delta, x_adv)


class TestAttackBatch(unittest.TestCase):
    def test_thread_count_does_not_change_results(self):
        victim = WhiteBoxVictim(small_convnet(seed=5))
        spec = AttackSpec("square-linf", eps=8 / 255, max_queries=30, p_init=0.3, seed=11)
        one = attack_batch(victim, DATA.images[:6], DATA.labels[:6], spec, threads=1)
        two = attack_batch(victim, DATA.images[:6], DATA.labels[:6], spec, threads=2)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.x_adv, b.x_adv)
            self.assertEqual(a.queries, b.queries)

    def test_indices_and_ids(self):
        spec = AttackSpec("fgsm", eps=4 / 255)
        records = attack_batch(_victim(), DATA.images[:3], DATA.labels[:3], spec, indices=[7, 8, 9],
                               image_ids=[100, 101, 102])
        self.assertEqual([r.index for r in records], [7, 8, 9])
        self.assertEqual([r.image_id for r in records], [100, 101, 102])
        self.assertEqual(attack_batch(_victim(), DATA.images[:0], DATA.labels[:0], spec), [])

    def test_failures_are_aggregated(self):
        spec = AttackSpec("fgsm", eps=4 / 255)
        with patch("src.attacks.run_attack", side_effect=RuntimeError("boom")):
            with self.assertRaises(AttackBatchError) as ctx:
                attack_batch(_victim(), DATA.images[:2], DATA.labels[:2], spec)
        self.assertEqual(set(ctx.exception.errors), {0, 1})
        self.assertIn("boom", str(ctx.exception))

    def test_vectorised_white_box_path(self):
        spec = AttackSpec.from_table("pgd-linf", 8 / 255)
        with patch.dict(os.environ, {"VMPARSE_FAST_NONDETERMINISTIC": "1"}):
            records = attack_batch(_victim(), DATA.images, DATA.labels, spec)
        self.assertEqual(len(records), len(DATA))
        for rec in records:
            self.assertEqual(audit_record(rec, spec), [])


if __name__ == "__main__":
    unittest.main()
