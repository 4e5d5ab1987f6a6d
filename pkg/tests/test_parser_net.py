import math
import sys
import unittest
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import ConfigurationError, FormatError, ShapeMismatchError
from src.parser_net import (
    JointTrainConfig,
    build_mpn,
    build_pen,
    load_mpn,
    load_pen,
    mpn_loss,
    predict,
    pretrain_pen,
    save_mpn,
    save_pen,
    train_joint,
    train_mpn,
)
from src.redset import AttributeSchema, ParsingDataset

SCHEMA = AttributeSchema.fixed_at("resnet9")
SHAPE = (3, 8, 8)


def _dataset(n=48, fmt="adv-example", seed=0):
    """Inputs drawn around one template per attribute combination."""

    rng = np.random.default_rng(seed)
    templates = np.random.default_rng(99).uniform(0.1, 0.9, size=(SCHEMA.combinations,) + SHAPE)
    y = rng.integers(0, 3, size=(n, SCHEMA.heads))
    z = templates[SCHEMA.combination_index(y)] + rng.normal(0, 0.02, size=(n,) + SHAPE)
    z = np.clip(z, 0, 1).astype(np.float32)
    delta = rng.uniform(-0.03, 0.03, size=z.shape).astype(np.float32) if fmt == "adv-example" else None
    return ParsingDataset(z, y, SCHEMA, fmt, [SCHEMA.decode(row).vm_id for row in y], np.arange(n), delta)


class TestMpnConstruction(unittest.TestCase):
    """Construction du MPN."""

    def test_mlp_parameter_count(self):
        mpn = build_mpn("mlp", SCHEMA, (3, 32, 32))
        self.assertEqual(mpn.parameter_count(), 411017)

    def test_heads_follow_the_schema(self):
        for schema in (SCHEMA, AttributeSchema.merged()):
            mpn = build_mpn("convnet4", schema, SHAPE, channels=4)
            self.assertEqual([h.output_shape for h in mpn.heads], [(n,) for n in schema.counts])

    def test_unknown_backbone(self):
        with self.assertRaises(ConfigurationError):
            build_mpn("transformer", SCHEMA, SHAPE)

    def test_initial_loss_is_near_uniform(self):
        ds = _dataset()
        mpn = build_mpn("mlp", SCHEMA, SHAPE)
        expected = sum(math.log(n) for n in SCHEMA.counts)
        self.assertAlmostEqual(mpn_loss(mpn, ds.z, ds.y), expected, delta=0.05)


class TestMpnTraining(unittest.TestCase):
    def test_loss_goes_down(self):
        ds = _dataset(n=64)
        mpn = build_mpn("mlp", SCHEMA, SHAPE, seed=3)
        before = mpn_loss(mpn, ds.z, ds.y)
        train_mpn(mpn, ds, epochs=20, batch_size=16, lr=0.05, seed=1)
        self.assertLess(mpn_loss(mpn, ds.z, ds.y), before)
        self.assertEqual(len(mpn.history["loss"]), 20)
        self.assertEqual(len(mpn.history["head_accuracy"][0]), 3)
        self.assertEqual(mpn.input_format, "adv-example")

    def test_zero_epochs_still_sets_the_format(self):
        mpn = build_mpn("mlp", SCHEMA, SHAPE)
        train_mpn(mpn, _dataset(fmt="perturbation"), epochs=0)
        self.assertEqual(mpn.input_format, "perturbation")
        self.assertNotIn("loss", mpn.history)

    def test_schema_and_shape_checks(self):
        with self.assertRaises(ConfigurationError):
            train_mpn(build_mpn("mlp", AttributeSchema.merged(), SHAPE), _dataset(), epochs=1)
        with self.assertRaises(ShapeMismatchError):
            train_mpn(build_mpn("mlp", SCHEMA, (3, 16, 16)), _dataset(), epochs=1)


class TestPredict(unittest.TestCase):
    def setUp(self):
        self.ds = _dataset(n=16, fmt="perturbation")
        self.mpn = train_mpn(build_mpn("mlp", SCHEMA, SHAPE), self.ds, epochs=1, batch_size=8)

    def test_distributions(self):
        pred = predict(self.mpn, self.ds.z, "perturbation", batch_size=5)
        self.assertEqual(pred.labels.shape, (16, 3))
        for p in pred.probabilities:
            np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
        data = pred.to_dict(SCHEMA)
        self.assertEqual(len(data["attributes"]), 16)
        self.assertEqual(data["attributes"][0]["at"], "resnet9")

    def test_format_is_enforced(self):
        with self.assertRaises(ConfigurationError):
            predict(self.mpn, self.ds.z, "adv-example")
        with self.assertRaises(ConfigurationError):
            predict(build_mpn("mlp", SCHEMA, SHAPE), self.ds.z, "perturbation")
        with self.assertRaises(ConfigurationError):
            predict(self.mpn, self.ds.z, "perturbation", pen=build_pen(3, width=4, input_shape=SHAPE))

    def test_pen_pipeline(self):
        pen = build_pen(3, width=4, input_shape=SHAPE)
        pred = predict(self.mpn, self.ds.z, "adv-example", pen=pen)
        direct = predict(self.mpn, np.zeros_like(self.ds.z), "perturbation")
        np.testing.assert_allclose(pred.probabilities[0], direct.probabilities[0])

    def test_empty_batch(self):
        pred = predict(self.mpn, self.ds.z[:0], "perturbation")
        self.assertEqual(pred.labels.shape, (0, 3))


class TestPen(unittest.TestCase):
    def test_initial_estimate_is_zero(self):
        pen = build_pen(4, width=4, input_shape=SHAPE)
        x = _dataset(n=4).z
        np.testing.assert_array_equal(pen.estimate(x), np.zeros_like(x))
        with self.assertRaises(ConfigurationError):
            build_pen(2)

    def test_other_spatial_sizes_share_parameters(self):
        pen = build_pen(3, width=4, input_shape=SHAPE)
        wide = pen.for_shape((3, 16, 16))
        self.assertIs(wide.params, pen.network.params)
        self.assertEqual(wide.output_shape, (3, 16, 16))
        with self.assertRaises(ShapeMismatchError):
            pen.for_shape((1, 8, 8))

    def test_pretraining_keeps_the_best_epoch(self):
        ds = _dataset(n=8)
        pen = build_pen(3, width=4, input_shape=SHAPE, seed=2)
        pretrain_pen(pen, ds, epochs=4, batch_size=4, lr=0.01, seed=0)
        val = pen.history["val_mae"]
        self.assertEqual(len(val), 5)
        self.assertEqual(len(pen.history["train_mae"]), 4)
        final = float(np.abs(pen.estimate(ds.z) - ds.delta).mean())
        self.assertAlmostEqual(final, min(val), places=6)
        self.assertLessEqual(final, val[0])

    def test_pretraining_needs_true_perturbations(self):
        with self.assertRaises(ConfigurationError):
            pretrain_pen(build_pen(3, width=4, input_shape=SHAPE), _dataset(fmt="perturbation"), epochs=1)


class TestJointTraining(unittest.TestCase):
    def test_joint_run_switches_the_mpn_format(self):
        ds = _dataset(n=16)
        mpn = build_mpn("mlp", SCHEMA, SHAPE)
        pen = build_pen(3, width=4, input_shape=SHAPE)
        train_joint(mpn, pen, ds, JointTrainConfig(epochs=2, batch_size=8, pen_lr=1e-3))
        self.assertEqual(mpn.input_format, "pen-perturbation")
        self.assertEqual(len(mpn.history["joint"]), 2)
        self.assertTrue(all(np.isfinite(mpn.history["joint"])))
        self.assertEqual(predict(mpn, ds.z, "adv-example", pen=pen).labels.shape, (16, 3))

    def test_denoise_only_leaves_the_mpn_alone(self):
        ds = _dataset(n=16)
        mpn = build_mpn("mlp", SCHEMA, SHAPE)
        before = {k: v.copy() for k, v in mpn.trunk.params.items()}
        pen = build_pen(3, width=4, input_shape=SHAPE)
        train_joint(mpn, pen, ds, JointTrainConfig(epochs=1, batch_size=8, denoise_only=True))
        self.assertIsNone(mpn.input_format)
        for name, value in before.items():
            np.testing.assert_array_equal(mpn.trunk.params[name], value)

    def test_config_validation(self):
        with self.assertRaises(ConfigurationError):
            JointTrainConfig(beta=0.0)
        with self.assertRaises(ConfigurationError):
            JointTrainConfig(batch_size=0)


def test_checkpoints_round_trip(tmp_path):
    ds = _dataset(n=8, fmt="perturbation")
    mpn = train_mpn(build_mpn("convnet4", SCHEMA, SHAPE, channels=4), ds, epochs=1, batch_size=4)
    pen = build_pen(3, width=4, input_shape=SHAPE)
    save_mpn(tmp_path / "mpn.mpnz", mpn, {"config_hash": "x"})
    save_pen(tmp_path / "pen.mpnz", pen)
    again = load_mpn(tmp_path / "mpn.mpnz")
    assert again.input_format == "perturbation"
    assert again.schema == SCHEMA
    np.testing.assert_array_equal(predict(again, ds.z, "perturbation").labels,
                                  predict(mpn, ds.z, "perturbation").labels)
    assert load_pen(tmp_path / "pen.mpnz").depth == 3


def test_wrong_checkpoint_kind(tmp_path):
    save_pen(tmp_path / "pen.mpnz", build_pen(3, width=4, input_shape=SHAPE))
    with pytest.raises(FormatError):
        load_mpn(tmp_path / "pen.mpnz")


if __name__ == "__main__":
    unittest.main()
