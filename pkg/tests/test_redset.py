import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import small_convnet
from src.attacks import AttackSpec
from src.container import write_container
from src.datasets import SyntheticSpec, synth_dataset
from src.errors import ConfigurationError, FormatError
from src.redset import (
    AttributeSchema,
    ParsingDataset,
    assemble,
    check_disjoint,
    concat_datasets,
    generate_records,
    load_dataset,
    load_records,
    save_dataset,
    save_records,
    select_victims,
    split_images,
    with_estimated_perturbation,
)
from src.victim_zoo import CatalogEntry, ModelAttributes, TrainedVictim

IMAGES = synth_dataset(SyntheticSpec(classes=4, image_size=8, noise_std=0.05, samples_per_class=4), stream=1)
FGSM = AttackSpec("fgsm", eps=0.3, seed=5)


def _zoo():
    return [
        TrainedVictim(ModelAttributes("resnet9", 3, "relu", 0.0), small_convnet(seed=1, activation="relu"), 0.5),
        TrainedVictim(ModelAttributes("resnet9", 5, "tanh", 0.375), small_convnet(seed=2), 0.5),
    ]


def _records(images=IMAGES, **kwargs):
    kwargs.setdefault("retain_failed", True)
    kwargs.setdefault("balance", False)
    return generate_records(_zoo(), FGSM, images, **kwargs)


class TestAttributeSchema(unittest.TestCase):
    """Encodage des attributs en tuples d'étiquettes."""

    def setUp(self):
        self.schema = AttributeSchema.fixed_at("resnet9")

    def test_fixed_architecture(self):
        self.assertEqual(self.schema.names, ("ks", "af", "ws"))
        self.assertEqual(self.schema.counts, (3, 3, 3))
        self.assertEqual(self.schema.combinations, 27)
        self.assertEqual(self.schema.fixed_values, {"at": "resnet9", "robust": False})

    def test_encode_decode(self):
        attrs = ModelAttributes("resnet9", 5, "tanh", 0.625)
        self.assertEqual(self.schema.encode(attrs), (1, 1, 2))
        self.assertEqual(self.schema.decode((1, 1, 2)), attrs)
        with self.assertRaises(ConfigurationError):
            self.schema.encode(ModelAttributes("vgg11", 5, "tanh", 0.625))
        with self.assertRaises(ConfigurationError):
            self.schema.decode((3, 0, 0))

    def test_merged_and_derived(self):
        self.assertEqual(AttributeSchema.merged().counts, (5, 3, 3, 3))
        attrs = [ModelAttributes("resnet9", 3, "relu", 0.0), ModelAttributes("vgg13", 3, "relu", 0.0)]
        self.assertEqual(AttributeSchema.for_attributes(attrs), AttributeSchema.merged())
        self.assertEqual(AttributeSchema.for_attributes(attrs[:1]), self.schema)
        mixed = AttributeSchema.for_attributes([attrs[0], ModelAttributes("resnet9", 3, "relu", 0.0, True)])
        self.assertEqual(mixed, AttributeSchema.fixed_at("resnet9", None))
        self.assertEqual(mixed.fixed_values, {"at": "resnet9"})
        with self.assertRaises(ConfigurationError):
            AttributeSchema.for_attributes([])

    def test_combination_index(self):
        labels = np.array([[0, 0, 0], [2, 2, 2], [1, 0, 2]])
        self.assertEqual(self.schema.combination_index(labels).tolist(), [0, 26, 11])
        self.assertEqual(self.schema.combination_label(11), "ks=5,af=relu,ws=0.625")

    def test_dict_form(self):
        for schema in (self.schema, AttributeSchema.merged(robust=True)):
            self.assertEqual(AttributeSchema.from_dict(schema.to_dict()), schema)


class TestGenerateRecords(unittest.TestCase):
    def test_every_pair_is_attacked(self):
        rs = _records()
        self.assertEqual(len(rs), 2 * len(IMAGES))
        self.assertEqual(rs.victim_index.tolist(), [0] * len(IMAGES) + [1] * len(IMAGES))
        self.assertEqual(rs.manifest["retention"], "all")
        self.assertEqual(rs.manifest["audit_violations"], 0)
        self.assertEqual([v["attempted"] for v in rs.manifest["victims"]], [len(IMAGES)] * 2)
        self.assertEqual({r.image_id for r in rs.records}, set(IMAGES.ids.tolist()))

    def test_success_filter_and_balance(self):
        rs = _records(retain_failed=False, balance=True)
        self.assertTrue(all(r.success for r in rs.records))
        counts = np.bincount(rs.victim_index, minlength=2)
        self.assertEqual(counts[0], counts[1])
        cap = min(v["succeeded"] for v in rs.manifest["victims"])
        self.assertEqual(rs.manifest["per_victim_cap"], cap)
        self.assertEqual(len(rs), 2 * cap)

    def test_max_images(self):
        rs = _records(max_images=3)
        self.assertEqual(len(rs), 6)

    def test_unloadable_member_is_reported(self):
        broken = CatalogEntry(ModelAttributes("resnet9", 7, "elu", 0.0), seed=0, error="TrainingError: diverged")
        rs = generate_records(_zoo() + [broken], FGSM, IMAGES, retain_failed=True, balance=False)
        self.assertEqual(len(rs.victims), 2)
        self.assertIn("error", rs.manifest["victims"][2])
        with self.assertRaises(ConfigurationError):
            generate_records([broken], FGSM, IMAGES)
        with self.assertRaises(ConfigurationError):
            generate_records([], FGSM, IMAGES)

    def test_records_file(self):
        rs = _records(max_images=4)
        with tempfile.TemporaryDirectory() as tmp:
            save_records(Path(tmp) / "r.mpnz", rs, {"config_hash": "h"})
            loaded = load_records(Path(tmp) / "r.mpnz")
        self.assertEqual(len(loaded), len(rs))
        self.assertEqual(loaded.schema, rs.schema)
        self.assertEqual(loaded.victims, rs.victims)
        for a, b in zip(loaded.records, rs.records):
            np.testing.assert_array_equal(a.x_adv, b.x_adv)
            self.assertEqual((a.success, a.image_id), (b.success, b.image_id))
        np.testing.assert_array_equal(loaded.victim_index, rs.victim_index)


class TestAssemble(unittest.TestCase):
    def setUp(self):
        self.rs = _records()

    def test_formats(self):
        adv = assemble(self.rs, "adv-example")
        pert = assemble(self.rs, "perturbation")
        np.testing.assert_array_equal(adv.z, np.stack([r.x_adv for r in self.rs.records]))
        np.testing.assert_array_equal(pert.z, adv.delta)
        self.assertIsNone(pert.delta)
        self.assertEqual(adv.y[0].tolist(), [0, 0, 0])
        self.assertEqual(adv.y[-1].tolist(), [1, 1, 1])
        self.assertEqual(adv.victim_ids[0], "resnet9-k3-relu-ws0")
        with self.assertRaises(ConfigurationError):
            assemble(self.rs, "pen-perturbation")

    def test_views(self):
        ds = assemble(self.rs, "perturbation")
        parts = ds.by_victim()
        self.assertEqual(list(parts), ["resnet9-k3-relu-ws0", "resnet9-k5-tanh-ws0.375"])
        self.assertEqual(sum(len(p) for p in parts.values()), len(ds))
        mask = np.zeros(len(ds), dtype=bool)
        mask[:3] = True
        self.assertEqual(len(ds.subset(mask)), 3)
        with self.assertRaises(ConfigurationError):
            ParsingDataset(ds.z, ds.y, ds.schema, "raw", ds.victim_ids, ds.image_ids)

    def test_concat(self):
        ds = assemble(self.rs, "adv-example")
        pooled = concat_datasets([ds, ds])
        self.assertEqual(len(pooled), 2 * len(ds))
        self.assertEqual(pooled.delta.shape, pooled.z.shape)
        with self.assertRaises(ConfigurationError):
            concat_datasets([ds, assemble(self.rs, "perturbation")])

    def test_estimated_perturbation(self):
        class HalfPen:
            def estimate(self, z, batch_size=128):
                return z * 0.5

        ds = assemble(self.rs, "adv-example")
        est = with_estimated_perturbation(ds, HalfPen())
        self.assertEqual(est.input_format, "pen-perturbation")
        np.testing.assert_allclose(est.z, ds.z * 0.5)
        with self.assertRaises(ConfigurationError):
            with_estimated_perturbation(assemble(self.rs, "perturbation"), HalfPen())


def _mixed_zoo():
    return [
        TrainedVictim(ModelAttributes("resnet9", 3, "relu", 0.0), small_convnet(seed=1, activation="relu"), 0.5),
        TrainedVictim(ModelAttributes("resnet20", 5, "tanh", 0.375), small_convnet(seed=2), 0.5),
        TrainedVictim(ModelAttributes("resnet9", 5, "tanh", 0.375, True), small_convnet(seed=3), 0.5),
    ]


class TestSchemaCompatibility(unittest.TestCase):
    """Architectures et régimes d'entraînement différents, mêmes têtes."""

    def setUp(self):
        rs = generate_records(_mixed_zoo(), FGSM, IMAGES, retain_failed=True, balance=False)
        self.ds = assemble(rs, "perturbation")

    def test_mixed_zoo_schema(self):
        self.assertEqual(self.ds.schema, AttributeSchema.merged(None))
        self.assertEqual(self.ds.y.shape, (3 * len(IMAGES), 4))

    def test_same_heads_ignores_fixed_values(self):
        r9, r20 = AttributeSchema.fixed_at("resnet9"), AttributeSchema.fixed_at("resnet20", True)
        self.assertNotEqual(r9, r20)
        self.assertTrue(r9.same_heads(r20))
        self.assertFalse(r9.same_heads(AttributeSchema.merged()))

    def test_select_architecture_drops_the_at_column(self):
        part = select_victims(self.ds, "resnet20")
        self.assertEqual(part.schema, AttributeSchema.fixed_at("resnet20", None))
        self.assertEqual(part.y.shape, (len(IMAGES), 3))
        self.assertEqual(set(part.y[:, 0].tolist()), {1})
        self.assertEqual(set(part.victim_ids), {"resnet20-k5-tanh-ws0.375"})
        self.assertEqual(part.manifest["selection"], {"architecture": "resnet20", "robust": None})

    def test_select_training_regime(self):
        robust = select_victims(self.ds, "resnet9", robust=True)
        self.assertEqual(robust.schema, AttributeSchema.fixed_at("resnet9", True))
        self.assertEqual(len(robust), len(IMAGES))
        standard = select_victims(self.ds, robust=False)
        self.assertEqual(standard.schema, AttributeSchema.merged(False))
        self.assertEqual(len(standard), 2 * len(IMAGES))
        with self.assertRaises(ConfigurationError):
            select_victims(self.ds, "vgg11")

    def test_pooling_across_architectures(self):
        r9 = select_victims(self.ds, "resnet9", robust=False)
        r20 = select_victims(self.ds, "resnet20")
        pooled = concat_datasets([r9, r20])
        self.assertTrue(pooled.schema.same_heads(r9.schema))
        self.assertEqual(pooled.schema.fixed, ())
        self.assertEqual(pooled.manifest["fixed"], [{"at": "resnet9", "robust": False}, {"at": "resnet20"}])
        with self.assertRaises(ConfigurationError):
            pooled.schema.decode((0, 0, 0))
        with self.assertRaises(ConfigurationError):
            concat_datasets([r9, self.ds])


class TestDatasetFiles(unittest.TestCase):
    def test_round_trip(self):
        ds = assemble(_records(max_images=4), "adv-example")
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(ds, Path(tmp) / "d.mpnz")
            loaded = load_dataset(Path(tmp) / "d.mpnz")
        np.testing.assert_array_equal(loaded.z, ds.z)
        np.testing.assert_array_equal(loaded.y, ds.y)
        np.testing.assert_array_equal(loaded.delta, ds.delta)
        self.assertEqual(loaded.victim_ids, ds.victim_ids)
        self.assertEqual(loaded.schema, ds.schema)
        self.assertEqual(loaded.content_hash(), ds.content_hash())

    def test_bad_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "d.mpnz"
            write_container(path, {"kind": "parsing-dataset"}, {"z": np.zeros((1, 2), np.float32)})
            with self.assertRaises(FormatError):
                load_dataset(path)


def test_split_images_is_disjoint_and_carries_over():
    split = split_images(IMAGES, 0.75, seed=0)
    assert len(split.train) == 12 and len(split.test) == 4
    train = assemble(_records(split.train), "perturbation")
    test = assemble(_records(split.test), "perturbation")
    assert check_disjoint(train, test)
    assert not check_disjoint(train, train)


def test_empty_split_is_refused():
    with pytest.raises(ConfigurationError):
        split_images(IMAGES.subset(np.arange(0)), 0.8)


if __name__ == "__main__":
    unittest.main()
