import sys
import tempfile
import unittest
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import ExperimentConfig, load_config, parse_config, parse_strength, split_condition, strength_label
from src.errors import ConfigurationError

CONFIG_DIR = Path(__file__).parent.parent / "configs"


class TestStrengths(unittest.TestCase):
    """Forces d'attaque écrites en nombre ou en fraction k/255."""

    def test_fraction(self):
        self.assertAlmostEqual(parse_strength("8/255"), 8 / 255)
        self.assertAlmostEqual(parse_strength(" 4 / 255 "), 4 / 255)

    def test_plain_numbers(self):
        self.assertEqual(parse_strength(0.5), 0.5)
        self.assertEqual(parse_strength("0.25"), 0.25)
        self.assertEqual(parse_strength(1), 1.0)

    def test_unreadable(self):
        with self.assertRaises(ValueError):
            parse_strength("1/0")
        with self.assertRaises(ValueError):
            parse_strength("strong")

    def test_labels(self):
        self.assertEqual(strength_label(8 / 255, "linf"), "8/255")
        self.assertEqual(strength_label(0.5, "l2"), "0.5")


class TestParseConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = parse_config("seed = 3\n")
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.threads, 1)
        self.assertEqual(cfg.victims.architectures, ["resnet9"])
        self.assertEqual(cfg.mpn.backbone, "convnet4")

    def test_unknown_key_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            parse_config("bogus = 1\n")

    def test_unknown_vocabulary_value(self):
        with self.assertRaises(ConfigurationError):
            parse_config('[victims]\narchitectures = ["lenet"]\n')
        with self.assertRaises(ConfigurationError):
            parse_config('[victims]\nsparsities = [0.5]\n')

    def test_attack_strength_fraction(self):
        cfg = parse_config('[attacks.a]\nmethod = "pgd-linf"\neps = "8/255"\n')
        self.assertAlmostEqual(cfg.attacks["a"].eps, 8 / 255)

    def test_unknown_attack_method(self):
        with self.assertRaises(ConfigurationError):
            parse_config('[attacks.a]\nmethod = "deepfool"\neps = 0.1\n')

    def test_undefined_attack_reference(self):
        text = '[attacks.a]\nmethod = "fgsm"\neps = 0.1\n[evaluation]\nmatrix_rows = ["b"]\n'
        with self.assertRaises(ConfigurationError):
            parse_config(text)

    def test_matrix_conditions(self):
        text = ('[attacks.a]\nmethod = "fgsm"\neps = 0.1\n[evaluation]\n'
                'matrix_rows = ["a:resnet9", "a:standard", "both"]\nmatrix_cols = ["a:resnet20:robust"]\n'
                '[evaluation.combined_rows]\nboth = ["a:resnet9", "a:resnet20"]\n')
        cfg = parse_config(text)
        self.assertEqual(cfg.evaluation.matrix_rows[-1], "both")
        for bad in ('["b:resnet9"]', '["a:lenet"]', '["a:robust:standard"]'):
            with self.subTest(rows=bad):
                with self.assertRaises(ConfigurationError):
                    parse_config(f'[attacks.a]\nmethod = "fgsm"\neps = 0.1\n[evaluation]\nmatrix_rows = {bad}\n')

    def test_cifar_needs_path(self):
        with self.assertRaises(ConfigurationError):
            parse_config('[dataset]\nsource = "cifar10"\n')

    def test_bad_syntax(self):
        with self.assertRaises(ConfigurationError):
            parse_config("seed = = 1\n")

    def test_json_files(self):
        cfg = parse_config('{"seed": 9, "threads": 2}', suffix=".json")
        self.assertEqual((cfg.seed, cfg.threads), (9, 2))


class TestCanonicalEcho(unittest.TestCase):
    def test_fixed_point(self):
        cfg = load_config(CONFIG_DIR / "desk.toml")
        echo = cfg.canonical_json()
        again = parse_config(echo, suffix=".json")
        self.assertEqual(again.canonical_json(), echo)
        self.assertIsInstance(again, ExperimentConfig)

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigurationError):
                load_config(Path(tmp) / "absent.toml")


def test_split_condition():
    assert split_condition("pgd-linf") == ("pgd-linf", None, None)
    assert split_condition("pgd-linf:resnet20") == ("pgd-linf", "resnet20", None)
    assert split_condition("pgd-linf:robust:resnet9") == ("pgd-linf", "resnet9", True)
    assert split_condition("cw:standard") == ("cw", None, False)
    with pytest.raises(ValueError):
        split_condition("cw:resnet9:vgg11")


@pytest.mark.parametrize("name", ["desk.toml", "robust.toml", "full_grid.toml"])
def test_shipped_configs_validate(name):
    cfg = load_config(CONFIG_DIR / name)
    assert cfg.attacks
    assert cfg.output_dir.startswith("runs/")


def test_desk_config_matches_the_desk_benchmark():
    cfg = load_config(CONFIG_DIR / "desk.toml")
    assert len(cfg.victims.kernel_sizes) * len(cfg.victims.activations) * len(cfg.victims.sparsities) == 27
    assert set(cfg.evaluation.matrix_cols) == {"fgsm", "pgd-linf", "pgd-l2"}


if __name__ == "__main__":
    unittest.main()
