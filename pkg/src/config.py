# src/config.py - CONSTANTES ET CONFIGURATION D'EXPÉRIENCE
"""
Configuration for the victim-model parsing testbed.

Two layers live here:

* module constants (attribute vocabulary, attack grids, default recipes),
  grouped under section banners;
* the validated :class:`ExperimentConfig` model read from a TOML or JSON
  experiment file by :func:`load_config`.
"""

from __future__ import annotations

import json
import re
import sys
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - older interpreters
    import tomli as tomllib

from .errors import ConfigurationError

# === INFORMATIONS APPLICATION ===
APP_NAME = "vmparse"
APP_VERSION = "1.0.0"
APP_DESCRIPTION = "Desk-scale testbed for parsing victim-model attributes from adversarial attacks"

# === ATTRIBUTS DES MODÈLES VICTIMES ===
ARCHITECTURES: Tuple[str, ...] = ("resnet9", "resnet18", "resnet20", "vgg11", "vgg13")
KERNEL_SIZES: Tuple[int, ...] = (3, 5, 7)
ACTIVATIONS: Tuple[str, ...] = ("relu", "tanh", "elu")
SPARSITIES: Tuple[float, ...] = (0.0, 0.375, 0.625)

# Order of the parsed attributes when AT is merged into the heads
ATTRIBUTE_VOCABULARY: Dict[str, Tuple[Any, ...]] = {
    "at": ARCHITECTURES,
    "ks": KERNEL_SIZES,
    "af": ACTIVATIONS,
    "ws": SPARSITIES,
}
FIXED_AT_ATTRIBUTES: Tuple[str, ...] = ("ks", "af", "ws")
MERGED_ATTRIBUTES: Tuple[str, ...] = ("at", "ks", "af", "ws")

# Matrix conditions: "<attack>[:<architecture>][:robust|:standard]"
CONDITION_SEPARATOR = ":"
REGIME_QUALIFIERS: Dict[str, bool] = {"robust": True, "standard": False}

# === DIFFNET ===
LAYER_KINDS = (
    "conv2d", "dense", "batchnorm2d", "activation",
    "avgpool", "maxpool", "flatten", "residual-add",
)
BATCHNORM_MOMENTUM = 0.1
BATCHNORM_EPS = 1e-5
ELU_ALPHA = 1.0
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_BATCHNORM_TOLERANCE = 1e-3

# === RECETTES D'ENTRAÎNEMENT ===
VICTIM_RECIPE = {
    "epochs": 75,
    "batch_size": 256,
    "lr": 0.1,
    "weight_decay": 5e-4,
    "momentum": 0.9,
    "width": 0.25,
    "seed": 0,
}
FINETUNE_EPOCH_FRACTION = 0.2
MPN_RECIPE = {
    "epochs": 100,
    "batch_size": 256,
    "lr": 0.1,
    "weight_decay": 5e-4,
    "momentum": 0.9,
    "seed": 0,
}
PEN_PRETRAIN = {"epochs": 20, "batch_size": 64, "lr": 0.01, "momentum": 0.9, "weight_decay": 0.0}
JOINT_TRAINING = {"beta": 1.0, "epochs": 50, "mpn_lr": 1e-3, "pen_lr": 1e-5, "batch_size": 64}
MPN_HIDDEN_UNITS = 128
MPN_CONV_CHANNELS = 64
PEN_DEPTH = 7
PEN_WIDTH = 64

# === ATTAQUES ===
ATTACK_METHODS: Tuple[str, ...] = (
    "fgsm", "pgd-linf", "pgd-l2", "pgd-dlr-linf", "pgd-dlr-l2",
    "cw-l2", "square-linf", "square-l2", "nes", "zo-signsgd",
)
WHITE_BOX_METHODS = {"fgsm", "pgd-linf", "pgd-l2", "pgd-dlr-linf", "pgd-dlr-l2", "cw-l2"}
PGD_METHODS = {"pgd-linf", "pgd-l2", "pgd-dlr-linf", "pgd-dlr-l2"}
SQUARE_METHODS = {"square-linf", "square-l2"}
ZOO_METHODS = {"nes", "zo-signsgd"}
L2_METHODS = {"pgd-l2", "pgd-dlr-l2", "cw-l2", "square-l2"}

LINF_STRENGTHS: Tuple[float, ...] = tuple(k / 255 for k in (4, 8, 12, 16))
L2_STRENGTHS: Tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
CW_STRENGTHS: Tuple[float, ...] = (0.1, 1.0, 10.0)

# (ε, α) pairs for 10-step PGD
PGD_LINF_STEP_PAIRS: Dict[float, float] = {
    4 / 255: 0.5 / 255,
    8 / 255: 1 / 255,
    12 / 255: 2 / 255,
    16 / 255: 2 / 255,
}
PGD_L2_STEP_PAIRS: Dict[float, float] = {0.25: 0.05, 0.5: 0.1, 0.75: 0.15, 1.0: 0.2}
PGD_STEPS = 10

CW_DEFAULTS = {"c": 1.0, "kappa": 0.0, "lr": 0.01, "max_iters": 50}
SQUARE_DEFAULTS = {"max_queries": 5000, "p_init": 0.08}
# Fractions of the query budget at which the square side is halved
SQUARE_HALVING_POINTS: Tuple[float, ...] = (0.1, 0.25, 0.5, 0.75)
ZOO_DEFAULTS = {"q": 10, "mu": 0.01, "lr": 0.0005, "max_iters": 500}

ADVERSARIAL_TRAINING = {"eps": 8 / 255, "alpha": 2 / 255, "steps": 7}
ROBUST_EVAL_ATTACK = {"eps": 8 / 255, "alpha": 2 / 255, "steps": 10}

# === FORMATS ===
INPUT_FORMATS = ("adv-example", "perturbation", "pen-perturbation")
CONTAINER_MAGIC = b"MPNZ"
CONTAINER_VERSION = 1
SPLIT_RATIO = 0.8

# === CLI ===
SUBCOMMANDS = (
    "train-victims", "attack", "build-dataset", "train-mpn", "train-pen",
    "train-joint", "evaluate", "matrix", "transfer", "parse",
)
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

_FRACTION_RE = re.compile(r"^\s*([0-9.]+)\s*/\s*([0-9.]+)\s*$")


def parse_strength(value: Union[str, float, int]) -> float:
    """Parse a strength written either as a number or as ``"k/255"``."""

    if isinstance(value, (int, float)):
        return float(value)
    match = _FRACTION_RE.match(str(value))
    if match:
        num, den = float(match.group(1)), float(match.group(2))
        if den == 0:
            raise ValueError(f"Division by zero in strength {value!r}")
        return num / den
    try:
        return float(value)
    except ValueError as exc:
        raise ValueError(f"Unreadable strength {value!r}") from exc


def strength_label(value: float, norm: str) -> str:
    """Human label for an attack strength (``8/255`` for ℓ∞ grids)."""

    if norm == "linf":
        frac = Fraction(value * 255).limit_denominator(4)
        return f"{float(frac):g}/255"
    return f"{value:g}"


# === MODÈLES DE CONFIGURATION (pydantic) ===

# Accepts 0.5, "0.5" or "8/255"
Strength = Annotated[float, BeforeValidator(parse_strength)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticConfig(_Strict):
    classes: int = Field(10, ge=2)
    image_size: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    template_seed: int = 0
    noise_std: float = Field(0.1, ge=0.0)
    samples_per_class: int = Field(200, ge=1)
    test_samples_per_class: int = Field(40, ge=1)


class DatasetConfig(_Strict):
    source: Literal["synthetic", "cifar10"] = "synthetic"
    path: Optional[str] = None
    split_ratio: float = Field(SPLIT_RATIO, gt=0.0, lt=1.0)
    attack_images: Optional[int] = Field(None, ge=1)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _cifar_needs_path(self) -> "DatasetConfig":
        if self.source == "cifar10" and not self.path:
            raise ValueError("dataset.path is required when source = 'cifar10'")
        return self


class RecipeConfig(_Strict):
    epochs: int = Field(VICTIM_RECIPE["epochs"], ge=0)
    batch_size: int = Field(VICTIM_RECIPE["batch_size"], ge=1)
    lr: float = Field(VICTIM_RECIPE["lr"], gt=0.0)
    weight_decay: float = Field(VICTIM_RECIPE["weight_decay"], ge=0.0)
    momentum: float = Field(VICTIM_RECIPE["momentum"], ge=0.0, lt=1.0)
    seed: int = 0


class AdversarialTrainingConfig(_Strict):
    eps: Strength = ADVERSARIAL_TRAINING["eps"]
    alpha: Strength = ADVERSARIAL_TRAINING["alpha"]
    steps: int = Field(ADVERSARIAL_TRAINING["steps"], ge=1)


class VictimConfig(_Strict):
    architectures: List[str] = Field(default_factory=lambda: ["resnet9"])
    kernel_sizes: List[int] = Field(default_factory=lambda: list(KERNEL_SIZES))
    activations: List[str] = Field(default_factory=lambda: list(ACTIVATIONS))
    sparsities: List[float] = Field(default_factory=lambda: list(SPARSITIES))
    robust: List[bool] = Field(default_factory=lambda: [False])
    width: float = Field(VICTIM_RECIPE["width"], gt=0.0, le=1.0)
    recipe: RecipeConfig = Field(default_factory=RecipeConfig)
    adversarial: AdversarialTrainingConfig = Field(default_factory=AdversarialTrainingConfig)

    @field_validator("architectures")
    @classmethod
    def _check_at(cls, values: List[str]) -> List[str]:
        return _check_vocabulary("architectures", values, ARCHITECTURES)

    @field_validator("kernel_sizes")
    @classmethod
    def _check_ks(cls, values: List[int]) -> List[int]:
        return _check_vocabulary("kernel_sizes", values, KERNEL_SIZES)

    @field_validator("activations")
    @classmethod
    def _check_af(cls, values: List[str]) -> List[str]:
        return _check_vocabulary("activations", values, ACTIVATIONS)

    @field_validator("sparsities")
    @classmethod
    def _check_ws(cls, values: List[float]) -> List[float]:
        return _check_vocabulary("sparsities", values, SPARSITIES)


class AttackConfig(_Strict):
    method: str
    eps: Optional[Strength] = None
    alpha: Optional[Strength] = None
    steps: Optional[int] = Field(None, ge=1)
    c: Optional[float] = Field(None, gt=0.0)
    kappa: Optional[float] = Field(None, ge=0.0)
    lr: Optional[float] = Field(None, ge=0.0)
    mu: Optional[float] = Field(None, gt=0.0)
    q: Optional[int] = Field(None, ge=1)
    max_queries: Optional[int] = Field(None, ge=1)
    max_iters: Optional[int] = Field(None, ge=1)
    random_init: Optional[bool] = None
    seed: Optional[int] = None

    @field_validator("method")
    @classmethod
    def _check_method(cls, value: str) -> str:
        if value not in ATTACK_METHODS:
            raise ValueError(f"unknown attack method {value!r}; expected one of {ATTACK_METHODS}")
        return value


class MpnConfig(_Strict):
    backbone: Literal["convnet4", "mlp"] = "convnet4"
    formats: List[Literal["adv-example", "perturbation"]] = Field(
        default_factory=lambda: ["perturbation", "adv-example"]
    )
    channels: int = Field(MPN_CONV_CHANNELS, ge=1)
    recipe: RecipeConfig = Field(default_factory=lambda: RecipeConfig(**MPN_RECIPE))


class PenConfig(_Strict):
    depth: int = Field(PEN_DEPTH, ge=3)
    width: int = Field(PEN_WIDTH, ge=1)
    epochs: int = Field(PEN_PRETRAIN["epochs"], ge=0)
    batch_size: int = Field(PEN_PRETRAIN["batch_size"], ge=1)
    lr: float = Field(PEN_PRETRAIN["lr"], gt=0.0)
    momentum: float = Field(PEN_PRETRAIN["momentum"], ge=0.0, lt=1.0)
    attack: Optional[str] = None


class JointConfig(_Strict):
    beta: float = Field(JOINT_TRAINING["beta"], gt=0.0)
    epochs: int = Field(JOINT_TRAINING["epochs"], ge=0)
    mpn_lr: float = Field(JOINT_TRAINING["mpn_lr"], gt=0.0)
    pen_lr: float = Field(JOINT_TRAINING["pen_lr"], gt=0.0)
    batch_size: int = Field(JOINT_TRAINING["batch_size"], ge=1)
    denoise_only: bool = False


class EvaluationConfig(_Strict):
    in_distribution: List[str] = Field(default_factory=list)
    matrix_rows: List[str] = Field(default_factory=list)
    matrix_cols: List[str] = Field(default_factory=list)
    combined_rows: Dict[str, List[str]] = Field(default_factory=dict)
    matrix_format: Literal["adv-example", "perturbation"] = "perturbation"
    transfer_attack: Optional[str] = None
    retain_failed: bool = False
    balance: bool = True


class ExperimentConfig(_Strict):
    """Top-level experiment description (one file per experiment)."""

    seed: int = 0
    threads: int = Field(1, ge=1)
    output_dir: str = "runs/default"
    log_level: str = "INFO"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    victims: VictimConfig = Field(default_factory=VictimConfig)
    attacks: Dict[str, AttackConfig] = Field(default_factory=dict)
    mpn: MpnConfig = Field(default_factory=MpnConfig)
    pen: PenConfig = Field(default_factory=PenConfig)
    joint: JointConfig = Field(default_factory=JointConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def _check_attack_references(self) -> "ExperimentConfig":
        known = set(self.attacks)
        ev = self.evaluation
        referenced: List[str] = list(ev.in_distribution)
        conditions = [r for r in ev.matrix_rows if r not in ev.combined_rows] + ev.matrix_cols
        for members in ev.combined_rows.values():
            conditions += members
        referenced += [split_condition(c)[0] for c in conditions]
        if self.evaluation.transfer_attack:
            referenced.append(self.evaluation.transfer_attack)
        if self.pen.attack:
            referenced.append(self.pen.attack)
        missing = sorted(set(referenced) - known)
        if missing:
            raise ValueError(f"evaluation references undefined attacks: {missing}")
        return self

    def canonical_json(self) -> str:
        """Canonical JSON echo (sorted keys, compact separators)."""

        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _check_vocabulary(name: str, values: List[Any], vocabulary: Tuple[Any, ...]) -> List[Any]:
    if not values:
        raise ValueError(f"{name} must not be empty")
    for value in values:
        if value not in vocabulary:
            raise ValueError(f"{name}: {value!r} is not one of {list(vocabulary)}")
    return values


def split_condition(condition: str) -> Tuple[str, Optional[str], Optional[bool]]:
    """Split a matrix condition into ``(attack, architecture, robust)``.

    ``"pgd-linf:resnet20:robust"`` gives ``("pgd-linf", "resnet20", True)``;
    a bare attack name leaves both qualifiers at ``None``.
    """

    attack, *qualifiers = condition.split(CONDITION_SEPARATOR)
    architecture: Optional[str] = None
    robust: Optional[bool] = None
    for qualifier in qualifiers:
        if qualifier in REGIME_QUALIFIERS and robust is None:
            robust = REGIME_QUALIFIERS[qualifier]
        elif qualifier in ARCHITECTURES and architecture is None:
            architecture = qualifier
        else:
            raise ValueError(f"Bad qualifier {qualifier!r} in matrix condition {condition!r}")
    return attack, architecture, robust


def parse_config(text: str, suffix: str = ".toml") -> ExperimentConfig:
    """Parse and validate experiment text (TOML by default, JSON for ``.json``).

    Raises:
        ConfigurationError: on syntax errors, unknown keys or invalid values.
    """

    try:
        raw = json.loads(text) if suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"Unreadable experiment file: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid experiment configuration:\n{exc}") from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read an experiment file from disk."""

    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Experiment file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), suffix=path.suffix.lower())
