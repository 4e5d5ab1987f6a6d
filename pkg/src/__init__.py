"""
Banc d'essai de "model parsing" à partir d'attaques adverses
============================================================

Ce package entraîne une grille de modèles victimes aux attributs contrôlés
(architecture, taille de noyau, activation, parcimonie), génère des attaques
ℓp contre eux, puis entraîne un réseau de parsing (MPN), éventuellement
précédé d'un réseau d'estimation de perturbation (PEN), qui retrouve les
attributs de la victime à partir de l'attaque.

Modules principaux:
- diffnet: réseaux numpy différentiables, pertes, SGD cosinus
- victim_zoo: construction, entraînement, élagage des victimes
- attacks: FGSM, PGD, CW, Square, NES, ZO-signSGD
- redset: jeux de données de parsing
- parser_net: MPN, PEN, entraînement joint
- evaluation: métriques et matrices de généralisation
- cli: orchestration des sous-commandes

Usage:
    from src.victim_zoo import ModelAttributes, build_victim
    from src.attacks import AttackSpec, attack_batch
"""

import os

# Single-threaded BLAS keeps reductions in a fixed order
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "1.0.0"
__license__ = "MIT"

from .errors import (
    TestbedError,
    ConfigurationError,
    UnsupportedConfigurationError,
    ShapeMismatchError,
    NumericError,
    TrainingError,
    FormatError,
    MissingArtifactError,
    AttackBatchError,
)
from .config import ExperimentConfig, load_config

__all__ = [
    # Erreurs
    "TestbedError",
    "ConfigurationError",
    "UnsupportedConfigurationError",
    "ShapeMismatchError",
    "NumericError",
    "TrainingError",
    "FormatError",
    "MissingArtifactError",
    "AttackBatchError",

    # Configuration
    "ExperimentConfig",
    "load_config",
]
