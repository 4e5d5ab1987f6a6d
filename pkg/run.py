#!/usr/bin/env python3
"""
Script de lancement du banc d'essai de parsing de modèles victimes
Usage: python run.py <sous-commande> --config configs/desk.toml [--seed N] [--threads N] [--out DIR]
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def check_dependencies() -> bool:
    """Vérifier les dépendances critiques"""
    required_packages = {
        "numpy": "numpy",
        "pandas": "pandas",
        "sklearn": "scikit-learn",
        "pydantic": "pydantic",
        "jsonschema": "jsonschema",
        "joblib": "joblib",
        "cachetools": "cachetools",
        "loguru": "loguru",
        "dotenv": "python-dotenv",
    }

    missing = []
    for module, package in required_packages.items():
        try:
            __import__(module)
        except ImportError:
            missing.append(package)

    if missing:
        print(f"Dépendances manquantes: {', '.join(missing)}", file=sys.stderr)
        print("Installez avec: pip install -r requirements.txt", file=sys.stderr)
        return False
    return True


def main() -> int:
    if not check_dependencies():
        return 3
    from src.cli import main as cli_main

    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
