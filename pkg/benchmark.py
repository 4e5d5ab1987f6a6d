#!/usr/bin/env python3
"""Script CLI pour les expériences directionnelles du banc d'essai.

Lance le pipeline complet sur une configuration, relit les rapports et
écrit un tableau CSV (critère, valeur mesurée, seuil, verdict).
"""

import argparse
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from loguru import logger

from src.cli import PIPELINE, run
from src.config import ExperimentConfig, load_config
from src.utils import read_json, setup_logging


def _row(criterion: str, measured: Optional[float], threshold: str, passed: Optional[bool]) -> Dict[str, Any]:
    return {"criterion": criterion, "measured": measured, "threshold": threshold, "passed": passed}


def _weighted(reports: Dict[str, Any], key: str) -> Optional[float]:
    entry = reports.get(key)
    return entry["weighted"] if entry else None


def directional_rows(out_dir: Path, robust_dir: Optional[Path] = None) -> List[Dict[str, Any]]:
    """Compare the evaluate/matrix reports of a run against the expected orderings."""

    reports = read_json(out_dir / "reports" / "evaluate.json")["reports"]
    rows: List[Dict[str, Any]] = []

    delta = _weighted(reports, "pgd-linf/perturbation")
    if delta is not None:
        rows.append(_row("pgd-linf perturbation weighted accuracy", delta, ">= 0.70", delta >= 0.70))

    x_adv = _weighted(reports, "pgd-linf/adv-example")
    pen = _weighted(reports, "pgd-linf/pen-perturbation")
    if None not in (delta, x_adv, pen):
        ordered = delta - pen >= 0.03 and pen - x_adv >= 0.03
        rows.append(_row("acc(delta) > acc(pen) > acc(x_adv), gaps >= 3 points", pen, "ordering", ordered))

    square = reports.get("square-linf/perturbation")
    if square is not None and delta is not None:
        chance = square["chance"]["weighted"]
        ok = square["weighted"] - chance <= 0.15 and delta - square["weighted"] >= 0.20
        rows.append(_row("square-linf within 15 points of chance", square["weighted"], f"chance {chance:.3f}", ok))

    matrix_file = out_dir / "reports" / "matrix.json"
    if matrix_file.is_file():
        m = read_json(matrix_file)
        if "pgd-linf" in m["rows"] and {"fgsm", "pgd-l2"} <= set(m["cols"]):
            r = m["rows"].index("pgd-linf")
            fgsm, l2 = m["values"][r][m["cols"].index("fgsm")], m["values"][r][m["cols"].index("pgd-l2")]
            if fgsm is not None and l2 is not None:
                rows.append(_row("pgd-linf row: fgsm column - pgd-l2 column", fgsm - l2, ">= 0.05", fgsm - l2 >= 0.05))

    if robust_dir is not None and delta is not None:
        robust = _weighted(read_json(robust_dir / "reports" / "evaluate.json")["reports"], "pgd-linf/perturbation")
        if robust is not None:
            rows.append(_row("standard - robust victims", delta - robust, ">= 0.05", delta - robust >= 0.05))
    return rows


def run_pipeline(cfg: ExperimentConfig, threads: Optional[int]) -> None:
    for stage in PIPELINE:
        summary = run(cfg, stage, threads)
        logger.info("{} done: {}", stage, {k: v for k, v in summary.items() if k != "config_hash"})


def main() -> int:
    parser = argparse.ArgumentParser(description="Expériences directionnelles du banc d'essai")
    parser.add_argument("--config", default="configs/desk.toml", help="Fichier d'expérience")
    parser.add_argument("--robust-config", default=None, help="Expérience sur victimes robustes (optionnel)")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--skip-run", action="store_true", help="Relire les rapports existants sans relancer")
    parser.add_argument("--output", default="benchmark_report.csv", help="Fichier de sortie CSV")
    args = parser.parse_args()

    cfg = load_config(args.config)
    setup_logging(cfg.log_level, Path(cfg.output_dir) / "vmparse.log")
    robust_cfg = load_config(args.robust_config) if args.robust_config else None
    if not args.skip_run:
        run_pipeline(cfg, args.threads)
        if robust_cfg is not None:
            run_pipeline(robust_cfg, args.threads)

    rows = directional_rows(Path(cfg.output_dir), Path(robust_cfg.output_dir) if robust_cfg else None)
    df = pd.DataFrame(rows, columns=["criterion", "measured", "threshold", "passed"])
    df["measured"] = df["measured"].map(lambda v: None if v is None or math.isnan(v) else round(v, 4))
    df.to_csv(args.output, index=False)
    print(f"Rapport sauvegardé dans {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
