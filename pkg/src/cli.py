"""Experiment orchestration: one subcommand per pipeline stage.

Every stage reads the artifacts of the previous ones from the output
directory, writes its own, and prints a one-line JSON summary on stdout.
"""

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import ValidationError

from .attacks import AttackSpec
from .config import (
    CW_DEFAULTS,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    SUBCOMMANDS,
    AttackConfig,
    ExperimentConfig,
    load_config,
    split_condition,
)
from .datasets import DatasetSplits, LabeledImages, SyntheticSpec, ingest_cifar10, synth_dataset, train_validation_split
from .errors import ConfigurationError, MissingArtifactError, TestbedError
from .evaluation import (
    dataset_key,
    evaluate_mpn,
    export_matrix,
    generalization_matrix,
    parsing_confusion,
    transfer_asr_matrix,
)
from .parser_net import (
    JointTrainConfig,
    MpnModel,
    build_mpn,
    build_pen,
    load_mpn,
    load_pen,
    predict,
    pretrain_pen,
    save_mpn,
    save_pen,
    train_joint,
    train_mpn,
)
from .redset import (
    AttributeSchema,
    ImageSplit,
    ParsingDataset,
    assemble,
    generate_records,
    load_dataset,
    load_records,
    save_dataset,
    save_records,
    select_victims,
    split_images,
)
from .utils import derive_seed, resolve_threads, setup_logging, sha256_file, sha256_json, write_json
from .victim_zoo import (
    TrainRecipe,
    TrainedVictim,
    attribute_grid,
    load_catalog,
    zoo_build,
)

PIPELINE = SUBCOMMANDS[:-1]


# =============================================================================
# WORKSPACE
# =============================================================================

@dataclass
class Workspace:
    """Artifact layout under the output directory."""

    root: Path

    @property
    def victims(self) -> Path:
        return self.root / "victims"

    @property
    def records(self) -> Path:
        return self.root / "records"

    @property
    def datasets(self) -> Path:
        return self.root / "datasets"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def prepare(self) -> None:
        for d in (self.victims, self.records, self.datasets, self.models, self.reports):
            d.mkdir(parents=True, exist_ok=True)

    def record_file(self, attack: str, side: str) -> Path:
        return self.records / f"{attack}-{side}.mpnz"

    def dataset_file(self, attack: str, fmt: str, side: str) -> Path:
        return self.datasets / f"{attack}-{fmt}-{side}.mpnz"

    def mpn_file(self, attack: str, fmt: str) -> Path:
        return self.models / f"mpn-{attack}-{fmt}.mpnz"


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(str(path), producer)
    return path


@dataclass
class Context:
    cfg: ExperimentConfig
    ws: Workspace
    threads: int

    @property
    def config_hash(self) -> str:
        return sha256_json(self.cfg.model_dump(mode="json"))

    def provenance(self, **inputs: Any) -> Dict[str, Any]:
        return {"config_hash": self.config_hash, "seed": self.cfg.seed, "inputs": inputs}

    def attack_names(self) -> List[str]:
        if not self.cfg.attacks:
            raise ConfigurationError("No attacks configured")
        return list(self.cfg.attacks)

    def evaluated_attacks(self) -> List[str]:
        return list(self.cfg.evaluation.in_distribution) or self.attack_names()

    def pen_attack(self) -> str:
        return self.cfg.pen.attack or self.attack_names()[0]


# =============================================================================
# DATA
# =============================================================================

def attack_spec(name: str, ac: AttackConfig, seed: int) -> AttackSpec:
    """Resolve a configured attack into a full spec (table defaults + overrides)."""

    if ac.method == "cw-l2":
        strength = ac.c if ac.c is not None else CW_DEFAULTS["c"]
    elif ac.eps is None:
        raise ConfigurationError(f"Attack {name!r} needs eps")
    else:
        strength = ac.eps
    overrides = {k: v for k, v in ac.model_dump(exclude={"method", "eps", "c", "seed"}).items() if v is not None}
    overrides["seed"] = ac.seed if ac.seed is not None else derive_seed(seed, "attack", name)
    if ac.method != "cw-l2" and ac.c is not None:
        overrides["c"] = ac.c
    return AttackSpec.from_table(ac.method, strength, **overrides)


def load_images(cfg: ExperimentConfig) -> Tuple[LabeledImages, LabeledImages]:
    """``(victim training pool, attack pool)``; the two never share images."""

    ds = cfg.dataset
    if ds.source == "cifar10":
        parts = ingest_cifar10(ds.path)
        return parts["train"], parts["test"]
    s = ds.synthetic
    victim_spec = SyntheticSpec(s.classes, s.image_size, s.channels, s.template_seed, s.noise_std,
                                s.samples_per_class, cfg.seed)
    attack_spec_ = SyntheticSpec(s.classes, s.image_size, s.channels, s.template_seed, s.noise_std,
                                 s.test_samples_per_class, cfg.seed)
    return synth_dataset(victim_spec, stream=0), synth_dataset(attack_spec_, stream=1)


def victim_splits(cfg: ExperimentConfig) -> DatasetSplits:
    pool, _ = load_images(cfg)
    return train_validation_split(pool, cfg.dataset.split_ratio, cfg.seed)


def attack_split(cfg: ExperimentConfig) -> ImageSplit:
    _, pool = load_images(cfg)
    return split_images(pool, cfg.dataset.split_ratio, cfg.seed)


def victim_recipe(cfg: ExperimentConfig) -> TrainRecipe:
    r = cfg.victims.recipe
    return TrainRecipe(r.epochs, r.batch_size, r.lr, r.weight_decay, r.momentum, cfg.victims.width, r.seed)


def fit_mpn(cfg: ExperimentConfig, ds: ParsingDataset, seed: int) -> MpnModel:
    """The one MPN recipe shared by train-mpn and matrix rows."""

    r = cfg.mpn.recipe
    mpn = build_mpn(cfg.mpn.backbone, ds.schema, ds.z.shape[1:], derive_seed(seed, "mpn"), cfg.mpn.channels)
    return train_mpn(mpn, ds, r.epochs, r.batch_size, r.lr, r.momentum, r.weight_decay,
                     derive_seed(seed, "mpn-train", r.seed))


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_train_victims(ctx: Context) -> Dict[str, Any]:
    v = ctx.cfg.victims
    grid = attribute_grid(v.architectures, v.kernel_sizes, v.activations, v.sparsities, v.robust)
    adv = AttackSpec("pgd-linf", eps=v.adversarial.eps, alpha=v.adversarial.alpha, steps=v.adversarial.steps)
    entries = zoo_build(grid, victim_splits(ctx.cfg), victim_recipe(ctx.cfg), ctx.ws.victims, ctx.threads, adv,
                        ctx.provenance(dataset=ctx.cfg.dataset.model_dump(mode="json")))
    ok = [e for e in entries if e.ok]
    return {
        "victims": len(entries),
        "trained": len(ok),
        "failed": [e.attributes.vm_id for e in entries if not e.ok],
        "mean_clean_acc": float(np.mean([e.clean_acc for e in ok])) if ok else None,
    }


def cmd_attack(ctx: Context) -> Dict[str, Any]:
    catalog = _require(ctx.ws.victims / "catalog.json", "train-victims")
    entries, _ = load_catalog(catalog)
    members = [e for e in entries if e.ok]
    if not members:
        raise MissingArtifactError("trained victims", "train-victims")
    split = attack_split(ctx.cfg)
    ev = ctx.cfg.evaluation
    out: Dict[str, Any] = {}
    for name, ac in ctx.cfg.attacks.items():
        spec = attack_spec(name, ac, ctx.cfg.seed)
        for side, images in (("train", split.train), ("test", split.test)):
            rs = generate_records(members, spec, images, side, ev.retain_failed, ev.balance, ctx.threads,
                                  ctx.ws.victims, ctx.cfg.dataset.attack_images)
            rs.manifest["split_seed"] = split.seed
            rs.manifest["zoo_hash"] = sha256_file(catalog)
            save_records(ctx.ws.record_file(name, side), rs, ctx.provenance(catalog=rs.manifest["zoo_hash"]))
            rates = [v["success_rate"] for v in rs.manifest["victims"] if "success_rate" in v]
            out[f"{name}/{side}"] = {"records": len(rs), "mean_success_rate": float(np.mean(rates)) if rates else None}
    return {"attacks": out}


def cmd_build_dataset(ctx: Context) -> Dict[str, Any]:
    formats = sorted(set(ctx.cfg.mpn.formats) | {"adv-example"})
    out: Dict[str, int] = {}
    for name in ctx.attack_names():
        for side in ("train", "test"):
            path = _require(ctx.ws.record_file(name, side), "attack")
            rs = load_records(path)
            for fmt in formats:
                ds = assemble(rs, fmt)
                ds.manifest["records_sha256"] = sha256_file(path)
                save_dataset(ds, ctx.ws.dataset_file(name, fmt, side), ctx.provenance(records=ds.manifest["records_sha256"]))
                out[f"{name}/{fmt}/{side}"] = len(ds)
    return {"datasets": out}


def _load_split_dataset(ctx: Context, attack: str, fmt: str, side: str) -> ParsingDataset:
    return load_dataset(_require(ctx.ws.dataset_file(attack, fmt, side), "build-dataset"))


def _mpn_for(ctx: Context, ds: ParsingDataset, seed: int, path: Path) -> MpnModel:
    """Load the checkpoint at ``path`` when it was trained on ``ds`` with ``seed``, else fit."""

    key = dataset_key(ds)
    if path.is_file():
        mpn = load_mpn(path)
        meta_key = mpn.history.get("provenance_key")
        if meta_key == [key, seed]:
            return mpn
    mpn = fit_mpn(ctx.cfg, ds, seed)
    mpn.history["provenance_key"] = [key, seed]
    return mpn


def cmd_train_mpn(ctx: Context) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for name in ctx.evaluated_attacks():
        for fmt in ctx.cfg.mpn.formats:
            ds = _load_split_dataset(ctx, name, fmt, "train")
            mpn = fit_mpn(ctx.cfg, ds, ctx.cfg.seed)
            mpn.history["provenance_key"] = [dataset_key(ds), ctx.cfg.seed]
            save_mpn(ctx.ws.mpn_file(name, fmt), mpn, ctx.provenance(dataset=dataset_key(ds)))
            losses = mpn.history.get("loss", [])
            out[f"{name}/{fmt}"] = {"final_loss": losses[-1] if losses else None, "samples": len(ds)}
    return {"models": out}


def cmd_train_pen(ctx: Context) -> Dict[str, Any]:
    name = ctx.pen_attack()
    ds = _load_split_dataset(ctx, name, "adv-example", "train")
    p = ctx.cfg.pen
    pen = build_pen(p.depth, derive_seed(ctx.cfg.seed, "pen"), p.width, ds.z.shape[1:])
    pen = pretrain_pen(pen, ds, p.epochs, p.batch_size, p.lr, p.momentum, seed=derive_seed(ctx.cfg.seed, "pen-train"))
    save_pen(ctx.ws.models / "pen.mpnz", pen, ctx.provenance(dataset=dataset_key(ds)))
    val = pen.history.get("val_mae", [])
    return {"attack": name, "zero_predictor_mae": val[0] if val else None, "best_val_mae": min(val) if val else None}


def cmd_train_joint(ctx: Context) -> Dict[str, Any]:
    name = ctx.pen_attack()
    if "perturbation" not in ctx.cfg.mpn.formats:
        raise ConfigurationError("Joint training needs the perturbation format in mpn.formats")
    pen = load_pen(_require(ctx.ws.models / "pen.mpnz", "train-pen"))
    mpn = load_mpn(_require(ctx.ws.mpn_file(name, "perturbation"), "train-mpn"))
    ds = _load_split_dataset(ctx, name, "adv-example", "train")
    j = ctx.cfg.joint
    cfg = JointTrainConfig(j.beta, j.epochs, j.mpn_lr, j.pen_lr, j.batch_size,
                           seed=derive_seed(ctx.cfg.seed, "joint"), denoise_only=j.denoise_only)
    mpn, pen = train_joint(mpn, pen, ds, cfg)
    prov = ctx.provenance(dataset=dataset_key(ds))
    save_mpn(ctx.ws.models / "mpn-joint.mpnz", mpn, prov)
    save_pen(ctx.ws.models / "pen-joint.mpnz", pen, prov)
    objective = mpn.history.get("joint", [])
    return {"attack": name, "final_objective": objective[-1] if objective else None}


def cmd_evaluate(ctx: Context) -> Dict[str, Any]:
    reports: Dict[str, Any] = {}
    for name in ctx.evaluated_attacks():
        for fmt in ctx.cfg.mpn.formats:
            mpn = load_mpn(_require(ctx.ws.mpn_file(name, fmt), "train-mpn"))
            test = _load_split_dataset(ctx, name, fmt, "test")
            reports[f"{name}/{fmt}"] = evaluate_mpn(mpn, test).to_dict()
            export_matrix(parsing_confusion(mpn, test.by_victim()), ctx.ws.reports, f"confusion-{name}-{fmt}")
    joint = ctx.ws.models / "mpn-joint.mpnz"
    if joint.is_file():
        name = ctx.pen_attack()
        mpn = load_mpn(joint)
        pen = load_pen(_require(ctx.ws.models / "pen-joint.mpnz", "train-joint"))
        test = _load_split_dataset(ctx, name, "adv-example", "test")
        reports[f"{name}/pen-perturbation"] = evaluate_mpn(mpn, test, pen=pen).to_dict()
    write_json(ctx.ws.reports / "evaluate.json", {"reports": reports, "provenance": ctx.provenance()})
    return {
        "reports": {
            k: {"weighted": r["weighted"], "combined": r["combined"], "chance": r["chance"]}
            for k, r in reports.items()
        }
    }


def _load_condition(ctx: Context, condition: str, fmt: str, side: str) -> ParsingDataset:
    attack, architecture, robust = split_condition(condition)
    ds = _load_split_dataset(ctx, attack, fmt, side)
    if architecture is None and robust is None:
        return ds
    return select_victims(ds, architecture, robust)


def cmd_matrix(ctx: Context) -> Dict[str, Any]:
    ev = ctx.cfg.evaluation
    rows = list(ev.matrix_rows) + [r for r in ev.combined_rows if r not in ev.matrix_rows]
    cols = list(ev.matrix_cols) or list(ev.matrix_rows)
    if not rows or not cols:
        raise ConfigurationError("evaluation.matrix_rows / matrix_cols are empty")
    fmt = ev.matrix_format

    def fit(ds: ParsingDataset, seed: int) -> MpnModel:
        if ds.manifest.get("pooled") is None:
            for name in ctx.attack_names():
                path = ctx.ws.mpn_file(name, fmt)
                if path.is_file() and ctx.ws.dataset_file(name, fmt, "train").is_file():
                    if dataset_key(_load_split_dataset(ctx, name, fmt, "train")) == dataset_key(ds):
                        return _mpn_for(ctx, ds, seed, path)
        return fit_mpn(ctx.cfg, ds, seed)

    matrix = generalization_matrix(
        rows, cols,
        train_data=lambda r: _load_condition(ctx, r, fmt, "train"),
        test_data=lambda c: _load_condition(ctx, c, fmt, "test"),
        fit=fit, seed=ctx.cfg.seed, combined=ev.combined_rows,
    )
    matrix.provenance["config_hash"] = ctx.config_hash
    files = export_matrix(matrix, ctx.ws.reports, "matrix")
    return {"rows": rows, "cols": cols, "failed_cells": len(matrix.errors), "files": files}


def cmd_transfer(ctx: Context) -> Dict[str, Any]:
    name = ctx.cfg.evaluation.transfer_attack or ctx.attack_names()[0]
    entries, _ = load_catalog(_require(ctx.ws.victims / "catalog.json", "train-victims"))
    victims: List[TrainedVictim] = [e.load(ctx.ws.victims) for e in entries if e.ok]
    if not victims:
        raise MissingArtifactError("trained victims", "train-victims")
    images = attack_split(ctx.cfg).test
    if ctx.cfg.dataset.attack_images is not None:
        images = images.subset(np.arange(min(ctx.cfg.dataset.attack_images, len(images))), images.name)
    spec = attack_spec(name, ctx.cfg.attacks[name], ctx.cfg.seed)
    matrix = transfer_asr_matrix(victims, spec, images, ctx.threads)
    matrix.provenance["config_hash"] = ctx.config_hash
    files = export_matrix(matrix, ctx.ws.reports, "transfer")
    return {"attack": name, "victims": len(victims), "files": files}


def cmd_parse(ctx: Context, input_path: Optional[str] = None) -> Dict[str, Any]:
    name = ctx.attack_names()[0]
    fmt = ctx.cfg.mpn.formats[0]
    path = Path(input_path) if input_path else ctx.ws.dataset_file(name, fmt, "test")
    ds = load_dataset(_require(path, "build-dataset"))
    model_path = ctx.ws.mpn_file(name, ds.input_format)
    mpn = load_mpn(_require(model_path, "train-mpn"))
    if not ds.schema.same_heads(mpn.schema):
        raise ConfigurationError(f"{path} parses {ds.schema.names}, the MPN parses {mpn.schema.names}")
    # attributes the MPN does not parse come from the input's own manifest
    schema = AttributeSchema.from_dict({**mpn.schema.to_dict(),
                                        "fixed": {**mpn.schema.fixed_values, **ds.schema.fixed_values}})
    prediction = predict(mpn, ds.z, ds.input_format)
    write_json(ctx.ws.reports / "parse.json", {
        "input": str(path),
        "model": str(model_path),
        "predictions": prediction.to_dict(schema),
        "provenance": ctx.provenance(input=sha256_file(path), model=sha256_file(model_path)),
    })
    counts: Dict[str, int] = {}
    for row in prediction.labels:
        vm = schema.decode(row).vm_id
        counts[vm] = counts.get(vm, 0) + 1
    return {"input": str(path), "input_format": ds.input_format, "samples": len(ds), "predicted": counts}


COMMANDS: Dict[str, Callable[..., Dict[str, Any]]] = {
    "train-victims": cmd_train_victims,
    "attack": cmd_attack,
    "build-dataset": cmd_build_dataset,
    "train-mpn": cmd_train_mpn,
    "train-pen": cmd_train_pen,
    "train-joint": cmd_train_joint,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "transfer": cmd_transfer,
    "parse": cmd_parse,
}


# =============================================================================
# ENTRY POINTS
# =============================================================================

def run(cfg: ExperimentConfig, subcommand: str, threads: Optional[int] = None,
        input_path: Optional[str] = None) -> Dict[str, Any]:
    """Run one subcommand and return its summary (also echoing the config)."""

    if subcommand not in COMMANDS:
        raise ConfigurationError(f"Unknown subcommand {subcommand!r}; expected one of {list(SUBCOMMANDS)}")
    ws = Workspace(Path(cfg.output_dir))
    ws.prepare()
    (ws.root / "config.json").write_text(cfg.canonical_json() + "\n", encoding="utf-8")
    ctx = Context(cfg, ws, resolve_threads(threads, cfg.threads))
    logger.info("Running {} in {}", subcommand, ws.root)
    command = COMMANDS[subcommand]
    summary = command(ctx, input_path) if subcommand == "parse" else command(ctx)
    return {"subcommand": subcommand, "status": "ok", "config_hash": ctx.config_hash, **summary}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmparse", description="Victim-model parsing testbed")
    parser.add_argument("subcommand", choices=list(SUBCOMMANDS) + ["all"],
                        help="pipeline stage to run ('all' chains every stage but parse)")
    parser.add_argument("--config", required=True, help="experiment file (.toml or .json)")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("--threads", type=int, default=None, help="worker count (default 1)")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--input", default=None, help="dataset container for 'parse'")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        updates: Dict[str, Any] = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.out is not None:
            updates["output_dir"] = args.out
        if updates:
            cfg = ExperimentConfig.model_validate({**cfg.model_dump(mode="json"), **updates})
        setup_logging(cfg.log_level, Path(cfg.output_dir) / "vmparse.log")
        stages = PIPELINE if args.subcommand == "all" else (args.subcommand,)
        for stage in stages:
            summary = run(cfg, stage, args.threads, args.input)
            print(json.dumps(summary, sort_keys=True, default=str), flush=True)
    except (ConfigurationError, ValidationError) as exc:
        logger.error("Configuration error: {}", exc)
        return EXIT_CONFIG_ERROR
    except (TestbedError, OSError) as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
