"""Victim models indexed by (architecture, kernel size, activation, sparsity).

Every conv block of a built victim uses the requested kernel side and
activation; residual shortcuts are 1x1 projections tagged ``role="shortcut"``
so structural queries can tell them apart.
"""

import itertools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from jsonschema import ValidationError as SchemaError
from jsonschema import validate
from joblib import Parallel, delayed
from loguru import logger

from .attacks import AttackSpec, WhiteBoxVictim, pgd_batch
from .config import (
    ACTIVATIONS,
    ADVERSARIAL_TRAINING,
    ARCHITECTURES,
    FINETUNE_EPOCH_FRACTION,
    KERNEL_SIZES,
    ROBUST_EVAL_ATTACK,
    SPARSITIES,
    VICTIM_RECIPE,
)
from .container import read_container, write_container
from .datasets import DatasetSplits, LabeledImages
from .diffnet import (
    Network,
    NetworkBuilder,
    OptimizerState,
    backward,
    forward,
    infer,
    instantiate,
    network_from_container,
    network_to_container,
    sgd_step,
)
from .errors import (
    ConfigurationError,
    FormatError,
    MissingArtifactError,
    NumericError,
    TrainingError,
    UnsupportedConfigurationError,
)
from .utils import derive_seed, read_json, write_json

MIN_CHANNELS = 4
VGG_CONFIGS = {
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg13": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
}
RESNET_STAGES = {
    # (stem channels, [(channels, blocks, stride), ...])
    "resnet18": (64, [(64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2)]),
    "resnet20": (16, [(16, 3, 1), (32, 3, 2), (64, 3, 2)]),
}

VM_ID_PATTERN = re.compile(r"^(?P<at>[a-z0-9]+)-k(?P<ks>\d+)-(?P<af>[a-z]+)-ws(?P<ws>[0-9.]+)(?P<robust>-robust)?$")


# =============================================================================
# ATTRIBUTES AND RECIPES
# =============================================================================

@dataclass(frozen=True)
class ModelAttributes:
    at: str
    ks: int
    af: str
    ws: float
    robust: bool = False

    def __post_init__(self) -> None:
        if self.at not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown architecture {self.at!r}; expected one of {ARCHITECTURES}")
        if self.ks not in KERNEL_SIZES:
            raise ConfigurationError(f"Kernel size {self.ks!r} not in {KERNEL_SIZES}")
        if self.af not in ACTIVATIONS:
            raise ConfigurationError(f"Activation {self.af!r} not in {ACTIVATIONS}")
        if self.ws not in SPARSITIES:
            raise ConfigurationError(f"Sparsity {self.ws!r} not in {SPARSITIES}")

    @property
    def vm_id(self) -> str:
        """Stable identifier, e.g. ``resnet9-k3-relu-ws0.375``."""

        return f"{self.at}-k{self.ks}-{self.af}-ws{self.ws:g}" + ("-robust" if self.robust else "")

    def to_dict(self) -> Dict[str, Any]:
        return {"at": self.at, "ks": self.ks, "af": self.af, "ws": self.ws, "robust": self.robust}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelAttributes":
        return cls(data["at"], int(data["ks"]), data["af"], float(data["ws"]), bool(data.get("robust", False)))

    @classmethod
    def from_vm_id(cls, vm_id: str) -> "ModelAttributes":
        match = VM_ID_PATTERN.match(vm_id)
        if match is None:
            raise ConfigurationError(f"Malformed victim identifier {vm_id!r}")
        return cls(match["at"], int(match["ks"]), match["af"], float(match["ws"]), bool(match["robust"]))


def attribute_grid(
    architectures: Iterable[str] = ARCHITECTURES,
    kernel_sizes: Iterable[int] = KERNEL_SIZES,
    activations: Iterable[str] = ACTIVATIONS,
    sparsities: Iterable[float] = SPARSITIES,
    robust: Iterable[bool] = (False,),
) -> List[ModelAttributes]:
    """Cartesian product of the attribute values (135 for the full table)."""

    grid = [
        ModelAttributes(at, ks, af, ws, rb)
        for rb, at, ks, af, ws in itertools.product(robust, architectures, kernel_sizes, activations, sparsities)
    ]
    if not grid:
        raise ConfigurationError("Attribute grid is empty")
    return grid


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = VICTIM_RECIPE["epochs"]
    batch_size: int = VICTIM_RECIPE["batch_size"]
    lr: float = VICTIM_RECIPE["lr"]
    weight_decay: float = VICTIM_RECIPE["weight_decay"]
    momentum: float = VICTIM_RECIPE["momentum"]
    width: float = VICTIM_RECIPE["width"]
    seed: int = VICTIM_RECIPE["seed"]

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0.0 < self.width <= 1.0:
            raise ConfigurationError(f"width multiplier must lie in (0, 1], got {self.width}")

    def finetune(self) -> "TrainRecipe":
        """Recipe for post-pruning fine-tuning (a fifth of the epochs, at least one)."""

        epochs = max(1, math.ceil(FINETUNE_EPOCH_FRACTION * self.epochs))
        return TrainRecipe(epochs, self.batch_size, self.lr, self.weight_decay, self.momentum, self.width, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class TrainedVictim:
    attributes: Optional[ModelAttributes]
    network: Network
    clean_acc: float
    robust_acc: Optional[float] = None
    seed: int = 0
    history: List[float] = field(default_factory=list)


# =============================================================================
# SKELETONS
# =============================================================================

def _ch(channels: int, width: float) -> int:
    return max(MIN_CHANNELS, int(round(channels * width)))


def _conv_block(b: NetworkBuilder, channels: int, ks: int, af: str, stride: int = 1,
                src: Optional[int] = None, activate: bool = True) -> int:
    b.conv(channels, ks, stride=stride, src=src, bias=False)
    node = b.bn()
    return b.act(af) if activate else node


def _basic_block(b: NetworkBuilder, channels: int, ks: int, af: str, stride: int) -> int:
    entry = b.last
    in_channels = b.shape_of(entry)[0]
    _conv_block(b, channels, ks, af, stride=stride, src=entry)
    main = _conv_block(b, channels, ks, af, activate=False)
    if stride != 1 or in_channels != channels:
        b.conv(channels, 1, stride=stride, src=entry, role="shortcut", bias=False)
        shortcut = b.bn(role="shortcut")
    else:
        shortcut = entry
    b.add(main, shortcut)
    return b.act(af)


def _resnet9(b: NetworkBuilder, attrs: ModelAttributes, width: float) -> None:
    _conv_block(b, _ch(64, width), attrs.ks, attrs.af)
    for channels in (128, 256):
        c = _ch(channels, width)
        _conv_block(b, c, attrs.ks, attrs.af)
        entry = b.maxpool(2) if min(b.shape_of(b.last)[1:]) >= 2 else b.last
        _conv_block(b, c, attrs.ks, attrs.af, src=entry)
        main = _conv_block(b, c, attrs.ks, attrs.af)
        b.add(main, entry)


def _resnet(b: NetworkBuilder, attrs: ModelAttributes, width: float) -> None:
    stem, stages = RESNET_STAGES[attrs.at]
    _conv_block(b, _ch(stem, width), attrs.ks, attrs.af)
    for channels, blocks, stride in stages:
        for i in range(blocks):
            s = stride if i == 0 and min(b.shape_of(b.last)[1:]) >= 2 else 1
            _basic_block(b, _ch(channels, width), attrs.ks, attrs.af, s)


def _vgg(b: NetworkBuilder, attrs: ModelAttributes, width: float) -> None:
    for item in VGG_CONFIGS[attrs.at]:
        if item == "M":
            if min(b.shape_of(b.last)[1:]) >= 2:
                b.maxpool(2)
        else:
            _conv_block(b, _ch(item, width), attrs.ks, attrs.af)


def build_victim(
    attrs: ModelAttributes,
    width: float = VICTIM_RECIPE["width"],
    input_shape: Tuple[int, ...] = (3, 16, 16),
    num_classes: int = 10,
    seed: int = 0,
) -> Network:
    """Dense (unpruned) network for ``attrs``; ``ws`` only matters at pruning time."""

    if not isinstance(attrs, ModelAttributes):
        raise ConfigurationError("build_victim expects ModelAttributes")
    if not 0.0 < width <= 1.0:
        raise ConfigurationError(f"width multiplier must lie in (0, 1], got {width}")
    b = NetworkBuilder(input_shape)
    if attrs.at == "resnet9":
        _resnet9(b, attrs, width)
    elif attrs.at in RESNET_STAGES:
        _resnet(b, attrs, width)
    else:
        _vgg(b, attrs, width)
    b.avgpool(None)
    b.flatten()
    b.dense(num_classes, role="head")
    return instantiate(b.specs, input_shape, seed)


def describe_victim(net: Network) -> Dict[str, List[Any]]:
    """Kernel sizes and activations used by the conv blocks of ``net``."""

    return {
        "kernel_sizes": sorted({s.kernel for _, s in net.layers_of("conv2d", role="block")}),
        "activations": sorted({s.activation for _, s in net.layers_of("activation")}),
        "conv_blocks": len(net.layers_of("conv2d", role="block")),
    }


# =============================================================================
# TRAINING
# =============================================================================

def accuracy(net: Network, data: LabeledImages, batch_size: int = 256) -> float:
    if len(data) == 0:
        return 0.0
    net.eval()
    return float((infer(net, data.images, batch_size).argmax(axis=1) == data.labels).mean())


def _fit(
    net: Network,
    data: LabeledImages,
    recipe: TrainRecipe,
    seed: int,
    adversary: Optional[AttackSpec] = None,
) -> List[float]:
    """Minibatch SGD with cosine schedule; returns per-epoch mean losses."""

    if recipe.epochs == 0 or len(data) == 0:
        net.eval()
        return []
    n = len(data)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    opt = OptimizerState.create(net, recipe.lr, recipe.epochs * steps_per_epoch, recipe.momentum,
                                recipe.weight_decay)
    rng = np.random.default_rng(seed)
    adv_rng = np.random.default_rng([seed, 1])
    history: List[float] = []
    net.train()
    for epoch in range(recipe.epochs):
        order = rng.permutation(n)
        losses: List[float] = []
        for start in range(0, n, recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            xb, yb = data.images[idx], data.labels[idx]
            try:
                if adversary is not None:
                    xb = pgd_batch(WhiteBoxVictim(net, batch_stats=True), xb, yb, adversary, adv_rng)
                _, tape = forward(net, xb)
                grads = backward(tape, "cross-entropy", yb)
            except NumericError as exc:
                raise TrainingError(f"Training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
            if not math.isfinite(grads.loss):
                raise TrainingError(f"Loss became non-finite at epoch {epoch}", epoch=epoch)
            sgd_step(net, grads.params, opt)
            losses.append(grads.loss)
        history.append(float(np.mean(losses)))
        logger.debug("epoch {}/{} loss {:.4f}", epoch + 1, recipe.epochs, history[-1])
    net.eval()
    return history


def train_victim(
    net: Network,
    dataset: DatasetSplits,
    recipe: TrainRecipe,
    attributes: Optional[ModelAttributes] = None,
) -> TrainedVictim:
    """Standard training; returns the network in eval mode with its validation accuracy."""

    history = _fit(net, dataset.train, recipe, recipe.seed)
    return TrainedVictim(attributes, net, accuracy(net, dataset.validation), seed=recipe.seed, history=history)


def prune_magnitude(
    victim: TrainedVictim,
    ws: float,
    finetune_recipe: TrainRecipe,
    dataset: Optional[DatasetSplits] = None,
    adversary: Optional[AttackSpec] = None,
) -> TrainedVictim:
    """One-shot global magnitude pruning of conv + dense weights, then fine-tuning.

    The ``round(ws * total)`` smallest-magnitude weights are masked (stable
    ordering over the concatenated weights). ``ws = 0`` returns the victim
    unchanged. With an ``adversary`` the fine-tuning batches are replaced by
    their PGD examples and robust accuracy is measured again afterwards.
    """

    if not 0.0 <= ws < 1.0:
        raise ConfigurationError(f"Sparsity must lie in [0, 1), got {ws}")
    if ws == 0.0:
        return victim
    net = victim.network.copy()
    names = net.prunable_parameters()
    magnitudes = np.concatenate([np.abs(net.params[name]).reshape(-1) for name in names])
    k = int(round(ws * magnitudes.size))
    order = np.argsort(magnitudes, kind="stable")
    keep = np.ones(magnitudes.size, dtype=bool)
    keep[order[:k]] = False
    offset = 0
    for name in names:
        size = net.params[name].size
        existing = net.masks.get(name)
        mask = keep[offset:offset + size].reshape(net.params[name].shape)
        if existing is not None:
            mask = mask & (existing != 0)
        net.set_mask(name, mask)
        offset += size
    logger.info("Pruned {}/{} weights (ws={})", k, magnitudes.size, ws)

    history: List[float] = []
    clean, robust = victim.clean_acc, victim.robust_acc
    if dataset is not None:
        history = _fit(net, dataset.train, finetune_recipe, finetune_recipe.seed + 1, adversary=adversary)
        clean = accuracy(net, dataset.validation)
        if adversary is not None:
            robust = robust_accuracy(net, dataset.validation)
    return TrainedVictim(victim.attributes, net, clean, robust, victim.seed, victim.history + history)


def realized_sparsity(net: Network) -> float:
    """Fraction of prunable weights that are exactly zero."""

    names = net.prunable_parameters()
    total = sum(net.params[n].size for n in names)
    zeros = sum(int((net.params[n] == 0).sum()) for n in names)
    return zeros / total if total else 0.0


def adversarial_training_spec() -> AttackSpec:
    return AttackSpec("pgd-linf", eps=ADVERSARIAL_TRAINING["eps"], alpha=ADVERSARIAL_TRAINING["alpha"],
                      steps=ADVERSARIAL_TRAINING["steps"], random_init=True)


def robust_accuracy(net: Network, data: LabeledImages, spec: Optional[AttackSpec] = None,
                    batch_size: int = 128) -> float:
    """Accuracy under a fresh PGD ℓ∞ attack (default 10 steps, eps 8/255, alpha 2/255)."""

    if len(data) == 0:
        return 0.0
    spec = spec or AttackSpec("pgd-linf", eps=ROBUST_EVAL_ATTACK["eps"], alpha=ROBUST_EVAL_ATTACK["alpha"],
                              steps=ROBUST_EVAL_ATTACK["steps"], seed=7)
    net.eval()
    victim = WhiteBoxVictim(net)
    rng = np.random.default_rng(spec.seed)
    correct = 0
    for start in range(0, len(data), batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        x_adv = pgd_batch(victim, xb, yb, spec, rng)
        correct += int((victim.logits(x_adv).argmax(axis=1) == yb).sum())
    return correct / len(data)


def adversarial_train(
    net: Network,
    dataset: DatasetSplits,
    attack: AttackSpec,
    recipe: TrainRecipe,
    attributes: Optional[ModelAttributes] = None,
) -> TrainedVictim:
    """Min-max training: every minibatch is replaced by its PGD ℓ∞ examples.

    The inner attack sees batch statistics but leaves the running averages
    alone. Reports clean and fresh-PGD robust accuracy.
    """

    if attack.method != "pgd-linf":
        raise UnsupportedConfigurationError(f"Adversarial training needs pgd-linf, got {attack.method}")
    history = _fit(net, dataset.train, recipe, recipe.seed, adversary=attack)
    clean = accuracy(net, dataset.validation)
    robust = robust_accuracy(net, dataset.validation)
    logger.info("Adversarially trained victim: clean {:.3f}, robust {:.3f}", clean, robust)
    return TrainedVictim(attributes, net, clean, robust, recipe.seed, history)


# =============================================================================
# CHECKPOINTS AND CATALOG
# =============================================================================

def save_victim(path: Union[str, Path], victim: TrainedVictim, provenance: Optional[Dict[str, Any]] = None) -> str:
    meta, tensors = network_to_container(victim.network)
    meta.update({
        "kind": "victim",
        "attributes": victim.attributes.to_dict() if victim.attributes else None,
        "clean_acc": victim.clean_acc,
        "robust_acc": victim.robust_acc,
        "seed": victim.seed,
        "history": victim.history,
        "provenance": provenance or {},
    })
    return write_container(path, meta, tensors)


def load_victim(path: Union[str, Path]) -> TrainedVictim:
    meta, tensors = read_container(path)
    if meta.get("kind") != "victim":
        raise FormatError(f"{path} is not a victim checkpoint")
    attrs = ModelAttributes.from_dict(meta["attributes"]) if meta.get("attributes") else None
    net = network_from_container(meta, tensors).eval()
    return TrainedVictim(attrs, net, meta["clean_acc"], meta.get("robust_acc"), meta.get("seed", 0),
                         meta.get("history", []))


CATALOG_SCHEMA = {
    "type": "object",
    "required": ["victims", "provenance"],
    "properties": {
        "provenance": {"type": "object"},
        "victims": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["attributes", "seed"],
                "properties": {
                    "attributes": {
                        "type": "object",
                        "required": ["at", "ks", "af", "ws", "robust"],
                    },
                    "checkpoint": {"type": ["string", "null"]},
                    "seed": {"type": "integer"},
                    "clean_acc": {"type": ["number", "null"]},
                    "robust_acc": {"type": ["number", "null"]},
                    "sha256": {"type": ["string", "null"]},
                    "error": {"type": ["string", "null"]},
                },
            },
        },
    },
}


@dataclass
class CatalogEntry:
    attributes: ModelAttributes
    seed: int
    checkpoint: Optional[str] = None
    clean_acc: Optional[float] = None
    robust_acc: Optional[float] = None
    sha256: Optional[str] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.checkpoint is not None

    def load(self, root: Union[str, Path]) -> TrainedVictim:
        if not self.ok:
            raise MissingArtifactError(f"checkpoint of {self.attributes.vm_id}", "train-victims")
        path = Path(root) / self.checkpoint
        if not path.is_file():
            raise MissingArtifactError(str(path), "train-victims")
        return load_victim(path)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "attributes": self.attributes.to_dict(),
            "seed": self.seed,
            "checkpoint": self.checkpoint,
            "clean_acc": self.clean_acc,
            "robust_acc": self.robust_acc,
            "sha256": self.sha256,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CatalogEntry":
        return cls(
            ModelAttributes.from_dict(data["attributes"]), int(data["seed"]), data.get("checkpoint"),
            data.get("clean_acc"), data.get("robust_acc"), data.get("sha256"), data.get("error"),
        )


def save_catalog(path: Union[str, Path], entries: Sequence[CatalogEntry], provenance: Dict[str, Any]) -> Path:
    return write_json(path, {"victims": [e.to_dict() for e in entries], "provenance": provenance})


def load_catalog(path: Union[str, Path]) -> Tuple[List[CatalogEntry], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(str(path), "train-victims")
    data = read_json(path)
    try:
        validate(data, CATALOG_SCHEMA)
    except SchemaError as exc:
        raise FormatError(f"Invalid victim catalog {path}: {exc.message}") from exc
    return [CatalogEntry.from_dict(d) for d in data["victims"]], data["provenance"]


def _build_member(
    attrs: ModelAttributes,
    dataset: DatasetSplits,
    recipe: TrainRecipe,
    out_dir: Optional[str],
    adversarial: Optional[AttackSpec],
    provenance: Dict[str, Any],
) -> CatalogEntry:
    seed = derive_seed(recipe.seed, attrs.vm_id)
    member_recipe = TrainRecipe(recipe.epochs, recipe.batch_size, recipe.lr, recipe.weight_decay,
                                recipe.momentum, recipe.width, seed)
    try:
        net = build_victim(attrs, recipe.width, dataset.train.input_shape, dataset.train.num_classes, seed)
        if attrs.robust:
            victim = adversarial_train(net, dataset, adversarial or adversarial_training_spec(), member_recipe, attrs)
        else:
            victim = train_victim(net, dataset, member_recipe, attrs)
        if attrs.ws > 0:
            dense_acc = victim.clean_acc
            adversary = (adversarial or adversarial_training_spec()) if attrs.robust else None
            victim = prune_magnitude(victim, attrs.ws, member_recipe.finetune(), dataset, adversary)
            logger.info("{}: dense {:.3f} -> pruned {:.3f}", attrs.vm_id, dense_acc, victim.clean_acc)
        victim.seed = seed
        entry = CatalogEntry(attrs, seed, clean_acc=victim.clean_acc, robust_acc=victim.robust_acc)
        if out_dir is not None:
            rel = f"{attrs.vm_id}.mpnz"
            entry.sha256 = save_victim(Path(out_dir) / rel, victim, provenance)
            entry.checkpoint = rel
        logger.info("Victim {} trained: clean accuracy {:.3f}", attrs.vm_id, victim.clean_acc)
        return entry
    except Exception as exc:  # noqa: BLE001 - recorded in the catalog
        logger.warning("Victim {} failed: {}", attrs.vm_id, exc)
        return CatalogEntry(attrs, seed, error=f"{type(exc).__name__}: {exc}")


def zoo_build(
    grid: Sequence[ModelAttributes],
    dataset: DatasetSplits,
    recipe: TrainRecipe,
    out_dir: Optional[Union[str, Path]] = None,
    threads: int = 1,
    adversarial: Optional[AttackSpec] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> List[CatalogEntry]:
    """Train one victim per attribute combination.

    Members run independently (process pool when ``threads > 1``) with seeds
    derived from ``(recipe.seed, vm_id)``. Failures become catalog entries
    with an ``error`` field. With ``out_dir`` the checkpoints and
    ``catalog.json`` are written there.
    """

    if not grid:
        raise ConfigurationError("Attribute grid is empty")
    provenance = dict(provenance or {})
    target = str(out_dir) if out_dir is not None else None
    jobs = (delayed(_build_member)(attrs, dataset, recipe, target, adversarial, provenance) for attrs in grid)
    if threads > 1:
        entries = list(Parallel(n_jobs=threads, backend="loky")(jobs))
    else:
        entries = [job[0](*job[1], **job[2]) for job in jobs]
    failed = [e for e in entries if e.error]
    if failed:
        logger.warning("{} of {} victims failed", len(failed), len(entries))
    if out_dir is not None:
        save_catalog(Path(out_dir) / "catalog.json", entries, provenance)
    return entries
