"""Model-parsing datasets built from attacks on the victim zoo.

Pipeline: :func:`split_images` -> :func:`generate_records` (one attack per
victim x image) -> :func:`assemble` (pick ``z = x'`` or ``z = delta`` and
encode the victim attributes as label tuples) -> :func:`save_dataset`.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from jsonschema import ValidationError as SchemaError
from jsonschema import validate
from loguru import logger

from .attacks import AttackRecord, AttackSpec, WhiteBoxVictim, attack_batch, audit_record
from .config import (
    ATTRIBUTE_VOCABULARY,
    FIXED_AT_ATTRIBUTES,
    INPUT_FORMATS,
    MERGED_ATTRIBUTES,
    SPLIT_RATIO,
)
from .container import read_container, write_container
from .datasets import LabeledImages, stratified_indices
from .errors import ConfigurationError, FormatError, TestbedError
from .utils import derive_seed, sha256_bytes, sha256_json
from .victim_zoo import CatalogEntry, ModelAttributes, TrainedVictim

ZooMember = Union[TrainedVictim, CatalogEntry]


# =============================================================================
# IMAGE SPLIT
# =============================================================================

@dataclass
class ImageSplit:
    train: LabeledImages
    test: LabeledImages
    ratio: float
    seed: int


def split_images(dataset: LabeledImages, ratio: float = SPLIT_RATIO, seed: int = 0) -> ImageSplit:
    """Class-stratified disjoint train/test split of the benign images."""

    if len(dataset) == 0:
        raise ConfigurationError("Cannot split an empty image set")
    tr, te = stratified_indices(dataset.labels, ratio, seed)
    return ImageSplit(dataset.subset(tr, f"{dataset.name}-I_tr"), dataset.subset(te, f"{dataset.name}-I_test"),
                      ratio, seed)


# =============================================================================
# ATTRIBUTE SCHEMA
# =============================================================================

@dataclass(frozen=True)
class AttributeSchema:
    """Parsed attribute names, their class lists and the fixed attributes.

    With a single architecture in play AT is fixed and three heads are
    parsed (KS, AF, WS); with several, AT becomes a fourth head.
    """

    names: Tuple[str, ...]
    classes: Tuple[Tuple[Any, ...], ...]
    fixed: Tuple[Tuple[str, Any], ...] = ()

    @classmethod
    def fixed_at(cls, architecture: str, robust: Optional[bool] = False) -> "AttributeSchema":
        """Three-head schema; ``robust=None`` leaves the training regime open."""

        fixed = (("at", architecture),) + ((("robust", robust),) if robust is not None else ())
        return cls(FIXED_AT_ATTRIBUTES, tuple(ATTRIBUTE_VOCABULARY[n] for n in FIXED_AT_ATTRIBUTES), fixed)

    @classmethod
    def merged(cls, robust: Optional[bool] = False) -> "AttributeSchema":
        fixed = (("robust", robust),) if robust is not None else ()
        return cls(MERGED_ATTRIBUTES, tuple(ATTRIBUTE_VOCABULARY[n] for n in MERGED_ATTRIBUTES), fixed)

    @classmethod
    def for_attributes(cls, attributes: Iterable[ModelAttributes]) -> "AttributeSchema":
        attributes = list(attributes)
        if not attributes:
            raise ConfigurationError("Cannot derive a schema from no victims")
        robust = {a.robust for a in attributes}
        flag = robust.pop() if len(robust) == 1 else None
        archs = sorted({a.at for a in attributes})
        return cls.fixed_at(archs[0], flag) if len(archs) == 1 else cls.merged(flag)

    def same_heads(self, other: "AttributeSchema") -> bool:
        """True when both schemas parse the same attributes over the same classes.

        Fixed values are ignored: an MPN trained on ResNet9 victims can be
        scored on ResNet20 victims as long as the heads line up.
        """

        return self.names == other.names and self.classes == other.classes

    def shared_with(self, others: Iterable["AttributeSchema"]) -> "AttributeSchema":
        """Same heads, keeping only the fixed values every schema agrees on."""

        fixed = self.fixed
        for other in others:
            if not self.same_heads(other):
                raise ConfigurationError(f"Schemas parse {self.names} and {other.names}")
            fixed = tuple(f for f in fixed if f in other.fixed)
        return AttributeSchema(self.names, self.classes, fixed)

    @property
    def counts(self) -> Tuple[int, ...]:
        return tuple(len(c) for c in self.classes)

    @property
    def heads(self) -> int:
        return len(self.names)

    @property
    def combinations(self) -> int:
        return int(np.prod(self.counts))

    @property
    def fixed_values(self) -> Dict[str, Any]:
        return dict(self.fixed)

    def encode(self, attrs: ModelAttributes) -> Tuple[int, ...]:
        for name, value in self.fixed:
            if getattr(attrs, name) != value:
                raise ConfigurationError(f"Victim {attrs.vm_id} has {name}={getattr(attrs, name)!r}, "
                                         f"schema fixes it to {value!r}")
        return tuple(self.classes[i].index(getattr(attrs, name)) for i, name in enumerate(self.names))

    def decode(self, label: Sequence[int]) -> ModelAttributes:
        values = self.fixed_values
        for i, name in enumerate(self.names):
            if not 0 <= int(label[i]) < len(self.classes[i]):
                raise ConfigurationError(f"Label {label[i]} out of range for attribute {name}")
            values[name] = self.classes[i][int(label[i])]
        if "at" not in values:
            raise ConfigurationError("Schema neither parses nor fixes the architecture")
        return ModelAttributes(values["at"], values["ks"], values["af"], values["ws"], values.get("robust", False))

    def combination_index(self, labels: np.ndarray) -> np.ndarray:
        """Mixed-radix index of each label tuple in ``[0, combinations)``."""

        labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
        index = np.zeros(len(labels), dtype=np.int64)
        for i, n in enumerate(self.counts):
            index = index * n + labels[:, i]
        return index

    def combination_label(self, index: int) -> str:
        digits = []
        for n in reversed(self.counts):
            digits.append(index % n)
            index //= n
        parts = [f"{name}={self.classes[i][d]}" for i, (name, d) in enumerate(zip(self.names, reversed(digits)))]
        return ",".join(parts)

    def to_dict(self) -> Dict[str, Any]:
        return {"names": list(self.names), "classes": [list(c) for c in self.classes],
                "fixed": {k: v for k, v in self.fixed}}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttributeSchema":
        fixed = tuple(sorted(data.get("fixed", {}).items(), key=lambda kv: ["at", "robust"].index(kv[0])
                             if kv[0] in ("at", "robust") else 99))
        classes = tuple(tuple(c) for c in data["classes"])
        return cls(tuple(data["names"]), classes, fixed)


# =============================================================================
# ATTACK RECORDS
# =============================================================================

@dataclass
class RecordSet:
    """Attack records over a zoo plus the bookkeeping manifest."""

    records: List[AttackRecord]
    victims: List[ModelAttributes]
    victim_index: np.ndarray
    schema: AttributeSchema
    spec: AttackSpec
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)


def _resolve_member(member: ZooMember, root: Optional[Path]) -> TrainedVictim:
    if isinstance(member, TrainedVictim):
        return member
    return member.load(root if root is not None else Path("."))


def generate_records(
    zoo: Sequence[ZooMember],
    spec: AttackSpec,
    images: LabeledImages,
    side: str = "train",
    retain_failed: bool = False,
    balance: bool = True,
    threads: int = 1,
    root: Optional[Union[str, Path]] = None,
    max_images: Optional[int] = None,
) -> RecordSet:
    """Attack every image with every victim.

    Only successful records are kept unless ``retain_failed``. With
    ``balance`` every victim keeps the same number of records (the minimum
    over victims, earliest images first). Victims that cannot be loaded or
    attacked get an error entry in the manifest.
    """

    if not zoo:
        raise ConfigurationError("Victim zoo is empty")
    root = Path(root) if root is not None else None
    if max_images is not None:
        images = images.subset(np.arange(min(max_images, len(images))), images.name)

    per_victim: List[Tuple[ModelAttributes, List[AttackRecord]]] = []
    manifest_victims: List[Dict[str, Any]] = []
    for member in zoo:
        attrs = member.attributes
        entry: Dict[str, Any] = {"vm_id": attrs.vm_id, "attributes": attrs.to_dict(), "attempted": len(images)}
        try:
            victim = _resolve_member(member, root)
            handle = WhiteBoxVictim(victim.network.eval(), attrs)
            member_spec = replace(spec, seed=derive_seed(spec.seed, attrs.vm_id))
            records = attack_batch(handle, images.images, images.labels, member_spec, threads=threads,
                                   image_ids=images.ids)
        except TestbedError as exc:
            logger.warning("Victim {} skipped: {}", attrs.vm_id, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
            manifest_victims.append(entry)
            continue
        succeeded = sum(r.success for r in records)
        entry["succeeded"] = int(succeeded)
        entry["success_rate"] = succeeded / len(records) if records else 0.0
        kept = records if retain_failed else [r for r in records if r.success]
        entry["retained"] = len(kept)
        per_victim.append((attrs, kept))
        manifest_victims.append(entry)
        logger.info("{} on {}: success rate {:.3f}", spec.label, attrs.vm_id, entry["success_rate"])

    if not per_victim:
        raise ConfigurationError("No victim produced records")
    cap = min(len(kept) for _, kept in per_victim) if balance else None
    victims: List[ModelAttributes] = []
    records: List[AttackRecord] = []
    victim_index: List[int] = []
    for v, (attrs, kept) in enumerate(per_victim):
        chosen = kept[:cap] if cap is not None else kept
        victims.append(attrs)
        records.extend(chosen)
        victim_index.extend([v] * len(chosen))

    violations = sum(1 for r in records if audit_record(r, spec))
    if violations:
        logger.warning("{} records violate their constraints", violations)
    manifest = {
        "side": side,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "retention": "all" if retain_failed else "successful",
        "balanced": bool(balance),
        "per_victim_cap": cap,
        "victims": manifest_victims,
        "audit_violations": violations,
        "image_ids": [int(i) for i in images.ids],
    }
    schema = AttributeSchema.for_attributes(victims)
    return RecordSet(records, victims, np.asarray(victim_index, dtype=np.int64), schema, spec, manifest)


def save_records(path: Union[str, Path], rs: RecordSet, provenance: Optional[Dict[str, Any]] = None) -> str:
    meta = {
        "kind": "records",
        "victims": [a.to_dict() for a in rs.victims],
        "schema": rs.schema.to_dict(),
        "spec": rs.spec.to_dict(),
        "manifest": rs.manifest,
        "provenance": provenance or {},
    }
    n = len(rs.records)
    shape = rs.records[0].x.shape if n else (0,)
    tensors = {
        "x": np.stack([r.x for r in rs.records]) if n else np.zeros((0,) + shape, np.float32),
        "x_adv": np.stack([r.x_adv for r in rs.records]) if n else np.zeros((0,) + shape, np.float32),
        "delta": np.stack([r.delta for r in rs.records]) if n else np.zeros((0,) + shape, np.float32),
        "label": np.array([r.label for r in rs.records], dtype=np.uint16),
        "victim": rs.victim_index.astype(np.uint16),
        "success": np.array([r.success for r in rs.records], dtype=np.uint8),
        "queries": np.array([r.queries for r in rs.records], dtype=np.uint32),
        "image_id": np.array([r.image_id for r in rs.records], dtype=np.int64),
    }
    return write_container(path, meta, tensors)


def load_records(path: Union[str, Path]) -> RecordSet:
    meta, t = read_container(path)
    if meta.get("kind") != "records":
        raise FormatError(f"{path} is not a record set")
    spec = AttackSpec.from_dict(meta["spec"])
    victims = [ModelAttributes.from_dict(a) for a in meta["victims"]]
    records = [
        AttackRecord(
            x=t["x"][i], x_adv=t["x_adv"][i], delta=t["delta"][i], label=int(t["label"][i]),
            success=bool(t["success"][i]), method=spec.method, attributes=victims[int(t["victim"][i])],
            queries=int(t["queries"][i]), index=i, image_id=int(t["image_id"][i]),
        )
        for i in range(len(t["label"]))
    ]
    return RecordSet(records, victims, t["victim"].astype(np.int64), AttributeSchema.from_dict(meta["schema"]),
                     spec, meta["manifest"])


# =============================================================================
# PARSING DATASETS
# =============================================================================

@dataclass
class ParsingDataset:
    """``(z, y)`` pairs with their schema and provenance.

    ``y`` has one column per parsed attribute. ``delta`` keeps the true
    perturbation next to ``z = x'`` so PEN can be trained from the same file.
    """

    z: np.ndarray
    y: np.ndarray
    schema: AttributeSchema
    input_format: str
    victim_ids: List[str]
    image_ids: np.ndarray
    delta: Optional[np.ndarray] = None
    manifest: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.input_format not in INPUT_FORMATS:
            raise ConfigurationError(f"Unknown input format {self.input_format!r}")
        self.y = np.asarray(self.y, dtype=np.int64).reshape(len(self.z), self.schema.heads)
        if len(self.victim_ids) != len(self.z) or len(self.image_ids) != len(self.z):
            raise ConfigurationError("victim_ids and image_ids must align with z")

    def __len__(self) -> int:
        return int(len(self.z))

    def subset(self, mask_or_index: np.ndarray) -> "ParsingDataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return ParsingDataset(
            self.z[idx], self.y[idx], self.schema, self.input_format,
            [self.victim_ids[i] for i in idx], self.image_ids[idx],
            self.delta[idx] if self.delta is not None else None, dict(self.manifest),
        )

    def content_hash(self) -> str:
        """Digest of the inputs, labels, schema and manifest."""

        return sha256_json({
            "manifest": self.manifest, "n": len(self), "format": self.input_format, "schema": self.schema.to_dict(),
            "z": sha256_bytes(np.ascontiguousarray(self.z, dtype=np.float32).tobytes()),
            "y": sha256_bytes(np.ascontiguousarray(self.y, dtype=np.int64).tobytes()),
        })

    def by_victim(self) -> Dict[str, "ParsingDataset"]:
        """Per-victim test sets, in first-appearance order."""

        order: Dict[str, List[int]] = {}
        for i, vm in enumerate(self.victim_ids):
            order.setdefault(vm, []).append(i)
        return {vm: self.subset(np.asarray(idx)) for vm, idx in order.items()}


def assemble(records: Union[RecordSet, Sequence[RecordSet]], input_format: str,
             schema: Optional[AttributeSchema] = None) -> ParsingDataset:
    """Turn record sets into a parsing dataset in ``adv-example`` or ``perturbation`` format."""

    if input_format not in ("adv-example", "perturbation"):
        raise ConfigurationError(f"assemble builds adv-example or perturbation datasets, not {input_format!r}")
    sets = [records] if isinstance(records, RecordSet) else list(records)
    if not sets:
        raise ConfigurationError("No record sets to assemble")
    schema = schema or sets[0].schema.shared_with(rs.schema for rs in sets[1:])
    for rs in sets:
        if not rs.schema.same_heads(schema):
            raise ConfigurationError("Record sets use different attribute schemas")
    recs = [r for rs in sets for r in rs.records]
    if not recs:
        raise ConfigurationError("Record sets are empty")
    z = np.stack([r.x_adv if input_format == "adv-example" else r.delta for r in recs]).astype(np.float32)
    y = np.array([schema.encode(r.attributes) for r in recs], dtype=np.int64)
    delta = np.stack([r.delta for r in recs]).astype(np.float32) if input_format == "adv-example" else None
    manifest = {
        "input_format": input_format,
        "specs": [rs.spec.to_dict() for rs in sets],
        "spec_hashes": [rs.spec.spec_hash() for rs in sets],
        "record_manifests": [rs.manifest for rs in sets],
    }
    return ParsingDataset(z, y, schema, input_format, [r.attributes.vm_id for r in recs],
                          np.array([r.image_id for r in recs], dtype=np.int64), delta, manifest)


def concat_datasets(datasets: Sequence[ParsingDataset]) -> ParsingDataset:
    """Pool datasets with the same heads and format (the "combined" training row).

    The pooled schema keeps only the fixed values all parts agree on, so
    ResNet9 and ResNet20 parts pool into a dataset with AT left open.
    """

    if not datasets:
        raise ConfigurationError("Nothing to concatenate")
    first = datasets[0]
    for ds in datasets[1:]:
        if not ds.schema.same_heads(first.schema) or ds.input_format != first.input_format:
            raise ConfigurationError("Datasets differ in attribute heads or input format")
    schema = first.schema.shared_with(ds.schema for ds in datasets[1:])
    delta = None
    if all(ds.delta is not None for ds in datasets):
        delta = np.concatenate([ds.delta for ds in datasets])
    return ParsingDataset(
        np.concatenate([ds.z for ds in datasets]),
        np.concatenate([ds.y for ds in datasets]),
        schema, first.input_format,
        [v for ds in datasets for v in ds.victim_ids],
        np.concatenate([ds.image_ids for ds in datasets]),
        delta,
        {"pooled": [ds.manifest for ds in datasets], "fixed": [ds.schema.to_dict()["fixed"] for ds in datasets]},
    )


def select_victims(ds: ParsingDataset, architecture: Optional[str] = None,
                   robust: Optional[bool] = None) -> ParsingDataset:
    """Rows whose victim matches ``architecture`` and/or ``robust``.

    Selecting one architecture out of a merged dataset drops the AT column,
    so the result parses KS, AF and WS like a single-architecture dataset.
    """

    attrs = [ModelAttributes.from_vm_id(vm) for vm in ds.victim_ids]
    keep = np.array([(architecture is None or a.at == architecture) and (robust is None or a.robust == robust)
                     for a in attrs], dtype=bool)
    if not keep.any():
        raise ConfigurationError(f"No victims with architecture={architecture!r} robust={robust!r} "
                                 f"in {ds.input_format} dataset")
    part = ds.subset(keep)
    fixed = ds.schema.fixed_values
    if robust is not None:
        fixed["robust"] = robust
    if architecture is not None and "at" in ds.schema.names:
        column = ds.schema.names.index("at")
        part.y = np.delete(part.y, column, axis=1)
        part.schema = AttributeSchema.fixed_at(architecture, fixed.get("robust"))
    else:
        if architecture is not None:
            fixed["at"] = architecture
        part.schema = AttributeSchema.from_dict({**ds.schema.to_dict(), "fixed": fixed})
    part.manifest["selection"] = {"architecture": architecture, "robust": robust}
    return part


def with_estimated_perturbation(ds: ParsingDataset, pen: Any, batch_size: int = 128) -> ParsingDataset:
    """Dataset whose inputs are the PEN estimates ``g(x')`` of an adv-example dataset."""

    if ds.input_format != "adv-example":
        raise ConfigurationError("PEN estimates need an adv-example dataset")
    z = pen.estimate(ds.z, batch_size=batch_size).astype(np.float32)
    manifest = dict(ds.manifest)
    manifest["input_format"] = "pen-perturbation"
    return ParsingDataset(z, ds.y, ds.schema, "pen-perturbation", list(ds.victim_ids), ds.image_ids,
                          ds.delta, manifest)


def check_disjoint(train: ParsingDataset, test: ParsingDataset) -> bool:
    return not set(train.image_ids.tolist()) & set(test.image_ids.tolist())


DATASET_META_SCHEMA = {
    "type": "object",
    "required": ["kind", "schema", "input_format", "victim_ids", "manifest"],
    "properties": {
        "kind": {"const": "parsing-dataset"},
        "input_format": {"enum": list(INPUT_FORMATS)},
        "schema": {
            "type": "object",
            "required": ["names", "classes"],
            "properties": {"names": {"type": "array", "items": {"type": "string"}}},
        },
        "victim_ids": {"type": "array", "items": {"type": "string"}},
        "manifest": {"type": "object"},
    },
}


def save_dataset(ds: ParsingDataset, path: Union[str, Path], provenance: Optional[Dict[str, Any]] = None) -> str:
    """Write ``ds`` as a container (f32 inputs, u16 label tuples)."""

    unique_ids = sorted(set(ds.victim_ids))
    lookup = {vm: i for i, vm in enumerate(unique_ids)}
    meta = {
        "kind": "parsing-dataset",
        "schema": ds.schema.to_dict(),
        "input_format": ds.input_format,
        "victim_ids": unique_ids,
        "manifest": ds.manifest,
        "provenance": provenance or {},
        "dataset_hash": ds.content_hash(),
    }
    tensors = {
        "z": ds.z.astype(np.float32),
        "y": ds.y.astype(np.uint16),
        "victim": np.array([lookup[v] for v in ds.victim_ids], dtype=np.uint16),
        "image_id": ds.image_ids.astype(np.int64),
    }
    if ds.delta is not None:
        tensors["delta"] = ds.delta.astype(np.float32)
    return write_container(path, meta, tensors)


def load_dataset(path: Union[str, Path]) -> ParsingDataset:
    meta, t = read_container(path)
    try:
        validate(meta, DATASET_META_SCHEMA)
    except SchemaError as exc:
        raise FormatError(f"Invalid dataset manifest in {path}: {exc.message}") from exc
    for name in ("z", "y", "victim", "image_id"):
        if name not in t:
            raise FormatError(f"Dataset {path} lacks tensor {name!r}")
    ids = meta["victim_ids"]
    return ParsingDataset(
        t["z"], t["y"].astype(np.int64), AttributeSchema.from_dict(meta["schema"]), meta["input_format"],
        [ids[int(i)] for i in t["victim"]], t["image_id"], t.get("delta"), meta["manifest"],
    )
