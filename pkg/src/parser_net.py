"""Model parsing network (MPN) and perturbation estimation network (PEN).

The MPN is a shared trunk followed by one dense head per parsed attribute.
The PEN is a DnCNN-style convolutional denoiser whose output is the
estimated perturbation ``g(x')``; it can be trained alone (denoising) or
jointly with the MPN so that parsing gradients reach the estimator.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .config import (
    INPUT_FORMATS,
    JOINT_TRAINING,
    MPN_CONV_CHANNELS,
    MPN_HIDDEN_UNITS,
    MPN_RECIPE,
    PEN_DEPTH,
    PEN_PRETRAIN,
    PEN_WIDTH,
)
from .container import read_container, write_container
from .diffnet import (
    Network,
    NetworkBuilder,
    OptimizerState,
    Tape,
    backward_from,
    cross_entropy,
    forward,
    instantiate,
    mae,
    network_from_container,
    network_to_container,
    sgd_step,
    softmax,
)
from .errors import ConfigurationError, FormatError, NumericError, ShapeMismatchError, TrainingError
from .redset import AttributeSchema, ParsingDataset
from .utils import derive_seed

BACKBONES = ("convnet4", "mlp")
HEAD_INIT_SCALE = 0.01
PEN_VALIDATION_FRACTION = 0.1


# =============================================================================
# MPN
# =============================================================================

@dataclass
class MpnModel:
    """Trunk network plus one single-layer head per schema attribute."""

    backbone: str
    trunk: Network
    heads: List[Network]
    schema: AttributeSchema
    input_format: Optional[str] = None
    history: Dict[str, List[Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.heads) != self.schema.heads:
            raise ConfigurationError(f"{len(self.heads)} heads for a {self.schema.heads}-attribute schema")
        for head, n in zip(self.heads, self.schema.counts):
            if head.output_shape != (n,):
                raise ShapeMismatchError(f"Head outputs {head.output_shape}, schema expects ({n},)")

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.trunk.input_shape

    def networks(self) -> List[Network]:
        return [self.trunk] + list(self.heads)

    def parameter_count(self) -> int:
        return sum(net.parameter_count() for net in self.networks())

    def train(self) -> "MpnModel":
        for net in self.networks():
            net.train()
        return self

    def eval(self) -> "MpnModel":
        for net in self.networks():
            net.eval()
        return self

    def copy(self) -> "MpnModel":
        return MpnModel(self.backbone, self.trunk.copy(), [h.copy() for h in self.heads], self.schema,
                        self.input_format, {k: list(v) for k, v in self.history.items()})


def _convnet4_trunk(input_shape: Tuple[int, ...], channels: int) -> NetworkBuilder:
    b = NetworkBuilder(input_shape)
    for i in range(4):
        b.conv(channels, 3)
        b.act("relu")
        if i in (1, 3):
            b.maxpool(2)
    b.flatten()
    b.dense(MPN_HIDDEN_UNITS)
    b.act("relu")
    return b


def _mlp_trunk(input_shape: Tuple[int, ...]) -> NetworkBuilder:
    b = NetworkBuilder(input_shape)
    b.flatten()
    b.dense(MPN_HIDDEN_UNITS)
    b.act("relu")
    b.dense(MPN_HIDDEN_UNITS)
    b.act("relu")
    return b


def build_mpn(
    backbone: str,
    schema: AttributeSchema,
    input_shape: Sequence[int] = (3, 32, 32),
    seed: int = 0,
    channels: int = MPN_CONV_CHANNELS,
) -> MpnModel:
    """Instantiate an untrained MPN.

    ``convnet4``: four 3x3 conv + relu layers with 2x2 max-pooling after the
    second and fourth, then dense 128. ``mlp``: flatten, 128, 128. Heads are
    dense layers scaled down at init so every head starts near uniform.
    """

    if backbone not in BACKBONES:
        raise ConfigurationError(f"Unknown MPN backbone {backbone!r}; expected one of {list(BACKBONES)}")
    if schema.heads == 0:
        raise ConfigurationError("Attribute schema is empty")
    input_shape = tuple(int(d) for d in input_shape)
    builder = _convnet4_trunk(input_shape, channels) if backbone == "convnet4" else _mlp_trunk(input_shape)
    trunk = instantiate(builder.specs, input_shape, seed)
    heads: List[Network] = []
    for i, n in enumerate(schema.counts):
        hb = NetworkBuilder((MPN_HIDDEN_UNITS,))
        hb.dense(n, role="head")
        head = instantiate(hb.specs, (MPN_HIDDEN_UNITS,), derive_seed(seed, "head", i))
        head.params["0.weight"] *= HEAD_INIT_SCALE
        heads.append(head)
    return MpnModel(backbone, trunk, heads, schema)


@dataclass
class _MpnPass:
    features: np.ndarray
    trunk_tape: Tape
    logits: List[np.ndarray]
    head_tapes: List[Tape]


def _mpn_forward(mpn: MpnModel, z: np.ndarray, update_stats: bool = True) -> _MpnPass:
    features, trunk_tape = forward(mpn.trunk, z, update_stats=update_stats)
    logits, tapes = [], []
    for head in mpn.heads:
        out, tape = forward(head, features, update_stats=update_stats)
        logits.append(out)
        tapes.append(tape)
    return _MpnPass(features, trunk_tape, logits, tapes)


def _mpn_backward(
    mpn: MpnModel, p: _MpnPass, y: np.ndarray, wrt_input: bool = False
) -> Tuple[float, List[Dict[str, np.ndarray]], Optional[np.ndarray]]:
    """Sum of per-head mean cross-entropies and its gradients.

    Returns ``(loss, [trunk grads, head grads...], d loss / d z)``.
    """

    total = 0.0
    feature_grad = np.zeros_like(p.features)
    head_grads: List[Dict[str, np.ndarray]] = []
    for i, (logits, tape) in enumerate(zip(p.logits, p.head_tapes)):
        value, grad = cross_entropy(logits, y[:, i])
        total += value
        g = backward_from(tape, grad, wrt_input=True)
        feature_grad += g.input
        head_grads.append(g.params)
    trunk = backward_from(p.trunk_tape, feature_grad, wrt_input=wrt_input)
    return total, [trunk.params] + head_grads, trunk.input


def mpn_loss(mpn: MpnModel, z: np.ndarray, y: np.ndarray) -> float:
    """Training objective (sum over heads of mean cross-entropy) in eval mode."""

    mpn.eval()
    p = _mpn_forward(mpn, z, update_stats=False)
    y = np.asarray(y, dtype=np.int64)
    return float(sum(cross_entropy(logits, y[:, i])[0] for i, logits in enumerate(p.logits)))


def _check_schema(mpn: MpnModel, ds: ParsingDataset) -> None:
    if not ds.schema.same_heads(mpn.schema):
        raise ConfigurationError(f"Dataset parses {ds.schema.names}, the MPN parses {mpn.schema.names}")
    if tuple(ds.z.shape[1:]) != mpn.input_shape:
        raise ShapeMismatchError(f"Dataset inputs {ds.z.shape[1:]} vs MPN input {mpn.input_shape}")


def _optimizers(nets: Sequence[Network], lr: float, total: int, momentum: float, wd: float) -> List[OptimizerState]:
    return [OptimizerState.create(net, lr, total, momentum, wd) for net in nets]


def train_mpn(
    mpn: MpnModel,
    dataset: ParsingDataset,
    epochs: int = MPN_RECIPE["epochs"],
    batch_size: int = MPN_RECIPE["batch_size"],
    lr: float = MPN_RECIPE["lr"],
    momentum: float = MPN_RECIPE["momentum"],
    weight_decay: float = MPN_RECIPE["weight_decay"],
    seed: int = MPN_RECIPE["seed"],
) -> MpnModel:
    """Minimise the summed per-head cross-entropy with SGD and a cosine schedule.

    Trains in place and records ``loss`` and ``head_accuracy`` per epoch in
    ``mpn.history``. The dataset format becomes the MPN input format.
    """

    _check_schema(mpn, dataset)
    if mpn.input_format is not None and mpn.input_format != dataset.input_format:
        logger.info("MPN retrained from {} to {} inputs", mpn.input_format, dataset.input_format)
    mpn.input_format = dataset.input_format
    n = len(dataset)
    if epochs == 0 or n == 0:
        return mpn.eval()
    steps = math.ceil(n / batch_size)
    nets = mpn.networks()
    opts = _optimizers(nets, lr, epochs * steps, momentum, weight_decay)
    rng = np.random.default_rng(seed)
    losses: List[float] = []
    accs: List[List[float]] = []
    mpn.train()
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss, correct = 0.0, np.zeros(mpn.schema.heads)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            zb, yb = dataset.z[idx], dataset.y[idx]
            try:
                p = _mpn_forward(mpn, zb)
                loss, grads, _ = _mpn_backward(mpn, p, yb)
            except NumericError as exc:
                raise TrainingError(f"MPN training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
            if not math.isfinite(loss):
                raise TrainingError(f"MPN loss became non-finite at epoch {epoch}", epoch=epoch)
            for net, g, opt in zip(nets, grads, opts):
                sgd_step(net, g, opt)
            epoch_loss += loss * len(idx)
            correct += [(logits.argmax(axis=1) == yb[:, i]).sum() for i, logits in enumerate(p.logits)]
        losses.append(epoch_loss / n)
        accs.append((correct / n).tolist())
        logger.debug("MPN epoch {}/{} loss {:.4f}", epoch + 1, epochs, losses[-1])
    mpn.history["loss"] = mpn.history.get("loss", []) + losses
    mpn.history["head_accuracy"] = mpn.history.get("head_accuracy", []) + accs
    logger.info("MPN ({}, {}) trained: final loss {:.4f}", mpn.backbone, mpn.input_format, losses[-1])
    return mpn.eval()


# =============================================================================
# PEN
# =============================================================================

@dataclass
class PenModel:
    """Convolutional perturbation estimator; works on any spatial size."""

    network: Network
    depth: int
    width: int
    history: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.network.input_shape[0]

    def for_shape(self, shape: Sequence[int]) -> Network:
        """The same parameters wired for inputs of ``shape`` (shared arrays)."""

        shape = tuple(int(d) for d in shape)
        if shape == self.network.input_shape:
            return self.network
        if shape[0] != self.channels:
            raise ShapeMismatchError(f"PEN expects {self.channels} channels, got {shape[0]}")
        return Network(self.network.specs, shape, self.network.params, self.network.masks,
                       self.network.buffers, self.network.training)

    def estimate(self, x_adv: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """``g(x')`` in eval mode."""

        net = self.for_shape(x_adv.shape[1:])
        net.eval()
        self.network.eval()
        outs = [forward(net, x_adv[i:i + batch_size], update_stats=False)[0]
                for i in range(0, len(x_adv), batch_size)]
        if not outs:
            return np.zeros_like(x_adv, dtype=np.float32)
        return np.concatenate(outs).astype(np.float32)

    def copy(self) -> "PenModel":
        return PenModel(self.network.copy(), self.depth, self.width, {k: list(v) for k, v in self.history.items()})


def build_pen(
    depth: int = PEN_DEPTH,
    seed: int = 0,
    width: int = PEN_WIDTH,
    input_shape: Sequence[int] = (3, 32, 32),
) -> PenModel:
    """DnCNN layout: conv+relu, ``depth - 2`` x (conv+bn+relu), conv.

    The last convolution starts at zero so the initial estimate is ``g = 0``.
    """

    if depth < 3:
        raise ConfigurationError(f"PEN depth must be >= 3, got {depth}")
    input_shape = tuple(int(d) for d in input_shape)
    b = NetworkBuilder(input_shape)
    b.conv(width, 3)
    b.act("relu")
    for _ in range(depth - 2):
        b.conv(width, 3, bias=False)
        b.bn()
        b.act("relu")
    last = b.conv(input_shape[0], 3, role="head")
    net = instantiate(b.specs, input_shape, seed)
    net.params[f"{last}.weight"][...] = 0.0
    net.params[f"{last}.bias"][...] = 0.0
    return PenModel(net, depth, width)


def _pen_pairs(source: Any) -> Tuple[np.ndarray, np.ndarray]:
    """``(x', delta)`` arrays from an adv-example dataset, a record set or a tuple."""

    if isinstance(source, ParsingDataset):
        if source.input_format != "adv-example" or source.delta is None:
            raise ConfigurationError("PEN training needs an adv-example dataset with true perturbations")
        return source.z, source.delta
    if isinstance(source, tuple):
        return np.asarray(source[0], np.float32), np.asarray(source[1], np.float32)
    records = getattr(source, "records", source)
    if not records:
        raise ConfigurationError("No records to train the PEN on")
    return np.stack([r.x_adv for r in records]), np.stack([r.delta for r in records])


def _pen_mae(pen: PenModel, x_adv: np.ndarray, delta: np.ndarray) -> float:
    if len(x_adv) == 0:
        return 0.0
    return float(np.abs(pen.estimate(x_adv) - delta).mean())


def pretrain_pen(
    pen: PenModel,
    source: Any,
    epochs: int = PEN_PRETRAIN["epochs"],
    batch_size: int = PEN_PRETRAIN["batch_size"],
    lr: float = PEN_PRETRAIN["lr"],
    momentum: float = PEN_PRETRAIN["momentum"],
    weight_decay: float = PEN_PRETRAIN["weight_decay"],
    seed: int = 0,
    validation: Any = None,
) -> PenModel:
    """Train the PEN on ``MAE(g(x'), delta)`` alone.

    Without an explicit validation source a deterministic tenth of the pairs
    is held out (all pairs when fewer than ten). The returned model is the
    epoch state with the lowest validation MAE, the untrained state included.
    """

    x_adv, delta = _pen_pairs(source)
    rng = np.random.default_rng(seed)
    if validation is not None:
        vx, vd = _pen_pairs(validation)
        tx, td = x_adv, delta
    elif len(x_adv) < 10:
        tx, td, vx, vd = x_adv, delta, x_adv, delta
    else:
        perm = rng.permutation(len(x_adv))
        cut = max(1, int(round(PEN_VALIDATION_FRACTION * len(x_adv))))
        vx, vd = x_adv[perm[:cut]], delta[perm[:cut]]
        tx, td = x_adv[perm[cut:]], delta[perm[cut:]]

    best_mae = _pen_mae(pen, vx, vd)
    best = pen.network.copy()
    train_hist: List[float] = []
    val_hist: List[float] = [best_mae]
    n = len(tx)
    if epochs > 0 and n > 0:
        net = pen.for_shape(tx.shape[1:])
        opt = OptimizerState.create(net, lr, epochs * math.ceil(n / batch_size), momentum, weight_decay)
        for epoch in range(epochs):
            order = rng.permutation(n)
            net.train()
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                try:
                    out, tape = forward(net, tx[idx])
                    value, grad = mae(out, td[idx])
                    grads = backward_from(tape, grad)
                except NumericError as exc:
                    raise TrainingError(f"PEN training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
                sgd_step(net, grads.params, opt)
                total += value * len(idx)
            train_hist.append(total / n)
            val = _pen_mae(pen, vx, vd)
            val_hist.append(val)
            logger.debug("PEN epoch {}/{} train MAE {:.5f} val MAE {:.5f}", epoch + 1, epochs, train_hist[-1], val)
            if val < best_mae:
                best_mae, best = val, pen.network.copy()
    pen.network = best.eval()
    pen.history["train_mae"] = pen.history.get("train_mae", []) + train_hist
    pen.history["val_mae"] = pen.history.get("val_mae", []) + val_hist
    logger.info("PEN pretrained: best validation MAE {:.5f}", best_mae)
    return pen


# =============================================================================
# JOINT TRAINING
# =============================================================================

@dataclass(frozen=True)
class JointTrainConfig:
    beta: float = JOINT_TRAINING["beta"]
    epochs: int = JOINT_TRAINING["epochs"]
    mpn_lr: float = JOINT_TRAINING["mpn_lr"]
    pen_lr: float = JOINT_TRAINING["pen_lr"]
    batch_size: int = JOINT_TRAINING["batch_size"]
    momentum: float = 0.9
    seed: int = 0
    denoise_only: bool = False

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


def train_joint(
    mpn: MpnModel, pen: PenModel, dataset: ParsingDataset, cfg: JointTrainConfig = JointTrainConfig()
) -> Tuple[MpnModel, PenModel]:
    """Minimise ``beta * MAE(g(x'), delta) + sum_i CE(h_i(g(x')), y_i)``.

    Both terms backpropagate into the PEN. ``denoise_only`` drops the parsing
    term and leaves the MPN untouched. Afterwards the MPN consumes
    ``pen-perturbation`` inputs. Epoch objectives go to ``history["joint"]``.
    """

    x_adv, delta = _pen_pairs(dataset)
    if not dataset.schema.same_heads(mpn.schema):
        raise ConfigurationError(f"Dataset parses {dataset.schema.names}, the MPN parses {mpn.schema.names}")
    n = len(x_adv)
    if cfg.epochs == 0 or n == 0:
        return mpn, pen
    steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    pen_net = pen.for_shape(x_adv.shape[1:])
    pen_opt = OptimizerState.create(pen_net, cfg.pen_lr, steps, cfg.momentum)
    mpn_nets = mpn.networks()
    mpn_opts = _optimizers(mpn_nets, cfg.mpn_lr, steps, cfg.momentum, 0.0)
    rng = np.random.default_rng(cfg.seed)
    objective: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        pen_net.train()
        mpn.train()
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                estimate, pen_tape = forward(pen_net, x_adv[idx])
                value, grad = mae(estimate, delta[idx])
                value, grad = cfg.beta * value, cfg.beta * grad
                if not cfg.denoise_only:
                    p = _mpn_forward(mpn, estimate)
                    ce, mpn_grads, input_grad = _mpn_backward(mpn, p, dataset.y[idx], wrt_input=True)
                    value += ce
                    grad = grad + input_grad
                    for net, g, opt in zip(mpn_nets, mpn_grads, mpn_opts):
                        sgd_step(net, g, opt)
                pen_grads = backward_from(pen_tape, grad)
            except NumericError as exc:
                raise TrainingError(f"Joint training diverged at epoch {epoch}: {exc}", epoch=epoch) from exc
            sgd_step(pen_net, pen_grads.params, pen_opt)
            total += value * len(idx)
        objective.append(total / n)
        logger.debug("joint epoch {}/{} objective {:.5f}", epoch + 1, cfg.epochs, objective[-1])
    pen.network.eval()
    mpn.eval()
    if not cfg.denoise_only:
        mpn.input_format = "pen-perturbation"
    mpn.history["joint"] = mpn.history.get("joint", []) + objective
    pen.history["joint"] = pen.history.get("joint", []) + objective
    logger.info("Joint training done: final objective {:.5f}", objective[-1])
    return mpn, pen


# =============================================================================
# INFERENCE
# =============================================================================

@dataclass
class Prediction:
    probabilities: List[np.ndarray]
    labels: np.ndarray
    input_format: str

    def to_dict(self, schema: Optional[AttributeSchema] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "input_format": self.input_format,
            "probabilities": [p.tolist() for p in self.probabilities],
            "argmax": self.labels.tolist(),
        }
        if schema is not None:
            data["attributes"] = [schema.decode(row).to_dict() for row in self.labels]
        return data


def predict(
    mpn: MpnModel,
    inputs: np.ndarray,
    input_format: str,
    pen: Optional[PenModel] = None,
    batch_size: int = 256,
) -> Prediction:
    """Per-head softmax distributions and the argmax label tuple.

    With a PEN the inputs are adversarial examples and the MPN sees ``g(x')``;
    without one ``input_format`` must be the format the MPN was trained on.
    """

    if input_format not in INPUT_FORMATS:
        raise ConfigurationError(f"Unknown input format {input_format!r}")
    if mpn.input_format is None:
        raise ConfigurationError("MPN has not been trained")
    inputs = np.asarray(inputs, dtype=np.float32)
    if pen is not None:
        if input_format != "adv-example":
            raise ConfigurationError("A PEN pipeline takes adversarial examples as input")
        if mpn.input_format not in ("perturbation", "pen-perturbation"):
            raise ConfigurationError(f"MPN trained on {mpn.input_format} cannot consume PEN estimates")
        inputs = pen.estimate(inputs, batch_size=batch_size)
    elif input_format != mpn.input_format:
        raise ConfigurationError(f"MPN trained on {mpn.input_format} inputs, got {input_format}")
    mpn.eval()
    chunks: List[List[np.ndarray]] = [[] for _ in mpn.heads]
    for start in range(0, len(inputs), batch_size):
        p = _mpn_forward(mpn, inputs[start:start + batch_size], update_stats=False)
        for i, logits in enumerate(p.logits):
            chunks[i].append(softmax(logits.astype(np.float64)))
    probabilities = [np.concatenate(c) if c else np.zeros((0, n)) for c, n in zip(chunks, mpn.schema.counts)]
    labels = (np.stack([p.argmax(axis=1) for p in probabilities], axis=1) if len(inputs)
              else np.zeros((0, mpn.schema.heads), dtype=np.int64))
    return Prediction(probabilities, labels, input_format)


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_mpn(path: Union[str, Path], mpn: MpnModel, provenance: Optional[Dict[str, Any]] = None) -> str:
    trunk_meta, trunk_tensors = network_to_container(mpn.trunk)
    tensors = {f"trunk/{k}": v for k, v in trunk_tensors.items()}
    head_metas = []
    for i, head in enumerate(mpn.heads):
        meta, t = network_to_container(head)
        head_metas.append(meta)
        tensors.update({f"head{i}/{k}": v for k, v in t.items()})
    meta = {
        "kind": "mpn",
        "backbone": mpn.backbone,
        "schema": mpn.schema.to_dict(),
        "input_format": mpn.input_format,
        "trunk": trunk_meta,
        "heads": head_metas,
        "history": mpn.history,
        "provenance": provenance or {},
    }
    return write_container(path, meta, tensors)


def load_mpn(path: Union[str, Path]) -> MpnModel:
    meta, tensors = read_container(path)
    if meta.get("kind") != "mpn":
        raise FormatError(f"{path} is not an MPN checkpoint")
    trunk = network_from_container(meta["trunk"], tensors, prefix="trunk/")
    heads = [network_from_container(m, tensors, prefix=f"head{i}/") for i, m in enumerate(meta["heads"])]
    mpn = MpnModel(meta["backbone"], trunk, heads, AttributeSchema.from_dict(meta["schema"]),
                   meta.get("input_format"), meta.get("history", {}))
    return mpn.eval()


def save_pen(path: Union[str, Path], pen: PenModel, provenance: Optional[Dict[str, Any]] = None) -> str:
    meta, tensors = network_to_container(pen.network)
    meta.update({"kind": "pen", "depth": pen.depth, "width": pen.width, "history": pen.history,
                 "provenance": provenance or {}})
    return write_container(path, meta, tensors)


def load_pen(path: Union[str, Path]) -> PenModel:
    meta, tensors = read_container(path)
    if meta.get("kind") != "pen":
        raise FormatError(f"{path} is not a PEN checkpoint")
    return PenModel(network_from_container(meta, tensors).eval(), meta["depth"], meta["width"],
                    meta.get("history", {}))
