"""Minimal differentiable network substrate on numpy.

A :class:`Network` is an ordered graph of :class:`LayerSpec` nodes. Node ``i``
reads from the nodes listed in ``spec.inputs`` (``-1`` is the network input;
an empty tuple means "the previous node"). The last node is the output.

:func:`forward` records a :class:`Tape`; :func:`backward` turns a loss into
parameter (and optionally input) gradients; :func:`sgd_step` applies SGD with
momentum, weight decay and a cosine learning-rate schedule, then reapplies
pruning masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view

from .config import (
    ACTIVATIONS,
    BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
    ELU_ALPHA,
    GRADCHECK_TOLERANCE,
    LAYER_KINDS,
)
from .errors import ConfigurationError, NumericError, ShapeMismatchError

Shape = Tuple[int, ...]
INPUT = -1


# =============================================================================
# LAYER SPECS
# =============================================================================

@dataclass(frozen=True)
class LayerSpec:
    """One node of the network graph.

    ``kernel`` is the conv side or the pool size (``None`` on ``avgpool``
    means global average pooling). ``in_channels``/``out_channels`` double as
    feature counts for ``dense`` and channel count for ``batchnorm2d``.
    Pools are non-overlapping (stride = kernel).
    """

    kind: str
    kernel: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    activation: Optional[str] = None
    stride: int = 1
    padding: Optional[int] = None
    bias: bool = True
    inputs: Tuple[int, ...] = ()
    role: str = "block"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"Unknown layer kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        if self.kind == "conv2d":
            if self.kernel is None or self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigurationError(f"conv2d kernel side must be odd, got {self.kernel}")
            expected = (self.kernel - 1) // 2
            if self.padding is None:
                object.__setattr__(self, "padding", expected)
            elif self.padding != expected:
                raise ConfigurationError(
                    f"conv2d padding must be (kernel-1)/2 = {expected}, got {self.padding}"
                )
            if self.stride < 1:
                raise ConfigurationError("conv2d stride must be >= 1")
            if not self.in_channels or not self.out_channels:
                raise ConfigurationError("conv2d needs in_channels and out_channels")
        elif self.kind == "dense":
            if not self.in_channels or not self.out_channels:
                raise ConfigurationError("dense needs in_channels and out_channels")
        elif self.kind == "batchnorm2d":
            if not self.in_channels:
                raise ConfigurationError("batchnorm2d needs in_channels")
        elif self.kind == "activation":
            if self.activation not in ACTIVATIONS:
                raise ConfigurationError(
                    f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
                )
        elif self.kind in ("avgpool", "maxpool"):
            if self.kernel is None and self.kind == "maxpool":
                raise ConfigurationError("maxpool needs a kernel size")
            if self.kernel is not None and self.kernel < 1:
                raise ConfigurationError("pool kernel must be >= 1")
        elif self.kind == "residual-add" and len(self.inputs) != 2:
            raise ConfigurationError("residual-add joins exactly two inputs")

    def describe(self, index: int) -> str:
        detail = {
            "conv2d": f"{self.in_channels}->{self.out_channels}, k={self.kernel}, s={self.stride}",
            "dense": f"{self.in_channels}->{self.out_channels}",
            "batchnorm2d": f"{self.in_channels}",
            "activation": f"{self.activation}",
        }.get(self.kind, "")
        return f"layer {index} ({self.kind}{' ' + detail if detail else ''})"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["inputs"] = list(self.inputs)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        data = dict(data)
        data["inputs"] = tuple(data.get("inputs", ()))
        return cls(**data)


def node_inputs(specs: Sequence[LayerSpec], index: int) -> Tuple[int, ...]:
    spec = specs[index]
    return spec.inputs if spec.inputs else (index - 1,)


def infer_shapes(specs: Sequence[LayerSpec], input_shape: Shape) -> List[Shape]:
    """Per-node output shapes (without the batch axis).

    Raises:
        ShapeMismatchError: naming both layers when consecutive shapes disagree.
    """

    shapes: List[Shape] = []

    def source(i: int) -> Tuple[Shape, str]:
        if i == INPUT:
            return tuple(input_shape), "network input"
        if i < 0 or i >= len(shapes):
            raise ConfigurationError(f"Node reference {i} is not an earlier node")
        return shapes[i], specs[i].describe(i)

    for index, spec in enumerate(specs):
        refs = node_inputs(specs, index)
        in_shape, src_name = source(refs[0])
        me = spec.describe(index)

        if spec.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
                raise ShapeMismatchError(
                    f"{src_name} outputs {in_shape} but {me} expects {spec.in_channels} input channels"
                )
            _, h, w = in_shape
            hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
            out = (spec.out_channels, (hp - spec.kernel) // spec.stride + 1, (wp - spec.kernel) // spec.stride + 1)
        elif spec.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != spec.in_channels:
                raise ShapeMismatchError(
                    f"{src_name} outputs {in_shape} but {me} expects ({spec.in_channels},)"
                )
            out = (spec.out_channels,)
        elif spec.kind == "batchnorm2d":
            if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
                raise ShapeMismatchError(
                    f"{src_name} outputs {in_shape} but {me} expects {spec.in_channels} channels"
                )
            out = in_shape
        elif spec.kind in ("avgpool", "maxpool"):
            if len(in_shape) != 3:
                raise ShapeMismatchError(f"{src_name} outputs {in_shape} but {me} expects (C, H, W)")
            c, h, w = in_shape
            if spec.kernel is None:
                out = (c, 1, 1)
            else:
                if h < spec.kernel or w < spec.kernel:
                    raise ShapeMismatchError(
                        f"{src_name} outputs {in_shape}, too small for {me} with kernel {spec.kernel}"
                    )
                out = (c, h // spec.kernel, w // spec.kernel)
        elif spec.kind == "flatten":
            out = (int(np.prod(in_shape)),)
        elif spec.kind == "residual-add":
            other, other_name = source(refs[1])
            if other != in_shape:
                raise ShapeMismatchError(
                    f"{me} joins {src_name} {in_shape} with {other_name} {other}"
                )
            out = in_shape
        else:  # activation
            out = in_shape
        if any(d < 1 for d in out):
            raise ShapeMismatchError(f"{me} produces an empty output {out}")
        shapes.append(tuple(int(d) for d in out))
    return shapes


class NetworkBuilder:
    """Append-only helper that tracks shapes and returns node indices."""

    def __init__(self, input_shape: Shape):
        self.input_shape = tuple(input_shape)
        self.specs: List[LayerSpec] = []
        self._shapes: List[Shape] = []

    @property
    def last(self) -> int:
        return len(self.specs) - 1 if self.specs else INPUT

    def shape_of(self, index: int) -> Shape:
        return self.input_shape if index == INPUT else self._shapes[index]

    def _append(self, spec: LayerSpec) -> int:
        self.specs.append(spec)
        self._shapes = infer_shapes(self.specs, self.input_shape)
        return len(self.specs) - 1

    def _src(self, src: Optional[int]) -> Tuple[int, ...]:
        return (self.last if src is None else src,)

    def conv(self, out_channels: int, kernel: int, stride: int = 1, src: Optional[int] = None,
             role: str = "block", bias: bool = True) -> int:
        inputs = self._src(src)
        return self._append(LayerSpec(
            "conv2d", kernel=kernel, in_channels=self.shape_of(inputs[0])[0],
            out_channels=out_channels, stride=stride, bias=bias, inputs=inputs, role=role,
        ))

    def bn(self, src: Optional[int] = None, role: str = "block") -> int:
        inputs = self._src(src)
        return self._append(LayerSpec("batchnorm2d", in_channels=self.shape_of(inputs[0])[0],
                                      inputs=inputs, role=role))

    def act(self, activation: str, src: Optional[int] = None, role: str = "block") -> int:
        return self._append(LayerSpec("activation", activation=activation, inputs=self._src(src), role=role))

    def maxpool(self, kernel: int = 2, src: Optional[int] = None) -> int:
        return self._append(LayerSpec("maxpool", kernel=kernel, inputs=self._src(src)))

    def avgpool(self, kernel: Optional[int] = None, src: Optional[int] = None) -> int:
        return self._append(LayerSpec("avgpool", kernel=kernel, inputs=self._src(src)))

    def flatten(self, src: Optional[int] = None) -> int:
        return self._append(LayerSpec("flatten", inputs=self._src(src)))

    def dense(self, out_features: int, src: Optional[int] = None, role: str = "block") -> int:
        inputs = self._src(src)
        return self._append(LayerSpec("dense", in_channels=self.shape_of(inputs[0])[0],
                                      out_channels=out_features, inputs=inputs, role=role))

    def add(self, a: int, b: int) -> int:
        return self._append(LayerSpec("residual-add", inputs=(a, b)))


# =============================================================================
# NETWORK
# =============================================================================

class Network:
    """Layer graph plus parameters, pruning masks and batch-norm buffers."""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Shape,
        params: Dict[str, np.ndarray],
        masks: Optional[Dict[str, np.ndarray]] = None,
        buffers: Optional[Dict[str, np.ndarray]] = None,
        training: bool = False,
    ):
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.shapes: List[Shape] = infer_shapes(self.specs, self.input_shape)
        self.params = params
        self.masks = masks or {}
        self.buffers = buffers or {}
        self.training = training

    # --- mode -------------------------------------------------------------
    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    # --- queries ----------------------------------------------------------
    @property
    def dtype(self) -> np.dtype:
        for value in self.params.values():
            return value.dtype
        return np.dtype(np.float32)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def prunable_parameters(self) -> List[str]:
        """Names of conv and dense weights (biases and batch-norm excluded)."""

        return [
            f"{i}.weight" for i, spec in enumerate(self.specs) if spec.kind in ("conv2d", "dense")
        ]

    def layers_of(self, kind: str, role: Optional[str] = None) -> List[Tuple[int, LayerSpec]]:
        return [
            (i, s) for i, s in enumerate(self.specs)
            if s.kind == kind and (role is None or s.role == role)
        ]

    # --- copies -----------------------------------------------------------
    def copy(self) -> "Network":
        return Network(
            self.specs,
            self.input_shape,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.masks.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            training=self.training,
        )

    def astype(self, dtype: Any) -> "Network":
        dtype = np.dtype(dtype)
        return Network(
            self.specs,
            self.input_shape,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.masks.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            training=self.training,
        )

    def apply_masks(self) -> None:
        for name, mask in self.masks.items():
            self.params[name] *= mask

    def set_mask(self, name: str, mask: np.ndarray) -> None:
        if name not in self.params or self.params[name].shape != mask.shape:
            raise ShapeMismatchError(f"Mask for {name} does not match its parameter")
        self.masks[name] = mask.astype(self.params[name].dtype)
        self.params[name] *= self.masks[name]


def instantiate(
    specs: Sequence[LayerSpec],
    input_shape: Shape,
    seed: int,
    dtype: Any = np.float32,
) -> Network:
    """Build a network with Kaiming-uniform (fan-in) weights and zero biases.

    Batch-norm scale starts at 1 and shift at 0. Initialisation draws are made
    in float64 from ``default_rng(seed)`` and cast afterwards, so f32 and f64
    networks from the same seed agree up to rounding.
    """

    specs = list(specs)
    infer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    for i, spec in enumerate(specs):
        if spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            bound = math.sqrt(6.0 / fan_in)
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            params[f"{i}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            if spec.bias:
                params[f"{i}.bias"] = np.zeros(spec.out_channels, dtype=dtype)
        elif spec.kind == "dense":
            bound = math.sqrt(6.0 / spec.in_channels)
            shape = (spec.out_channels, spec.in_channels)
            params[f"{i}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
            if spec.bias:
                params[f"{i}.bias"] = np.zeros(spec.out_channels, dtype=dtype)
        elif spec.kind == "batchnorm2d":
            params[f"{i}.gamma"] = np.ones(spec.in_channels, dtype=dtype)
            params[f"{i}.beta"] = np.zeros(spec.in_channels, dtype=dtype)
            buffers[f"{i}.running_mean"] = np.zeros(spec.in_channels, dtype=dtype)
            buffers[f"{i}.running_var"] = np.ones(spec.in_channels, dtype=dtype)
    return Network(specs, input_shape, params, {}, buffers)


# =============================================================================
# LAYER KERNELS
# =============================================================================

def _im2col(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)


def _conv_forward(spec: LayerSpec, x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    n = x.shape[0]
    ho = (xp.shape[2] - k) // s + 1
    wo = (xp.shape[3] - k) // s + 1
    cols = _im2col(xp, k, s)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out += b
    y = out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, xp, ho, wo)


def _conv_backward(spec: LayerSpec, cache, dy: np.ndarray, w: np.ndarray, has_bias: bool):
    x_shape, xp, ho, wo = cache
    p, k, s = spec.padding, spec.kernel, spec.stride
    n, c, h, wd = x_shape
    o = w.shape[0]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = _im2col(xp, k, s)
    grads = {"weight": (dy2.T @ cols).reshape(w.shape)}
    if has_bias:
        grads["bias"] = dy.sum(axis=(0, 2, 3))
    dcols = (dy2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd]
    return np.ascontiguousarray(dx), grads


def _activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0)))


def _activation_backward(kind: str, x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dy * (x > 0)
    if kind == "tanh":
        return dy * (1 - y * y)
    return dy * np.where(x > 0, 1, y + ELU_ALPHA)


def _pool_view(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    return x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)


# =============================================================================
# FORWARD / BACKWARD
# =============================================================================

@dataclass
class Tape:
    """Everything :func:`backward_from` needs from one forward pass."""

    net: Network
    input_shape: Shape
    caches: List[Any]
    output: np.ndarray
    training: bool


@dataclass
class Gradients:
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    input: Optional[np.ndarray] = None
    loss: Optional[float] = None


def forward(
    net: Network,
    batch: np.ndarray,
    update_stats: bool = True,
    training: Optional[bool] = None,
) -> Tuple[np.ndarray, Tape]:
    """Run the graph on ``batch`` (leading batch axis).

    In train mode batch-norm uses batch statistics and, unless
    ``update_stats`` is false, updates its running averages. ``training``
    overrides the network mode for this call only.

    Raises:
        ShapeMismatchError: batch shape differs from the network input shape.
        NumericError: a node produced NaN/Inf (carries the node index).
    """

    batch = np.asarray(batch)
    if tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeMismatchError(
            f"Batch of shape {batch.shape[1:]} does not match network input {net.input_shape}"
        )
    x_in = batch.astype(net.dtype, copy=False)
    outputs: List[np.ndarray] = []
    caches: List[Any] = []
    training = net.training if training is None else training

    for i, spec in enumerate(net.specs):
        refs = node_inputs(net.specs, i)
        x = x_in if refs[0] == INPUT else outputs[refs[0]]
        if spec.kind == "conv2d":
            y, cache = _conv_forward(spec, x, net.params[f"{i}.weight"], net.params.get(f"{i}.bias"))
        elif spec.kind == "dense":
            y = x @ net.params[f"{i}.weight"].T
            bias = net.params.get(f"{i}.bias")
            if bias is not None:
                y = y + bias
            cache = x
        elif spec.kind == "batchnorm2d":
            gamma, beta = net.params[f"{i}.gamma"], net.params[f"{i}.beta"]
            if training:
                mean = x.mean(axis=(0, 2, 3))
                var = x.var(axis=(0, 2, 3))
                if update_stats:
                    m = x.shape[0] * x.shape[2] * x.shape[3]
                    unbiased = var * m / max(m - 1, 1)
                    rm, rv = net.buffers[f"{i}.running_mean"], net.buffers[f"{i}.running_var"]
                    rm *= 1 - BATCHNORM_MOMENTUM
                    rm += BATCHNORM_MOMENTUM * mean
                    rv *= 1 - BATCHNORM_MOMENTUM
                    rv += BATCHNORM_MOMENTUM * unbiased
            else:
                mean = net.buffers[f"{i}.running_mean"]
                var = net.buffers[f"{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BATCHNORM_EPS)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
            cache = (xhat, inv_std, training)
        elif spec.kind == "activation":
            y = _activation_forward(spec.activation, x)
            cache = (x, y)
        elif spec.kind == "avgpool":
            if spec.kernel is None:
                y = x.mean(axis=(2, 3), keepdims=True)
            else:
                y = _pool_view(x, spec.kernel).mean(axis=(3, 5))
            cache = x.shape
        elif spec.kind == "maxpool":
            k = spec.kernel
            view = _pool_view(x, k)
            n, c, ho, _, wo, _ = view.shape
            flat = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
            arg = flat.argmax(axis=-1)
            y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
            cache = (x.shape, arg)
        elif spec.kind == "flatten":
            y = x.reshape(x.shape[0], -1)
            cache = x.shape
        else:  # residual-add
            other = x_in if refs[1] == INPUT else outputs[refs[1]]
            y = x + other
            cache = None
        if not np.all(np.isfinite(y)):
            raise NumericError(f"Non-finite activation at {spec.describe(i)}", layer_index=i)
        outputs.append(y)
        caches.append(cache)

    return outputs[-1], Tape(net, tuple(batch.shape), caches, outputs[-1], training)


def backward_from(
    tape: Tape,
    grad_output: np.ndarray,
    wrt_input: bool = False,
    wrt_params: bool = True,
) -> Gradients:
    """Propagate an arbitrary upstream gradient through a recorded pass.

    Masked parameter entries always receive a zero gradient.
    """

    net = tape.net
    specs = net.specs
    n_nodes = len(specs)
    node_grads: List[Optional[np.ndarray]] = [None] * n_nodes
    node_grads[-1] = np.asarray(grad_output, dtype=net.dtype)
    input_grad: Optional[np.ndarray] = None
    grads = Gradients()

    def push(ref: int, g: np.ndarray) -> None:
        nonlocal input_grad
        if ref == INPUT:
            input_grad = g if input_grad is None else input_grad + g
        elif node_grads[ref] is None:
            node_grads[ref] = g
        else:
            node_grads[ref] = node_grads[ref] + g

    for i in range(n_nodes - 1, -1, -1):
        dy = node_grads[i]
        if dy is None:
            continue
        node_grads[i] = None
        spec = specs[i]
        refs = node_inputs(specs, i)
        cache = tape.caches[i]
        if spec.kind == "conv2d":
            w = net.params[f"{i}.weight"]
            dx, g = _conv_backward(spec, cache, dy, w, f"{i}.bias" in net.params)
            if wrt_params:
                for key, value in g.items():
                    grads.params[f"{i}.{key}"] = value
        elif spec.kind == "dense":
            w = net.params[f"{i}.weight"]
            if wrt_params:
                grads.params[f"{i}.weight"] = dy.T @ cache
                if f"{i}.bias" in net.params:
                    grads.params[f"{i}.bias"] = dy.sum(axis=0)
            dx = dy @ w
        elif spec.kind == "batchnorm2d":
            xhat, inv_std, training = cache
            gamma = net.params[f"{i}.gamma"]
            if wrt_params:
                grads.params[f"{i}.gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
                grads.params[f"{i}.beta"] = dy.sum(axis=(0, 2, 3))
            dxhat = dy * gamma[None, :, None, None]
            if training:
                m = dy.shape[0] * dy.shape[2] * dy.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
        elif spec.kind == "activation":
            x, y = cache
            dx = _activation_backward(spec.activation, x, y, dy)
        elif spec.kind == "avgpool":
            shape = cache
            if spec.kernel is None:
                dx = np.broadcast_to(dy / (shape[2] * shape[3]), shape).copy()
            else:
                k = spec.kernel
                n, c, h, w = shape
                ho, wo = h // k, w // k
                dx = np.zeros(shape, dtype=dy.dtype)
                block = np.repeat(np.repeat(dy / (k * k), k, axis=2), k, axis=3)
                dx[:, :, :ho * k, :wo * k] = block
        elif spec.kind == "maxpool":
            shape, arg = cache
            k = spec.kernel
            n, c, h, w = shape
            ho, wo = h // k, w // k
            flat = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
            np.put_along_axis(flat, arg[..., None], dy[..., None], axis=-1)
            block = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
            dx = np.zeros(shape, dtype=dy.dtype)
            dx[:, :, :ho * k, :wo * k] = block
        elif spec.kind == "flatten":
            dx = dy.reshape(cache)
        else:  # residual-add
            push(refs[1], dy)
            dx = dy
        push(refs[0], dx)

    if wrt_params:
        for name, mask in net.masks.items():
            if name in grads.params:
                grads.params[name] = grads.params[name] * mask
        for name in net.params:
            grads.params.setdefault(name, np.zeros_like(net.params[name]))
    if wrt_input:
        grads.input = input_grad if input_grad is not None else np.zeros(tape.input_shape, dtype=net.dtype)
    return grads


# =============================================================================
# LOSSES
# =============================================================================

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _reduce(per_example: np.ndarray, grad: np.ndarray, reduction: str) -> Tuple[float, np.ndarray]:
    if reduction == "mean":
        n = max(per_example.shape[0], 1)
        return float(per_example.mean()), grad / n
    if reduction == "sum":
        return float(per_example.sum()), grad
    raise ConfigurationError(f"Unknown reduction {reduction!r}")


def cross_entropy(logits: np.ndarray, target: np.ndarray, reduction: str = "mean"):
    """Softmax cross-entropy; returns ``(value, d value / d logits)``."""

    target = np.asarray(target, dtype=np.int64)
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    per_example = -logp[rows, target]
    grad = np.exp(logp)
    grad[rows, target] -= 1
    return _reduce(per_example, grad, reduction)


def _runner_up(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    others = logits.copy()
    others[np.arange(logits.shape[0]), target] = -np.inf
    return others.argmax(axis=1)


def cw_margin(logits: np.ndarray, target: np.ndarray, reduction: str = "mean", kappa: float = 0.0):
    """Untargeted hinge ``max(z_y - max_{j!=y} z_j, -kappa)``."""

    target = np.asarray(target, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    other = _runner_up(logits, target)
    margin = logits[rows, target] - logits[rows, other]
    active = margin > -kappa
    per_example = np.where(active, margin, -kappa)
    grad = np.zeros_like(logits)
    grad[rows, target] += active
    grad[rows, other] -= active
    return _reduce(per_example, grad, reduction)


def dlr(logits: np.ndarray, target: np.ndarray, reduction: str = "mean"):
    """Difference-of-logits-ratio loss ``-(z_y - max_{i!=y} z_i) / (z_p1 - z_p3 + 1e-12)``."""

    if logits.shape[1] < 3:
        raise ConfigurationError("DLR loss needs at least 3 classes")
    target = np.asarray(target, dtype=np.int64)
    rows = np.arange(logits.shape[0])
    order = np.argsort(-logits, axis=1, kind="stable")
    p1, p3 = order[:, 0], order[:, 2]
    other = _runner_up(logits, target)
    num = logits[rows, target] - logits[rows, other]
    den = logits[rows, p1] - logits[rows, p3] + 1e-12
    per_example = -num / den
    grad = np.zeros_like(logits)
    np.add.at(grad, (rows, target), -1.0 / den)
    np.add.at(grad, (rows, other), 1.0 / den)
    np.add.at(grad, (rows, p1), num / den ** 2)
    np.add.at(grad, (rows, p3), -num / den ** 2)
    return _reduce(per_example, grad, reduction)


def mae(prediction: np.ndarray, target: np.ndarray, reduction: str = "mean"):
    """Mean absolute error over all elements (``sum`` keeps the raw total)."""

    target = np.asarray(target, dtype=prediction.dtype)
    if target.shape != prediction.shape:
        raise ShapeMismatchError(f"MAE target {target.shape} vs prediction {prediction.shape}")
    diff = prediction - target
    grad = np.sign(diff)
    if reduction == "mean":
        return float(np.abs(diff).mean()), grad / max(diff.size, 1)
    if reduction == "sum":
        return float(np.abs(diff).sum()), grad
    raise ConfigurationError(f"Unknown reduction {reduction!r}")


LOSSES: Dict[str, Callable[..., Tuple[float, np.ndarray]]] = {
    "cross-entropy": cross_entropy,
    "cw-margin": cw_margin,
    "dlr": dlr,
    "mae": mae,
}


def loss_and_grad(kind: str, output: np.ndarray, target: np.ndarray, reduction: str = "mean", **kwargs):
    if kind not in LOSSES:
        raise ConfigurationError(f"Unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}")
    value, grad = LOSSES[kind](output, target, reduction=reduction, **kwargs)
    if not math.isfinite(value):
        raise NumericError(f"Non-finite {kind} loss")
    return value, grad


def backward(
    tape: Tape,
    loss_kind: str,
    target: np.ndarray,
    wrt_input: bool = False,
    wrt_params: bool = True,
    reduction: str = "mean",
    **loss_kwargs: Any,
) -> Gradients:
    """Gradients of ``loss_kind(output, target)`` for the recorded pass."""

    value, grad_output = loss_and_grad(loss_kind, tape.output, target, reduction=reduction, **loss_kwargs)
    grads = backward_from(tape, grad_output, wrt_input=wrt_input, wrt_params=wrt_params)
    grads.loss = value
    return grads


def infer(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Chunked forward pass that keeps no tape."""

    outs = [forward(net, images[i:i + batch_size], update_stats=False)[0]
            for i in range(0, len(images), batch_size)]
    if not outs:
        return np.zeros((0,) + net.output_shape, dtype=net.dtype)
    return np.concatenate(outs, axis=0)


# =============================================================================
# OPTIMISER
# =============================================================================

def cosine_lr(t: int, total: int, lr0: float) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * t / total))``."""

    if total <= 0:
        raise ConfigurationError("Total step count must be positive")
    if not 0 <= t <= total:
        raise ConfigurationError(f"Step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    lr0: float
    momentum: float
    weight_decay: float
    total_steps: int
    t: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, net: Network, lr0: float, total_steps: int, momentum: float = 0.9,
               weight_decay: float = 0.0) -> "OptimizerState":
        if lr0 <= 0:
            raise ConfigurationError("Base learning rate must be positive")
        return cls(
            lr0=lr0,
            momentum=momentum,
            weight_decay=weight_decay,
            total_steps=max(int(total_steps), 1),
            buffers={k: np.zeros_like(v) for k, v in net.params.items()},
        )

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.t, self.total_steps), self.total_steps, self.lr0)


def sgd_step(net: Network, gradients: Dict[str, np.ndarray], opt: OptimizerState) -> Tuple[Network, OptimizerState]:
    """One SGD step with momentum and weight decay, in place.

    ``buf <- momentum * buf + (grad + wd * p)``, ``p <- p - lr_t * buf``;
    masks are reapplied after the update.
    """

    lr = opt.lr
    for name, param in net.params.items():
        grad = gradients.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeMismatchError(f"Gradient for {name} has shape {grad.shape}, expected {param.shape}")
        update = grad + opt.weight_decay * param if opt.weight_decay else grad
        buf = opt.buffers.get(name)
        if buf is None or buf.shape != param.shape:
            raise ShapeMismatchError(f"Optimizer buffer for {name} does not match its parameter")
        buf *= opt.momentum
        buf += update
        param -= (lr * buf).astype(param.dtype, copy=False)
    net.apply_masks()
    opt.t += 1
    return net, opt


# =============================================================================
# GRADIENT CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    per_parameter: Dict[str, float]
    per_kind: Dict[str, float]
    input_error: Optional[float]
    tolerance: float

    @property
    def max_error(self) -> float:
        values = list(self.per_parameter.values())
        if self.input_error is not None:
            values.append(self.input_error)
        return max(values) if values else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    net: Network,
    batch: np.ndarray,
    eps_fd: float = 1e-6,
    tol: float = GRADCHECK_TOLERANCE,
    seed: int = 0,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar checked is ``sum(output * R)`` for a fixed random ``R`` so any
    output shape works. Only double-precision networks are accepted. With
    ``max_entries`` a seeded subset of each tensor is probed.
    """

    if net.dtype != np.float64:
        raise ConfigurationError("grad_check needs a float64 network (use net.astype(np.float64))")
    rng = np.random.default_rng(seed)
    batch = np.array(batch, dtype=np.float64)
    saved_buffers = {k: v.copy() for k, v in net.buffers.items()}
    out, tape = forward(net, batch, update_stats=False)
    probe = rng.standard_normal(out.shape)
    grads = backward_from(tape, probe, wrt_input=True)

    def objective() -> float:
        return float((forward(net, batch, update_stats=False)[0] * probe).sum())

    def numeric_for(array: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        flat = array.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.zeros(idx.size)
        for j, k in enumerate(idx):
            original = flat[k]
            flat[k] = original + eps_fd
            plus = objective()
            flat[k] = original - eps_fd
            minus = objective()
            flat[k] = original
            numeric[j] = (plus - minus) / (2 * eps_fd)
        return idx, numeric

    per_parameter: Dict[str, float] = {}
    per_kind: Dict[str, float] = {}
    for name, param in net.params.items():
        mask = net.masks.get(name)
        idx, numeric = numeric_for(param)
        if mask is not None:
            numeric = numeric * mask.reshape(-1)[idx]
        err = _relative_error(grads.params[name].reshape(-1)[idx], numeric)
        per_parameter[name] = err
        kind = net.specs[int(name.split(".")[0])].kind
        per_kind[kind] = max(per_kind.get(kind, 0.0), err)

    idx, numeric = numeric_for(batch)
    input_error = _relative_error(grads.input.reshape(-1)[idx], numeric)
    per_kind["input"] = input_error
    for name, value in saved_buffers.items():
        net.buffers[name][...] = value
    logger.debug("grad_check max relative error per kind: {}", per_kind)
    return GradCheckReport(per_parameter, per_kind, input_error, tol)


# =============================================================================
# SERIALISATION
# =============================================================================

def network_to_container(net: Network) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Metadata and tensors describing ``net`` (layers, params, masks, buffers)."""

    meta = {
        "layers": [s.to_dict() for s in net.specs],
        "input_shape": list(net.input_shape),
        "dtype": np.dtype(net.dtype).name,
    }
    tensors: Dict[str, np.ndarray] = {}
    for name, value in net.params.items():
        tensors[f"param/{name}"] = value
    for name, value in net.masks.items():
        tensors[f"mask/{name}"] = value
    for name, value in net.buffers.items():
        tensors[f"buffer/{name}"] = value
    return meta, tensors


def network_from_container(meta: Dict[str, Any], tensors: Dict[str, np.ndarray], prefix: str = "") -> Network:
    specs = [LayerSpec.from_dict(d) for d in meta["layers"]]
    dtype = np.dtype(meta.get("dtype", "float32"))
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "mask": {}, "buffer": {}}
    for key, value in tensors.items():
        if not key.startswith(prefix):
            continue
        group, _, name = key[len(prefix):].partition("/")
        if group in groups:
            groups[group][name] = value.astype(dtype)
    return Network(specs, tuple(meta["input_shape"]), groups["param"], groups["mask"], groups["buffer"])
