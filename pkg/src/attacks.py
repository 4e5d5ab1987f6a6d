"""Adversarial attacks under ℓ∞ / ℓ2 constraints.

White-box methods (FGSM, PGD and its DLR variant, CW) read input gradients
through a :class:`WhiteBoxVictim`. Black-box methods (Square, NES,
ZO-signSGD) only see logits through a :class:`QueryOnlyVictim`.

All attacks ascend the attack loss (``x' = x + eps * sign(grad)`` for FGSM).
Every record satisfies ``x' == x + delta`` bit-exactly in float32 and stays
in ``[0, 1]``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from loguru import logger

from .config import (
    ATTACK_METHODS,
    CW_DEFAULTS,
    L2_METHODS,
    PGD_L2_STEP_PAIRS,
    PGD_LINF_STEP_PAIRS,
    PGD_METHODS,
    PGD_STEPS,
    SQUARE_DEFAULTS,
    SQUARE_HALVING_POINTS,
    SQUARE_METHODS,
    WHITE_BOX_METHODS,
    ZOO_DEFAULTS,
    ZOO_METHODS,
    strength_label,
)
from .diffnet import Network, backward, cross_entropy, dlr, forward
from .errors import AttackBatchError, ConfigurationError, UnsupportedConfigurationError
from .utils import example_rng, fast_nondeterministic, sha256_json

LossFn = Callable[[np.ndarray], np.ndarray]


# =============================================================================
# SPECS AND RECORDS
# =============================================================================

@dataclass(frozen=True)
class AttackSpec:
    """Attack method plus its hyper-parameters.

    ``eps`` is the ball radius (ℓ∞ in pixel units, ℓ2 absolute); for
    ``cw-l2`` the strength is ``c`` and ``eps`` is unused.
    """

    method: str
    eps: float = 0.0
    alpha: Optional[float] = None
    steps: int = PGD_STEPS
    c: float = CW_DEFAULTS["c"]
    kappa: float = CW_DEFAULTS["kappa"]
    lr: Optional[float] = None
    mu: float = ZOO_DEFAULTS["mu"]
    q: int = ZOO_DEFAULTS["q"]
    max_queries: int = SQUARE_DEFAULTS["max_queries"]
    max_iters: Optional[int] = None
    p_init: float = SQUARE_DEFAULTS["p_init"]
    random_init: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ATTACK_METHODS:
            raise ConfigurationError(f"Unknown attack method {self.method!r}")
        if self.eps < 0:
            raise ConfigurationError(f"Attack strength must be >= 0, got {self.eps}")
        if self.method in PGD_METHODS and self.steps < 1:
            raise ConfigurationError("PGD needs at least one step (K >= 1)")
        if self.method == "cw-l2" and self.c <= 0:
            raise ConfigurationError("CW regularisation weight c must be > 0")
        if self.method in ZOO_METHODS:
            if self.mu <= 0:
                raise ConfigurationError("ZOO smoothing radius mu must be > 0")
            if self.q < 1:
                raise ConfigurationError("ZOO needs q >= 1 queries per estimate")
        if self.method in SQUARE_METHODS and self.max_queries < 1:
            raise ConfigurationError("Square attack needs a query budget >= 1")

    @property
    def norm(self) -> str:
        return "l2" if self.method in L2_METHODS else "linf"

    @property
    def strength(self) -> float:
        return self.c if self.method == "cw-l2" else self.eps

    @property
    def label(self) -> str:
        return f"{self.method}@{strength_label(self.strength, 'cw' if self.method == 'cw-l2' else self.norm)}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def spec_hash(self) -> str:
        return sha256_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackSpec":
        return cls(**data)

    @classmethod
    def from_table(cls, method: str, strength: float, **overrides: Any) -> "AttackSpec":
        """Spec with the default hyper-parameters for ``method`` at ``strength``.

        PGD picks its step size from the (eps, alpha) pairs of the strength
        grid; off-grid strengths fall back to ``2.5 * eps / K``.
        """

        if method not in ATTACK_METHODS:
            raise ConfigurationError(f"Unknown attack method {method!r}")
        fields: Dict[str, Any] = {"method": method}
        if method == "cw-l2":
            fields.update(c=float(strength), kappa=CW_DEFAULTS["kappa"], lr=CW_DEFAULTS["lr"],
                          max_iters=CW_DEFAULTS["max_iters"])
        else:
            fields["eps"] = float(strength)
        if method in PGD_METHODS:
            steps = int(overrides.get("steps", PGD_STEPS))
            fields["steps"] = steps
            fields["alpha"] = _table_alpha(method, float(strength), steps)
        elif method in SQUARE_METHODS:
            fields.update(max_queries=SQUARE_DEFAULTS["max_queries"], p_init=SQUARE_DEFAULTS["p_init"])
        elif method in ZOO_METHODS:
            fields.update(q=ZOO_DEFAULTS["q"], mu=ZOO_DEFAULTS["mu"], lr=ZOO_DEFAULTS["lr"],
                          max_iters=ZOO_DEFAULTS["max_iters"])
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)


def _lookup_pair(pairs: Dict[float, float], eps: float) -> Optional[float]:
    for key, alpha in pairs.items():
        if math.isclose(key, eps, rel_tol=1e-6, abs_tol=1e-9):
            return alpha
    return None


def _table_alpha(method: str, eps: float, steps: int) -> float:
    pairs = PGD_L2_STEP_PAIRS if method in L2_METHODS else PGD_LINF_STEP_PAIRS
    alpha = _lookup_pair(pairs, eps)
    return alpha if alpha is not None else 2.5 * eps / steps


@dataclass
class AttackRecord:
    """One attack instance. ``x_adv == x + delta`` holds bit-exactly."""

    x: np.ndarray
    x_adv: np.ndarray
    delta: np.ndarray
    label: int
    success: bool
    method: str
    attributes: Any = None
    queries: int = 0
    steps: int = 0
    index: int = 0
    image_id: int = -1
    trace: Optional[np.ndarray] = None


# =============================================================================
# VICTIM HANDLES
# =============================================================================

class WhiteBoxVictim:
    """Logits and input gradients of a network.

    ``batch_stats=True`` runs batch-norm with batch statistics but never
    updates the running averages (inner loop of adversarial training).
    """

    def __init__(self, net: Network, attributes: Any = None, batch_stats: bool = False):
        self.net = net
        self.attributes = attributes
        self.batch_stats = batch_stats

    @property
    def num_classes(self) -> int:
        return int(self.net.output_shape[0])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward(self.net, x, update_stats=False, training=self.batch_stats)[0]

    def input_gradient(self, x: np.ndarray, y: np.ndarray, loss: str = "cross-entropy", **kwargs: Any):
        """Return ``(logits, d sum(loss) / d x)``.

        Summed reduction keeps every example's gradient independent of the
        batch size.
        """

        out, tape = forward(self.net, x, update_stats=False, training=self.batch_stats)
        grads = backward(tape, loss, y, wrt_input=True, wrt_params=False, reduction="sum", **kwargs)
        return out, grads.input

    def query_only(self) -> "QueryOnlyVictim":
        return QueryOnlyVictim(self.logits, self.attributes)


class QueryOnlyVictim:
    """Logits-only access with a thread-safe query counter."""

    def __init__(self, logits_fn: Callable[[np.ndarray], np.ndarray], attributes: Any = None):
        self._logits_fn = logits_fn
        self.attributes = attributes
        self.queries = 0
        self._lock = threading.Lock()

    @classmethod
    def from_network(cls, net: Network, attributes: Any = None) -> "QueryOnlyVictim":
        return WhiteBoxVictim(net, attributes).query_only()

    def logits(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            self.queries += len(x)
        return self._logits_fn(x)


def _as_query_only(victim: Any) -> QueryOnlyVictim:
    if isinstance(victim, QueryOnlyVictim):
        return victim
    if isinstance(victim, WhiteBoxVictim):
        return victim.query_only()
    if hasattr(victim, "logits"):
        return QueryOnlyVictim(victim.logits, getattr(victim, "attributes", None))
    raise UnsupportedConfigurationError(f"{type(victim).__name__} exposes no logits")


# =============================================================================
# PROJECTIONS AND LOSSES
# =============================================================================

def _flat_norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(len(v), -1).astype(np.float64) ** 2).sum(axis=1))


def project_lp(v: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Project ``v`` onto the ℓ∞ or ℓ2 ball of radius ``eps`` (idempotent).

    ℓ∞ clamps every entry to ``[-eps, eps]``; ℓ2 scales by
    ``min(1, eps / ||v||)`` over all entries.
    """

    if eps < 0:
        raise ConfigurationError("Projection radius must be >= 0")
    v = np.asarray(v)
    if norm == "linf":
        return np.clip(v, -eps, eps).astype(v.dtype, copy=False)
    if norm == "l2":
        length = float(np.sqrt((v.astype(np.float64) ** 2).sum()))
        # points already on the sphere up to rounding are left alone
        if length <= eps * (1 + 1e-9):
            return v.copy()
        return (v * (eps / length)).astype(v.dtype, copy=False)
    raise ConfigurationError(f"Unknown norm {norm!r}")


def _project_batch(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps).astype(delta.dtype, copy=False)
    lengths = _flat_norm(delta)
    scale = np.where(lengths > eps, eps / np.maximum(lengths, 1e-30), 1.0)
    return (delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))).astype(delta.dtype, copy=False)


def dlr_loss(logits: np.ndarray, y: int) -> float:
    """``-(z_y - max_{i!=y} z_i) / (z_p1 - z_p3 + 1e-12)`` for one logit vector."""

    value, _ = dlr(np.asarray(logits, dtype=np.float64)[None], np.array([y]), reduction="sum")
    return value


def margin_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``z_y - max_{j!=y} z_j`` per row (negative once misclassified)."""

    rows = np.arange(len(logits))
    others = logits.astype(np.float64).copy()
    others[rows, y] = -np.inf
    return logits[rows, y] - others.max(axis=1)


def _ce_per_example(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.array([cross_entropy(logits[i:i + 1], y[i:i + 1], reduction="sum")[0] for i in range(len(y))])


def snap_linear(x: np.ndarray, x_adv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Make ``x_adv == x + delta`` hold exactly in the arrays' float type.

    Iterates ``delta = x_adv - x; x_adv = x + delta`` to a fixed point; entries
    that never settle (or leave ``[0, 1]``) fall back to ``delta = 0``.
    """

    x = np.asarray(x, dtype=np.float32)
    x_adv = np.asarray(x_adv, dtype=np.float32)
    delta = x_adv - x
    for _ in range(4):
        again = x + delta
        if np.array_equal(again, x_adv):
            break
        x_adv = again
        delta = x_adv - x
    bad = (x + delta != x_adv) | (x_adv < 0) | (x_adv > 1)
    if bad.any():
        delta = np.where(bad, np.float32(0), delta)
        x_adv = np.where(bad, x, x_adv)
    return x_adv, delta


def _clip_step(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Delta after clipping ``x + delta`` into the pixel range."""

    return (np.clip(x + delta, 0.0, 1.0) - x).astype(x.dtype, copy=False)


def _sign(v: np.ndarray) -> np.ndarray:
    return np.sign(v).astype(v.dtype, copy=False)


def _records(x, x_adv, y, victim, method, steps=0, queries=None, traces=None) -> List[AttackRecord]:
    x_adv, delta = snap_linear(x, x_adv)
    success = victim.logits(x_adv).argmax(axis=1) != y
    out = []
    for i in range(len(x)):
        out.append(AttackRecord(
            x=x[i], x_adv=x_adv[i], delta=delta[i], label=int(y[i]), success=bool(success[i]),
            method=method, attributes=getattr(victim, "attributes", None),
            queries=int(queries[i]) if queries is not None else 0, steps=steps,
            trace=traces[i] if traces is not None else None,
        ))
    return out


def _as_batch(x: np.ndarray, y: Any) -> Tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    single = np.ndim(y) == 0
    if single:
        x = x[None]
    return x, np.atleast_1d(np.asarray(y, dtype=np.int64)), single


# =============================================================================
# WHITE-BOX ATTACKS
# =============================================================================

def fgsm_batch(victim: WhiteBoxVictim, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """Adversarial images ``clip(x + eps * sign(grad CE))`` for a batch."""

    if eps < 0:
        raise ConfigurationError("FGSM strength must be >= 0")
    _, grad = victim.input_gradient(x, y)
    return np.clip(x + np.float32(eps) * _sign(grad), 0.0, 1.0).astype(np.float32)


def fgsm(victim: WhiteBoxVictim, x: np.ndarray, y: int, eps: float) -> AttackRecord:
    xb, yb, _ = _as_batch(x, y)
    return _records(xb, fgsm_batch(victim, xb, yb, eps), yb, victim, "fgsm", steps=1)[0]


def _random_start(shape: Tuple[int, ...], norm: str, eps: float, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-eps, eps, size=shape).astype(np.float32)
    direction = rng.standard_normal(shape)
    direction /= np.maximum(_flat_norm(direction), 1e-30).reshape((-1,) + (1,) * (len(shape) - 1))
    dim = int(np.prod(shape[1:]))
    radius = eps * rng.uniform(0.0, 1.0, size=shape[0]) ** (1.0 / dim)
    return (direction * radius.reshape((-1,) + (1,) * (len(shape) - 1))).astype(np.float32)


def pgd_batch(
    victim: WhiteBoxVictim,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """K loss-ascent steps, each followed by ball projection and pixel clipping."""

    if spec.method not in PGD_METHODS:
        raise UnsupportedConfigurationError(f"{spec.method} is not a PGD variant")
    if spec.steps < 1:
        raise ConfigurationError("PGD needs K >= 1")
    norm = spec.norm
    eps = spec.eps
    alpha = spec.alpha if spec.alpha is not None else _table_alpha(spec.method, eps, spec.steps)
    loss = "dlr" if "dlr" in spec.method else "cross-entropy"
    if spec.random_init and eps > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        delta = _clip_step(x, _random_start(x.shape, norm, eps, rng))
    else:
        delta = np.zeros_like(x)
    for _ in range(spec.steps):
        _, grad = victim.input_gradient(x + delta, y, loss=loss)
        if norm == "linf":
            step = np.float32(alpha) * _sign(grad)
        else:
            lengths = _flat_norm(grad).reshape((-1,) + (1,) * (grad.ndim - 1))
            step = (alpha * grad / np.maximum(lengths, 1e-30)).astype(np.float32)
        delta = _clip_step(x, _project_batch(delta + step, norm, eps))
    return (x + delta).astype(np.float32)


def _warn_unusual_pair(spec: AttackSpec) -> None:
    """Warn unless ``(eps, alpha, steps)`` is one of the tabulated 10-step settings."""

    pairs = PGD_L2_STEP_PAIRS if spec.norm == "l2" else PGD_LINF_STEP_PAIRS
    expected = _lookup_pair(pairs, spec.eps)
    alpha = spec.alpha if spec.alpha is not None else _table_alpha(spec.method, spec.eps, spec.steps)
    if expected is None or spec.steps != PGD_STEPS or not math.isclose(expected, alpha, rel_tol=1e-6):
        logger.warning("Non-standard PGD setting (eps={:.6g}, alpha={:.6g}, steps={})", spec.eps, alpha, spec.steps)


def pgd(victim: WhiteBoxVictim, x: np.ndarray, y: int, spec: AttackSpec,
        rng: Optional[np.random.Generator] = None) -> AttackRecord:
    _warn_unusual_pair(spec)
    xb, yb, _ = _as_batch(x, y)
    x_adv = pgd_batch(victim, xb, yb, spec, rng)
    return _records(xb, x_adv, yb, victim, spec.method, steps=spec.steps)[0]


def cw_batch(victim: WhiteBoxVictim, x: np.ndarray, y: np.ndarray, c: float, kappa: float = 0.0,
             lr: float = CW_DEFAULTS["lr"], iters: int = CW_DEFAULTS["max_iters"]) -> np.ndarray:
    """Gradient descent on ``||delta||^2 + c * max(z_y - max_{j!=y} z_j, -kappa)``.

    Keeps, per example, the smallest-norm successful iterate; examples that
    never succeed return their last iterate.
    """

    if c <= 0:
        raise ConfigurationError("CW regularisation weight c must be > 0")
    delta = np.zeros_like(x)
    best = x.copy()
    best_norm = np.full(len(x), np.inf)
    for it in range(iters + 1):
        delta = _clip_step(x, delta)
        logits, grad = victim.input_gradient(x + delta, y, loss="cw-margin", kappa=kappa)
        success = logits.argmax(axis=1) != y
        norms = _flat_norm(delta)
        improved = success & (norms < best_norm)
        best[improved] = (x + delta)[improved]
        best_norm[improved] = norms[improved]
        if it == iters:
            break
        delta = (delta - np.float32(lr) * (2 * delta + np.float32(c) * grad)).astype(np.float32)
    never = ~np.isfinite(best_norm)
    best[never] = (x + delta)[never]
    return best


def cw(victim: WhiteBoxVictim, x: np.ndarray, y: int, c: float, kappa: float = 0.0,
       lr: float = CW_DEFAULTS["lr"], iters: int = CW_DEFAULTS["max_iters"]) -> AttackRecord:
    xb, yb, _ = _as_batch(x, y)
    return _records(xb, cw_batch(victim, xb, yb, c, kappa, lr, iters), yb, victim, "cw-l2", steps=iters)[0]


# =============================================================================
# BLACK-BOX ATTACKS
# =============================================================================

def square_side(iteration: int, budget: int, height: int, width: int, p_init: float) -> int:
    """Patch side: ``round(sqrt(p_init * H * W))`` halved at each budget fraction passed."""

    side = int(round(math.sqrt(p_init * height * width)))
    for point in SQUARE_HALVING_POINTS:
        if iteration >= point * budget:
            side //= 2
    return max(1, min(side, height, width))


def square(victim: Any, x: np.ndarray, y: int, spec: AttackSpec,
           rng: Optional[np.random.Generator] = None) -> AttackRecord:
    """Random-search attack driven by the margin loss.

    ℓ∞ starts from vertical stripes at ±eps and proposes square patches set
    to ±eps per channel. ℓ2 uses the same loop with every candidate rescaled
    onto the ℓ2 sphere of radius eps. A proposal is kept iff the margin loss
    strictly decreases; the run stops at misclassification or when the query
    budget is spent.
    """

    if spec.method not in SQUARE_METHODS:
        raise UnsupportedConfigurationError(f"{spec.method} is not a Square variant")
    if spec.max_queries < 1:
        raise ConfigurationError("Square attack needs a query budget >= 1")
    oracle = _as_query_only(victim)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    xb, yb, _ = _as_batch(x, y)
    channels, height, width = xb.shape[1:]
    eps = np.float32(spec.eps)

    def candidate(raw: np.ndarray) -> np.ndarray:
        if spec.norm == "l2":
            raw = _project_to_sphere(raw, spec.eps)
        return _clip_step(xb, raw)

    stripes = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(1, channels, 1, width))
    if spec.norm == "linf":
        raw = np.broadcast_to(eps * stripes, xb.shape).astype(np.float32)
    else:
        raw = np.broadcast_to(stripes, xb.shape).astype(np.float32)
    delta = candidate(raw)
    logits = oracle.logits(xb + delta)
    queries = 1
    best = float(margin_loss(logits, yb)[0])
    trace = [best]
    success = logits.argmax(axis=1)[0] != yb[0]

    while not success and queries < spec.max_queries:
        side = square_side(queries, spec.max_queries, height, width, spec.p_init)
        r = int(rng.integers(0, height - side + 1))
        c = int(rng.integers(0, width - side + 1))
        proposal = raw.copy()
        signs = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=(channels, 1, 1))
        if spec.norm == "linf":
            proposal[0, :, r:r + side, c:c + side] = eps * signs
        else:
            patch_scale = np.float32(spec.eps / side)
            proposal[0, :, r:r + side, c:c + side] = patch_scale * signs
        new_delta = candidate(proposal)
        new_logits = oracle.logits(xb + new_delta)
        queries += 1
        loss = float(margin_loss(new_logits, yb)[0])
        if loss < best:
            best, raw, delta = loss, proposal, new_delta
            success = new_logits.argmax(axis=1)[0] != yb[0]
        trace.append(best)

    rec = _records(xb, xb + delta, yb, oracle, spec.method, queries=[queries],
                   traces=[np.asarray(trace, dtype=np.float64)])[0]
    rec.steps = queries
    return rec


def _project_to_sphere(v: np.ndarray, eps: float) -> np.ndarray:
    lengths = _flat_norm(v).reshape((-1,) + (1,) * (v.ndim - 1))
    return (v * (eps / np.maximum(lengths, 1e-30))).astype(np.float32)


def nes_gradient(loss_fn: LossFn, point: np.ndarray, mu: float, q: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Central-difference estimate ``1/(2 mu q) sum [l(p + mu u) - l(p - mu u)] u``.

    ``loss_fn`` maps a stack of points to their losses. Uses ``2q`` queries.
    """

    if mu <= 0 or q < 1:
        raise ConfigurationError("NES needs mu > 0 and q >= 1")
    u = rng.standard_normal((q,) + point.shape)
    stack = np.concatenate([point[None] + mu * u, point[None] - mu * u]).astype(point.dtype)
    losses = np.asarray(loss_fn(stack), dtype=np.float64)
    diff = losses[:q] - losses[q:]
    grad = np.tensordot(diff, u, axes=(0, 0)) / (2 * mu * q)
    return grad, 2 * q


def zo_sign_gradient(loss_fn: LossFn, point: np.ndarray, mu: float, q: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """Forward-difference estimate ``1/(mu q) sum [l(p + mu u) - l(p)] u`` (q + 1 queries)."""

    if mu <= 0 or q < 1:
        raise ConfigurationError("ZO-signSGD needs mu > 0 and q >= 1")
    u = rng.standard_normal((q,) + point.shape)
    stack = np.concatenate([point[None], point[None] + mu * u]).astype(point.dtype)
    losses = np.asarray(loss_fn(stack), dtype=np.float64)
    grad = np.tensordot(losses[1:] - losses[0], u, axes=(0, 0)) / (mu * q)
    return grad, q + 1


def zoo_attack(victim: Any, x: np.ndarray, y: int, spec: AttackSpec,
               rng: Optional[np.random.Generator] = None) -> AttackRecord:
    """Zeroth-order sign ascent on the cross-entropy read from logits queries.

    NES spends 2q queries per iteration and judges the current iterate on the
    mean logits of its antithetic pairs (exact up to O(mu^2)); ZO-signSGD
    spends q + 1 and reuses its base query. The returned record's success
    flag always comes from a real query of the final image.
    """

    if spec.method not in ZOO_METHODS:
        raise UnsupportedConfigurationError(f"{spec.method} is not a ZOO variant")
    if spec.mu <= 0 or spec.q < 1:
        raise ConfigurationError("ZOO needs mu > 0 and q >= 1")
    oracle = _as_query_only(victim)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    xb, yb, _ = _as_batch(x, y)
    lr = np.float32(spec.lr if spec.lr is not None else ZOO_DEFAULTS["lr"])
    iters = spec.max_iters if spec.max_iters is not None else ZOO_DEFAULTS["max_iters"]
    estimator = nes_gradient if spec.method == "nes" else zo_sign_gradient
    label = yb[0]
    last_logits: Dict[str, np.ndarray] = {}

    def loss_fn(points: np.ndarray) -> np.ndarray:
        logits = oracle.logits(points)
        last_logits["batch"] = logits
        return _ce_per_example(logits, np.full(len(points), label))

    delta = np.zeros_like(xb[0])
    queries = 0
    trace: List[float] = []
    success = False
    for it in range(iters):
        grad, used = estimator(loss_fn, xb[0] + delta, spec.mu, spec.q, rng)
        queries += used
        batch = last_logits["batch"]
        current = batch[0] if spec.method == "zo-signsgd" else batch.mean(axis=0)
        trace.append(float(_ce_per_example(current[None], yb)[0]))
        if current.argmax() != label:
            success = True
            break
        delta = project_lp(delta + lr * _sign(grad.astype(np.float32)), "linf", spec.eps)
        delta = _clip_step(xb[0], delta)
    rec = _records(xb, (xb[0] + delta)[None], yb, oracle, spec.method, queries=[queries],
                   traces=[np.asarray(trace, dtype=np.float64)])[0]
    rec.steps = it + 1 if iters else 0
    logger.trace("{} stopped after {} iterations (success={})", spec.method, rec.steps, success)
    return rec


# =============================================================================
# DISPATCH
# =============================================================================

def run_attack(victim: Any, x: np.ndarray, y: int, spec: AttackSpec,
               rng: Optional[np.random.Generator] = None) -> AttackRecord:
    """Attack a single example with whatever method ``spec`` names."""

    method = spec.method
    if method == "fgsm":
        return fgsm(victim, x, y, spec.eps)
    if method in PGD_METHODS:
        return pgd(victim, x, y, spec, rng)
    if method == "cw-l2":
        return cw(victim, x, y, spec.c, spec.kappa,
                  spec.lr if spec.lr is not None else CW_DEFAULTS["lr"],
                  spec.max_iters if spec.max_iters is not None else CW_DEFAULTS["max_iters"])
    if method in SQUARE_METHODS:
        return square(victim, x, y, spec, rng)
    return zoo_attack(victim, x, y, spec, rng)


def _attack_one(victim: Any, x: np.ndarray, y: int, spec: AttackSpec, index: int, image_id: int):
    try:
        rec = run_attack(victim, x, y, spec, example_rng(spec.seed, index))
    except Exception as exc:  # noqa: BLE001 - aggregated by the caller
        return index, None, f"{type(exc).__name__}: {exc}"
    rec.index = index
    rec.image_id = image_id
    return index, rec, None


def attack_batch(
    victim: Any,
    images: np.ndarray,
    labels: np.ndarray,
    spec: AttackSpec,
    threads: int = 1,
    indices: Optional[Sequence[int]] = None,
    image_ids: Optional[Sequence[int]] = None,
) -> List[AttackRecord]:
    """Independent per-example attacks.

    Each example draws from ``example_rng(spec.seed, index)`` so the output
    is the same for any ``threads``. ``indices`` defaults to ``0..n-1``.

    Raises:
        AttackBatchError: listing every example that failed.
    """

    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return []
    indices = list(range(n)) if indices is None else [int(i) for i in indices]
    image_ids = indices if image_ids is None else [int(i) for i in image_ids]

    if fast_nondeterministic() and spec.method in WHITE_BOX_METHODS and isinstance(victim, WhiteBoxVictim):
        return _attack_batch_vectorised(victim, images, labels, spec, indices, image_ids)

    if threads > 1:
        results = Parallel(n_jobs=threads, backend="threading")(
            delayed(_attack_one)(victim, images[i], int(labels[i]), spec, indices[i], image_ids[i])
            for i in range(n)
        )
    else:
        results = [_attack_one(victim, images[i], int(labels[i]), spec, indices[i], image_ids[i])
                   for i in range(n)]
    errors = {index: err for index, _, err in results if err is not None}
    if errors:
        raise AttackBatchError(errors)
    records = [rec for _, rec, _ in results]
    logger.debug("{}: {} examples, success rate {:.3f}", spec.label, n,
                 float(np.mean([r.success for r in records])))
    return records


def _attack_batch_vectorised(victim, images, labels, spec, indices, image_ids) -> List[AttackRecord]:
    """Whole-batch white-box attack (VMPARSE_FAST_NONDETERMINISTIC)."""

    if spec.method == "fgsm":
        x_adv, steps = fgsm_batch(victim, images, labels, spec.eps), 1
    elif spec.method in PGD_METHODS:
        x_adv, steps = pgd_batch(victim, images, labels, spec, np.random.default_rng(spec.seed)), spec.steps
    else:
        iters = spec.max_iters if spec.max_iters is not None else CW_DEFAULTS["max_iters"]
        lr = spec.lr if spec.lr is not None else CW_DEFAULTS["lr"]
        x_adv, steps = cw_batch(victim, images, labels, spec.c, spec.kappa, lr, iters), iters
    records = _records(images, x_adv, labels, victim, spec.method, steps=steps)
    for rec, index, image_id in zip(records, indices, image_ids):
        rec.index, rec.image_id = index, image_id
    return records


# =============================================================================
# AUDIT
# =============================================================================

def audit_record(record: AttackRecord, spec: AttackSpec) -> List[str]:
    """List every invariant the record violates (empty when clean)."""

    problems: List[str] = []
    if record.x.min() < 0 or record.x.max() > 1:
        problems.append("clean image outside [0, 1]")
    if record.x_adv.min() < 0 or record.x_adv.max() > 1:
        problems.append("adversarial image outside [0, 1]")
    if not np.array_equal(record.x + record.delta, record.x_adv):
        problems.append("x + delta != x_adv")
    if spec.method != "cw-l2":
        if spec.norm == "linf":
            size = float(np.abs(record.delta).max()) if record.delta.size else 0.0
            if size > spec.eps + 1e-6:
                problems.append(f"linf norm {size:.6g} exceeds eps {spec.eps:.6g}")
        else:
            size = float(np.sqrt((record.delta.astype(np.float64) ** 2).sum()))
            if size > spec.eps + 1e-5:
                problems.append(f"l2 norm {size:.6g} exceeds eps {spec.eps:.6g}")
    if record.trace is not None and record.method in SQUARE_METHODS:
        if np.any(np.diff(record.trace) > 0):
            problems.append("square best-loss trace increased")
    return problems
