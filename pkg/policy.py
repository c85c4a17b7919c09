"""
Reasoning-mode selector: one GCN layer, a two-layer MLP trunk, an actor head
over (branch count, temperature, top-p, dependency) and a critic head.

Everything is plain numpy with hand-written gradients. Node representations
depend on the parameters only through the trunk applied to the aggregated
input row (Â·X)[v], so a training batch is a matrix of those rows.
"""

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import NumericalError, ShapeError
from reasoning_graph import ReasoningGraph

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "linear")
TEMPERATURE_BOUNDS = (0.1, 1.5)
TOP_P_BOUNDS = (0.1, 1.0)
MEAN_RANGE = 3.0
MIN_SCALE = 0.05
_LOG_2PI = float(np.log(2.0 * np.pi))

Gradients = Dict[str, np.ndarray]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log_sigmoid(x):
    return -_softplus(-np.asarray(x, dtype=float))


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def squash(raw: float, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo + (hi - lo) * _sigmoid(raw))


def unsquash(value: float, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    s = (value - lo) / (hi - lo)
    with np.errstate(divide="ignore"):
        return float(np.log(s) - np.log1p(-s))


@dataclass
class PolicyParams:
    gcn_weight: np.ndarray
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray
    branch_w: np.ndarray
    branch_b: np.ndarray
    cont_w: np.ndarray
    cont_b: np.ndarray
    dep_w: np.ndarray
    dep_b: np.ndarray
    critic_w: np.ndarray
    critic_b: np.ndarray

    @property
    def d(self) -> int:
        return self.gcn_weight.shape[0]

    @property
    def h(self) -> int:
        return self.gcn_weight.shape[1]

    @property
    def max_branches(self) -> int:
        return self.branch_w.shape[1]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return expected_shapes(self.d, self.h, self.max_branches)

    def validate(self) -> None:
        for name, shape in self.shapes().items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ShapeError(f"{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"{name} contains non-finite entries")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, Any]) -> "PolicyParams":
        missing = [f.name for f in fields(cls) if f.name not in arrays]
        if missing:
            raise ShapeError(f"Missing tensors: {missing}")
        params = cls(**{f.name: np.array(arrays[f.name], dtype=float) for f in fields(cls)})
        params.validate()
        return params

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{name: value.copy() for name, value in self.arrays().items()})

    @classmethod
    def init(cls, d: int, h: int = 64, max_branches: int = 5, seed: int = 0) -> "PolicyParams":
        """Seeded uniform fan-in initialization; actor heads start near uniform."""
        if min(d, h, max_branches) < 1:
            raise ShapeError(f"Dimensions must be positive: d={d} h={h} B={max_branches}")
        rng = np.random.default_rng(seed)

        def trunk(fan_in, *shape):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, shape)

        def head(scale, *shape):
            bound = scale / np.sqrt(h)
            return rng.uniform(-bound, bound, shape)

        return cls(
            gcn_weight=trunk(d, d, h),
            mlp1_w=trunk(h, h, h),
            mlp1_b=np.zeros(h),
            mlp2_w=trunk(h, h, h),
            mlp2_b=np.zeros(h),
            branch_w=head(0.01, h, max_branches),
            branch_b=np.zeros(max_branches),
            cont_w=head(0.01, h, 4),
            cont_b=np.zeros(4),
            dep_w=head(0.01, h),
            dep_b=np.zeros(()),
            critic_w=head(1.0, h),
            critic_b=np.zeros(()),
        )


def expected_shapes(d: int, h: int, max_branches: int) -> Dict[str, Tuple[int, ...]]:
    return {
        "gcn_weight": (d, h),
        "mlp1_w": (h, h),
        "mlp1_b": (h,),
        "mlp2_w": (h, h),
        "mlp2_b": (h,),
        "branch_w": (h, max_branches),
        "branch_b": (max_branches,),
        "cont_w": (h, 4),
        "cont_b": (4,),
        "dep_w": (h,),
        "dep_b": (),
        "critic_w": (h,),
        "critic_b": (),
    }


@dataclass(frozen=True)
class ModeVector:
    """Generation settings for one expansion; ``*_raw`` keep the pre-squash samples."""
    branch_count: int
    temperature: float
    top_p: float
    use_dependency: bool
    temperature_raw: Optional[float] = None
    top_p_raw: Optional[float] = None

    def __post_init__(self):
        if self.branch_count < 1:
            raise ValueError(f"branch_count must be >= 1, got {self.branch_count}")
        lo, hi = TEMPERATURE_BOUNDS
        if not lo <= self.temperature <= hi:
            raise ValueError(f"temperature {self.temperature} outside [{lo}, {hi}]")
        lo, hi = TOP_P_BOUNDS
        if not lo <= self.top_p <= hi:
            raise ValueError(f"top_p {self.top_p} outside [{lo}, {hi}]")

    def raw(self) -> Tuple[float, float]:
        temperature = self.temperature_raw
        if temperature is None:
            temperature = unsquash(self.temperature, TEMPERATURE_BOUNDS)
        top_p = self.top_p_raw
        if top_p is None:
            top_p = unsquash(self.top_p, TOP_P_BOUNDS)
        return temperature, top_p

    def to_dict(self) -> Dict[str, Any]:
        return {
            "branch_count": self.branch_count,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "use_dependency": self.use_dependency,
            "temperature_raw": self.temperature_raw,
            "top_p_raw": self.top_p_raw,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModeVector":
        return cls(
            branch_count=int(data["branch_count"]),
            temperature=float(data["temperature"]),
            top_p=float(data["top_p"]),
            use_dependency=bool(data["use_dependency"]),
            temperature_raw=data.get("temperature_raw"),
            top_p_raw=data.get("top_p_raw"),
        )


@dataclass(frozen=True)
class ActionDistribution:
    branch_logits: np.ndarray
    temp_mean: float
    temp_scale: float
    topp_mean: float
    topp_scale: float
    dep_logit: float

    @property
    def branch_probs(self) -> np.ndarray:
        shifted = self.branch_logits - self.branch_logits.max()
        probs = np.exp(shifted)
        return probs / probs.sum()

    @property
    def dep_prob(self) -> float:
        return float(_sigmoid(self.dep_logit))


# Forward pass

def normalized_adjacency(n: int, edges: Sequence[Tuple[int, int]], aggregate: bool = True) -> np.ndarray:
    """D̃^-1/2 (A + I) D̃^-1/2 with edges made bidirectional; identity when not aggregating."""
    adjacency = np.eye(n)
    if aggregate:
        for u, w in edges:
            if not (0 <= u < n and 0 <= w < n):
                raise ShapeError(f"Edge ({u}, {w}) outside a graph of {n} nodes")
            adjacency[u, w] = adjacency[w, u] = 1.0
    inv_sqrt = 1.0 / np.sqrt(adjacency.sum(axis=1))
    return adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    raise ValueError(f"Unknown activation: {activation!r}")


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    return (z > 0).astype(float) if activation == "relu" else np.ones_like(z)


def _trunk(params: PolicyParams, inputs: np.ndarray, activation: str):
    z0 = inputs @ params.gcn_weight
    a0 = _activate(z0, activation)
    z1 = a0 @ params.mlp1_w + params.mlp1_b
    a1 = _activate(z1, activation)
    z2 = a1 @ params.mlp2_w + params.mlp2_b
    a2 = _activate(z2, activation)
    return a2, (z0, a0, z1, a1, z2)


def aggregate_inputs(features: np.ndarray, edges: Sequence[Tuple[int, int]], aggregate: bool = True) -> np.ndarray:
    """Â·X, the parameter-free part of the GCN layer."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ShapeError(f"Features must be a matrix, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise NumericalError("Features contain non-finite entries")
    return normalized_adjacency(features.shape[0], edges, aggregate) @ features


def gcn_forward(params: PolicyParams, features: np.ndarray, edges: Sequence[Tuple[int, int]],
                activation: str = "relu", aggregate: bool = True) -> np.ndarray:
    """Node representations, one row per feature row."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[1] != params.d:
        raise ShapeError(f"Features have shape {features.shape}, expected (n, {params.d})")
    reps, _ = _trunk(params, aggregate_inputs(features, edges, aggregate), activation)
    return reps


def graph_tensors(g: ReasoningGraph) -> Tuple[List[str], np.ndarray, List[Tuple[int, int]]]:
    """Node order, feature matrix and index edges of a classified graph."""
    order = list(g.nodes)
    index = {node_id: i for i, node_id in enumerate(order)}
    edges = [(index[u], index[w]) for u, w in g.edges]
    return order, g.feature_matrix(order), edges


# Actor and critic

def actor_dist(params: PolicyParams, rep: np.ndarray) -> ActionDistribution:
    rep = np.asarray(rep, dtype=float)
    if rep.shape != (params.h,):
        raise ShapeError(f"Representation has shape {rep.shape}, expected ({params.h},)")
    if not np.all(np.isfinite(rep)):
        raise NumericalError("Representation contains non-finite entries")
    cont = rep @ params.cont_w + params.cont_b
    return ActionDistribution(
        branch_logits=rep @ params.branch_w + params.branch_b,
        temp_mean=float(MEAN_RANGE * np.tanh(cont[0])),
        temp_scale=float(MIN_SCALE + (1.0 - MIN_SCALE) * _sigmoid(cont[1])),
        topp_mean=float(MEAN_RANGE * np.tanh(cont[2])),
        topp_scale=float(MIN_SCALE + (1.0 - MIN_SCALE) * _sigmoid(cont[3])),
        dep_logit=float(rep @ params.dep_w + params.dep_b),
    )


def squashed_log_density(raw: float, mean: float, scale: float, bounds: Tuple[float, float]) -> float:
    """Log-density of lo + (hi - lo)·sigmoid(u), u ~ N(mean, scale), at the value produced by ``raw``."""
    lo, hi = bounds
    z = (raw - mean) / scale
    base = -0.5 * z * z - np.log(scale) - 0.5 * _LOG_2PI
    jacobian = np.log(hi - lo) + _log_sigmoid(raw) + _log_sigmoid(-raw)
    return float(base - jacobian)


def log_prob(dist: ActionDistribution, mode: ModeVector) -> float:
    if not 1 <= mode.branch_count <= len(dist.branch_logits):
        raise ValueError(f"branch_count {mode.branch_count} outside 1..{len(dist.branch_logits)}")
    logits = dist.branch_logits
    log_softmax = logits - np.logaddexp.reduce(logits)
    temperature_raw, top_p_raw = mode.raw()
    dep = _log_sigmoid(dist.dep_logit) if mode.use_dependency else _log_sigmoid(-dist.dep_logit)
    return float(
        log_softmax[mode.branch_count - 1]
        + squashed_log_density(temperature_raw, dist.temp_mean, dist.temp_scale, TEMPERATURE_BOUNDS)
        + squashed_log_density(top_p_raw, dist.topp_mean, dist.topp_scale, TOP_P_BOUNDS)
        + dep
    )


def entropy(dist: ActionDistribution) -> float:
    """Categorical + base-normal + Bernoulli entropy."""
    probs = dist.branch_probs
    log_softmax = dist.branch_logits - np.logaddexp.reduce(dist.branch_logits)
    categorical = -float(np.sum(probs * log_softmax))
    normal = 0.5 * (_LOG_2PI + 1.0)
    continuous = 2 * normal + np.log(dist.temp_scale) + np.log(dist.topp_scale)
    l = dist.dep_logit
    bernoulli = float(_softplus(l) - l * _sigmoid(l))
    return float(categorical + continuous + bernoulli)


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> Tuple[ModeVector, float]:
    probs = dist.branch_probs
    branch = int(rng.choice(len(probs), p=probs)) + 1
    temperature_raw = float(rng.normal(dist.temp_mean, dist.temp_scale))
    top_p_raw = float(rng.normal(dist.topp_mean, dist.topp_scale))
    use_dependency = bool(rng.random() < dist.dep_prob)
    mode = ModeVector(
        branch_count=branch,
        temperature=squash(temperature_raw, TEMPERATURE_BOUNDS),
        top_p=squash(top_p_raw, TOP_P_BOUNDS),
        use_dependency=use_dependency,
        temperature_raw=temperature_raw,
        top_p_raw=top_p_raw,
    )
    return mode, log_prob(dist, mode)


def critic_value(params: PolicyParams, rep: np.ndarray) -> float:
    rep = np.asarray(rep, dtype=float)
    return float(rep @ params.critic_w + params.critic_b)


# Batched loss and analytic gradients

@dataclass
class PolicyBatch:
    """One row per decision: aggregated input (Â·X)[v] plus the stored action."""
    inputs: np.ndarray
    branch: np.ndarray  # 0-based branch index
    temperature_raw: np.ndarray
    top_p_raw: np.ndarray
    dependency: np.ndarray
    log_prob_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index: np.ndarray) -> "PolicyBatch":
        return PolicyBatch(**{f.name: getattr(self, f.name)[index] for f in fields(self)})


@dataclass(frozen=True)
class LossSpec:
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    activation: str = "relu"


@dataclass
class LossComponents:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    ratio_mean: float
    clip_fraction: float
    ratios: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _forward_batch(params: PolicyParams, batch: PolicyBatch, spec: LossSpec):
    n = len(batch)
    if n == 0:
        raise ShapeError("Empty batch")
    if batch.inputs.shape[1] != params.d:
        raise ShapeError(f"Batch inputs have width {batch.inputs.shape[1]}, expected {params.d}")
    rep, trunk_cache = _trunk(params, batch.inputs, spec.activation)
    rows = np.arange(n)

    logits = rep @ params.branch_w + params.branch_b
    log_softmax = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    probs = np.exp(log_softmax)
    cat_h = -np.sum(probs * log_softmax, axis=1)
    logp = log_softmax[rows, batch.branch].copy()
    ent = cat_h.copy()

    cont = rep @ params.cont_w + params.cont_b
    cont_cache = []
    for col, raw, bounds in ((0, batch.temperature_raw, TEMPERATURE_BOUNDS), (2, batch.top_p_raw, TOP_P_BOUNDS)):
        lo, hi = bounds
        t = np.tanh(cont[:, col])
        s = _sigmoid(cont[:, col + 1])
        mean = MEAN_RANGE * t
        scale = MIN_SCALE + (1.0 - MIN_SCALE) * s
        diff = raw - mean
        logp += (-0.5 * (diff / scale) ** 2 - np.log(scale) - 0.5 * _LOG_2PI
                 - np.log(hi - lo) - _log_sigmoid(raw) - _log_sigmoid(-raw))
        ent += 0.5 * (_LOG_2PI + 1.0) + np.log(scale)
        cont_cache.append((t, s, scale, diff))

    dep_logit = rep @ params.dep_w + params.dep_b
    q = _sigmoid(dep_logit)
    logp += batch.dependency * _log_sigmoid(dep_logit) + (1.0 - batch.dependency) * _log_sigmoid(-dep_logit)
    ent += _softplus(dep_logit) - dep_logit * q

    values = rep @ params.critic_w + params.critic_b
    ratio = np.exp(logp - batch.log_prob_old)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - spec.clip_eps, 1.0 + spec.clip_eps)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    value_err = values - batch.returns

    per_sample = -surrogate + spec.value_coef * value_err ** 2 - spec.entropy_coef * ent
    loss = float(per_sample.mean())
    if not np.isfinite(loss):
        raise NumericalError(
            f"Non-finite loss: max|logp|={np.max(np.abs(logp)):.3g} max ratio={np.max(ratio):.3g} "
            f"max|V-R|={np.max(np.abs(value_err)):.3g}"
        )
    components = LossComponents(
        loss=loss,
        policy_loss=float(-surrogate.mean()),
        value_loss=float((value_err ** 2).mean()),
        entropy=float(ent.mean()),
        ratio_mean=float(ratio.mean()),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > spec.clip_eps)),
        ratios=ratio,
    )
    cache = dict(rep=rep, trunk=trunk_cache, probs=probs, log_softmax=log_softmax, cat_h=cat_h,
                 cont=cont_cache, dep_logit=dep_logit, q=q, value_err=value_err, ratio=ratio)
    return components, cache


def batch_loss(params: PolicyParams, batch: PolicyBatch, spec: LossSpec) -> LossComponents:
    components, _ = _forward_batch(params, batch, spec)
    return components


def backward(params: PolicyParams, batch: PolicyBatch, spec: LossSpec) -> Tuple[Gradients, LossComponents]:
    """Exact gradients of mean(-clipped surrogate + c_v (V-R)^2 - c_e H)."""
    components, cache = _forward_batch(params, batch, spec)
    n = len(batch)
    rows = np.arange(n)
    rep = cache["rep"]
    ratio = cache["ratio"]
    adv = batch.advantages

    # Surrogate gradient flows only where the unclipped term is the minimum.
    unclipped = np.where(adv >= 0, ratio <= 1.0 + spec.clip_eps, ratio >= 1.0 - spec.clip_eps)
    g_logp = -(unclipped * ratio * adv) / n
    g_ent = np.full(n, -spec.entropy_coef / n)

    probs, log_softmax = cache["probs"], cache["log_softmax"]
    onehot = np.zeros_like(probs)
    onehot[rows, batch.branch] = 1.0
    d_logits = (g_logp[:, None] * (onehot - probs)
                - g_ent[:, None] * probs * (log_softmax + cache["cat_h"][:, None]))

    d_cont = np.zeros((n, 4))
    for k, (raw, (t, s, scale, diff)) in enumerate(zip((batch.temperature_raw, batch.top_p_raw), cache["cont"])):
        d_mean = g_logp * diff / scale ** 2
        d_scale = g_logp * (diff ** 2 / scale ** 3 - 1.0 / scale) + g_ent / scale
        d_cont[:, 2 * k] = d_mean * MEAN_RANGE * (1.0 - t ** 2)
        d_cont[:, 2 * k + 1] = d_scale * (1.0 - MIN_SCALE) * s * (1.0 - s)

    q, dep_logit = cache["q"], cache["dep_logit"]
    d_dep = g_logp * (batch.dependency - q) - g_ent * dep_logit * q * (1.0 - q)
    d_value = 2.0 * spec.value_coef * cache["value_err"] / n

    grads: Gradients = {
        "branch_w": rep.T @ d_logits,
        "branch_b": d_logits.sum(axis=0),
        "cont_w": rep.T @ d_cont,
        "cont_b": d_cont.sum(axis=0),
        "dep_w": rep.T @ d_dep,
        "dep_b": np.array(d_dep.sum()),
        "critic_w": rep.T @ d_value,
        "critic_b": np.array(d_value.sum()),
    }
    d_rep = (d_logits @ params.branch_w.T + d_cont @ params.cont_w.T
             + np.outer(d_dep, params.dep_w) + np.outer(d_value, params.critic_w))

    z0, a0, z1, a1, z2 = cache["trunk"]
    d_z2 = d_rep * _activation_grad(z2, spec.activation)
    grads["mlp2_w"] = a1.T @ d_z2
    grads["mlp2_b"] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ params.mlp2_w.T) * _activation_grad(z1, spec.activation)
    grads["mlp1_w"] = a0.T @ d_z1
    grads["mlp1_b"] = d_z1.sum(axis=0)
    d_z0 = (d_z1 @ params.mlp1_w.T) * _activation_grad(z0, spec.activation)
    grads["gcn_weight"] = batch.inputs.T @ d_z0

    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"Non-finite gradient for {name}")
    return grads, components


def global_norm(grads: Gradients) -> float:
    return float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values())))


def apply_gradients(params: PolicyParams, grads: Gradients, lr: float) -> PolicyParams:
    updated = params.copy()
    for name, grad in grads.items():
        setattr(updated, name, np.asarray(getattr(updated, name) - lr * grad, dtype=float))
    return updated


# Checkpoints

def save_checkpoint(params: PolicyParams, path, seed: int = 0, round_index: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "version": CHECKPOINT_VERSION,
        "d": params.d,
        "h": params.h,
        "B_max": params.max_branches,
        "seed": seed,
        "round": round_index,
        "tensors": {name: value.tolist() for name, value in params.arrays().items()},
    }
    path.write_text(json.dumps(document), encoding="utf-8")
    logger.info(f"Saved checkpoint round {round_index} to {path}")
    return path


def load_checkpoint(path) -> Tuple[PolicyParams, Dict[str, Any]]:
    """Load and shape-check a checkpoint; returns (params, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    document = json.loads(path.read_text(encoding="utf-8"))
    if document.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version: {document.get('version')}")
    params = PolicyParams.from_arrays(document["tensors"])
    declared = (document["d"], document["h"], document["B_max"])
    if declared != (params.d, params.h, params.max_branches):
        raise ShapeError(f"Checkpoint header {declared} disagrees with tensors")
    meta = {key: document.get(key) for key in ("d", "h", "B_max", "seed", "round")}
    return params, meta


# Selectors used by the engine

@dataclass(frozen=True)
class Decision:
    mode: ModeVector
    log_prob: float
    value: float


class ModeSelector(ABC):
    name = ""
    records_transitions = True
    aggregate = True

    def prepare(self, g: ReasoningGraph) -> None:
        """Run the forward pass once for the current graph."""

    @abstractmethod
    def select(self, node_id: str, rng: np.random.Generator) -> Decision:
        pass


class GraphSelector(ModeSelector):
    """Learned selector; ``aggregate=False`` gives the per-node MLP variant."""

    def __init__(self, params: PolicyParams, aggregate: bool = True, activation: str = "relu"):
        self.params = params
        self.aggregate = aggregate
        self.activation = activation
        self.name = "gcn" if aggregate else "mlp"
        self._reps: Optional[np.ndarray] = None
        self._index: Dict[str, int] = {}

    def prepare(self, g):
        order, features, edges = graph_tensors(g)
        self._reps = gcn_forward(self.params, features, edges, self.activation, self.aggregate)
        self._index = {node_id: i for i, node_id in enumerate(order)}

    def select(self, node_id, rng):
        if self._reps is None or node_id not in self._index:
            raise ShapeError(f"No representation for {node_id}; call prepare first")
        rep = self._reps[self._index[node_id]]
        mode, lp = sample_action(actor_dist(self.params, rep), rng)
        return Decision(mode, lp, critic_value(self.params, rep))


class FixedSelector(ModeSelector):
    name = "fixed"
    records_transitions = False

    def __init__(self, mode: ModeVector):
        self.mode = mode

    def select(self, node_id, rng):
        return Decision(self.mode, 0.0, 0.0)


def make_selector(kind: str, params: Optional[PolicyParams] = None,
                  fixed_mode: Optional[Dict[str, Any]] = None) -> ModeSelector:
    if kind in ("gcn", "mlp"):
        if params is None:
            raise ValueError(f"Selector {kind!r} needs policy parameters")
        return GraphSelector(params, aggregate=(kind == "gcn"))
    if kind == "fixed":
        data = dict(fixed_mode or {})
        return FixedSelector(ModeVector(
            branch_count=int(data.get("branch_count", 3)),
            temperature=float(data.get("temperature", 0.7)),
            top_p=float(data.get("top_p", 1.0)),
            use_dependency=bool(data.get("use_dependency", False)),
        ))
    raise ValueError(f"Unknown selector: {kind!r}")
