"""
Dense numerics for the model: MLP layers with hand-written reverse-mode
gradients, the three training losses, Adam with learning-rate decay and
Polyak averaging, and checkpoint files.

Parameters live in a flat ``ParamStore`` (name -> ndarray). Gradients are
dictionaries with the same keys, so "compute grads" and "apply grads" are
separate steps owned by the caller.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from logger import run_logger
from schemas import OptimizerConfig

ParamStore = Dict[str, np.ndarray]
Grads = Dict[str, np.ndarray]

CHECKPOINT_VERSION = 1

# Global debug flag (finite checks at op boundaries)
_DEBUG_MODE = Config.DEBUG_NUMERICS


def set_debug_mode(enabled: bool):
    """Enable or disable NaN/Inf checks"""
    global _DEBUG_MODE
    _DEBUG_MODE = enabled


class NumericsError(ArithmeticError):
    """Shape mismatch, non-finite values or misuse of a tape"""


def dtype_of(precision: str) -> np.dtype:
    if precision not in ("float32", "float64"):
        raise NumericsError(f"Unknown precision {precision!r}")
    return np.dtype(precision)


def check_finite(name: str, array: np.ndarray):
    if _DEBUG_MODE and not np.all(np.isfinite(array)):
        raise NumericsError(f"Non-finite values in {name}")


def accumulate(grads: Grads, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


@dataclass(frozen=True)
class DenseLayer:
    weight: str
    bias: str
    activation: str  # "relu" | "identity"


@dataclass(frozen=True)
class MlpParams:
    """Named dense layers resolved against a parameter store"""

    store: ParamStore
    layers: Tuple[DenseLayer, ...]

    @classmethod
    def create(
        cls,
        store: ParamStore,
        prefix: str,
        sizes: Sequence[int],
        rng: np.random.Generator,
        dtype=np.float32,
        final_activation: str = "identity",
        final_scale: float = 1.0
    ) -> "MlpParams":
        """
        Allocate layers ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``.

        Hidden layers use ReLU. Weights are fan-in scaled uniform, biases zero;
        the last weight matrix is multiplied by ``final_scale``.
        """
        if len(sizes) < 2:
            raise NumericsError("An MLP needs at least one layer")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layer = DenseLayer(
                weight=f"{prefix}/w{i}",
                bias=f"{prefix}/b{i}",
                activation=final_activation if i == len(sizes) - 2 else "relu"
            )
            if layer.weight in store:
                raise NumericsError(f"Parameter {layer.weight} already exists")
            limit = np.sqrt(6.0 / fan_in)
            weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if i == len(sizes) - 2:
                weight = weight * final_scale
            store[layer.weight] = weight.astype(dtype)
            store[layer.bias] = np.zeros(fan_out, dtype=dtype)
            layers.append(layer)
        return cls(store, tuple(layers))

    def bind(self, store: ParamStore) -> "MlpParams":
        """Same layers over another store (e.g. Polyak shadows)"""
        return MlpParams(store, self.layers)

    @property
    def input_size(self) -> int:
        return self.store[self.layers[0].weight].shape[0]

    @property
    def output_size(self) -> int:
        return self.store[self.layers[-1].weight].shape[1]


@dataclass
class MlpTape:
    params: MlpParams
    inputs: List[np.ndarray] = field(default_factory=list)
    masks: List[Optional[np.ndarray]] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    consumed: bool = False


def dropout_mask(shape, keep: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted dropout: survivors are scaled by 1/keep"""
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


def mlp_forward(
    params: MlpParams,
    x: np.ndarray,
    dropout_keep: float = 1.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, MlpTape]:
    """
    Apply every layer to the rows of ``x``.

    Dropout is applied before each dense layer, only when training.

    Raises:
        NumericsError: on a shape mismatch, or training dropout without rng.
    """
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise NumericsError(f"MLP expects (n, {params.input_size}) input, got {x.shape}")
    use_dropout = training and dropout_keep < 1.0
    if use_dropout and rng is None:
        raise NumericsError("Dropout in training mode needs an rng")
    check_finite("mlp input", x)

    tape = MlpTape(params)
    h = x
    for layer in params.layers:
        mask = dropout_mask(h.shape, dropout_keep, rng, h.dtype) if use_dropout else None
        if mask is not None:
            h = h * mask
        tape.inputs.append(h)
        tape.masks.append(mask)
        z = h @ params.store[layer.weight] + params.store[layer.bias]
        tape.pre_activations.append(z)
        h = np.maximum(z, 0) if layer.activation == "relu" else z
    check_finite("mlp output", h)
    return h, tape


def backward(tape: MlpTape, grad_out: np.ndarray, grads: Optional[Grads] = None) -> Tuple[Grads, np.ndarray]:
    """
    Reverse pass of one mlp_forward call.

    Parameter gradients are accumulated into ``grads``; returns
    ``(grads, grad_input)``.

    Raises:
        NumericsError: if the tape was already consumed.
    """
    if tape.consumed:
        raise NumericsError("Tape already consumed")
    tape.consumed = True
    grads = {} if grads is None else grads
    store = tape.params.store

    g = grad_out
    for layer, h, mask, z in reversed(list(zip(
            tape.params.layers, tape.inputs, tape.masks, tape.pre_activations))):
        if layer.activation == "relu":
            g = g * (z > 0)
        accumulate(grads, layer.weight, h.T @ g)
        accumulate(grads, layer.bias, g.sum(axis=0))
        g = g @ store[layer.weight].T
        if mask is not None:
            g = g * mask
    check_finite("input gradient", g)
    return grads, g


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over rows; returns (loss, d loss / d logits)."""
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise NumericsError(f"Expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise NumericsError(f"Label out of range 0..{n_classes - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_xent(logits, labels) -> Tuple[float, np.ndarray]:
    """
    Mean sigmoid cross-entropy; a scalar logit is the one-element case.

    Stable for large |logit|: max(l, 0) - l*y + log(1 + e^-|l|).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise NumericsError(f"Logit shape {logits.shape} != label shape {labels.shape}")
    n = max(logits.size, 1)
    losses = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    grad = (_sigmoid(logits) - labels) / n
    return float(losses.sum() / n), grad


def aucroc_loss(
    logits,
    labels,
    goal_ids,
    same_goal_weight: float = 2.0,
    reduction: str = "sum"
) -> Tuple[float, np.ndarray]:
    """
    Pairwise ranking loss over every (positive, negative) pair:
    w * ln(1 + e^-(l_pos - l_neg)), with w = same_goal_weight when both
    logits belong to the same goal, else 1.

    Raises:
        NumericsError: if there is no positive or no negative example.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(bool)
    goal_ids = np.asarray(goal_ids)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    if not len(pos) or not len(neg):
        raise NumericsError("aucroc_loss needs at least one positive and one negative")

    diff = logits[pos][:, None] - logits[neg][None, :]
    weight = np.where(goal_ids[pos][:, None] == goal_ids[neg][None, :], same_goal_weight, 1.0)
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    loss = (weight * np.logaddexp(0.0, -diff)).sum() * scale

    # d/d diff of ln(1 + e^-diff) is -sigmoid(-diff)
    g_diff = -weight * _sigmoid(-diff) * scale
    grad = np.zeros_like(logits)
    grad[pos] = g_diff.sum(axis=1)
    grad[neg] = -g_diff.sum(axis=0)
    return float(loss), grad


@dataclass
class OptimizerState:
    """Adam moments, step counter and Polyak shadows"""

    config: OptimizerConfig
    m: ParamStore
    v: ParamStore
    shadow: ParamStore
    step: int = 0

    @classmethod
    def create(cls, params: ParamStore, config: Optional[OptimizerConfig] = None) -> "OptimizerState":
        return cls(
            config=config or OptimizerConfig(),
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            shadow={k: p.copy() for k, p in params.items()}
        )

    def learning_rate(self, step: Optional[int] = None) -> float:
        """Rate used for update number ``step`` (1-based)"""
        t = self.step + 1 if step is None else step
        c = self.config
        return c.learning_rate * c.decay_rate ** ((t - 1) / c.decay_steps)


def adam_step(state: OptimizerState, params: ParamStore, grads: Grads) -> bool:
    """
    One Adam update in place, then the Polyak shadow update.

    Parameters without a gradient entry get a zero gradient. A non-finite
    gradient rejects the whole step: nothing changes, the counter does not
    advance, and the event is logged. Returns whether the step was applied.

    Raises:
        NumericsError: on unknown gradient names or shape mismatch.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise NumericsError(f"Gradients for unknown parameters: {sorted(unknown)[:3]}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise NumericsError(f"Gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        run_logger.log_event(
            action="Rejected optimizer step",
            component="numerics",
            details={"step": state.step + 1, "parameters": bad[:5]},
            success=False,
            error_message="non-finite gradient"
        )
        return False

    c = state.config
    t = state.step + 1
    lr = state.learning_rate(t)
    bc1 = 1.0 - c.beta1 ** t
    bc2 = 1.0 - c.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is not None:
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
        else:
            m *= c.beta1
            v *= c.beta2
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)).astype(p.dtype)

        shadow = state.shadow[name]
        shadow *= c.polyak_rate
        shadow += (1.0 - c.polyak_rate) * p
    state.step = t
    return True


def checkpoint_id(params: ParamStore) -> str:
    """SHA-256 over parameter names, shapes, dtypes and bytes"""
    digest = hashlib.sha256()
    for name in sorted(params):
        p = np.ascontiguousarray(params[name])
        digest.update(f"{name}:{p.dtype.str}:{p.shape}".encode("utf-8"))
        digest.update(p.tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    params: ParamStore
    meta: Dict
    m: ParamStore = field(default_factory=dict)
    v: ParamStore = field(default_factory=dict)
    shadow: ParamStore = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def optimizer_state(self, config: Optional[OptimizerConfig] = None, dtype=None) -> OptimizerState:
        """
        Adam state to continue training from, cast to ``dtype`` when given.
        A checkpoint saved without optimizer sections starts fresh moments.
        """
        def cast(store: ParamStore) -> ParamStore:
            return {k: v.astype(v.dtype if dtype is None else dtype) for k, v in store.items()}

        if not self.m:
            return OptimizerState.create(cast(self.params), config)
        return OptimizerState(
            config=config or OptimizerConfig(),
            m=cast(self.m), v=cast(self.v), shadow=cast(self.shadow), step=self.step
        )


_SECTIONS = ("param", "adam_m", "adam_v", "shadow")


def save_checkpoint(path, params: ParamStore, state: Optional[OptimizerState] = None,
                    meta: Optional[Dict] = None) -> str:
    """
    Write an ``.npz`` checkpoint atomically; returns its checkpoint id.
    """
    path = Path(path)
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_VERSION
    meta["step"] = state.step if state else meta.get("step", 0)
    meta["checkpoint_id"] = checkpoint_id(params)

    arrays = {f"param/{k}": v for k, v in params.items()}
    if state is not None:
        arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
        arrays.update({f"shadow/{k}": v for k, v in state.shadow.items()})
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    return meta["checkpoint_id"]


def load_checkpoint(path) -> Checkpoint:
    """
    Raises:
        NumericsError: on a missing file, unknown format version or
            mismatched sections.
    """
    path = Path(path)
    if not path.exists():
        raise NumericsError(f"Checkpoint not found: {path}")
    sections: Dict[str, ParamStore] = {s: {} for s in _SECTIONS}
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        for key in data.files:
            if key == "meta":
                continue
            section, _, name = key.partition("/")
            if section not in sections:
                raise NumericsError(f"Unknown checkpoint section {section!r}")
            sections[section][name] = data[key]
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise NumericsError(f"Unsupported checkpoint version {meta.get('format_version')}")
    params = sections["param"]
    for section in _SECTIONS[1:]:
        if sections[section] and set(sections[section]) != set(params):
            raise NumericsError(f"Checkpoint section {section} does not match parameters")
    return Checkpoint(params, meta, sections["adam_m"], sections["adam_v"], sections["shadow"])
