"""Tape-based reverse-mode differentiation over numpy arrays.

A ``Tape`` records every ``Var`` produced during a forward pass in creation
order, which is already a topological order, so ``backward`` walks the list
once in reverse. Parameters live in a ``ParamStore`` and enter a tape as
leaves through ``tape.param(store, name)``; inputs enter through ``tape.input`` and
expose their gradient on ``Var.grad`` after ``backward`` (MAP inference
differentiates with respect to inputs).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ArrayLike = Union[np.ndarray, float, int]


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 tensors with gradient slots and persistent Adam moments."""

    def __init__(self) -> None:
        self._values: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0

    def add(self, name: str, value: ArrayLike) -> None:
        if name in self._values:
            raise ShapeError(f"parameter '{name}' already exists")
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self._values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise ShapeError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._values.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def set(self, name: str, value: ArrayLike) -> None:
        old = self[name]
        arr = np.array(value, dtype=np.float64)
        if arr.shape != old.shape:
            raise ShapeError(f"parameter '{name}': shape {arr.shape} != {old.shape}")
        arr.setflags(write=False)
        self._values[name] = arr
        self.version += 1

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate_grad(self, name: str, grad: np.ndarray) -> None:
        slot = self.grads[name]
        if grad.shape != slot.shape:
            raise ShapeError(f"gradient for '{name}': shape {grad.shape} != {slot.shape}")
        slot += grad

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def load_snapshot(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.set(name, value)

    def flatten(self) -> np.ndarray:
        if not self._values:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._values.values()])

    def manifest(self) -> List[Dict[str, object]]:
        return [{"name": k, "shape": list(v.shape)} for k, v in self._values.items()]

    @classmethod
    def from_flat(cls, flat: np.ndarray, manifest: Sequence[Dict[str, object]]) -> "ParamStore":
        store = cls()
        offset = 0
        flat = np.asarray(flat, dtype=np.float64)
        for entry in manifest:
            shape = tuple(int(s) for s in entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            if offset + n > flat.size:
                raise ShapeError(f"parameter file too short for '{entry['name']}'")
            store.add(str(entry["name"]), flat[offset:offset + n].reshape(shape))
            offset += n
        if offset != flat.size:
            raise ShapeError(f"parameter file has {flat.size - offset} trailing values")
        return store


# ---------------------------------------------------------------------------
# Tape and differentiable values
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_tape")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), requires_grad: bool = False, name: Optional[str] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, name={self.name!r})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other._tape is not self._tape:
                raise TapeError("cannot combine values recorded on different tapes")
            return other
        return self._tape.constant(other)

    def _make(self, value: np.ndarray, parents: Iterable[Tuple["Var", Callable[[np.ndarray], np.ndarray]]]) -> "Var":
        return self._tape._record(value, parents)

    # arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Var":
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value + b.value, [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ])

    __radd__ = __add__

    def __sub__(self, other) -> "Var":
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value - b.value, [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ])

    def __rsub__(self, other) -> "Var":
        return self._lift(other) - self

    def __mul__(self, other) -> "Var":
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value * b.value, [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        other = self._lift(other)
        a, b = self, other
        return self._make(a.value / b.value, [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
        ])

    def __rtruediv__(self, other) -> "Var":
        return self._lift(other) / self

    def __neg__(self) -> "Var":
        return self._make(-self.value, [(self, lambda g: -g)])

    def __matmul__(self, other) -> "Var":
        other = self._lift(other)
        a, b = self, other
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return self._make(a.value @ b.value, [
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ])

    def __getitem__(self, index) -> "Var":
        a = self
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

        def vjp(g: np.ndarray) -> np.ndarray:
            out = np.zeros_like(a.value)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return out

        return self._make(a.value[index], [(a, vjp)])

    # pointwise ----------------------------------------------------------

    def exp(self) -> "Var":
        out = np.exp(self.value)
        return self._make(out, [(self, lambda g: g * out)])

    def log(self) -> "Var":
        x = self.value
        return self._make(np.log(x), [(self, lambda g: g / x)])

    def tanh(self) -> "Var":
        out = np.tanh(self.value)
        return self._make(out, [(self, lambda g: g * (1.0 - out * out))])

    def relu(self) -> "Var":
        mask = self.value > 0
        return self._make(np.where(mask, self.value, 0.0), [(self, lambda g: g * mask)])

    def square(self) -> "Var":
        x = self.value
        return self._make(x * x, [(self, lambda g: 2.0 * g * x)])

    def clip(self, lo: float, hi: float) -> "Var":
        inside = (self.value >= lo) & (self.value <= hi)
        return self._make(np.clip(self.value, lo, hi), [(self, lambda g: g * inside)])

    # reductions ---------------------------------------------------------

    def sum(self, axis: Optional[int] = None) -> "Var":
        a = self

        def vjp(g: np.ndarray) -> np.ndarray:
            if axis is None:
                return np.broadcast_to(g, a.shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

        return self._make(np.asarray(a.value.sum(axis=axis)), [(a, vjp)])

    def mean(self, axis: Optional[int] = None) -> "Var":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) / float(n)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    tape = parts[0]._tape
    parts = [parts[0]._lift(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def piece(i: int):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    value = np.concatenate([p.value for p in parts], axis=axis)
    return tape._record(value, [(p, piece(i)) for i, p in enumerate(parts)])


def gaussian_logpdf(x, mean, log_std) -> Var:
    """Row-wise diagonal Gaussian log-density, summed over the last axis.

    sum_i [ -0.5 log(2 pi) - log_std_i - 0.5 ((x_i - mean_i) / std_i)^2 ]
    """
    anchor = next((v for v in (x, mean, log_std) if isinstance(v, Var)), None)
    if anchor is None:
        raise TapeError("gaussian_logpdf needs at least one recorded value")
    x, mean, log_std = (anchor._lift(v) for v in (x, mean, log_std))
    inv_std = np.exp(-log_std.value)
    z = (x.value - mean.value) * inv_std
    if z.ndim == 0:
        raise ShapeError("gaussian_logpdf expects at least one event dimension")
    logp = np.sum(-HALF_LOG_2PI - log_std.value - 0.5 * z * z, axis=-1)

    def grad_of(shape, local):
        return lambda g: _unbroadcast(np.expand_dims(g, -1) * local, shape)

    return anchor._tape._record(logp, [
        (x, grad_of(x.shape, -z * inv_std)),
        (mean, grad_of(mean.shape, z * inv_std)),
        (log_std, grad_of(log_std.shape, z * z - 1.0)),
    ])


def gaussian_kl(mean_q, log_std_q, mean_p=0.0, log_std_p=0.0) -> Var:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis."""
    anchor = next((v for v in (mean_q, log_std_q, mean_p, log_std_p) if isinstance(v, Var)), None)
    if anchor is None:
        raise TapeError("gaussian_kl needs at least one recorded value")
    mq, lq, mp, lp = (anchor._lift(v) for v in (mean_q, log_std_q, mean_p, log_std_p))
    var_q = np.exp(2.0 * lq.value)
    inv_var_p = np.exp(-2.0 * lp.value)
    d = mq.value - mp.value
    ratio = (var_q + d * d) * inv_var_p
    kl = lp.value - lq.value + 0.5 * ratio - 0.5
    shape = np.broadcast(mq.value, lq.value, mp.value, lp.value).shape
    kl = np.sum(np.broadcast_to(kl, shape), axis=-1)

    def grad_of(v: Var, local):
        return lambda g: _unbroadcast(np.broadcast_to(np.expand_dims(g, -1) * local, shape), v.shape)

    return anchor._tape._record(kl, [
        (mq, grad_of(mq, d * inv_var_p)),
        (mp, grad_of(mp, -d * inv_var_p)),
        (lq, grad_of(lq, var_q * inv_var_p - 1.0)),
        (lp, grad_of(lp, 1.0 - ratio)),
    ])


class Tape:
    """Records one forward pass; single use.

    A tape may read parameters from several stores; each store's version is
    pinned at first use. With ``frozen=True`` parameters enter as constants:
    no parameter gradients are produced and no store is written.
    """

    def __init__(self, frozen: bool = False) -> None:
        self.frozen = frozen
        self.nodes: List[Var] = []
        self._stores: Dict[int, Tuple[ParamStore, int]] = {}
        self._param_vars: Dict[Tuple[int, str], Var] = {}
        self._consumed = False

    def _record(self, value, parents) -> Var:
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        var = Var(self, np.asarray(value, dtype=np.float64), live, requires_grad=bool(live))
        if live:
            self.nodes.append(var)
        return var

    def constant(self, value: ArrayLike) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def input(self, value: ArrayLike, name: Optional[str] = None, requires_grad: bool = True) -> Var:
        var = Var(self, np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)
        if requires_grad:
            self.nodes.append(var)
        return var

    def param(self, store: ParamStore, name: str) -> Var:
        key = (id(store), name)
        var = self._param_vars.get(key)
        if var is None:
            self._stores.setdefault(id(store), (store, store.version))
            var = Var(self, store[name], requires_grad=not self.frozen, name=name)
            if not self.frozen:
                self.nodes.append(var)
            self._param_vars[key] = var
        return var


def backward(tape: Tape, output: Var, output_grad: Optional[ArrayLike] = None) -> None:
    """Propagate ``output_grad`` (default ones) back through ``tape``.

    Parameter gradients are added into the stores the tape read from;
    gradients of inputs are left on their ``Var.grad``.
    """
    if tape._consumed:
        raise TapeError("tape already used for a backward pass")
    for store, version in tape._stores.values():
        if store.version != version:
            raise TapeError("parameters changed since this tape was recorded; rerun forward")
    if output._tape is not tape:
        raise TapeError("output was not recorded on this tape")
    tape._consumed = True

    seed = np.ones_like(output.value) if output_grad is None else np.asarray(output_grad, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"output_grad shape {seed.shape} != output shape {output.shape}")
    if not output.requires_grad:
        return
    output.grad = seed.copy()

    for var in reversed(tape.nodes):
        g = var.grad
        if g is None:
            continue
        for parent, vjp in var._parents:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib

    if not tape.frozen:
        for (store_id, name), var in tape._param_vars.items():
            if var.grad is not None:
                tape._stores[store_id][0].accumulate_grad(name, var.grad)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

Activation = Literal["relu", "tanh", "identity"]


@dataclass(frozen=True)
class NetworkSpec:
    """Dense network: ``widths`` runs from input width to output width.

    ``heads`` splits the output columns (e.g. mean head + log-std head).
    ``zero_last`` zero-initializes the output layer.
    """

    name: str
    widths: Tuple[int, ...]
    activation: Activation = "relu"
    heads: Tuple[int, ...] = ()
    zero_last: bool = False

    def __post_init__(self) -> None:
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeError(f"network '{self.name}': invalid widths {self.widths}")
        if self.heads and sum(self.heads) != self.widths[-1]:
            raise ShapeError(f"network '{self.name}': heads {self.heads} do not sum to output width {self.widths[-1]}")
        if self.activation not in ("relu", "tanh", "identity"):
            raise ShapeError(f"network '{self.name}': unknown activation '{self.activation}'")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def weight(self, i: int) -> str:
        return f"{self.name}.W{i}"

    def bias(self, i: int) -> str:
        return f"{self.name}.b{i}"


def init_network(net: NetworkSpec, params: ParamStore, rng: np.random.Generator) -> None:
    """Glorot-uniform weights, zero biases."""
    for i in range(net.n_layers):
        fan_in, fan_out = net.widths[i], net.widths[i + 1]
        if net.zero_last and i == net.n_layers - 1:
            W = np.zeros((fan_in, fan_out))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params.add(net.weight(i), W)
        params.add(net.bias(i), np.zeros(fan_out))


def _activate(h: Var, activation: Activation) -> Var:
    if activation == "relu":
        return h.relu()
    if activation == "tanh":
        return h.tanh()
    return h


def forward(net: NetworkSpec, params: ParamStore, x, tape: Optional[Tape] = None):
    """Run ``net`` on a batch. Returns ``(output, tape)``.

    ``output`` is a single Var, or a tuple of Vars when the network has heads.
    """
    if tape is None:
        tape = Tape()
    h = x if isinstance(x, Var) else tape.input(np.atleast_2d(x), requires_grad=False)
    if h.value.ndim != 2 or h.shape[1] != net.widths[0]:
        raise ShapeError(f"network '{net.name}' expects input width {net.widths[0]}, got shape {h.shape}")
    for i in range(net.n_layers):
        h = h @ tape.param(params, net.weight(i)) + tape.param(params, net.bias(i))
        if i < net.n_layers - 1:
            h = _activate(h, net.activation)
    if not net.heads:
        return h, tape
    outs, lo = [], 0
    for width in net.heads:
        outs.append(h[:, lo:lo + width])
        lo += width
    return tuple(outs), tape


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(2e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(None, gt=0.0)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: Dict[str, np.ndarray], clip_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``clip_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads.values())
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_update(value, grad, m, v, step: int, config: AdamConfig):
    """One bias-corrected Adam update on raw arrays. Returns (value, m, v)."""
    m = config.beta1 * m + (1.0 - config.beta1) * grad
    v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** step)
    v_hat = v / (1.0 - config.beta2 ** step)
    return value - config.lr * m_hat / (np.sqrt(v_hat) + config.eps), m, v


def adam_step(params: ParamStore, config: AdamConfig) -> float:
    """Apply one Adam step from the gradients currently held in ``params``.

    Returns the gradient norm measured before clipping.
    """
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in '{name}'")
    if config.clip_norm is not None:
        norm = clip_by_global_norm(params.grads, config.clip_norm)
    else:
        norm = global_norm(params.grads.values())
    params.step += 1
    for name in params.names():
        value, params.adam_m[name], params.adam_v[name] = adam_update(
            params[name], params.grads[name], params.adam_m[name], params.adam_v[name], params.step, config
        )
        params.set(name, value)
    return norm


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

LossFn = Callable[[Tape, Dict[str, Var]], Var]


def gradient_check(
    loss_fn: LossFn,
    params: Optional[ParamStore] = None,
    inputs: Optional[Dict[str, np.ndarray]] = None,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(tape, input_vars)`` must return a scalar Var. Checks every
    parameter of ``params`` and every array in ``inputs``; ``max_entries``
    checks a random subset of coordinates per tensor. Entries whose
    gradients are both below ``floor`` are compared on an absolute scale.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in (inputs or {}).items()}

    def evaluate(grad: bool):
        tape = Tape()
        in_vars = {k: tape.input(v, name=k, requires_grad=grad) for k, v in inputs.items()}
        loss = loss_fn(tape, in_vars)
        if loss.value.size != 1:
            raise ShapeError("gradient_check needs a scalar loss")
        return tape, in_vars, loss

    if params is not None:
        params.zero_grad()
    tape, in_vars, loss = evaluate(True)
    backward(tape, loss)
    analytic: Dict[Tuple[str, str], np.ndarray] = {}
    if params is not None:
        for name in params.names():
            analytic[("param", name)] = params.grads[name].copy()
    for name, var in in_vars.items():
        analytic[("input", name)] = var.grad.copy() if var.grad is not None else np.zeros_like(var.value)

    def loss_at() -> float:
        return float(evaluate(False)[2].value)

    worst = 0.0
    for (kind, name), grad in analytic.items():
        base = params[name] if kind == "param" else inputs[name]
        coords = list(np.ndindex(base.shape))
        if max_entries is not None and len(coords) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), size=max_entries, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            vals = []
            for delta in (h, -h):
                bumped = np.array(base)
                bumped[idx] += delta
                if kind == "param":
                    params.set(name, bumped)
                else:
                    inputs[name] = bumped
                vals.append(loss_at())
            if kind == "param":
                params.set(name, base)
            else:
                inputs[name] = base
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            a = float(grad[idx])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    logger.debug("  [Gradcheck] max relative error %.3e", worst)
    return worst
