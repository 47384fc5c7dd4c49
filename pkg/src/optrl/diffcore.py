"""Flat parameter vectors, small MLPs, and exact first/second-order derivatives.

Every network in the package is a fully connected MLP whose weights live in one
flat float64 vector.  Gradients are computed by hand-written reverse mode, and
Hessian-vector products by the R-operator applied to the backward pass, which
is what makes the meta-gradient of ``L_off(psi) + L_on(psi - alpha*grad L_off)``
exact instead of first-order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a forward/backward intermediate stops being finite.

    ``layer`` is the 0-based index of the offending layer (``-1`` for the
    loss head itself).
    """

    def __init__(self, layer: int, where: str = "forward"):
        super().__init__(f"non-finite value in {where} pass at layer {layer}")
        self.layer = layer
        self.where = where


@dataclass(frozen=True)
class MlpLayout:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if min(self.dims) < 1:
            raise ValueError(f"all layer widths must be >= 1, got {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {OUTPUT_ACTIVATIONS}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @cached_property
    def slices(self) -> tuple[tuple[slice, tuple[int, int], slice], ...]:
        # per layer: (weight slice, weight shape, bias slice); weights are row-major (fan_out, fan_in)
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w, (fan_out, fan_in), b))
        return tuple(out)

    @cached_property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.dims[:-1], self.dims[1:]))

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(values[w].reshape(shape), values[b]) for w, shape, b in self.slices]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpLayout":
        return cls(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"],
                   d.get("activation", "relu"), d.get("output_activation", "identity"))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _owned(a: np.ndarray) -> np.ndarray:
    # freeze a float64 array this module just allocated, without copying it
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: MlpLayout

    def __post_init__(self):
        v = self.values
        if not (isinstance(v, np.ndarray) and v.dtype == np.float64 and not v.flags.writeable):
            v = _frozen(v)
            object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.shape[0] != self.layout.n_params:
            raise DimensionError(
                f"expected {self.layout.n_params} parameters, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteError(-1, "parameter")

    def __len__(self):
        return self.values.shape[0]

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def digest(self) -> bytes:
        return self.values.tobytes()


@dataclass(frozen=True, eq=False)
class GradVector:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if not (isinstance(v, np.ndarray) and v.dtype == np.float64 and not v.flags.writeable):
            object.__setattr__(self, "values", _frozen(v))
        if not np.isfinite(self.values).all():
            raise NonFiniteError(-1, "gradient")

    def __len__(self):
        return self.values.shape[0]


def mlp_init(layout: MlpLayout, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.n_params)
    for (w, shape, _b) in layout.slices:
        bound = 1.0 / np.sqrt(shape[1])
        values[w] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
    return ParamVector(values, layout)


# -- forward / backward ------------------------------------------------------

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _dact(name, z, h):
    if name == "relu":
        return z > 0.0  # boolean mask; multiplying by it is the derivative
    if name == "tanh":
        return 1.0 - h * h
    return None  # identity: derivative 1, skipped


def _ddact(name, h, dh):
    # second derivative; None means identically zero
    if name == "tanh":
        return -2.0 * h * dh
    return None


@dataclass
class ForwardCache:
    inputs: np.ndarray
    weights: list
    zs: list = field(default_factory=list)
    hs: list = field(default_factory=list)
    ds: list = field(default_factory=list)  # activation derivatives, None for identity

    @property
    def output(self) -> np.ndarray:
        return self.hs[-1]


def _as_batch(layout: MlpLayout, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layout.input_dim:
        raise DimensionError(f"expected input of width {layout.input_dim}, got shape {x.shape}")
    return x, single


def forward_cache(params: ParamVector, x, check: bool = True) -> ForwardCache:
    layout = params.layout
    X, _ = _as_batch(layout, x)
    cache = ForwardCache(X, layout.unpack(params.values))
    h = X
    last = layout.n_layers - 1
    for i, (W, b) in enumerate(cache.weights):
        z = _affine(h, W, b)
        name = layout.output_activation if i == last else layout.activation
        h = _act(name, z)
        cache.zs.append(z)
        cache.hs.append(h)
        cache.ds.append(_dact(name, z, h))
    # non-finite values propagate to the output; locate the layer only on failure
    if check and not np.isfinite(h).all():
        for i, hi in enumerate(cache.hs):
            if not np.isfinite(hi).all():
                raise NonFiniteError(i)
    return cache


def _affine(h, W, b):
    if W.shape[1] == 1:  # rank-one product: broadcasting beats a K=1 matrix multiply
        return h * W[:, 0] + b
    return h @ W.T + b


def _times_w(delta, W):
    if W.shape[0] == 1:
        return delta * W[0]
    return delta @ W


def forward(params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (batch, input_dim) array."""
    X, single = _as_batch(params.layout, x)
    out = forward_cache(params, X).output
    return out[0] if single else out


def backward(params: ParamVector, cache: ForwardCache, d_out: np.ndarray,
             need_input_grad: bool = False, check: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Reverse pass. Returns (grad w.r.t. flat params, grad w.r.t. inputs or None)."""
    layout = params.layout
    g = np.empty(layout.n_params)
    G = d_out
    for i in range(layout.n_layers - 1, -1, -1):
        W, _ = cache.weights[i]
        delta = G if cache.ds[i] is None else G * cache.ds[i]
        if check == "strict" and not np.isfinite(delta).all():
            raise NonFiniteError(i, "backward")
        h_prev = cache.hs[i - 1] if i > 0 else cache.inputs
        w_sl, shape, b_sl = layout.slices[i]
        g[w_sl] = (delta.T @ h_prev).ravel()
        g[b_sl] = delta.sum(axis=0)
        if i > 0 or need_input_grad:
            G = _times_w(delta, W)
    d_in = G if need_input_grad else None
    if check is True and not (np.isfinite(g).all() and (d_in is None or np.isfinite(d_in).all())):
        backward(params, cache, d_out, need_input_grad, "strict")
        raise NonFiniteError(-1, "backward")
    return g, d_in


def hvp_through(params: ParamVector, cache: ForwardCache, d_out: np.ndarray,
                d2_out: np.ndarray | float, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of a loss that is separable in the network outputs.

    ``d_out`` / ``d2_out`` are the first and (diagonal) second derivatives of
    the loss with respect to each output entry.  Implements the R-operator:
    forward-mode differentiation of the reverse pass along direction ``v``.
    """
    layout = params.layout
    V = layout.unpack(np.asarray(v, dtype=np.float64))
    n = layout.n_layers
    last = n - 1
    # R-forward
    Rzs, Rhs = [], []
    Rh = None
    for i in range(n):
        W, _ = cache.weights[i]
        VW, Vb = V[i]
        h_prev = cache.hs[i - 1] if i > 0 else cache.inputs
        Rz = h_prev @ VW.T + Vb
        if Rh is not None:
            Rz = Rz + Rh @ W.T
        Rh = Rz if cache.ds[i] is None else cache.ds[i] * Rz
        Rzs.append(Rz)
        Rhs.append(Rh)
    # R-backward alongside the ordinary backward
    out = np.empty(layout.n_params)
    G = d_out
    RG = d2_out * Rhs[-1]
    for i in range(n - 1, -1, -1):
        W, _ = cache.weights[i]
        VW, _ = V[i]
        name = layout.output_activation if i == last else layout.activation
        if cache.ds[i] is None:
            delta, Rdelta = G, RG
        else:
            delta = G * cache.ds[i]
            Rdelta = RG * cache.ds[i]
            dd = _ddact(name, cache.hs[i], cache.ds[i])
            if dd is not None:
                Rdelta = Rdelta + G * dd * Rzs[i]
        h_prev = cache.hs[i - 1] if i > 0 else cache.inputs
        w_sl, _shape, b_sl = layout.slices[i]
        RgW = Rdelta.T @ h_prev
        if i > 0:
            RgW = RgW + delta.T @ Rhs[i - 1]
        out[w_sl] = RgW.ravel()
        out[b_sl] = Rdelta.sum(axis=0)
        if i > 0:
            G, RG = delta @ W, Rdelta @ W + delta @ VW
    return out


# -- losses ------------------------------------------------------------------

class OutputHead(Protocol):
    """A loss that is a sum of per-entry functions of the network output."""

    def value(self, out: np.ndarray) -> float: ...

    def d_out(self, out: np.ndarray) -> np.ndarray: ...

    def d2_out(self, out: np.ndarray) -> np.ndarray | float: ...


@dataclass(frozen=True, eq=False)
class SquaredError:
    """scale * mean_batch sum_k (out - target)^2"""

    target: np.ndarray
    scale: float = 1.0

    def value(self, out):
        r = out - self.target
        return float(self.scale * np.sum(r * r) / out.shape[0])

    def d_out(self, out):
        return (2.0 * self.scale / out.shape[0]) * (out - self.target)

    def d2_out(self, out):
        return 2.0 * self.scale / out.shape[0]


@dataclass(frozen=True, eq=False)
class ExpectileError:
    """mean_batch |tau - 1(u<0)| u^2 with u = target - out."""

    target: np.ndarray
    tau: float

    def _w(self, u):
        return np.where(u < 0.0, 1.0 - self.tau, self.tau)

    def value(self, out):
        u = self.target - out
        return float(np.sum(self._w(u) * u * u) / out.shape[0])

    def d_out(self, out):
        u = self.target - out
        return (-2.0 / out.shape[0]) * self._w(u) * u

    def d2_out(self, out):
        u = self.target - out
        return (2.0 / out.shape[0]) * self._w(u)


@dataclass(frozen=True, eq=False)
class LinearHead:
    """sum(coef * out); curvature zero."""

    coef: np.ndarray

    def value(self, out):
        return float(np.sum(self.coef * out))

    def d_out(self, out):
        return np.broadcast_to(self.coef, out.shape)

    def d2_out(self, out):
        return 0.0


class BatchLoss(Protocol):
    def value_and_grad(self, params: ParamVector) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True, eq=False)
class NetworkLoss:
    """An output head bound to a fixed batch of network inputs."""

    inputs: np.ndarray
    head: OutputHead

    def value(self, params: ParamVector) -> float:
        return self.head.value(forward_cache(params, self.inputs).output)

    def value_and_grad(self, params: ParamVector) -> tuple[float, np.ndarray]:
        cache = forward_cache(params, self.inputs)
        out = cache.output
        g, _ = backward(params, cache, self.head.d_out(out))
        return self.head.value(out), g

    def hvp(self, params: ParamVector, v: np.ndarray) -> np.ndarray:
        cache = forward_cache(params, self.inputs)
        out = cache.output
        return hvp_through(params, cache, self.head.d_out(out), self.head.d2_out(out), v)


def _checked(loss_value: float, g: np.ndarray) -> tuple[float, GradVector]:
    if not np.isfinite(loss_value):
        raise NonFiniteError(-1, "loss")
    return float(loss_value), GradVector(g)


def grad(params: ParamVector, loss: BatchLoss) -> tuple[float, GradVector]:
    """Mean batch loss and its gradient with respect to ``params``."""
    return _checked(*loss.value_and_grad(params))


def adapted_params(psi: ParamVector, g: GradVector, alpha: float) -> ParamVector:
    if len(g) != len(psi):
        raise DimensionError("gradient does not match parameters")
    return psi.replace(psi.values - alpha * g.values)


def meta_grad(psi: ParamVector, off_loss: NetworkLoss, on_loss: BatchLoss,
              alpha: float, mode: str = "exact") -> tuple[float, GradVector]:
    """Value and gradient of ``L_off(psi) + L_on(psi - alpha * grad L_off(psi))``.

    In ``exact`` mode the second term is differentiated through the inner step:
    ``(I - alpha * H_off(psi)) @ grad L_on(psi')``.  ``first_order`` drops the
    Hessian term.
    """
    if mode not in ("exact", "first_order"):
        raise ValueError(f"unknown meta-gradient mode {mode!r}")
    l_off, g_off = off_loss.value_and_grad(psi)
    inner = psi.replace(psi.values - alpha * g_off)
    l_on, g_on = on_loss.value_and_grad(inner)
    total = g_off + g_on
    if mode == "exact" and alpha != 0.0:
        total = total - alpha * off_loss.hvp(psi, g_on)
    return _checked(l_off + l_on, total)


def polyak_update(target: ParamVector, online: ParamVector, tau: float) -> ParamVector:
    if target.layout != online.layout:
        raise DimensionError("polyak update between different layouts")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return target.replace(_owned((1.0 - tau) * target.values + tau * online.values))


@dataclass(frozen=True, eq=False)
class OptimizerState:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def sgd_or_adam_step(params: ParamVector, g: GradVector | np.ndarray,
                     state: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    gv = g.values if isinstance(g, GradVector) else np.asarray(g, dtype=np.float64)
    if gv.shape != params.values.shape:
        raise DimensionError("gradient does not match parameters")
    if state.kind == "sgd":
        return params.replace(params.values - state.lr * gv), state
    if state.kind != "adam":
        raise ValueError(f"unknown optimizer {state.kind!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = gv * (1.0 - b1) if state.m is None else b1 * state.m + (1.0 - b1) * gv
    v = (gv * gv) * (1.0 - b2) if state.v is None else b2 * state.v + (1.0 - b2) * (gv * gv)
    m_hat = m / (1.0 - b1 ** t)
    denom = np.sqrt(v / (1.0 - b2 ** t))
    denom += state.eps
    step = m_hat / denom
    step *= state.lr
    new = params.values - step
    st = OptimizerState(state.kind, state.lr, b1, b2, state.eps, _owned(m), _owned(v), t)
    return params.replace(_owned(new)), st


def concat(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64) for v in vectors])
