"""Dense float64 tensors with a minimal reverse-mode tape.

Each forward call builds a fresh graph: a :class:`Tensor` remembers its
parents and a closure mapping its output gradient to parent gradients.
:func:`backward` walks that graph once in reverse topological order and
deposits gradients for parameter leaves into their :class:`ParamStore`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, FormatError, TrainingError

LEAKY_SLOPE = 0.1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_param")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self._param = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = bool(requires_grad)
        if not self.requires_grad:
            # constants never need their closures
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def leaf(data) -> Tensor:
    """A differentiable input that is not a stored parameter."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# differentiable operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def matmul(x, w) -> Tensor:
    """``x[..., k] @ w[k, m]``; leading axes of ``x`` are batch axes."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {x.shape} by {w.shape}")

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            k, m = w.shape
            gw = x.data.reshape(-1, k).T @ g.reshape(-1, m)
        return gx, gw

    return Tensor(x.data @ w.data, (x, w), back)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return Tensor(
        np.where(pos, x.data, slope * x.data),
        (x,),
        lambda g: (g * np.where(pos, 1.0, slope),),
    )


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def identity(x) -> Tensor:
    return as_tensor(x)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "identity": identity,
}


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def gather_rows(x, idx) -> Tensor:
    """``x[idx]`` along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def back(g):
        if g.ndim == 2:
            return (kernels.active.scatter_add_rows(n, idx, np.ascontiguousarray(g)),)
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.data[idx], (x,), back)


def scatter_rows(base, idx, rows) -> Tensor:
    """Copy of ``base`` with ``out[idx] = rows``; ``idx`` must be unique.

    ``base`` is treated as a constant except where it is overwritten.
    """
    base, rows = as_tensor(base), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    out[idx] = rows.data

    def back(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return Tensor(out, (base, rows), back)


def segment_max(x, offsets) -> Tensor:
    """Max over consecutive row segments ``x[offsets[s]:offsets[s+1]]``.

    Empty segments produce zeros and receive no gradient.
    """
    x = as_tensor(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    out, arg = kernels.active.segment_max(np.ascontiguousarray(x.data), offsets)

    def back(g):
        gx = np.zeros(x.shape)
        valid = arg >= 0
        cols = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
        gx[arg[valid], cols[valid]] = g[valid]
        return (gx,)

    return Tensor(out, (x,), back)


def row_norm(x) -> Tensor:
    """Euclidean norm over the last axis; the gradient at zero is taken as zero."""
    x = as_tensor(x)
    d = x.data
    norm = np.sqrt(np.sum(d * d, axis=-1))
    safe = np.where(norm > 0, norm, 1.0)

    def back(g):
        return (np.where(norm[..., None] > 0, d / safe[..., None], 0.0) * g[..., None],)

    return Tensor(norm, (x,), back)


def softmax(x, mask=None) -> Tensor:
    """Max-stabilised softmax over the last axis.

    ``mask`` (boolean, same shape) marks admissible entries; the rest get
    weight exactly zero.  Every row needs at least one admissible entry.
    """
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor(y, (x,), back)


def clip(x, lo, hi) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),))


def pair_hidden_score(a, b, bias, w_out, slope: float = LEAKY_SLOPE) -> Tensor:
    """``S[i, n] = act(a[i] - b[n] + bias) @ w_out`` without pairwise temporaries.

    This is the hidden and output layer of a one-hidden-layer MLP applied
    to every pairwise difference; ``a`` and ``b`` are already projected by
    the first weight matrix.
    """
    a, b, bias, w_out = (as_tensor(t) for t in (a, b, bias, w_out))
    if w_out.shape not in ((a.shape[1], 1), (a.shape[1],)) or b.shape[1] != a.shape[1]:
        raise DimensionError(f"pair score: incompatible shapes {a.shape}, {b.shape}, {w_out.shape}")
    k = kernels.active
    out = k.pair_score(a.data, b.data, bias.data, w_out.data, slope)

    def back(g):
        return k.pair_score_backward(a.data, b.data, bias.data, w_out.data, slope, g)

    return Tensor(out, (a, b, bias, w_out), back)


def edge_mlp_max(a, b, offsets, neighbors, bias, w_out, b_out, slope: float = LEAKY_SLOPE) -> Tensor:
    """Per-edge hidden layer, output layer and max-pool in one pass.

    Edge ``e`` of center ``c`` (CSR ``offsets``) joins ``c`` to
    ``neighbors[e]``; its value is ``act(a[c] + b[neighbors[e]] + bias) @ w_out
    + b_out``.  Each center keeps the channelwise maximum over its edges, and
    centers without edges get zeros.  Only the winning edges are revisited in
    the backward pass.
    """
    a, b, bias, w_out, b_out = (as_tensor(t) for t in (a, b, bias, w_out, b_out))
    offsets = np.asarray(offsets, dtype=np.int64)
    neighbors = np.asarray(neighbors, dtype=np.int64)
    h = a.shape[1]
    if b.shape[1] != h or bias.shape != (h,) or w_out.shape[0] != h or b_out.shape != (w_out.shape[1],):
        raise DimensionError(
            f"edge MLP: incompatible shapes {a.shape}, {b.shape}, {bias.shape}, {w_out.shape}, {b_out.shape}"
        )
    if len(offsets) != a.shape[0] + 1:
        raise DimensionError(f"edge MLP: {len(offsets) - 1} segments for {a.shape[0]} centers")
    k = kernels.active
    out, arg = k.edge_mlp_max(a.data, b.data, offsets, neighbors, bias.data, w_out.data, b_out.data, slope)

    def back(g):
        return k.edge_mlp_max_backward(a.data, b.data, offsets, neighbors, bias.data, w_out.data, slope, arg, g)

    return Tensor(out, (a, b, bias, w_out, b_out), back)


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return Tensor(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    return mul(total(x), 1.0 / max(x.data.size, 1))


# ---------------------------------------------------------------------------
# tape traversal


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar ``loss``.

    Gradients land in ``.grad`` of every differentiable node; parameter
    leaves additionally accumulate into their store's gradient slots.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in order:
        if node._param is not None and node.grad is not None:
            store, name = node._param
            store.grads[name] += node.grad


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameters, their gradient slots and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.moments[name] = (np.zeros_like(value), np.zeros_like(value))

    def __contains__(self, name):
        return name in self.values

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def tensor(self, name: str) -> Tensor:
        if name not in self.values:
            raise DimensionError(f"parameter {name!r} is missing from the store")
        view = self.values[name].view()
        view.flags.writeable = False
        t = Tensor(view, requires_grad=True)
        t._param = (self, name)
        return t

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.add(name, v)
        return out

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.values
        )


def adam_step(params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update from the current gradient slots."""
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, value in params.values.items():
        g = params.grads[name]
        m, v = params.moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# multilayer perceptrons


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack; hidden layers are activated, the last is linear."""

    name: str
    widths: tuple[int, ...]
    activations: tuple[str, ...] = field(default=())

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"MLP {self.name!r} needs >= 1 layer with positive widths, got {widths}")
        object.__setattr__(self, "widths", widths)
        acts = tuple(self.activations) or ("leaky_relu",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ContractError(f"MLP {self.name!r}: one activation per hidden layer expected")
        unknown = set(acts) - set(ACTIVATIONS)
        if unknown:
            raise ContractError(f"unknown activation(s) {sorted(unknown)}")
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer_names(self, i: int) -> tuple[str, str]:
        return f"{self.name}.{i}.weight", f"{self.name}.{i}.bias"


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_mlp(spec: MlpSpec, params: ParamStore, rng: np.random.Generator) -> None:
    for i in range(spec.n_layers):
        fin, fout = spec.widths[i], spec.widths[i + 1]
        wname, bname = spec.layer_names(i)
        bound = glorot_bound(fin, fout)
        params.add(wname, rng.uniform(-bound, bound, size=(fin, fout)))
        params.add(bname, np.zeros(fout))


def mlp_layer(spec: MlpSpec, params: ParamStore, i: int, x: Tensor, bias: bool = True) -> Tensor:
    """Affine map of layer ``i`` (no activation)."""
    wname, bname = spec.layer_names(i)
    fin, fout = spec.widths[i], spec.widths[i + 1]
    if x.shape[-1] != fin:
        raise DimensionError(
            f"MLP {spec.name!r} layer {i}: expected input width {fin}, got {x.shape[-1]}"
        )
    w = params.tensor(wname)
    if w.shape != (fin, fout):
        raise DimensionError(f"MLP {spec.name!r} layer {i}: stored weight has shape {w.shape}, spec wants {(fin, fout)}")
    h = matmul(x, w)
    return add(h, params.tensor(bname)) if bias else h


def forward_mlp(spec: MlpSpec, params: ParamStore, x, start: int = 0) -> Tensor:
    """Evaluate ``spec`` on the last axis of ``x``.

    ``start`` > 0 resumes from an already-activated hidden layer input.
    """
    h = as_tensor(x)
    last = spec.n_layers - 1
    for i in range(start, spec.n_layers):
        h = mlp_layer(spec, params, i, h)
        if i < last:
            h = ACTIVATIONS[spec.activations[i]](h)
    return h


# ---------------------------------------------------------------------------
# checkpoint files

_CKPT_MAGIC = b"SSFW"
_CKPT_VERSION = 1


def save_params(params: ParamStore, path) -> None:
    buf = bytearray(_CKPT_MAGIC)
    buf += struct.pack("<H", _CKPT_VERSION)
    for name, value in params.values.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", value.ndim)
        buf += struct.pack(f"<{value.ndim}I", *value.shape)
        buf += value.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    params = ParamStore()
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            value = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            params.add(name, value)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return params
