"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation used by the encoder and the heads lives here.
Operations executed while any input requires a gradient are appended to the
active :class:`Tape`; :func:`backward` replays that record in reverse.
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Tape",
    "no_grad",
    "current_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "maximum",
    "elementwise",
    "matmul",
    "neg",
    "scale",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take_rows",
    "concat",
    "softmax",
    "cross_entropy",
    "layer_norm",
    "relu",
    "tanh",
    "gelu",
    "dropout",
    "backward",
    "numerical_grad",
    "gradcheck",
    "save_params",
    "load_params",
    "dump_params",
    "parse_params",
]


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    ``data`` is a C-contiguous numpy array, so its flat view is the row-major
    storage; ``grad`` (when set) has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    # make numpy defer to our operators on ``ndarray <op> Tensor``
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed ops.

    Each entry is ``(output, inputs, backward_fn)``. Use as a context manager
    to scope recording; outside any ``with Tape()`` block a per-thread
    default tape is used.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Backward) -> None:
        out._tape = self
        self.nodes.append((out, inputs, fn))

    def clear(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def _recording() -> bool:
    return not getattr(_local, "paused", False)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in this thread for the duration of the block."""
    prev = getattr(_local, "paused", False)
    _local.paused = True
    try:
        yield
    finally:
        _local.paused = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Backward) -> Tensor:
    needs = _recording() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), fn)


def maximum(a, b) -> Tensor:
    """Pointwise max. On ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "max")
    ad, bd = a.data, b.data
    first = ad >= bd

    def fn(g):
        return _unbroadcast(np.where(first, g, 0.0), ad.shape), _unbroadcast(np.where(first, 0.0, g), bd.shape)

    return _result(np.maximum(ad, bd), (a, b), fn)


_ELEMENTWISE = {"mul": mul, "add": add, "sub": sub, "max": maximum}


def elementwise(op_kind: str, a, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, p] @ b[..., p, q]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), fn)


# ---------------------------------------------------------------- reductions / views


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), fn)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return scale(sum(a), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {orig} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]`` along axis 0 (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of no tensors")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- nonlinearities


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), fn)


def cross_entropy(logits, target, weights=None) -> Tensor:
    """Cross entropy ``-log softmax(logits)[target]``.

    ``logits`` is ``[C]`` with an integer target, or ``[N, C]`` with ``N``
    targets. For the 2-D case the per-row losses are combined as
    ``sum(weights * ce)``; without weights that is the plain mean.
    """
    logits = as_tensor(logits)
    if logits.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy expects [C] or [N, C] logits, got {logits.shape}")
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = z.shape
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but target shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross_entropy target out of range [0, {c})")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape != (n,):
            raise ShapeError(f"cross_entropy: weights shape {w.shape} for {n} rows")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    ce = lse - shifted[rows, t]
    p = np.exp(shifted - lse[:, None])
    in_shape = logits.shape

    def fn(g):
        d = p.copy()
        d[rows, t] -= 1.0
        d *= (w * g)[:, None]
        return (d.reshape(in_shape),)

    return _result(np.asarray(np.dot(w, ce)), (logits,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def fn(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _result(xd * cdf, (x,), fn)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, retain: bool = False) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Gradients add onto any existing ``grad`` of leaf tensors, so callers
    reset parameters between optimizer steps. The tape is cleared afterwards
    unless ``retain`` is set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    seed = np.ones_like(loss.data)
    if tape is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    try:
        stop = next(i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i][0] is loss)
    except StopIteration:
        raise ContractError("loss was not produced on its tape") from None

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for out, inputs, fn in reversed(tape.nodes[: stop + 1]):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for inp, ig in zip(inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig
            else:
                inp.grad = np.array(ig, dtype=np.float64) if inp.grad is None else inp.grad + ig
    if not retain:
        tape.clear()


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x.data``."""
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(x.shape)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Compare analytic gradients of ``sum(fn(*inputs))`` with finite differences.

    Returns the worst elementwise relative error
    ``|a - n| / max(|a|, |n|, floor)`` over every input that requires grad;
    raises AssertionError when it exceeds ``rtol``.
    """
    for t in inputs:
        t.grad = None
    with Tape():
        out = fn(*inputs)
        total = sum(out) if out.size != 1 else out
        backward(total)

    def value() -> float:
        return float(np.sum(fn(*inputs).data))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(value, t, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    if worst > rtol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3g} > {rtol}")
    return worst


# ---------------------------------------------------------------- checkpoint container

_MAGIC = b"NERMQMRC-PARAMS\x001\n"


def dump_params(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    """Serialize ``name -> array`` into a deterministic byte string.

    Layout: magic, 8-byte little-endian header length, a JSON header listing
    ``[name, shape]`` in sorted-name order, then each array's float64
    little-endian row-major bytes in the same order.
    """
    names = sorted(params)
    arrays = [np.ascontiguousarray(_as_array(params[n]), dtype="<f8") for n in names]
    header = json.dumps([[n, list(a.shape)] for n, a in zip(names, arrays)], separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for a in arrays:
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def parse_params(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(_MAGIC):
        raise ContractError("not a parameter container (bad magic)")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    out: dict[str, np.ndarray] = {}
    for name, shape in header:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        out[name] = arr.reshape(shape)
        pos += 8 * count
    if pos != len(blob):
        raise ContractError("parameter container has trailing bytes")
    return out


def save_params(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_params(fh.read())


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)

