"""Define-by-run reverse-mode differentiation over numpy arrays.

Every operation is a method on a :class:`Tape`. Operations whose inputs need
no gradient are evaluated eagerly and not recorded, so geometry that depends
only on the input cloud costs nothing on the backward pass.

    tape = Tape()
    h = tape.relu(tape.add_bias(tape.matmul(x, W), b))
    loss = tape.reduce_mean(tape.square(h))
    tape.backward(loss)          # accumulates into W.grad and b.grad
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes " + ", ".join(str(s) for s in shapes))


class Tape:
    """Records operations in execution order; backward walks them in reverse."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def record(self, data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        """Register a custom op; ``backward(g)`` returns one gradient (or None) per parent."""
        out = Tensor(data)
        if any(p.needs_grad for p in parents):
            out.needs_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            self.nodes.append(out)
        return out

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed; run a new forward pass before backward")
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        if not loss.needs_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.needs_grad:
                    continue
                if parent._backward is None:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        self.nodes.clear()

    # ------------------------------------------------------------------ linear

    def matmul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise _shape_error("matmul", a.shape, b.shape)
        A, B = a.data, b.data

        def backward(g):
            if B.ndim == 2:
                ga = g @ B.T
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
            return ga, gb

        return self.record(A @ B, (a, b), backward)

    def add_bias(self, x, bias) -> Tensor:
        x, bias = as_tensor(x), as_tensor(bias)
        if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
            raise _shape_error("add_bias", x.shape, bias.shape)
        return self.record(x.data + bias.data, (x, bias),
                           lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))

    def linear(self, x, weight, bias) -> Tensor:
        return self.add_bias(self.matmul(x, weight), bias)

    # ------------------------------------------------------------ elementwise

    def _broadcast_check(self, op, a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise _shape_error(op, a.shape, b.shape) from None

    def add(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        self._broadcast_check("add", a, b)
        return self.record(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        self._broadcast_check("sub", a, b)
        return self.record(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        self._broadcast_check("mul", a, b)
        A, B = a.data, b.data
        return self.record(A * B, (a, b),
                           lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))

    def div(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        self._broadcast_check("div", a, b)
        A, B = a.data, b.data
        out = A / B
        return self.record(out, (a, b),
                           lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)))

    def scale(self, x, c: float) -> Tensor:
        x = as_tensor(x)
        return self.record(x.data * c, (x,), lambda g: (g * c,))

    def relu(self, x) -> Tensor:
        x = as_tensor(x)
        mask = x.data > 0
        # np.maximum keeps NaN visible instead of mapping it to zero
        return self.record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))

    def log(self, x) -> Tensor:
        x = as_tensor(x)
        X = x.data
        return self.record(np.log(X), (x,), lambda g: (g / X,))

    def exp(self, x) -> Tensor:
        x = as_tensor(x)
        out = np.exp(x.data)
        return self.record(out, (x,), lambda g: (g * out,))

    def square(self, x) -> Tensor:
        x = as_tensor(x)
        X = x.data
        return self.record(X * X, (x,), lambda g: (2.0 * g * X,))

    def sqrt(self, x) -> Tensor:
        x = as_tensor(x)
        out = np.sqrt(x.data)
        return self.record(out, (x,), lambda g: (g * 0.5 / out,))

    def sigmoid(self, x) -> Tensor:
        x = as_tensor(x)
        out = sigmoid(x.data)
        return self.record(out, (x,), lambda g: (g * out * (1.0 - out),))

    def softplus(self, x) -> Tensor:
        x = as_tensor(x)
        X = x.data
        return self.record(softplus(X), (x,), lambda g: (g * sigmoid(X),))

    def clamp_min(self, x, lo: float) -> Tensor:
        """Lower clamp; the gradient is zero wherever the clamp is active."""
        x = as_tensor(x)
        keep = x.data > lo
        return self.record(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))

    # ------------------------------------------------------------- structural

    def max_pool(self, x, axis: int) -> Tensor:
        """Max over ``axis``; ties resolve to the lowest index, which alone gets gradient."""
        x = as_tensor(x)
        axis = axis % x.ndim
        arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        t = self.record(out, (x,), backward)
        t.name = "max_pool"
        return t

    def concat(self, xs: Iterable, axis: int = -1) -> Tensor:
        xs = [as_tensor(x) for x in xs]
        try:
            out = np.concatenate([x.data for x in xs], axis=axis)
        except ValueError:
            raise _shape_error("concat", *[x.shape for x in xs]) from None
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self.record(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))

    def slice(self, x, axis: int, start: int, stop: int) -> Tensor:
        x = as_tensor(x)
        axis = axis % x.ndim
        if not 0 <= start <= stop <= x.shape[axis]:
            raise ValueError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
        sl = (slice(None),) * axis + (slice(start, stop),)

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            return (gx,)

        return self.record(x.data[sl], (x,), backward)

    def reshape(self, x, shape) -> Tensor:
        x = as_tensor(x)
        return self.record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def gather_rows(self, x, idx, batched: bool = False) -> Tensor:
        """Row gather: ``x[idx]``, or ``x[b, idx[b]]`` per batch item when ``batched``."""
        x = as_tensor(x)
        idx = np.asarray(idx, dtype=np.int64)
        if batched:
            if idx.shape[0] != x.shape[0]:
                raise _shape_error("gather_rows", x.shape, idx.shape)
            key = (np.arange(x.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1)), idx)
        else:
            key = idx
        out = x.data[key]

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            return (gx,)

        return self.record(out, (x,), backward)

    def reduce_sum(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = as_tensor(x)
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self.record(out, (x,), backward)

    def reduce_mean(self, x, axis=None, keepdims: bool = False) -> Tensor:
        x = as_tensor(x)
        count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return self.scale(self.reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# --------------------------------------------------------------------------- #
# parameters and optimisation

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class ParamStore:
    """Named parameters with gradient accumulators and Adam moment buffers."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        t.zero_grad()
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        w = self.add(f"{name}.weight", glorot_uniform(rng, fan_in, fan_out))
        b = self.add(f"{name}.bias", np.zeros(fan_out))
        return w, b

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad * t.grad).sum()) for t in self.params.values())))

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                  clip_norm: float | None = None) -> None:
        """Bias-corrected Adam update; gradients are cleared afterwards."""
        factor = 1.0
        if clip_norm is not None:
            norm = self.grad_norm()
            if norm > clip_norm:
                factor = clip_norm / norm
        self.step += 1
        c1 = 1.0 - beta1**self.step
        c2 = 1.0 - beta2**self.step
        for name, t in self.params.items():
            g = t.grad * factor
            m = self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * g
            v = self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            t.grad = np.zeros_like(t.data)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k!r}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=DTYPE)


# --------------------------------------------------------------------------- #
# named-tensor container

CONTAINER_MAGIC = b"VRCK"
CONTAINER_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(tensors: dict[str, np.ndarray], metadata: bytes = b"") -> bytes:
    """Serialize named float64 tensors, little-endian.

    Layout: magic, version u16, tensor count u32, metadata length u32, metadata,
    then per tensor: name length u16, utf-8 name, ndim u8, dims u32 each, values f64.
    """
    out = [CONTAINER_MAGIC, struct.pack("<HII", CONTAINER_VERSION, len(tensors), len(metadata)), metadata]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def read_container(raw: bytes) -> tuple[OrderedDict[str, np.ndarray], bytes]:
    if raw[:4] != CONTAINER_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count, mlen = struct.unpack_from("<HII", raw, 4)
        if version != CONTAINER_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 14
        metadata = raw[pos:pos + mlen]
        pos += mlen
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + klen].decode("utf-8")
            pos += 2 + klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise CheckpointError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape).astype(DTYPE)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    return tensors, metadata
