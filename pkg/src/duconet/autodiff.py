"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to the parent gradients.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse
topological order and returns gradients for every leaf that requires them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_mode = [True]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an autodiff call is made outside its preconditions."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    _grad_mode.append(False)
    try:
        yield
    finally:
        _grad_mode.pop()


def grad_enabled() -> bool:
    return _grad_mode[-1]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"tensor of shape {t.shape} is not a scalar")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    gain = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * gain, (a,), lambda g: (g * gain,))


def sigmoid(a: Tensor) -> Tensor:
    # split on sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def rsqrt(a: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * (-0.5) * y**3,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sum_axes(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    src = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(src) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(y, (a,), back)


def mean(a: Tensor) -> Tensor:
    return scale(sum_axes(a, None), 1.0 / a.data.size)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW (or NC) tensors along axis 1."""
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise DimensionError(f"concat_channels: {first} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), back)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    out = []
    start = 0
    for n in sizes:
        sl = slice(start, start + n)

        def back(g, sl=sl):
            full = np.zeros(a.shape, dtype=DTYPE)
            full[:, sl] = g
            return (full,)

        out.append(_make(a.data[:, sl], (a,), back))
        start += n
    if start != a.shape[1]:
        raise DimensionError(f"split_channels: sizes {list(sizes)} do not cover {a.shape[1]}")
    return out


# ---------------------------------------------------------------- layers


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _out_size(n: int, k: int, stride: int, padding: int, what: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: {what} size {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, ho*wo, C*k*k)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * ho : stride, : stride * wo : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)


def _col2im(dcols: np.ndarray, shape_p: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape_p[:2]
    d = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(shape_p, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dxp


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an NCHW batch with an (O, C, k, k) kernel, zero padding."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, k, k2 = kernel.shape
    if ck != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {kernel.shape}")
    ho = _out_size(h, k, stride, padding, "height")
    wo = _out_size(w, k, stride, padding, "width")
    kernel_needs = kernel.requires_grad or kernel._backward is not None
    input_needs = x.requires_grad or x._backward is not None
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)  # (N, P, CKK)
    kmat = kernel.data.reshape(o, -1)
    y = (cols @ kmat.T).transpose(0, 2, 1).reshape(n, o, ho, wo)

    def back(g):
        gm = g.reshape(n, o, ho * wo)  # (N, O, P)
        dk = np.einsum("nop,npk->ok", gm, cols, optimize=True).reshape(kernel.shape) if kernel_needs else None
        dx = None
        if input_needs:
            dcols = gm.transpose(0, 2, 1) @ kmat  # (N, P, CKK)
            dx = _unpad(_col2im(dcols, xp.shape, k, stride, ho, wo), padding)
        return dx, dk

    return _make(y, (x, kernel), back)


def conv2d_per_sample(x: Tensor, kernels: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 convolution where sample n uses ``kernels[n]`` of shape (O, C, k, k)."""
    if x.ndim != 4 or kernels.ndim != 5:
        raise DimensionError(f"conv2d_per_sample: expected 4-d input and 5-d kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    nk, o, ck, k, _ = kernels.shape
    if nk != n:
        raise DimensionError(f"conv2d_per_sample: batch {x.shape} vs kernels {kernels.shape}")
    if ck != c:
        raise DimensionError(f"conv2d_per_sample: input {x.shape} incompatible with kernels {kernels.shape}")
    ho = _out_size(h, k, 1, padding, "height")
    wo = _out_size(w, k, 1, padding, "width")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, 1, ho, wo)  # (N, P, CKK)
    kmat = kernels.data.reshape(n, o, -1)  # (N, O, CKK)
    y = (kmat @ cols.transpose(0, 2, 1)).reshape(n, o, ho, wo)

    def back(g):
        gm = g.reshape(n, o, ho * wo)
        dk = (gm @ cols).reshape(kernels.shape)
        dcols = gm.transpose(0, 2, 1) @ kmat
        dx = _unpad(_col2im(dcols, xp.shape, k, 1, ho, wo), padding)
        return dx, dk

    return _make(y, (x, kernels), back)


def avg_pool_global(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"avg_pool_global: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w
    return _make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
    )


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(f"fully_connected: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    if weight.shape[1] != x.shape[1] or bias.shape[0] != weight.shape[0]:
        raise DimensionError(f"fully_connected: x {x.shape}, W {weight.shape}, b {bias.shape}")
    y = x.data @ weight.data.T + bias.data
    return _make(y, (x, weight, bias), lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


def softmax_over_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _make(y, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    size = diff.size
    sgn = np.sign(diff)
    return _make(
        np.array(np.abs(diff).mean()),
        (pred, target),
        lambda g: (g * sgn / size, -g * sgn / size),
    )


# ---------------------------------------------------------------- backward


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Replay in reverse; returns gradients keyed by ``id(tensor)`` for grad leaves."""
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data) if seed is None else seed}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every grad-enabled leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise ContractError("backward() called on a tensor that was not recorded on a tape")
    tape = Tape.from_output(loss)
    grads = tape.backward()
    for node in tape.nodes:
        if node._backward is None and node.requires_grad:
            node.grad = grads.get(id(node), np.zeros_like(node.data))
    return grads


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence[Tensor],
    h: float = 1e-5,
    coords: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each tensor in ``params``.

    ``f`` is re-evaluated after in-place perturbation of each coordinate.  With
    ``coords`` (flat indices per tensor) only those entries are estimated and
    each result is the 1-d array of estimates at those indices.
    """
    out = []
    for n, p in enumerate(params):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None else np.asarray(coords[n], dtype=int)
        est = np.zeros(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            est[k] = (fp - fm) / (2.0 * h)
        out.append(est.reshape(p.shape) if coords is None else est)
    return out
