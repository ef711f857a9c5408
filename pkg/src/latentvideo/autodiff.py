"""Dense float tensors with reverse-mode differentiation.

Values are stored row-major, 32-bit by default (reductions accumulate in
64-bit); pass ``dtype=np.float64`` at the leaves for tight gradient checks.
Tensors are immutable: every operation allocates a fresh node that records
its parent tensors plus one vector-Jacobian product per parent, and
:func:`gradient` replays the recorded graph in reverse.

There is no broadcasting beyond :func:`bias_add`; shape mismatches raise
:class:`ShapeError` with both shapes in the message.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradMap",
    "ShapeError",
    "gradient",
    "matmul",
    "transpose",
    "bias_add",
    "conv2d",
    "conv_transpose2d",
    "concat",
    "stack",
    "take",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "l1",
    "sq_l2",
    "mean",
    "downsample2",
    "upsample2",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """A dense array node in the differentiation graph.

    Leaves are built straight from array data; operation results carry
    ``parents`` and matching ``vjps`` closures. The wrapped array must be
    treated as read-only.
    """

    __slots__ = ("data", "parents", "vjps")

    def __init__(self, data, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.parents: tuple[Tensor, ...] = ()
        self.vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @classmethod
    def _node(cls, data, parents, vjps) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.parents = parents
        t.vjps = vjps
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else "node"
        return f"Tensor({kind}, shape={self.shape}, dtype={self.data.dtype})"


GradMap = dict[str, Tensor]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# pointwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._node(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._node(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor._node(
        a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data)
    )


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._node(x.data * s, (x,), (lambda g: g * s,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._node(y, (x,), (lambda g: g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-branch logistic; output lies strictly in (0, 1).
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype)
    return Tensor._node(y, (x,), (lambda g: g * (y * (1.0 - y)),))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at exactly 0
    return Tensor._node(y, (x,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out = a.data @ b.data
        return Tensor._node(
            out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g)
        )
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out = a.data @ b.data
        return Tensor._node(
            out, (a, b), (lambda g: np.outer(g, b.data), lambda g: a.data.T @ g)
        )
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        out = a.data @ b.data
        return Tensor._node(
            out, (a, b), (lambda g: b.data @ g, lambda g: np.outer(a.data, g))
        )
    raise ShapeError(f"matmul: unsupported ranks {a.shape} x {b.shape}")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return Tensor._node(x.data.T, (x,), (lambda g: g.T,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector bias: per-element for 1-D/2-D rows, per-channel for images."""
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be a vector, got shape {b.shape}")
    n = b.shape[0]
    if x.ndim == 1 and x.shape[0] == n:
        return Tensor._node(x.data + b.data, (x, b), (lambda g: g, lambda g: g))
    if x.ndim == 2 and x.shape[1] == n:
        return Tensor._node(
            x.data + b.data, (x, b), (lambda g: g, lambda g: g.sum(axis=0))
        )
    if x.ndim == 3 and x.shape[0] == n:
        return Tensor._node(
            x.data + b.data[:, None, None],
            (x, b),
            (lambda g: g, lambda g: g.sum(axis=(1, 2))),
        )
    if x.ndim == 4 and x.shape[1] == n:
        return Tensor._node(
            x.data + b.data[None, :, None, None],
            (x, b),
            (lambda g: g, lambda g: g.sum(axis=(0, 2, 3))),
        )
    raise ShapeError(f"bias_add: shapes {x.shape} and {b.shape} do not match")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    old = x.shape
    return Tensor._node(x.data.reshape(shape), (x,), (lambda g: g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(
                f"concat: ranks differ ({tensors[0].shape} vs {t.shape})"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * nd
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return Tensor._node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"stack: shapes {base} and {t.shape} do not match")
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def take(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along ``axis``, dropping that axis."""
    n = x.shape[axis]
    if not 0 <= index < n:
        raise ShapeError(f"take: index {index} out of range for axis {axis} of {x.shape}")

    def vjp(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        idx = [slice(None)] * x.ndim
        idx[axis] = index
        out[tuple(idx)] = g
        return out

    return Tensor._node(np.take(x.data, index, axis=axis), (x,), (vjp,))


# ---------------------------------------------------------------------------
# convolutions
#
# conv2d weights are (C_out, C_in, k, k); conv_transpose2d weights are
# (C_in, C_out, k, k). Images are (C, H, W) or batched (N, C, H, W).
# Zero padding; transposed output extent is (in - 1) * stride - 2 * pad + k.


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    w = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    k = w.shape[2]
    win = _windows(_pad_hw(x, padding), k, stride)
    out = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_transpose_forward(
    x: np.ndarray, w: np.ndarray, stride: int, padding: int, extra: tuple[int, int] = (0, 0)
) -> np.ndarray:
    # `extra` grows the bottom/right output edge; the conv2d adjoint needs it
    # when the forward window grid did not divide the input evenly.
    n, ci, h, wd = x.shape
    k = w.shape[2]
    edge = k - 1 - padding
    hd, wdd = (h - 1) * stride + 1, (wd - 1) * stride + 1
    xd = np.zeros(
        (n, ci, hd + 2 * edge + extra[0], wdd + 2 * edge + extra[1]), dtype=x.dtype
    )
    xd[:, :, edge : edge + hd : stride, edge : edge + wdd : stride] = x
    win = _windows(xd, k, 1)
    wf = w[:, :, ::-1, ::-1]
    out = np.tensordot(win, wf, axes=((1, 4, 5), (0, 2, 3)))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _image_op(x: Tensor, forward, vjp_4d):
    """Run a 4-D image op, accepting (C,H,W) by round-tripping a batch axis."""
    if x.ndim == 3:
        out = forward(x.data[None])
        return Tensor._node(out[0], (x,), (lambda g: vjp_4d(g[None])[0],))
    if x.ndim == 4:
        return Tensor._node(forward(x.data), (x,), (vjp_4d,))
    raise ShapeError(f"expected an image of rank 3 or 4, got shape {x.shape}")


def _check_conv_args(x: Tensor, w: Tensor, stride: int, padding: int, transposed: bool):
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv: weight must be (C,C,k,k), got {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv: invalid stride={stride} padding={padding}")
    k = w.shape[2]
    if padding > k - 1:
        raise ValueError(f"conv: padding {padding} exceeds kernel-1 ({k - 1})")
    cin = w.shape[1] if not transposed else w.shape[0]
    ch_axis = 0 if x.ndim == 3 else 1
    if x.ndim not in (3, 4) or x.shape[ch_axis] != cin:
        raise ShapeError(f"conv: input {x.shape} does not match weight {w.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_args(x, w, stride, padding, transposed=False)
    k = w.shape[2]
    wd = w.data
    squeeze = x.ndim == 3
    h, wid = x.shape[-2], x.shape[-1]
    if h + 2 * padding < k or wid + 2 * padding < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {k}")

    remainders = ((h + 2 * padding - k) % stride, (wid + 2 * padding - k) % stride)

    def vjp_x(g):
        return _conv_transpose_forward(g, wd, stride, padding, extra=remainders)

    def vjp_w(g):
        xd = x.data[None] if squeeze else x.data
        win = _windows(_pad_hw(xd, padding), k, stride)
        return np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))

    if squeeze:
        out = _conv_forward(x.data[None], wd, stride, padding)
        return Tensor._node(out[0], (x, w), (lambda g: vjp_x(g[None])[0], lambda g: vjp_w(g[None])))
    return Tensor._node(_conv_forward(x.data, wd, stride, padding), (x, w), (vjp_x, vjp_w))


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_args(x, w, stride, padding, transposed=True)
    k = w.shape[2]
    wd = w.data
    squeeze = x.ndim == 3

    def vjp_x(g):
        return _conv_forward(g, wd, stride, padding)

    def vjp_w(g):
        xd = x.data[None] if squeeze else x.data
        win = _windows(_pad_hw(g, padding), k, stride)
        return np.tensordot(xd, win, axes=((0, 2, 3), (0, 2, 3)))

    if squeeze:
        out = _conv_transpose_forward(x.data[None], wd, stride, padding)
        return Tensor._node(out[0], (x, w), (lambda g: vjp_x(g[None])[0], lambda g: vjp_w(g[None])))
    out = _conv_transpose_forward(x.data, wd, stride, padding)
    return Tensor._node(out, (x, w), (vjp_x, vjp_w))


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation, scalar output in the input dtype)


def _scalar(x: Tensor, value64: float) -> np.ndarray:
    return np.asarray(value64, dtype=x.dtype)


def _check_nonempty(x: Tensor, op: str) -> None:
    if x.data.size == 0:
        raise ShapeError(f"{op}: empty tensor")


def l1(x: Tensor) -> Tensor:
    _check_nonempty(x, "l1")
    out = _scalar(x, np.sum(np.abs(x.data), dtype=np.float64))
    return Tensor._node(out, (x,), (lambda g: g * np.sign(x.data),))


def sq_l2(x: Tensor) -> Tensor:
    _check_nonempty(x, "sq_l2")
    d64 = x.data.astype(np.float64, copy=False)
    out = _scalar(x, np.sum(np.square(d64)))
    return Tensor._node(out, (x,), (lambda g: g * (2.0 * x.data),))


def mean(x: Tensor) -> Tensor:
    _check_nonempty(x, "mean")
    n = x.data.size
    out = _scalar(x, np.sum(x.data, dtype=np.float64) / n)
    return Tensor._node(out, (x,), (lambda g: np.full(x.shape, g / n, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# pyramid resampling
#
# Blur is the binomial [1,4,6,4,1]/16 applied separably with mirrored
# borders; downsampling decimates by 2 after the blur, upsampling inserts
# zeros then applies the same blur scaled by 2 (so constants are preserved
# in both directions). Realized as cached per-length operator matrices so
# the adjoint is just the transpose.

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_resample_cache: dict[tuple, np.ndarray] = {}


def _reflect(j: int, n: int) -> int:
    while j < 0 or j >= n:
        j = -j if j < 0 else 2 * (n - 1) - j
    return j


def _blur_matrix(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    for i in range(n):
        for t in range(-2, 3):
            m[i, _reflect(i + t, n)] += _BINOMIAL[t + 2]
    return m


def _resample_matrix(n: int, kind: str, dtype) -> np.ndarray:
    key = (n, kind, np.dtype(dtype).str)
    got = _resample_cache.get(key)
    if got is None:
        if kind == "down":
            got = _blur_matrix(n)[::2, :]
        else:
            got = 2.0 * _blur_matrix(2 * n)[:, ::2]
        got = np.ascontiguousarray(got, dtype=dtype)
        got.flags.writeable = False
        _resample_cache[key] = got
    return got


def _apply_hw(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    y = x @ mw.T
    y = np.swapaxes(np.swapaxes(y, -1, -2) @ mh.T, -1, -2)
    return np.ascontiguousarray(y)


def _resample_op(x: Tensor, kind: str) -> Tensor:
    if x.ndim not in (3, 4):
        raise ShapeError(f"resample: expected an image of rank 3 or 4, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if kind == "down" and (h % 2 or w % 2):
        raise ShapeError(f"downsample2: spatial extents must be even, got {h}x{w}")
    mh = _resample_matrix(h, kind, x.dtype)
    mw = _resample_matrix(w, kind, x.dtype)
    out = _apply_hw(x.data, mh, mw)
    mh_t = np.ascontiguousarray(mh.T)
    mw_t = np.ascontiguousarray(mw.T)
    return Tensor._node(out, (x,), (lambda g: _apply_hw(g, mh_t, mw_t),))


def downsample2(x: Tensor) -> Tensor:
    """Blur then decimate by 2 along both spatial axes."""
    return _resample_op(x, "down")


def upsample2(x: Tensor) -> Tensor:
    """Zero-insert then blur, doubling both spatial axes."""
    return _resample_op(x, "up")


# ---------------------------------------------------------------------------
# reverse-mode gradients


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents precede children


def gradient(loss: Tensor, params: Mapping[str, Tensor]) -> GradMap:
    """Exact reverse-mode derivatives of a scalar loss for named leaf params.

    Parameters that do not participate in the loss graph get zero
    gradients. Passing a non-leaf tensor as a parameter is an error.
    """
    if loss.shape != ():
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
    for name, p in params.items():
        if not isinstance(p, Tensor) or not p.is_leaf:
            raise ValueError(f"gradient: parameter {name!r} is not a registered leaf tensor")

    order = _topo_order(loss)
    param_ids = {id(p) for p in params.values()}
    needed: set[int] = set()
    for node in order:
        if id(node) in param_ids or any(id(q) in needed for q in node.parents):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if id(parent) not in needed:
                continue
            pg = vjp(g)
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"gradient: internal shape mismatch {pg.shape} vs {parent.shape}"
                )
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    out: GradMap = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        out[name] = Tensor(np.ascontiguousarray(g), dtype=p.dtype)
    return out
