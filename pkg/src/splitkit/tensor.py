"""A small reverse-mode automatic differentiation engine on float32 numpy arrays.

Every operation returns a new :class:`Tensor`; when any input participates in
gradient tracking, the output carries a backward closure plus references to its
parents, forming an implicit tape.  ``backward(loss)`` walks that tape once in
reverse topological order and accumulates gradients additively, so a value used
k times receives k contributions.  Operations whose inputs are all untracked
record nothing — a frozen sub-network therefore runs as plain numpy math with
no graph bookkeeping at all.

Data is float32 throughout; float64 appears only inside the finite-difference
oracle (:func:`grad_check`), never in forward or backward compute.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class Tensor:
    """float32 array plus optional gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[Array], None] | None = None

    # -- conveniences -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _result(data: Array, parents: Sequence[Tensor], bwd: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def _accum(t: Tensor, g: Array) -> None:
    # Untracked tensors never allocate a grad buffer.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _ew_accum(t: Tensor, g: Array) -> None:
    # Elementwise ops allow a scalar on one side; its grad is the total sum.
    if t.data.shape == g.shape:
        _accum(t, g)
    else:
        _accum(t, np.sum(g, dtype=np.float32).reshape(t.data.shape))


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match "
            "(only scalar-with-tensor mixing is supported)"
        )


# -- graph traversal ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; accumulates into ``.grad`` buffers."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")

    # Iterative post-order DFS; recursion would overflow on deep graphs.
    topo: list[Tensor] = []
    visited = {id(loss)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            topo.append(node)
            stack.pop()

    if loss.grad is None:
        loss.grad = np.ones((), dtype=np.float32)
    else:
        loss.grad = loss.grad + np.ones((), dtype=np.float32)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def stop_gradient(x: Tensor) -> Tensor:
    """Detach from the graph; shares the underlying buffer bit-for-bit."""
    return Tensor(x.data)


# -- elementwise and arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    out = a.data + b.data

    def bwd(g: Array) -> None:
        _ew_accum(a, g)
        _ew_accum(b, g)

    return _result(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    out = a.data - b.data

    def bwd(g: Array) -> None:
        _ew_accum(a, g)
        _ew_accum(b, -g)

    return _result(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g: Array) -> None:
        _accum(a, -g)

    return _result(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    out = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _ew_accum(a, g * b.data)
        if b.requires_grad:
            _ew_accum(b, g * a.data)

    return _result(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or batched over one identical leading axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ValueError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map for 2-D inputs: x @ w + b, bias summed over rows on backward."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data

    def bwd(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bwd)


# -- shape manipulation -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = np.reshape(x.data, shape)  # view whenever layout allows

    def bwd(g: Array) -> None:
        _accum(x, g.reshape(x.data.shape))

    return _result(out, (x,), bwd)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g: Array) -> None:
        _accum(x, np.transpose(g, inverse))

    return _result(out, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g: Array) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[index] = g
            _accum(x, gx)

    return _result(x.data[index], (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g: Array) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(index)])
            offset += n

    return _result(out, tuple(parts), bwd)


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, dtype=np.float32)

    def bwd(g: Array) -> None:
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _result(out, (x,), bwd)


def tmean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, dtype=np.float32)
    count = x.data.size if axis is None else x.data.size // out.size

    def bwd(g: Array) -> None:
        scale = np.float32(1.0 / count)
        if axis is None:
            _accum(x, np.broadcast_to(g * scale, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g * scale, axis), x.data.shape))

    return _result(out, (x,), bwd)


# -- neural-net primitives -----------------------------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-channel affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layernorm: affine parameters must match the last axis")
    mu = x.data.mean(-1, keepdims=True, dtype=np.float32)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float32)
    inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g: Array) -> None:
        if x.requires_grad:
            gg = g * gamma.data
            m1 = gg.mean(-1, keepdims=True, dtype=np.float32)
            m2 = np.mean(gg * xhat, axis=-1, keepdims=True, dtype=np.float32)
            _accum(x, inv * (gg - m1 - xhat * m2))
        if gamma.requires_grad:
            _accum(gamma, np.sum(g * xhat, axis=lead, dtype=np.float32))
        if beta.requires_grad:
            _accum(beta, np.sum(g, axis=lead, dtype=np.float32))

    return _result(out, (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float32)

    def bwd(g: Array) -> None:
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float32)
        _accum(x, y * (g - dot))

    return _result(y, (x,), bwd)


_GELU_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_GELU_K = np.float32(0.044715)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation (smooth, fully in float32)."""
    x = _as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + _GELU_K * xd * xd * xd)
    t = np.tanh(u)
    out = np.float32(0.5) * xd * (np.float32(1.0) + t)

    def bwd(g: Array) -> None:
        du = _GELU_C * (np.float32(1.0) + np.float32(3.0) * _GELU_K * xd * xd)
        local = np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * xd * (np.float32(1.0) - t * t) * du
        _accum(x, g * local)

    return _result(out, (x,), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on height-width-channel maps via im2col.

    ``x`` is (H, W, Cin); ``w`` is (kh, kw, Cin, Cout).
    """
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {p}")

    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((Ho, Wo, kh * kw * cin), dtype=np.float32)
    tap = 0
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, tap * cin:(tap + 1) * cin] = xp[ky:ky + (Ho - 1) * s + 1:s, kx:kx + (Wo - 1) * s + 1:s, :]
            tap += 1
    colm = cols.reshape(Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = colm @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(Ho, Wo, cout)

    def bwd(g: Array) -> None:
        gflat = g.reshape(Ho * Wo, cout)
        if w.requires_grad:
            _accum(w, (colm.T @ gflat).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, gflat.sum(0))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(Ho, Wo, kh * kw * cin)
            gxp = np.zeros_like(xp)
            tap = 0
            for ky in range(kh):
                for kx in range(kw):
                    gxp[ky:ky + (Ho - 1) * s + 1:s, kx:kx + (Wo - 1) * s + 1:s, :] += \
                        gcols[:, :, tap * cin:(tap + 1) * cin]
                    tap += 1
            _accum(x, gxp[p:p + H, p:p + W] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """2-D transposed convolution (no padding): upsamples (H, W, Cin) maps."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2]:
        raise ValueError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    s = int(stride)
    Ho, Wo = (H - 1) * s + kh, (W - 1) * s + kw
    xflat = x.data.reshape(H * W, cin)
    out = np.zeros((Ho, Wo, cout), dtype=np.float32)
    for ky in range(kh):
        for kx in range(kw):
            contrib = (xflat @ w.data[ky, kx]).reshape(H, W, cout)
            out[ky:ky + (H - 1) * s + 1:s, kx:kx + (W - 1) * s + 1:s, :] += contrib
    if b is not None:
        out = out + b.data

    def bwd(g: Array) -> None:
        for ky in range(kh):
            for kx in range(kw):
                gslice = g[ky:ky + (H - 1) * s + 1:s, kx:kx + (W - 1) * s + 1:s, :].reshape(H * W, cout)
                if x.requires_grad:
                    _accum(x, (gslice @ w.data[ky, kx].T).reshape(H, W, cin))
                if w.requires_grad:
                    gw = np.zeros_like(w.data)
                    gw[ky, kx] = xflat.T @ gslice
                    _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, np.sum(g, axis=(0, 1), dtype=np.float32))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first window slot."""
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x2: spatial dims must be even, got {H}x{W}")
    H2, W2 = H // 2, W // 2
    r = x.data.reshape(H2, 2, W2, 2, C).transpose(0, 2, 4, 1, 3).reshape(H2, W2, C, 4)
    idx = r.argmax(-1)
    out = np.take_along_axis(r, idx[..., None], -1)[..., 0]

    def bwd(g: Array) -> None:
        gr = np.zeros((H2, W2, C, 4), dtype=np.float32)
        np.put_along_axis(gr, idx[..., None], g[..., None], -1)
        _accum(x, gr.reshape(H2, W2, C, 2, 2).transpose(0, 3, 1, 4, 2).reshape(H, W, C))

    return _result(out, (x,), bwd)


# -- bilinear sampling ---------------------------------------------------------


def bilinear_gather(fmap: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample (H, W, C) at fractional points; out-of-range neighbors read zero.

    ``ys``/``xs`` are flat coordinate tensors of shape (P,); output is (P, C).
    Differentiable in the map and in both coordinate tensors.
    """
    fmap, ys, xs = _as_tensor(fmap), _as_tensor(ys), _as_tensor(xs)
    if fmap.ndim != 3 or ys.shape != xs.shape or ys.ndim != 1:
        raise ValueError("bilinear_gather: expected (H,W,C) map and flat matching coordinate arrays")
    H, W, C = fmap.shape
    y, x = ys.data, xs.data
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy = (y - y0)[:, None]
    wx = (x - x0)[:, None]
    y0i, x0i = y0.astype(np.int64), x0.astype(np.int64)

    def corner(yi: Array, xi: Array) -> Array:
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        v = fmap.data[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        return np.where(valid[:, None], v, np.float32(0.0))

    v00 = corner(y0i, x0i)
    v01 = corner(y0i, x0i + 1)
    v10 = corner(y0i + 1, x0i)
    v11 = corner(y0i + 1, x0i + 1)
    out = ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
           + wy * (1 - wx) * v10 + wy * wx * v11).astype(np.float32)

    def bwd(g: Array) -> None:
        if fmap.requires_grad:
            # One bincount pass over all four corners beats np.add.at by a wide
            # margin; accumulation order is fixed, so grads stay deterministic.
            cell_parts, grad_parts = [], []
            for yi, xi, wgt in (
                (y0i, x0i, (1 - wy) * (1 - wx)),
                (y0i, x0i + 1, (1 - wy) * wx),
                (y0i + 1, x0i, wy * (1 - wx)),
                (y0i + 1, x0i + 1, wy * wx),
            ):
                valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
                cell_parts.append(yi[valid] * W + xi[valid])
                grad_parts.append((wgt * g)[valid])
            cells = np.concatenate(cell_parts)
            grads = np.concatenate(grad_parts, axis=0)
            flat = (cells[:, None] * C + np.arange(C, dtype=np.int64)).ravel()
            gm = np.bincount(flat, weights=grads.ravel(), minlength=H * W * C)
            _accum(fmap, gm.reshape(H, W, C).astype(np.float32))
        if ys.requires_grad or xs.requires_grad:
            top = (1 - wx) * v00 + wx * v01
            bottom = (1 - wx) * v10 + wx * v11
            left = (1 - wy) * v00 + wy * v10
            right = (1 - wy) * v01 + wy * v11
            if ys.requires_grad:
                _accum(ys, np.sum(g * (bottom - top), axis=-1, dtype=np.float32))
            if xs.requires_grad:
                _accum(xs, np.sum(g * (right - left), axis=-1, dtype=np.float32))

    return _result(out, (fmap, ys, xs), bwd)


def bilinear_sample(fmap: Tensor, y, x) -> Tensor:
    """Single-point bilinear read of an (H, W, C) map; returns shape (C,)."""
    ys = y if isinstance(y, Tensor) else Tensor([float(y)])
    xs = x if isinstance(x, Tensor) else Tensor([float(x)])
    if ys.shape == ():
        ys = reshape(ys, (1,))
    if xs.shape == ():
        xs = reshape(xs, (1,))
    picked = bilinear_gather(fmap, ys, xs)
    return reshape(picked, (fmap.shape[-1],))


# -- losses ---------------------------------------------------------------------


def cross_entropy_mean(logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer labels (N,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy_mean: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("cross_entropy_mean: label out of range")
    z = logits.data
    zmax = z.max(1, keepdims=True)
    e = np.exp(z - zmax)
    sume = e.sum(1, keepdims=True, dtype=np.float32)
    lse = zmax[:, 0] + np.log(sume[:, 0])
    nll = lse - z[np.arange(n), labels]
    out = np.float32(nll.mean(dtype=np.float32))

    def bwd(g: Array) -> None:
        p = e / sume
        p[np.arange(n), labels] -= np.float32(1.0)
        _accum(logits, (g * p) * np.float32(1.0 / n))

    return _result(out, (logits,), bwd)


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between same-shape tensors."""
    d = sub(a, b)
    return tmean(mul(d, d))


# -- finite-difference oracle ----------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between backward() and central differences.

    The probe perturbs one element at a time; differences are accumulated in
    float64 while every function evaluation stays float32.  Relative error per
    element is |a - n| / max(|a|, |n|, 1e-8).
    """
    out = f(x)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ValueError("grad_check requires a scalar-valued function of x")
    x.grad = None
    if out.requires_grad:
        backward(out)
    analytic = (np.zeros_like(x.data) if x.grad is None else x.grad).astype(np.float64).reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    feps = np.float32(eps)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(orig + feps)
        lo = np.float32(orig - feps)
        flat[i] = hi
        fp = float(f(x).data)
        flat[i] = lo
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (float(hi) - float(lo))

    if np.isnan(analytic).any() or np.isnan(numeric).any():
        raise FloatingPointError("grad_check: NaN encountered in analytic or numeric gradients")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
