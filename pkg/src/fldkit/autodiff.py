"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation eagerly computes its numpy result and, when gradients are
enabled, records its parents plus a backward closure.  Calling
``backward`` on a scalar loss walks that implicit tape once in reverse
topological order.  The tape is single-use per forward pass: a new
forward pass builds a new graph.

Conventions:
  - all data is contiguous float64, row-major;
  - images and feature maps are channels-last (H, W, C);
  - convolution kernels are (kh, kw, c_in, c_out);
  - logarithms floor their argument at ``LOG_FLOOR`` to stay finite on
    near-zero heatmap pixels.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LOG_FLOOR = 1e-12

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense float64 array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)   # ascontiguousarray promotes 0-d to 1-d
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict], None] | None = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data) if data.ndim > 0 else data
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- elementwise arithmetic (full numpy broadcasting internally) ---------

    def __add__(self, other):
        other = _as_tensor(other)
        data = self.data + other.data

        def bwd(g, acc):
            _accumulate(acc, self, _unbroadcast(g, self.data.shape))
            _accumulate(acc, other, _unbroadcast(g, other.data.shape))

        return Tensor._result(data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, acc):
            _accumulate(acc, self, -g)

        return Tensor._result(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        data = self.data * other.data

        def bwd(g, acc):
            _accumulate(acc, self, _unbroadcast(g * other.data, self.data.shape))
            _accumulate(acc, other, _unbroadcast(g * self.data, other.data.shape))

        return Tensor._result(data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        data = self.data / other.data

        def bwd(g, acc):
            _accumulate(acc, self, _unbroadcast(g / other.data, self.data.shape))
            _accumulate(acc, other, _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor._result(data, (self, other), bwd, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self):
        mask = self.data > 0.0

        def bwd(g, acc):
            _accumulate(acc, self, g * mask)

        return Tensor._result(np.where(mask, self.data, 0.0), (self,), bwd, "relu")

    def sigmoid(self):
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g, acc):
            _accumulate(acc, self, g * out * (1.0 - out))

        return Tensor._result(out, (self,), bwd, "sigmoid")

    def exp(self):
        out = np.exp(self.data)

        def bwd(g, acc):
            _accumulate(acc, self, g * out)

        return Tensor._result(out, (self,), bwd, "exp")

    def log(self):
        guarded = np.maximum(self.data, LOG_FLOOR)
        live = self.data > LOG_FLOOR

        def bwd(g, acc):
            _accumulate(acc, self, np.where(live, g / guarded, 0.0))

        return Tensor._result(np.log(guarded), (self,), bwd, "log")

    def sqrt(self):
        out = np.sqrt(self.data)

        def bwd(g, acc):
            _accumulate(acc, self, g / (2.0 * np.maximum(out, LOG_FLOOR)))

        return Tensor._result(out, (self,), bwd, "sqrt")

    def clamp_min(self, floor: float):
        live = self.data > floor

        def bwd(g, acc):
            _accumulate(acc, self, g * live)

        return Tensor._result(np.maximum(self.data, floor), (self,), bwd, "clamp_min")

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def bwd(g, acc):
            _accumulate(acc, self, g.reshape(old))

        return Tensor._result(self.data.reshape(shape), (self,), bwd, "reshape")

    @property
    def T(self):
        if self.data.ndim != 2:
            raise DimensionError(f"transpose expects rank 2, got shape {self.data.shape}")

        def bwd(g, acc):
            _accumulate(acc, self, g.T)

        return Tensor._result(self.data.T, (self,), bwd, "transpose")

    def slice_channels(self, lo: int, hi: int):
        if self.data.ndim != 3:
            raise DimensionError(f"slice_channels expects rank 3, got shape {self.data.shape}")

        def bwd(g, acc):
            full = np.zeros_like(self.data)
            full[:, :, lo:hi] = g
            _accumulate(acc, self, full)

        return Tensor._result(self.data[:, :, lo:hi], (self,), bwd, "slice_channels")

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bwd(g, acc):
            if axis is None:
                grad = np.broadcast_to(g, shape)
            else:
                axes = axis if isinstance(axis, tuple) else (axis,)
                gk = g if keepdims else np.expand_dims(g, axes)
                grad = np.broadcast_to(gk, shape)
            _accumulate(acc, self, grad)

        return Tensor._result(np.asarray(data), (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- backward sweep -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar loss; accumulates into ``grad`` of every
        requires_grad tensor reachable from it."""
        if self.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # sweep-local accumulator so repeated backward calls compose linearly
        acc: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g, acc)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(acc: dict, node: Tensor, g: np.ndarray) -> None:
    key = id(node)
    if key in acc:
        acc[key] = acc[key] + g
    else:
        acc[key] = g


# -- public operation surface ---------------------------------------------------


def backward(loss: Tensor) -> None:
    loss.backward()


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product with the standard reverse rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bwd(g, acc):
        _accumulate(acc, a, g @ b.data.T)
        _accumulate(acc, b, a.data.T @ g)

    return Tensor._result(data, (a, b), bwd, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor (max-shifted for stability)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects rank 2, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g, acc):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(acc, a, y * (g - dot))

    return Tensor._result(y, (a,), bwd, "softmax_rows")


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Pointwise operation dispatcher.

    Binary kinds require shapes to match exactly or one operand to be a
    scalar; richer broadcasting stays internal to the engine.
    """
    a = _as_tensor(a)
    unary = {"relu": Tensor.relu, "sigmoid": Tensor.sigmoid, "exp": Tensor.exp, "log": Tensor.log}
    if kind in unary:
        if b is not None:
            raise ContractError(f"'{kind}' takes a single operand")
        return unary[kind](a)
    if kind == "scale":
        if not isinstance(b, (int, float)):
            raise ContractError("'scale' expects a python scalar")
        return a * float(b)
    if kind in ("add", "mul"):
        if b is None:
            raise ContractError(f"'{kind}' requires two operands")
        bt = _as_tensor(b)
        if bt.data.shape != a.data.shape and bt.data.size != 1 and a.data.size != 1:
            raise DimensionError(f"'{kind}' got incompatible shapes {a.data.shape} and {bt.data.shape}")
        return a + bt if kind == "add" else a * bt
    raise ContractError(f"unknown elementwise kind '{kind}'")


# -- spatial operations -----------------------------------------------------------

_geometry_cache: dict[tuple, tuple[np.ndarray, int]] = {}


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int]:
    """Flat scatter indices mapping (out_pos, tap) -> padded input position."""
    key = (h, w, kh, kw, stride, padding)
    hit = _geometry_cache.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    di, dj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    rows = oi.reshape(-1, 1) * stride + di.reshape(1, -1)
    cols = oj.reshape(-1, 1) * stride + dj.reshape(1, -1)
    flat = (rows * wp + cols).reshape(-1)
    _geometry_cache[key] = (flat, wp * hp)
    return flat, wp * hp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (H, W, Cin) map with a (kh, kw, Cin, Cout) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects (H,W,Cin) and (kh,kw,Cin,Cout), got {x.data.shape} and {kernel.data.shape}")
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
        xp[padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    view = view[::stride, ::stride]                       # (ho, wo, cin, kh, kw)
    cols = view.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(ho, wo, cout)

    def bwd(g, acc):
        g2 = g.reshape(ho * wo, cout)
        if kernel.requires_grad or kernel._parents:
            _accumulate(acc, kernel, (cols.T @ g2).reshape(kernel.data.shape))
        if x.requires_grad or x._parents:
            gcols = (g2 @ k2.T).reshape(ho * wo, kh * kw, cin)
            flat, npix = _conv_geometry(h, w, kh, kw, stride, padding)
            gxp = np.zeros((npix, cin))
            np.add.at(gxp, flat, gcols.reshape(-1, cin))
            gxp = gxp.reshape(h + 2 * padding, w + 2 * padding, cin)
            _accumulate(acc, x, gxp[padding:padding + h, padding:padding + w])

    return Tensor._result(out, (x, kernel), bwd, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; output extent is (H-1)*stride + kh - 2*padding."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise DimensionError(f"conv_transpose2d channel mismatch: input has {cin}, kernel expects {kcin}")
    ho = (h - 1) * stride + kh - 2 * padding
    wo = (w - 1) * stride + kw - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d output extent {ho}x{wo} is empty")
    # scatter indices: (in_pos, tap) -> output position, -1 when clipped by padding
    oi = np.arange(h).reshape(-1, 1) * stride + np.arange(kh).reshape(1, -1) - padding   # (h, kh)
    oj = np.arange(w).reshape(-1, 1) * stride + np.arange(kw).reshape(1, -1) - padding   # (w, kw)
    rows = oi[:, None, :, None]
    cols = oj[None, :, None, :]
    valid = (rows >= 0) & (rows < ho) & (cols >= 0) & (cols < wo)
    flat = np.where(valid, rows * wo + cols, ho * wo).reshape(-1)      # trash slot at the end
    k2 = kernel.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    x2 = x.data.reshape(h * w, cin)
    spread = (x2 @ k2).reshape(h * w * kh * kw, cout)
    out = np.zeros((ho * wo + 1, cout))
    np.add.at(out, flat, spread)
    out = out[:-1].reshape(ho, wo, cout)

    def bwd(g, acc):
        gflat = np.concatenate([g.reshape(ho * wo, cout), np.zeros((1, cout))], axis=0)
        gspread = gflat[flat].reshape(h * w, kh * kw * cout)
        if x.requires_grad or x._parents:
            _accumulate(acc, x, (gspread @ k2.T).reshape(h, w, cin))
        if kernel.requires_grad or kernel._parents:
            gk = (x2.T @ gspread).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
            _accumulate(acc, kernel, gk)

    return Tensor._result(out, (x, kernel), bwd, "conv_transpose2d")


def pool2d(x: Tensor, kind: str, window: int, stride: int) -> Tensor:
    """Per-channel max or average pooling; max gradient routes to the first
    maximal element in row-major scan order."""
    x = _as_tensor(x)
    if kind not in ("max", "avg"):
        raise ContractError(f"pool kind must be 'max' or 'avg', got '{kind}'")
    if window < 1 or stride < 1:
        raise ContractError(f"pool window and stride must be >= 1, got {window}, {stride}")
    if x.data.ndim == 2:
        return pool2d(x.reshape(*x.data.shape, 1), kind, window, stride).reshape(
            (x.data.shape[0] - window) // stride + 1, (x.data.shape[1] - window) // stride + 1)
    h, w, c = x.data.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(0, 1))
    view = view[::stride, ::stride]                                   # (ho, wo, c, win, win)
    patches = view.transpose(0, 1, 3, 4, 2).reshape(ho * wo, window * window, c)
    flat, npix = _conv_geometry(h, w, window, window, stride, 0)
    if kind == "avg":
        out = patches.mean(axis=1).reshape(ho, wo, c)

        def bwd(g, acc):
            g2 = np.repeat(g.reshape(ho * wo, 1, c) / (window * window), window * window, axis=1)
            gx = np.zeros((npix, c))
            np.add.at(gx, flat, g2.reshape(-1, c))
            _accumulate(acc, x, gx.reshape(h, w, c))

    else:
        arg = patches.argmax(axis=1)                                   # first max in scan order
        out = np.take_along_axis(patches, arg[:, None, :], axis=1)[:, 0, :].reshape(ho, wo, c)

        def bwd(g, acc):
            g2 = np.zeros((ho * wo, window * window, c))
            np.put_along_axis(g2, arg[:, None, :], g.reshape(ho * wo, 1, c), axis=1)
            gx = np.zeros((npix, c))
            np.add.at(gx, flat, g2.reshape(-1, c))
            _accumulate(acc, x, gx.reshape(h, w, c))

    return Tensor._result(out, (x,), bwd, "pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    h, w, c = x.data.shape
    data = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)

    def bwd(g, acc):
        _accumulate(acc, x, g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)))

    return Tensor._result(data, (x,), bwd, "upsample_nearest")


# -- verification harness --------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and a
    central finite difference with the given step.

    ``f`` must be scalar-valued and deterministic; relative error per
    coordinate is |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError(f"finite difference step must be positive, got {step}")
    base = np.ascontiguousarray(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    with no_grad():
        y0 = f(Tensor(base.copy())).item()
        y1 = f(Tensor(base.copy())).item()
    if y0 != y1:
        raise ContractError("function is not deterministic: repeated evaluations disagree")
    probe = Tensor(base.copy(), requires_grad=True)
    f(probe).backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            up = f(Tensor(bumped.reshape(base.shape))).item()
            bumped[i] -= 2 * step
            dn = f(Tensor(bumped.reshape(base.shape))).item()
            fd = (up - dn) / (2 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
