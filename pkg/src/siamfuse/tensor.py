"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation builds a node holding its inputs and a backward closure.
Calling ``backward()`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every node that asked for
them. The op set is deliberately small: exactly what a Siamese tracker with
attention modules needs (dense/conv layers, pooling, depthwise correlation,
row softmax, gathers, and the loss primitives).

Design constraints:
  * float64 only; shapes are explicit, no broadcasting beyond scalar-vs-array
    in the elementwise ops.
  * deterministic: no global RNG, no threading.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class ContractError(ValueError):
    """An operation was used outside its contract (bad labels, non-scalar backward, ...)."""


class NumericsError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional gradient and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff entry point --------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no grad-requiring ancestors")
        order = topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"add: {self.shape} vs {other.shape}")
            data = self.data + other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g)

            return Tensor._node(data, (self, other), bw)
        c = float(other)
        data = self.data + c

        def bw_const(g, a=self):
            if a.requires_grad:
                a._accumulate(g)

        return Tensor._node(data, (self,), bw_const)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._node(-self.data, (self,), bw)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"sub: {self.shape} vs {other.shape}")
            data = self.data - other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(-g)

            return Tensor._node(data, (self, other), bw)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"mul: {self.shape} vs {other.shape}")
            data = self.data * other.data

            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g * b.data)
                if b.requires_grad:
                    b._accumulate(g * a.data)

            return Tensor._node(data, (self, other), bw)
        c = float(other)
        data = self.data * c

        def bw_const(g, a=self, c=c):
            if a.requires_grad:
                a._accumulate(g * c)

        return Tensor._node(data, (self,), bw_const)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new = np.reshape(self.data, shape)
        old_shape = self.data.shape

        def bw(g, a=self, old=old_shape):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return Tensor._node(new, (self,), bw)

    def transpose2d(self):
        if self.data.ndim != 2:
            raise ShapeError(f"transpose2d needs 2 dims, got {self.shape}")

        def bw(g, a=self):
            if a.requires_grad:
                a._accumulate(g.T)

        return Tensor._node(self.data.T.copy(), (self,), bw)

    # -- nonlinearity / reductions -------------------------------------------------

    def relu(self):
        mask = self.data > 0.0
        data = np.where(mask, self.data, 0.0)

        def bw(g, a=self, mask=mask):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._node(data, (self,), bw)

    def sum(self):
        data = np.asarray(self.data.sum())

        def bw(g, a=self):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, float(g)))

        return Tensor._node(data, (self,), bw)

    def mean(self):
        if self.data.size == 0:
            raise ShapeError("mean of an empty tensor")
        return self.sum() * (1.0 / self.data.size)

    def take(self, idx):
        """Gather from the flattened tensor; output has idx's shape."""
        idx = np.asarray(idx, dtype=np.int64)
        flat = self.data.reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
            raise ShapeError(f"take: index out of range for size {flat.size}")
        data = flat[idx]

        def bw(g, a=self, idx=idx):
            if a.requires_grad:
                buf = np.zeros(a.data.size)
                np.add.at(buf, idx.reshape(-1), g.reshape(-1))
                a._accumulate(buf.reshape(a.data.shape))

        return Tensor._node(data, (self,), bw)


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root``; each node appears once."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._node(data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map: x @ w (+ b added to every row)."""
    out = matmul(x, w)
    if b is None:
        return out
    if b.data.ndim != 1 or b.shape[0] != out.shape[1]:
        raise ShapeError(f"linear bias shape {b.shape} vs output {out.shape}")
    data = out.data + b.data[None, :]

    def bw(g, a=out, b=b):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor._node(data, (out, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor (max-shifted for stability)."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs 2 dims, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g, a=x, y=y):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a._accumulate((g - dot) * y)

    return Tensor._node(y, (x,), bw)


# -- convolution / pooling / correlation -------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip): x [Cin,H,W], w [Cout,Cin,kh,kw]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: channel mismatch {cin} vs {cin_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wd, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [Cin, ho, wo, kh, kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T).T.reshape(cout, ho, wo)

    def bw(g, x=x, w=w, cols=cols, w2=w2, dims=(cin, h, wd, cout, kh, kw, stride, padding, ho, wo)):
        cin, h, wd, cout, kh, kw, stride, padding, ho, wo = dims
        g2 = g.reshape(cout, ho * wo).T  # [ho*wo, cout]
        if w.requires_grad:
            gw = g2.T @ cols
            w._accumulate(gw.reshape(cout, cin, kh, kw))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(ho, wo, cin, kh, kw)
            gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, i, j
                    ].transpose(2, 0, 1)
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + wd]
            x._accumulate(gxp)

    return Tensor._node(out, (x, w), bw)


def channel_bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a [C,H,W] map."""
    if x.data.ndim != 3 or b.data.ndim != 1 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"channel_bias_add: x {x.shape}, b {b.shape}")
    data = x.data + b.data[:, None, None]

    def bw(g, x=x, b=b):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return Tensor._node(data, (x, b), bw)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd row/col is dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d needs [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d: spatial extent too small {x.shape}")
    ho, wo = h // 2, w // 2
    xc = x.data[:, : ho * 2, : wo * 2]
    x4 = xc.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    idx = x4.argmax(axis=-1)
    out = np.take_along_axis(x4, idx[..., None], axis=-1)[..., 0]

    def bw(g, x=x, idx=idx, dims=(c, h, w, ho, wo)):
        c, h, w, ho, wo = dims
        if x.requires_grad:
            g4 = np.zeros((c, ho, wo, 4))
            np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
            gx = np.zeros((c, h, w))
            gx[:, : ho * 2, : wo * 2] = (
                g4.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho * 2, wo * 2)
            )
            x._accumulate(gx)

    return Tensor._node(out, (x,), bw)


def depthwise_correlate(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel valid cross-correlation of template over search.

    search [C,Hx,Wx], template [C,hz,wz] with hz<=Hx, wz<=Wx; output
    [C, Hx-hz+1, Wx-wz+1]. Channel c of the output only sees channel c
    of both inputs.
    """
    if search.data.ndim != 3 or template.data.ndim != 3:
        raise ShapeError(f"depthwise_correlate: {search.shape} vs {template.shape}")
    c, hx, wx = search.shape
    ct, hz, wz = template.shape
    if c != ct:
        raise ShapeError(f"depthwise_correlate: channel mismatch {c} vs {ct}")
    if hz > hx or wz > wx:
        raise ShapeError(f"depthwise_correlate: template {template.shape} larger than search {search.shape}")
    win = np.lib.stride_tricks.sliding_window_view(search.data, (hz, wz), axis=(1, 2))
    out = np.einsum("chwij,cij->chw", win, template.data)

    def bw(g, search=search, template=template, win=win, dims=(hz, wz)):
        hz, wz = dims
        if template.requires_grad:
            template._accumulate(np.einsum("chw,chwij->cij", g, win))
        if search.requires_grad:
            ho, wo = g.shape[1], g.shape[2]
            gx = np.zeros_like(search.data)
            for i in range(hz):
                for j in range(wz):
                    gx[:, i : i + ho, j : j + wo] += g * template.data[:, i, j][:, None, None]
            search._accumulate(gx)

    return Tensor._node(out, (search, template), bw)


# -- loss primitives -----------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax vs integer class labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N,K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} vs ({n},)")
    if n == 0:
        raise ContractError("softmax_cross_entropy: no rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"softmax_cross_entropy: labels outside [0,{k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(n), labels]).mean())

    def bw(g, logits=logits, labels=labels, z=z, n=n):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(p * (float(g) / n))

    return Tensor._node(np.asarray(loss), (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits vs targets in [0,1]."""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs {targets.shape}")
    if logits.data.size == 0:
        raise ContractError("bce_with_logits: empty input")
    if targets.min() < 0.0 or targets.max() > 1.0:
        raise ContractError("bce_with_logits: targets must lie in [0,1]")
    z = logits.data
    # max(z,0) - z*t + log(1+exp(-|z|)): stable for any z
    loss = float((np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean())

    def bw(g, logits=logits, targets=targets):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-logits.data))
            logits._accumulate((sig - targets) * (float(g) / logits.data.size))

    return Tensor._node(np.asarray(loss), (logits,), bw)


# -- gradient checking -----------------------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    n_coords: int
    worst_index: tuple[int, ...] | None = None

    def __bool__(self) -> bool:
        return self.passed


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray, h: float, tol: float) -> GradCheckResult:
    """Pointwise relative comparison with an absolute floor of tol*h.

    A coordinate passes if |a-n| <= tol*max(|a|,|n|) or |a-n| <= tol*h.
    The floor keeps dead coordinates (true gradient 0, FD noise ~h^2)
    from producing meaningless relative errors.
    """
    if analytic.shape != numeric.shape:
        raise ShapeError(f"compare_gradients: {analytic.shape} vs {numeric.shape}")
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.maximum(scale, 1e-300), 0.0)
    ok = (diff <= tol * scale) | (diff <= tol * h)
    effective = np.where(ok, 0.0, rel)
    if analytic.size == 0:
        return GradCheckResult(True, 0.0, 0)
    worst_flat = int(np.argmax(effective))
    worst = np.unravel_index(worst_flat, analytic.shape)
    max_rel = float(rel.reshape(-1)[worst_flat]) if not ok.all() else float(rel.max(initial=0.0))
    return GradCheckResult(bool(ok.all()), max_rel, analytic.size, tuple(int(i) for i in worst))


def grad_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4) -> GradCheckResult:
    """Compare f's analytic gradient at x against central finite differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. x is not
    modified; a fresh leaf is built for the analytic pass.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(base)).item()
        flat[i] = orig - h
        lo = f(Tensor(base)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * h)
    return compare_gradients(analytic, numeric, h, tol)


# -- optimizer ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    lr_start: float = 0.005
    lr_end: float = 0.0005
    total_epochs: int = 50
    momentum: float = 0.9
    max_grad_norm: float | None = 10.0  # global-norm clip; None disables

    def lr_at(self, epoch: int) -> float:
        """Log-space interpolation hitting lr_start at 0 and lr_end at the last epoch."""
        if not 0 <= epoch < self.total_epochs:
            raise ContractError(f"epoch {epoch} outside [0,{self.total_epochs})")
        if self.total_epochs == 1 or epoch == 0:
            return self.lr_start
        if epoch == self.total_epochs - 1:
            return self.lr_end
        t = epoch / (self.total_epochs - 1)
        return math.exp(math.log(self.lr_start) * (1.0 - t) + math.log(self.lr_end) * t)


class SGD:
    """SGD with classic momentum: v <- m*v + g, p <- p - lr(epoch)*v."""

    def __init__(self, params: dict[str, Tensor], cfg: SgdConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, epoch: int, skip: set[str] | frozenset[str] = frozenset()) -> None:
        """Apply one update. Params in ``skip`` are left untouched (velocity too)."""
        lr = self.cfg.lr_at(epoch)
        m = self.cfg.momentum
        active = []
        for name, p in self.params.items():
            if name in skip or p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            active.append((name, p))
        scale = 1.0
        if self.cfg.max_grad_norm is not None:
            total = float(np.sqrt(sum((p.grad ** 2).sum() for _, p in active)))
            if total > self.cfg.max_grad_norm:
                scale = self.cfg.max_grad_norm / total
        for name, p in active:
            v = self.velocity[name]
            v *= m
            v += scale * p.grad
            p.data -= lr * v


# -- checkpoint I/O ------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write parameters to versioned JSON. Round-trips float64 exactly."""
    blob = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        blob = json.load(fh)
    version = blob.get("version")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version!r} (want {CHECKPOINT_VERSION})")
    params = {}
    for name, entry in blob["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, blob.get("meta", {})
