"""Differentiable numeric building blocks on numpy arrays.

A small reverse-mode tape: `Tensor` wraps an ndarray and records a backward
closure per operation. Every public op accepts either plain ndarrays or
Tensors; plain-array calls return plain arrays, Tensor calls stay on the
tape. Training runs in float32, gradient verification in float64 via
`grad_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError, NumericError, ShapeError


class Tensor:
    """An ndarray plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the tape."""
        return Tensor(self.data)

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar output, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unwrap(out: Tensor, *inputs):
    """Return plain data when no caller-supplied input was a Tensor."""
    if any(isinstance(x, Tensor) for x in inputs):
        return out
    return out.data


def _result(data, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor(data)
    if backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / structural primitives

def add(a, b):
    """Elementwise sum of two same-shape operands."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.data.shape != tb.data.shape:
        raise ShapeError(f"add shapes differ: {ta.data.shape} vs {tb.data.shape}")

    def _bw(g):
        if ta.requires_grad:
            ta.accumulate(g)
        if tb.requires_grad:
            tb.accumulate(g)

    return _unwrap(_result(ta.data + tb.data, (ta, tb), _bw), a, b)


def scale(a, c: float):
    """Multiply by a python-scalar constant (not differentiated wrt c)."""
    ta = as_tensor(a)
    c = float(c)

    def _bw(g):
        ta.accumulate(g * c)

    return _unwrap(_result(ta.data * c, (ta,), _bw), a)


def matmul(a, b):
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.data.ndim != 2 or tb.data.ndim != 2 or ta.data.shape[1] != tb.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {ta.data.shape} vs {tb.data.shape}")

    def _bw(g):
        if ta.requires_grad:
            ta.accumulate(g @ tb.data.T)
        if tb.requires_grad:
            tb.accumulate(ta.data.T @ g)

    return _unwrap(_result(ta.data @ tb.data, (ta, tb), _bw), a, b)


def transpose(a):
    ta = as_tensor(a)

    def _bw(g):
        ta.accumulate(g.T)

    return _unwrap(_result(ta.data.T, (ta,), _bw), a)


def relu(a):
    ta = as_tensor(a)
    mask = ta.data > 0

    def _bw(g):
        ta.accumulate(g * mask)

    return _unwrap(_result(np.where(mask, ta.data, 0.0), (ta,), _bw), a)


def concat_cols(parts: Sequence):
    """Concatenate 2-D blocks along columns (used to rejoin attention heads)."""
    ts = [as_tensor(p) for p in parts]
    widths = [t.data.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def _bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate(g[:, lo:hi])

    out = _result(np.concatenate([t.data for t in ts], axis=1), ts, _bw)
    return _unwrap(out, *parts)


def stack_rows(vectors: Sequence):
    """Stack 1-D vectors into a matrix, one row per vector."""
    ts = [as_tensor(v) for v in vectors]

    def _bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t.accumulate(g[i])

    out = _result(np.stack([t.data for t in ts], axis=0), ts, _bw)
    return _unwrap(out, *vectors)


def dot(u, v):
    """Inner product of two 1-D vectors; returns a scalar."""
    tu, tv = as_tensor(u), as_tensor(v)
    if tu.data.shape != tv.data.shape or tu.data.ndim != 1:
        raise ShapeError(f"dot needs equal 1-D shapes, got {tu.data.shape} vs {tv.data.shape}")

    def _bw(g):
        if tu.requires_grad:
            tu.accumulate(g * tv.data)
        if tv.requires_grad:
            tv.accumulate(g * tu.data)

    return _unwrap(_result(tu.data @ tv.data, (tu, tv), _bw), u, v)


def sum_all(a):
    """Sum of every element; the canonical scalar reduction for grad checks."""
    ta = as_tensor(a)

    def _bw(g):
        ta.accumulate(np.broadcast_to(g, ta.data.shape))

    return _unwrap(_result(ta.data.sum(), (ta,), _bw), a)


def sum_scalars(terms: Sequence):
    """Sum of scalar tensors (loss aggregation)."""
    ts = [as_tensor(t) for t in terms]

    def _bw(g):
        for t in ts:
            if t.requires_grad:
                t.accumulate(g)

    out = _result(sum(float(t.data) for t in ts), ts, _bw)
    return _unwrap(out, *terms)


# ---------------------------------------------------------------------------
# spec-level operations

def linear(x, w, b=None):
    """Affine map: out[t, j] = sum_k x[t, k] * w[k, j] + b[j].

    `x` may be a (T, din) matrix or a single (din,) vector.
    """
    tx, tw = as_tensor(x), as_tensor(w)
    tb = as_tensor(b) if b is not None else None
    if tw.data.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got {tw.data.shape}")
    din = tx.data.shape[-1] if tx.data.ndim in (1, 2) else None
    if din != tw.data.shape[0]:
        raise ShapeError(f"linear shapes incompatible: x {tx.data.shape} vs w {tw.data.shape}")
    if tb is not None and tb.data.shape != (tw.data.shape[1],):
        raise ShapeError(f"bias shape {tb.data.shape} does not match output width {tw.data.shape[1]}")

    out_data = tx.data @ tw.data
    if tb is not None:
        out_data = out_data + tb.data

    single = tx.data.ndim == 1
    parents = (tx, tw) if tb is None else (tx, tw, tb)

    def _bw(g):
        if tx.requires_grad:
            tx.accumulate(g @ tw.data.T)
        if tw.requires_grad:
            if single:
                tw.accumulate(np.outer(tx.data, g))
            else:
                tw.accumulate(tx.data.T @ g)
        if tb is not None and tb.requires_grad:
            tb.accumulate(g if single else g.sum(axis=0))

    return _unwrap(_result(out_data, parents, _bw), x, w, b)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Standardize each row to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    tx, tg, tb = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if tx.data.ndim != 2:
        raise ShapeError(f"layer_norm input must be 2-D, got {tx.data.shape}")
    d = tx.data.shape[1]
    if tg.data.shape != (d,) or tb.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta shapes {tg.data.shape}/{tb.data.shape} do not match width {d}"
        )

    mu = tx.data.mean(axis=1, keepdims=True)
    var = tx.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (tx.data - mu) * inv_std
    out_data = tg.data * xhat + tb.data

    def _bw(g):
        if tg.requires_grad:
            tg.accumulate((g * xhat).sum(axis=0))
        if tb.requires_grad:
            tb.accumulate(g.sum(axis=0))
        if tx.requires_grad:
            dxhat = g * tg.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            tx.accumulate(inv_std * (dxhat - m1 - xhat * m2))

    return _unwrap(_result(out_data, (tx, tg, tb), _bw), x, gamma, beta)


def softmax_rows(x):
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    tx = as_tensor(x)
    if tx.data.ndim != 2:
        raise ShapeError(f"softmax_rows input must be 2-D, got {tx.data.shape}")
    shifted = tx.data - tx.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        tx.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _unwrap(_result(s, (tx,), _bw), x)


def gap(tokens):
    """Global average pooling: componentwise mean over token rows."""
    tt = as_tensor(tokens)
    if tt.data.ndim != 2 or tt.data.shape[0] < 1:
        raise ShapeError(f"gap needs a nonempty 2-D token matrix, got {tt.data.shape}")
    n = tt.data.shape[0]

    def _bw(g):
        tt.accumulate(np.broadcast_to(g / n, tt.data.shape))

    return _unwrap(_result(tt.data.mean(axis=0), (tt,), _bw), tokens)


def relu_mlp(x, layers: Sequence[tuple]):
    """Alternate linear and ReLU; the final layer stays linear."""
    out = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i != last:
            out = relu(out)
    return out


def l2_normalize(v):
    """Scale a vector to unit Euclidean norm, preserving direction."""
    tv = as_tensor(v)
    if tv.data.ndim != 1:
        raise ShapeError(f"l2_normalize needs a 1-D vector, got {tv.data.shape}")
    norm = float(np.linalg.norm(tv.data))
    if norm == 0.0:
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    out_data = tv.data / norm

    def _bw(g):
        tv.accumulate((g - out_data * (g @ out_data)) / norm)

    return _unwrap(_result(out_data, (tv,), _bw), v)


# ---------------------------------------------------------------------------
# multi-head attention

@dataclass
class AttentionParams:
    """Per-head q/k/v projections plus the shared output projection.

    Lists hold one entry per head; head dim is width // heads.
    """

    wq: list = field(default_factory=list)
    bq: list = field(default_factory=list)
    wk: list = field(default_factory=list)
    bk: list = field(default_factory=list)
    wv: list = field(default_factory=list)
    bv: list = field(default_factory=list)
    wo: object = None
    bo: object = None
    heads: int = 1
    width: int = 1

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        self.head_dim = self.width // self.heads

    def tensors(self) -> list:
        out = []
        for group in (self.wq, self.bq, self.wk, self.bk, self.wv, self.bv):
            out.extend(group)
        out.extend([self.wo, self.bo])
        return out


def multi_head_attention(queries_src, keys_vals_src, params: AttentionParams):
    """Scaled dot-product attention of query rows over key/value rows.

    Self-attention is the special case queries_src is keys_vals_src.
    """
    q_src, kv_src = as_tensor(queries_src), as_tensor(keys_vals_src)
    d = params.width
    if q_src.data.shape[1] != d or kv_src.data.shape[1] != d:
        raise ShapeError(
            f"attention width mismatch: inputs {q_src.data.shape}/{kv_src.data.shape} vs width {d}"
        )
    inv_sqrt = 1.0 / math.sqrt(params.head_dim)
    head_outs = []
    for i in range(params.heads):
        q = linear(q_src, params.wq[i], params.bq[i])
        k = linear(kv_src, params.wk[i], params.bk[i])
        v = linear(kv_src, params.wv[i], params.bv[i])
        att = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt))
        head_outs.append(matmul(att, v))
    merged = concat_cols(head_outs)
    out = linear(merged, params.wo, params.bo)
    return _unwrap(as_tensor(out), queries_src, keys_vals_src, *params.tensors())


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(fn, inputs: dict, eps: float = 1e-5, max_elements: int | None = None,
               seed: int = 0) -> float:
    """Compare the tape's gradients against central finite differences.

    `fn` maps a dict of name -> Tensor to a scalar Tensor. Evaluation is
    forced to float64. Returns the max over checked elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). When
    `max_elements` is set, that many elements per input are sampled
    (deterministically from `seed`) instead of sweeping every element.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-4], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = fn(tensors)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ShapeError("grad_check target must return a scalar Tensor")
    if not np.isfinite(out.data):
        raise NumericError("grad_check forward pass produced a non-finite output")
    out.backward()

    analytic = {}
    for k, t in tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NumericError(f"non-finite analytic gradient in '{k}' at flat index {bad[0]}")
        analytic[k] = g

    probe = {k: Tensor(v.copy()) for k, v in base.items()}

    def forward() -> float:
        r = fn(probe)
        return float(r.data if isinstance(r, Tensor) else r)

    rng = np.random.Generator(np.random.Philox(seed))
    max_err = 0.0
    for k, arr in base.items():
        n = arr.size
        if max_elements is not None and n > max_elements:
            idxs = rng.choice(n, size=max_elements, replace=False)
        else:
            idxs = range(n)
        flat = probe[k].data.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = forward()
            flat[idx] = orig - eps
            fm = forward()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite finite-difference eval for '{k}' at flat index {idx}")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
    return max_err
