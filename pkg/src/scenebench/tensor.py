"""Dense float64 matrix substrate with reverse-mode gradients.

Everything is a 2-D matrix. Each operation returns a fresh immutable
``Matrix`` node that remembers its parents and a vector-Jacobian closure,
so any scalar built from these ops can be differentiated with
:func:`gradients`. No broadcasting, no views, no in-place updates: the
graph is auditable by reading the op that produced each node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "MhcaParams",
    "MhcaResult",
    "GradReport",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "transpose",
    "softmax",
    "relu",
    "layer_norm",
    "row_normalize",
    "hcat",
    "sum_all",
    "mean_all",
    "mhca",
    "gradients",
    "finite_diff_check",
    "seeded_uniform",
]


class Matrix:
    """Immutable 2-D float64 array plus the tape edge that produced it."""

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"Matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Matrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "_parents", tuple(_parents))
        object.__setattr__(self, "_vjp", _vjp)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def _node(data: np.ndarray, parents: tuple, vjp: Callable) -> Matrix:
    return Matrix(data, _parents=parents, _vjp=vjp)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Matrix) -> Matrix:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def softmax(x: Matrix, axis: int = 1) -> Matrix:
    """Numerically stabilized softmax along ``axis`` (1 = per row, 0 = per column)."""
    if axis not in (0, 1):
        raise ValueError("softmax axis must be 0 or 1")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x,), vjp)


def relu(a: Matrix) -> Matrix:
    mask = a.data > 0.0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def layer_norm(x: Matrix, eps: float = 1e-6) -> Matrix:
    """Row-wise normalization to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        n = x.cols
        g_mean = g.mean(axis=1, keepdims=True)
        gy_mean = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return _node(y, (x,), vjp)


def row_normalize(x: Matrix, eps: float = 1e-8) -> Matrix:
    """Divide each row by its sum (plus eps); rows of a non-negative input become distributions."""
    s = x.data.sum(axis=1, keepdims=True) + eps
    y = x.data / s

    def vjp(g):
        gx = (g * x.data).sum(axis=1, keepdims=True)
        return (g / s - gx / (s * s),)

    return _node(y, (x,), vjp)


def hcat(mats: Sequence[Matrix]) -> Matrix:
    """Concatenate matrices left-to-right along columns."""
    mats = tuple(mats)
    if not mats:
        raise ValueError("hcat needs at least one matrix")
    rows = mats[0].rows
    if any(m.rows != rows for m in mats):
        raise ValueError("hcat row count mismatch")
    widths = [m.cols for m in mats]
    out = np.concatenate([m.data for m in mats], axis=1)
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _node(out, mats, vjp)


def sum_all(a: Matrix) -> Matrix:
    out = np.array([[a.data.sum()]])
    return _node(out, (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Matrix) -> Matrix:
    n = a.data.size
    out = np.array([[a.data.mean()]])
    return _node(out, (a,), lambda g: (np.full(a.shape, g[0, 0] / n),))


def gradients(loss: Matrix, wrt: Sequence[Matrix]) -> list[np.ndarray]:
    """Reverse-mode gradients of a 1x1 loss with respect to ``wrt`` nodes.

    Nodes are never mutated; accumulation happens in a private table, so
    concurrent backward passes over shared subgraphs are safe. Nodes not
    reachable from the loss get zero gradients.
    """
    if loss.shape != (1, 1):
        raise ValueError("loss must be a 1x1 matrix")

    order: list[Matrix] = []
    seen: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(loss, False)]
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

    table: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = table.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            acc = table.get(id(parent))
            table[id(parent)] = pg if acc is None else acc + pg

    return [table.get(id(m), np.zeros(m.shape)) for m in wrt]


def seeded_uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> Matrix:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Matrix(rng.uniform(-bound, bound, size=(rows, cols)))


@dataclass(frozen=True)
class MhcaParams:
    """Per-head projection weights plus the shared output projection."""

    wq: tuple[Matrix, ...]
    wk: tuple[Matrix, ...]
    wv: tuple[Matrix, ...]
    wo: Matrix

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def head_width(self) -> int:
        return self.wq[0].cols

    @classmethod
    def create(
        cls,
        dq: int,
        dk: int,
        dv: int,
        width: int,
        d_out: int,
        heads: int,
        seed: int,
    ) -> "MhcaParams":
        if heads <= 0:
            raise ValueError("heads must be >= 1")
        if width % heads != 0:
            raise ValueError(f"heads={heads} must divide internal width={width}")
        dh = width // heads
        rng = np.random.default_rng(seed)
        wq = tuple(seeded_uniform(rng, dq, dh, dq) for _ in range(heads))
        wk = tuple(seeded_uniform(rng, dk, dh, dk) for _ in range(heads))
        wv = tuple(seeded_uniform(rng, dv, dh, dv) for _ in range(heads))
        wo = seeded_uniform(rng, width, d_out, width)
        return cls(wq=wq, wk=wk, wv=wv, wo=wo)

    def named(self, prefix: str) -> dict[str, Matrix]:
        out: dict[str, Matrix] = {}
        for h in range(self.heads):
            out[f"{prefix}.wq{h}"] = self.wq[h]
            out[f"{prefix}.wk{h}"] = self.wk[h]
            out[f"{prefix}.wv{h}"] = self.wv[h]
        out[f"{prefix}.wo"] = self.wo
        return out


@dataclass(frozen=True)
class MhcaResult:
    """Output of one multi-head cross attention call.

    ``weights[h]`` are the softmax attention rows (queries x keys) and
    ``contexts[h]`` the pre-projection context rows of head h; each context
    row is by construction a convex combination of that head's projected
    value rows.
    """

    output: Matrix
    weights: tuple[Matrix, ...]
    contexts: tuple[Matrix, ...]


def mhca(query: Matrix, key: Matrix, value: Matrix, params: MhcaParams) -> MhcaResult:
    """Multi-head cross attention: softmax((Q Wq)(K Wk)^T / sqrt(dh)) (V Wv), heads concatenated then output-projected."""
    if params.heads == 0:
        raise ValueError("mhca needs at least one head")
    if key.rows != value.rows:
        raise ValueError(f"key rows ({key.rows}) must equal value rows ({value.rows})")
    if query.cols != params.wq[0].rows:
        raise ValueError(f"query width {query.cols} does not match wq rows {params.wq[0].rows}")
    if key.cols != params.wk[0].rows:
        raise ValueError(f"key width {key.cols} does not match wk rows {params.wk[0].rows}")
    if value.cols != params.wv[0].rows:
        raise ValueError(f"value width {value.cols} does not match wv rows {params.wv[0].rows}")

    inv_sqrt = 1.0 / math.sqrt(params.head_width)
    weights = []
    contexts = []
    for h in range(params.heads):
        q_h = matmul(query, params.wq[h])
        k_h = matmul(key, params.wk[h])
        v_h = matmul(value, params.wv[h])
        scores = scale(matmul(q_h, transpose(k_h)), inv_sqrt)
        w_h = softmax(scores, axis=1)
        weights.append(w_h)
        contexts.append(matmul(w_h, v_h))
    merged = hcat(contexts)
    out = matmul(merged, params.wo)
    return MhcaResult(output=out, weights=tuple(weights), contexts=tuple(contexts))


@dataclass(frozen=True)
class GradReport:
    max_abs_err: float
    max_rel_err: float
    param_count: int


def finite_diff_check(
    f: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    analytic_grad: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> GradReport:
    """Compare ``analytic_grad`` against central differences of ``f``.

    ``f`` must be pure and deterministic in ``params``. Relative error per
    entry is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if len(params) != len(analytic_grad):
        raise ValueError("params and analytic_grad length mismatch")

    max_abs = 0.0
    max_rel = 0.0
    count = 0
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    for pi, (p, a) in enumerate(zip(work, analytic_grad)):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for param {pi}")
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(f(work))
            flat[j] = orig - eps
            f_minus = float(f(work))
            flat[j] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError("non-finite function value during finite differences")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            abs_err = abs(aflat[j] - numeric)
            rel_err = abs_err / max(abs(aflat[j]), abs(numeric), 1e-8)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            count += 1
    return GradReport(max_abs_err=max_abs, max_rel_err=max_rel, param_count=count)
