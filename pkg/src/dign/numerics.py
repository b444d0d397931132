"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a C-contiguous array wrapped in a new Tensor node.
Contiguity is not cosmetic: numpy reductions take a different (and
differently-rounded) code path on strided views, which would break the
bitwise reproducibility this package promises. Reductions that feed
permutation-equivariance guarantees (neighbor aggregation, attention over
key sets) sort their addends first, so the result is independent of input
order; everything else uses numpy's fixed pairwise reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


def _as_array(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    # sum-probe: any NaN/Inf entry makes the sum non-finite (Inf-Inf -> NaN),
    # at a fraction of the cost of isfinite().all() on small arrays
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            raise ContractError("tensor magnitudes overflow float64 summation")
        raise ContractError("tensor contains non-finite entries")
    return arr


_CREATED = 0


class Tensor:
    """A float64 array plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_order", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _bw=None, name=""):
        global _CREATED
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._bw = _bw
        _CREATED += 1
        self._order = _CREATED
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Arithmetic sugar; floats and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def param(x, name="") -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return np.ascontiguousarray(grad)


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, _parents=(a, b), _bw=bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, _parents=(a, b), _bw=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, _parents=(a, b), _bw=bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out, _parents=(a, b), _bw=bw)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _bw=lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    # np.where writes +0.0 for clamped entries, normalizing any -0.0 away.
    out = np.where(a.data > 0, a.data, 0.0)

    def bw(g):
        return (np.where(a.data > 0, g, 0.0),)

    return Tensor(out, _parents=(a,), _bw=bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _bw=bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return Tensor(out, _parents=(a,), _bw=bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2.0 * out),)

    return Tensor(out, _parents=(a,), _bw=bw)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    return einsum2("ij,jk->ik", a, b)


# Hand-written BLAS gradients for the hot contractions. The forward side
# must stay on c_einsum (BLAS kernels round row-position-dependently, which
# would break bitwise permutation equivariance), but gradients only need
# run-to-run determinism, which plain matmul provides.
def _bw_stack_proj(g, a, b):
    # 'koi,ni->kno' family: stacked weights (K,o,i) applied to shared rows (n,i)
    return (lambda: np.matmul(g.transpose(0, 2, 1), b),
            lambda: np.matmul(g, a).sum(axis=0))


def _bw_chan_mat(g, a, b):
    # 'koe,kne->kno': per-channel square weights on per-channel rows
    return (lambda: np.matmul(g.transpose(0, 2, 1), b),
            lambda: np.matmul(g, a))


def _bw_scores(g, a, b):
    # 'hao,hbo->hab': query/key dot products per head
    return (lambda: np.matmul(g, b),
            lambda: np.matmul(g.transpose(0, 2, 1), a))


def _bw_row_proj(g, a, b):
    # 'ad,od->ao' family: rows times a transposed weight
    return (lambda: np.matmul(g, b),
            lambda: np.matmul(g.T, a))


def _bw_matmul(g, a, b):
    # 'ij,jk->ik'
    return (lambda: np.matmul(g, b.T),
            lambda: np.matmul(a.T, g))


_EINSUM_BW = {
    "koi,ni->kno": _bw_stack_proj,
    "hod,ad->hao": _bw_stack_proj,
    "hod,bd->hbo": _bw_stack_proj,
    "koe,kne->kno": _bw_chan_mat,
    "hao,hbo->hab": _bw_scores,
    "ad,od->ao": _bw_row_proj,
    "ad,fd->af": _bw_row_proj,
    "af,of->ao": _bw_row_proj,
    "id,jd->ij": _bw_row_proj,
    "ij,jk->ik": _bw_matmul,
}


def _check_spec(spec: str) -> tuple[str, str, str]:
    ins, out_spec = spec.replace(" ", "").split("->")
    a_spec, b_spec = ins.split(",")
    for group in (a_spec, b_spec, out_spec):
        if len(set(group)) != len(group):
            raise ShapeError(f"einsum2 spec {spec!r} repeats an index within a group")
    for ch in set(a_spec + b_spec + out_spec):
        if (ch in a_spec) + (ch in b_spec) + (ch in out_spec) < 2:
            raise ShapeError(f"einsum2 spec {spec!r} has a free index {ch!r}")
    return a_spec, b_spec, out_spec


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose gradient is the index-swapped einsum.

    Valid only when every index letter appears in at least two of the three
    operand/output groups and at most once within each group, which holds
    for every contraction this package uses.
    """
    rule = _EINSUM_BW.get(spec)
    if rule is None:
        a_spec, b_spec, out_spec = _check_spec(spec)
    out = np.einsum(spec, a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        if rule is not None:
            da_fn, db_fn = rule(g, a.data, b.data)
            da = np.ascontiguousarray(da_fn()) if need_a else None
            db = np.ascontiguousarray(db_fn()) if need_b else None
            return da, db
        da = db = None
        if need_a:
            da = np.ascontiguousarray(np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data))
        if need_b:
            db = np.ascontiguousarray(np.einsum(f"{a_spec},{out_spec}->{b_spec}", a.data, g))
        return da, db

    return Tensor(out, _parents=(a, b), _bw=bw)


def attn_combine(weights: Tensor, values: Tensor) -> Tensor:
    """Contract attention weights (...,q,s) with values (...,s,d) over s.

    The products are sorted before summation, so the output is bitwise
    independent of the order of the key/value set.
    """
    prod = weights.data[..., :, :, None] * values.data[..., None, :, :]
    prod = np.sort(np.ascontiguousarray(prod), axis=-2)
    out = prod.sum(axis=-2)

    def bw(g):
        dw = np.einsum("...qd,...sd->...qs", g, values.data)
        dv = np.einsum("...qs,...qd->...sd", weights.data, g)
        return np.ascontiguousarray(dw), np.ascontiguousarray(dv)

    return Tensor(out, _parents=(weights, values), _bw=bw)


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bw(g):
        return (np.ascontiguousarray(np.broadcast_to(g, a.data.shape)),)

    return Tensor(out, _parents=(a,), _bw=bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, a.data.shape)),)

    return Tensor(out, _parents=(a,), _bw=bw)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    return sum_axis(a, axis, keepdims) * (1.0 / n)


def softmax(a: Tensor, orderfree: bool = False) -> Tensor:
    """Softmax over the last axis, computed with max subtraction.

    With orderfree=True the denominator sums sorted terms, making the
    result invariant (bitwise) to permutations of the last axis.
    """
    if a.data.ndim == 0 or a.data.shape[-1] == 0:
        raise ShapeError("softmax requires at least one element on the last axis")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    if orderfree:
        denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    else:
        denom = e.sum(axis=-1, keepdims=True)
    out = e / denom

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, _parents=(a,), _bw=bw)


def logsumexp(a: Tensor, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) over the last axis with max stabilization."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = out[..., 0]
    soft = e / s

    def bw(g):
        if not keepdims:
            g = g[..., None]
        return (np.ascontiguousarray(g * soft),)

    return Tensor(out, _parents=(a,), _bw=bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along the last axis."""
    if eps <= 0:
        raise ContractError("l2_normalize requires eps > 0")
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    live = norm >= eps

    def bw(g):
        # unit-sphere jacobian where the norm is live, plain 1/eps scaling below it
        dot = (g * out).sum(axis=-1, keepdims=True)
        da = np.where(live, (g - out * dot) / denom, g / eps)
        return (np.ascontiguousarray(da),)

    return Tensor(out, _parents=(a,), _bw=bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = centered * inv
    out = xh * gain.data + bias.data

    def bw(g):
        d = a.data.shape[-1]
        dxh = g * gain.data
        dgain = _unbroadcast(g * xh, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xh).mean(axis=-1, keepdims=True)
        da = (dxh - m1 - xh * m2) * inv
        return np.ascontiguousarray(da), dgain, dbias

    return Tensor(out, _parents=(a, gain, bias), _bw=bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep).astype(np.float64) / keep

    def bw(g):
        return (g * mask,)

    return Tensor(a.data * mask, _parents=(a,), _bw=bw)


# ---------------------------------------------------------------------------
# indexing, shaping, segment reduction


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.ascontiguousarray(np.take(a.data, idx, axis=axis))

    def bw(g):
        da = np.zeros_like(a.data)
        key = (slice(None),) * axis + (idx,)
        np.add.at(da, key, g)
        return (da,)

    return Tensor(out, _parents=(a,), _bw=bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [p.data for p in parts]
    out = np.concatenate(arrs, axis=axis)
    sizes = [arr.shape[axis] for arr in arrs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    return Tensor(out, _parents=tuple(parts), _bw=bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return Tensor(out, _parents=(a,), _bw=bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g):
        return (np.ascontiguousarray(g.reshape(a.data.shape)),)

    return Tensor(out, _parents=(a,), _bw=bw)


@dataclass(frozen=True)
class SegmentPlan:
    """Precomputed scatter layout for summing edge messages per node."""

    seg_ids: np.ndarray      # (E,) target segment of each row
    index_matrix: np.ndarray  # (n_segments, max_count) row index or E for padding
    n_segments: int


def make_segment_plan(seg_ids, n_segments: int) -> SegmentPlan:
    seg = np.asarray(seg_ids, dtype=np.int64)
    e = seg.size
    if e == 0:
        return SegmentPlan(seg, np.zeros((n_segments, 0), dtype=np.int64), n_segments)
    counts = np.bincount(seg, minlength=n_segments)
    maxdeg = int(counts.max())
    order = np.argsort(seg, kind="stable")
    starts = np.zeros(n_segments, dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    slots = np.arange(e, dtype=np.int64) - starts[seg[order]]
    index_matrix = np.full((n_segments, maxdeg), e, dtype=np.int64)
    index_matrix[seg[order], slots] = order
    return SegmentPlan(seg, index_matrix, n_segments)


def segment_sum(a: Tensor, plan: SegmentPlan) -> Tensor:
    """Sum rows of a (..., E, d) tensor into (..., n_segments, d) bins.

    Addends within a bin are sorted before summation so the result does not
    depend on edge order, which keeps graph forwards exactly permutation
    equivariant.
    """
    e = plan.seg_ids.size
    lead = a.data.shape[:-2]
    d = a.data.shape[-1]
    if a.data.shape[-2] != e:
        raise ShapeError(f"segment_sum expects {e} rows, got {a.data.shape[-2]}")
    if e == 0:
        out = np.zeros(lead + (plan.n_segments, d))
        return Tensor(out, _parents=(a,), _bw=lambda g: (np.zeros_like(a.data),))
    padded_src = np.concatenate([a.data, np.zeros(lead + (1, d))], axis=-2)
    gathered = np.ascontiguousarray(np.take(padded_src, plan.index_matrix, axis=-2))
    gathered = np.sort(gathered, axis=-2)
    out = gathered.sum(axis=-2)

    def bw(g):
        return (np.ascontiguousarray(np.take(g, plan.seg_ids, axis=-2)),)

    return Tensor(out, _parents=(a,), _bw=bw)


# ---------------------------------------------------------------------------
# reverse-mode traversal


def _reachable(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from root, newest first.

    Creation order is a topological order (parents exist before children),
    so a sort by creation counter replaces an explicit DFS post-order.
    """
    nodes = [root]
    seen = {id(root)}
    i = 0
    while i < len(nodes):
        for p in nodes[i]._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
        i += 1
    nodes.sort(key=lambda t: -t._order)
    return nodes


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate .grad on every reachable parameter leaf and return the map.

    Gradients accumulate across calls (batching), so zero them between
    optimization steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            leaf_map[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._bw(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_map


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    per_param: dict[str, float]
    checked: int
    excluded: int


def finite_diff_report(f: Callable[[], Tensor], params, h: float = 1e-5) -> FiniteDiffReport:
    """Central-difference check of backward() on a scalar function.

    params is a sequence of (name, Tensor). Coordinates with |p_i| < 10h
    are excluded: a relu kink inside that window would poison the numeric
    estimate without indicating a wrong analytic gradient.
    """
    if h <= 0:
        raise ContractError("finite_diff_report requires h > 0")
    named = list(params)
    zero_grads(t for _, t in named)
    loss = f()
    grad_map = backward(loss)
    per_param: dict[str, float] = {}
    checked = 0
    excluded = 0
    for name, p in named:
        analytic = grad_map.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            if abs(flat[i]) < 10.0 * h:
                excluded += 1
                continue
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
    zero_grads(t for _, t in named)
    max_err = max(per_param.values()) if per_param else 0.0
    return FiniteDiffReport(max_err, per_param, checked, excluded)


def finite_diff_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(f, params, h).max_rel_error
