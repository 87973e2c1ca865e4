"""Minimal reverse-mode gradient engine over a small, fixed op family.

Every op builds a :class:`Var` node holding the forward value, its parents,
and a closure that maps the output cotangent to parent cotangents.
:func:`backward` walks the recorded graph once in reverse topological order
and leaves ``.grad`` on every node it reaches.  The op family is exactly
what the unrolled pursuit networks need: the convolutional
analysis/synthesis pair (sharing kernels with :mod:`mlcsc.dictionary`, so
engine forwards agree bit-for-bit with the plain solvers), elementwise
add/subtract, scaling by a constant or by a learned reciprocal, ReLU,
two-sided shrinkage, reshape, an affine head, half sum-of-squares, and
softmax cross-entropy.

Piecewise-linear ops record their minimum distance-to-kink so
:func:`gradcheck` can refuse evaluation points where a central difference
would straddle a nondifferentiable point.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .dictionary import (
    NonFiniteError,
    _correlate,
    _correlate_adjoint,
    _weight_gradient,
)

_SERIAL = itertools.count()


class Var:
    """Graph node: a value, its provenance, and room for a gradient."""

    __slots__ = ("value", "name", "grad", "kink_margin", "_parents", "_vjp", "_op", "_uid")

    def __init__(self, value, name: str = "", _parents=(), _vjp=None, _op: str = "leaf"):
        self.value = np.asarray(value)
        self.name = name
        self.grad = None
        self.kink_margin = np.inf
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self._op = _op
        self._uid = next(_SERIAL)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self._op
        return f"Var({label}, shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a cotangent back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Var(out, _parents=(a, b), _vjp=vjp, _op="add")


def sub(a: Var, b: Var) -> Var:
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Var(out, _parents=(a, b), _vjp=vjp, _op="sub")


def scale(x: Var, c: float) -> Var:
    """Multiply by a fixed scalar constant."""
    c = float(c)
    out = c * x.value

    def vjp(g):
        return (c * g,)

    return Var(out, _parents=(x,), _vjp=vjp, _op="scale")


def inv_scale(x: Var, beta: Var) -> Var:
    """Multiply by the reciprocal of a learned positive scalar."""
    if beta.value.size != 1:
        raise ValueError(f"beta must be a scalar, got shape {beta.value.shape}")
    alpha = 1.0 / float(beta.value)
    out = alpha * x.value

    def vjp(g):
        gb = -alpha * alpha * np.sum(g * x.value)
        return alpha * g, np.asarray(gb, dtype=beta.value.dtype).reshape(beta.value.shape)

    return Var(out, _parents=(x, beta), _vjp=vjp, _op="inv_scale")


def relu(x: Var) -> Var:
    out = np.maximum(x.value, 0.0)
    mask = x.value > 0

    def vjp(g):
        return (g * mask,)

    node = Var(out, _parents=(x,), _vjp=vjp, _op="relu")
    node.kink_margin = float(np.abs(x.value).min()) if x.value.size else np.inf
    return node


def soft_threshold(x: Var, t: Var) -> Var:
    """Two-sided shrinkage with a learned nonnegative threshold."""
    tv = t.value
    if np.any(tv < 0):
        raise ValueError("soft threshold requires nonnegative thresholds")
    out = np.sign(x.value) * np.maximum(np.abs(x.value) - tv, 0.0)
    mask = np.abs(x.value) > tv

    def vjp(g):
        gx = g * mask
        gt = _unbroadcast(-g * np.sign(x.value) * mask, tv.shape)
        return gx, gt

    node = Var(out, _parents=(x, t), _vjp=vjp, _op="soft_threshold")
    dist = np.abs(np.abs(x.value) - tv)
    node.kink_margin = float(dist.min()) if dist.size else np.inf
    return node


def reshape(x: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    out = x.value.reshape(shape)
    orig = x.value.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Var(out, _parents=(x,), _vjp=vjp, _op="reshape")


def flatten(x: Var) -> Var:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.value.shape[0], -1))


def affine(x: Var, w: Var, b: Var) -> Var:
    """Dense head: x @ w.T + b with x [n, d], w [k, d], b [k]."""
    out = x.value @ w.value.T + b.value

    def vjp(g):
        return g @ w.value, g.T @ x.value, g.sum(axis=0)

    return Var(out, _parents=(x, w, b), _vjp=vjp, _op="affine")


def conv_analyze(x: Var, w: Var, stride: int, padding: int, boundary: str) -> Var:
    """Strided cross-correlation of a [n, c, H, W] batch with filter bank w."""
    xv, wv = x.value, w.value
    out = _correlate(wv, xv, stride, padding, boundary)
    in_hw = (xv.shape[2], xv.shape[3])
    kh, kw = wv.shape[2], wv.shape[3]

    def vjp(g):
        gx = _correlate_adjoint(wv, g, stride, padding, boundary, in_hw)
        gw = _weight_gradient(xv, g, stride, padding, boundary, kh, kw)
        return gx, gw

    return Var(out, _parents=(x, w), _vjp=vjp, _op="conv_analyze")


def conv_synthesize(
    gamma: Var, w: Var, stride: int, padding: int, boundary: str, out_hw: tuple[int, int]
) -> Var:
    """Adjoint of :func:`conv_analyze` on a [n, atoms, H', W'] batch."""
    gv, wv = gamma.value, w.value
    out = _correlate_adjoint(wv, gv, stride, padding, boundary, out_hw)
    kh, kw = wv.shape[2], wv.shape[3]

    def vjp(g):
        gg = _correlate(wv, g, stride, padding, boundary)
        gw = _weight_gradient(g, gv, stride, padding, boundary, kh, kw)
        return gg, gw

    return Var(out, _parents=(gamma, w), _vjp=vjp, _op="conv_synthesize")


def half_sum_squares(x: Var) -> Var:
    out = 0.5 * float((x.value.astype(np.float64) ** 2).sum())

    def vjp(g):
        return (g * x.value,)

    return Var(np.asarray(out), _parents=(x,), _vjp=vjp, _op="half_sum_squares")


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under softmax logits."""
    labels = np.asarray(labels)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.value.shape[0]
    rows = np.arange(n)
    out = -float(logp[rows, labels].mean())
    prob = np.exp(logp)

    def vjp(g):
        gl = prob.copy()
        gl[rows, labels] -= 1.0
        gl *= float(g) / n
        return (gl.astype(logits.value.dtype, copy=False),)

    return Var(np.asarray(out), _parents=(logits,), _vjp=vjp, _op="softmax_cross_entropy")


def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            stack.append((parent, False))
    return order


def backward(root: Var, cotangent=None) -> None:
    """Accumulate ``.grad`` on every node reachable from ``root``.

    The walk is a fixed reverse topological order, so repeated runs on the
    same graph produce bit-identical gradients.
    """
    order = _topo(root)
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.value) if cotangent is None else np.asarray(cotangent)
    }
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg


def min_kink_margin(root: Var) -> float:
    """Smallest distance-to-kink recorded anywhere in the graph."""
    return min((node.kink_margin for node in _topo(root)), default=np.inf)


def value_and_grad(loss_fn, params: dict[str, np.ndarray]):
    """Evaluate ``loss_fn`` on Var-wrapped params; return (loss, grads dict)."""
    leaves = {k: Var(v, name=k) for k, v in params.items()}
    loss = loss_fn(leaves)
    if loss.value.size != 1:
        raise ValueError("loss must be scalar")
    backward(loss)
    grads = {
        k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v))
        for k, v in params.items()
    }
    return float(loss.value), grads


@dataclass
class GradReport:
    """Finite-difference audit of one loss graph."""

    per_param: dict[str, float]
    epsilon: float
    kink_margin: float
    attempts: int

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def rows(self):
        for name in sorted(self.per_param):
            yield name, self.per_param[name], self.epsilon

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "max_rel_err", "epsilon"])
            for name, err, eps in self.rows():
                writer.writerow([name, f"{err:.12g}", f"{eps:.12g}"])


def gradcheck(
    loss_fn,
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    coords_per_tensor: int = 25,
    seed: int = 0,
    kink_margin: float = 1e-3,
    resample=None,
    max_resamples: int = 25,
) -> GradReport:
    """Compare engine gradients against central differences.

    Parameters
    ----------
    loss_fn : callable
        Maps a dict of name -> Var to a scalar Var.
    params : dict
        name -> float64 ndarray evaluation point.
    epsilon : float
        Central-difference step.
    coords_per_tensor : int
        Coordinates sampled per tensor (every coordinate when the tensor is
        at most that large).
    seed : int
        Seeds coordinate sampling.
    kink_margin : float
        Minimum distance-to-kink the evaluation point must keep; points
        closer than this are rejected and ``resample`` is consulted.
    resample : callable, optional
        attempt index -> fresh params dict, used when the margin is too
        small.  Without it a too-close point raises.
    max_resamples : int

    Returns
    -------
    GradReport
        Per-parameter relative error: the largest coordinate discrepancy
        |a_i - f_i| normalized by the tensor's gradient scale
        max(||a||_inf, max_i |f_i|, 1e-12), which keeps coordinates whose
        true gradient happens to be zero from drowning in rounding noise.
    """
    point = {k: np.asarray(v) for k, v in params.items()}
    attempts = 0
    while True:
        attempts += 1
        leaves = {k: Var(v, name=k) for k, v in point.items()}
        loss = loss_fn(leaves)
        margin = min_kink_margin(loss)
        if margin >= kink_margin:
            break
        if resample is None or attempts > max_resamples:
            raise RuntimeError(
                f"evaluation point sits {margin:.2e} from a kink (< {kink_margin:.0e}) "
                f"after {attempts} attempt(s)"
            )
        point = {k: np.asarray(v) for k, v in resample(attempts).items()}
    if not np.isfinite(loss.value):
        raise NonFiniteError("loss is non-finite at the evaluation point")
    backward(loss)
    analytic = {k: leaves[k].grad for k in point}

    def eval_at(shifted: dict[str, np.ndarray]) -> float:
        out = loss_fn({k: Var(v, name=k) for k, v in shifted.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise NonFiniteError("loss is non-finite at a perturbed point")
        return val

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name in sorted(point):
        base = point[name]
        size = base.size
        if size <= coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=coords_per_tensor, replace=False))
        a = analytic[name]
        a_flat = np.zeros(size) if a is None else a.reshape(size)
        gap = 0.0
        fd_scale = 0.0
        for idx in coords:
            bumped = {k: v.copy() for k, v in point.items()}
            bumped[name].reshape(size)[idx] += epsilon
            f_plus = eval_at(bumped)
            bumped[name].reshape(size)[idx] -= 2 * epsilon
            f_minus = eval_at(bumped)
            fd = (f_plus - f_minus) / (2 * epsilon)
            gap = max(gap, abs(float(a_flat[idx]) - fd))
            fd_scale = max(fd_scale, abs(fd))
        denom = max(float(np.abs(a_flat).max()), fd_scale, 1e-12)
        per_param[name] = gap / denom
    return GradReport(per_param, epsilon, float(margin), attempts)
