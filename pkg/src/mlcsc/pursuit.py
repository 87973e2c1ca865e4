"""Pursuit solvers for layered convolutional sparse models.

A model is an ordered stack of (dictionary, thresholds) layers; a signal is
encoded by driving each layer's code so that the layer above reconstructs
the one below.  Four solvers share that contract:

- ``lta_forward``: one thresholding pass per layer (bias of either sign).
- ``lbp_forward``: per-layer proximal-gradient iterations from a zero code.
- ``mlista_forward``: global iterations that re-anchor every layer on the
  deepest code before refining shallowest-first.
- ``wsebp_forward``: a single corrected pass per layer around a selectable
  anchor code.

All solvers accept single signals ``[c, H, W]`` or batches ``[n, c, H, W]``
and return a :class:`PursuitResult` with per-layer codes and per-pass
objective traces.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from .dictionary import (
    ConvDictionary,
    DimensionError,
    analyze,
    require_finite,
    synthesize,
)

THRESHOLD_MODES = ("soft", "relu")


class AnchorPolicy(enum.Enum):
    """Choice of the anchor code a single-pass correction expands around."""

    ZERO = "zero"
    ANALYSIS = "analysis"
    LITERAL = "literal"


def _per_channel(v, what: str) -> np.ndarray:
    """Shape a scalar or per-channel vector for broadcast over [..., m, h, w]."""
    arr = np.asarray(v)
    if arr.ndim == 0:
        return arr
    if arr.ndim != 1:
        raise DimensionError(f"{what} must be a scalar or 1-D per-channel vector")
    return arr[:, None, None]


def soft_threshold(x, threshold) -> np.ndarray:
    """Two-sided shrinkage sign(x) * max(|x| - t, 0).

    Parameters
    ----------
    x : array_like
    threshold : float or 1-D array
        Nonnegative; a vector is applied per code channel.
    """
    x = np.asarray(x)
    t = np.asarray(threshold)
    require_finite(t, "threshold")
    if np.any(t < 0):
        raise ValueError("soft threshold requires nonnegative thresholds")
    t = _per_channel(t, "threshold")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def shifted_relu(x, bias) -> np.ndarray:
    """One-sided thresholding max(x + b, 0); the bias may take either sign."""
    x = np.asarray(x)
    b = np.asarray(bias)
    require_finite(b, "bias")
    return np.maximum(x + _per_channel(b, "bias"), 0.0)


def _prox(z: np.ndarray, xi: np.ndarray, mode: str) -> np.ndarray:
    if mode == "relu":
        return shifted_relu(z, xi)
    if mode == "soft":
        return soft_threshold(z, xi)
    raise ValueError(f"unknown threshold mode {mode!r}; pick from {THRESHOLD_MODES}")


@dataclass
class LayerParams:
    """Per-layer solver constants: thresholds ``xi`` and step scale ``beta``.

    ``xi`` holds one entry per code channel (or a single broadcast entry).
    ``beta`` must dominate the layer operator's largest eigenvalue for the
    iterative solvers to descend; solvers step by ``1/beta``.
    """

    xi: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        self.xi = np.atleast_1d(np.asarray(self.xi))
        if self.xi.ndim != 1:
            raise DimensionError(f"xi must be scalar or 1-D, got rank {self.xi.ndim}")
        require_finite(self.xi, "xi")
        self.beta = float(self.beta)
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValueError(f"beta must be a positive finite scalar, got {self.beta}")

    @property
    def alpha(self) -> float:
        """Step size 1/beta."""
        return 1.0 / self.beta


@dataclass
class MLCSCModel:
    """Stack of (dictionary, params) layers plus a solver selection.

    ``layers[i][0].atoms`` must equal ``layers[i+1][0].in_channels`` so the
    codes chain.  ``algorithm`` picks the solver :func:`run_pursuit`
    dispatches to, ``iters`` is its iteration budget, ``anchor`` the
    single-pass anchor policy, and ``threshold`` the proximal mode
    (``"relu"`` biases then clips, ``"soft"`` shrinks two-sided).
    """

    layers: list[tuple[ConvDictionary, LayerParams]]
    algorithm: str = "wsebp"
    iters: int = 0
    anchor: AnchorPolicy = AnchorPolicy.ANALYSIS
    threshold: str = "relu"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for idx, (d, p) in enumerate(self.layers):
            if not isinstance(d, ConvDictionary) or not isinstance(p, LayerParams):
                raise TypeError("layers must be (ConvDictionary, LayerParams) pairs")
            if p.xi.shape[0] not in (1, d.atoms):
                raise DimensionError(
                    f"layer {idx}: xi has {p.xi.shape[0]} entries for {d.atoms} atoms"
                )
            if idx > 0 and d.in_channels != self.layers[idx - 1][0].atoms:
                raise DimensionError(
                    f"layer {idx} expects {d.in_channels} channels but layer "
                    f"{idx - 1} emits {self.layers[idx - 1][0].atoms}"
                )
        if self.algorithm not in ("lta", "lbp", "mlista", "wsebp"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not isinstance(self.iters, (int, np.integer)) or self.iters < 0:
            raise ValueError(f"iters must be a nonnegative int, got {self.iters!r}")
        self.anchor = AnchorPolicy(self.anchor)
        if self.threshold not in THRESHOLD_MODES:
            raise ValueError(f"unknown threshold mode {self.threshold!r}")

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass
class PursuitResult:
    """Solver output: one code per layer, one objective entry per pass.

    ``objectives[i]`` grows by one entry each time layer ``i`` is updated
    (single-pass solvers record one entry; per-layer iteration records
    ``iters``; global iteration records the initial pass plus one per
    iteration).  ``input_shape`` keeps the encoded signal's exact shape so
    reconstruction does not have to guess spatial extents.
    """

    codes: list[np.ndarray]
    objectives: list[list[float]]
    seconds: float
    input_shape: tuple[int, ...]

    @property
    def deepest(self) -> np.ndarray:
        return self.codes[-1]


@dataclass
class LayerObjective:
    """Value of 0.5||u - D g||^2 + lam*||g||_1 plus sparsity accounting."""

    value: float
    l1: float
    l0: int


def layer_objective(u, d: ConvDictionary, gamma, lam: float) -> LayerObjective:
    """Single-layer reconstruction objective with an l1 penalty.

    Parameters
    ----------
    u : array_like
        Layer input, ``[c, H, W]`` (or batched).
    d : ConvDictionary
    gamma : array_like
        Candidate code for ``u`` under ``d``.
    lam : float
        Nonnegative l1 weight.
    """
    u = np.asarray(u)
    gamma = np.asarray(gamma)
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lam must be nonnegative and finite, got {lam}")
    resid = u - synthesize(d, gamma, output_shape=u.shape[-2:])
    l1 = float(np.abs(gamma).sum())
    value = 0.5 * float((resid**2).sum()) + lam * l1
    return LayerObjective(value=value, l1=l1, l0=int((np.abs(gamma) > 1e-12).sum()))


def _trace_value(
    u: np.ndarray, d: ConvDictionary, gamma: np.ndarray, p: LayerParams, mode: str
) -> float:
    """Objective the given proximal mode provably descends.

    Soft mode scores 0.5||u - D g||^2 + beta * sum_c xi_c ||g_c||_1.  Relu
    mode emits nonnegative codes, and ReLU(z + xi) is the prox of the linear
    penalty -beta*xi*g on the nonnegative orthant, so the matching value is
    0.5||u - D g||^2 - beta * sum_c xi_c * sum(g_c).
    """
    resid = u - synthesize(d, gamma, output_shape=u.shape[-2:])
    base = 0.5 * float((resid**2).sum())
    axes = tuple(ax for ax in range(gamma.ndim) if ax != gamma.ndim - 3)
    if mode == "soft":
        per_channel = np.abs(gamma).sum(axis=axes)
        return base + p.beta * float((p.xi * per_channel).sum())
    per_channel = gamma.sum(axis=axes)
    return base - p.beta * float((p.xi * per_channel).sum())


def _lta_pass(model: MLCSCModel, x: np.ndarray):
    """Shared zero-iteration pass: one biased-ReLU analysis per layer."""
    codes: list[np.ndarray] = []
    traces: list[list[float]] = []
    prev = x
    for d, p in model.layers:
        gamma = shifted_relu(analyze(d, prev), p.xi)
        traces.append([_trace_value(prev, d, gamma, p, "relu")])
        codes.append(gamma)
        prev = gamma
    return codes, traces


def lta_forward(model: MLCSCModel, x) -> PursuitResult:
    """Encode by one thresholding pass per layer: g_i = ReLU(A_i g_{i-1} + xi_i).

    ``A_i`` is layer i's analysis operator and ``g_0 = x``.  The fastest and
    crudest of the solvers; also the shared starting state of the global
    iterative solver.
    """
    x = np.asarray(x)
    t0 = time.perf_counter()
    codes, traces = _lta_pass(model, x)
    return PursuitResult(codes, traces, time.perf_counter() - t0, tuple(x.shape))


def lbp_forward(model: MLCSCModel, x, iters: int, threshold: str | None = None) -> PursuitResult:
    """Encode layer by layer with ``iters`` proximal-gradient steps each.

    Every layer starts from a zero code and iterates
    ``g <- prox(g - (1/beta) A (A^T g - u))`` against its fixed input ``u``
    (the previous layer's final code).  With ``beta`` at or above the layer
    operator's largest eigenvalue each step is non-increasing in the
    layer objective.

    Parameters
    ----------
    model : MLCSCModel
    x : array_like
    iters : int
        Steps per layer, >= 1.
    threshold : str, optional
        ``"soft"`` or ``"relu"``; defaults to the model's mode.
    """
    if not isinstance(iters, (int, np.integer)) or iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters!r}")
    mode = model.threshold if threshold is None else threshold
    x = np.asarray(x)
    t0 = time.perf_counter()
    codes: list[np.ndarray] = []
    traces: list[list[float]] = []
    prev = x
    for d, p in model.layers:
        alpha = 1.0 / p.beta
        in_hw = prev.shape[-2:]
        # The step from the zero code collapses to a plain scaled analysis
        # (the residual is -input), bit-for-bit.
        gamma = _prox(alpha * analyze(d, prev), p.xi, mode)
        trace = [_trace_value(prev, d, gamma, p, mode)]
        for _ in range(iters - 1):
            resid = synthesize(d, gamma, output_shape=in_hw) - prev
            gamma = _prox(gamma - alpha * analyze(d, resid), p.xi, mode)
            trace.append(_trace_value(prev, d, gamma, p, mode))
        codes.append(gamma)
        traces.append(trace)
        prev = gamma
    return PursuitResult(codes, traces, time.perf_counter() - t0, tuple(x.shape))


def effective_dictionary_apply(model: MLCSCModel, i: int, gamma, hw_chain=None) -> np.ndarray:
    """Map a deepest-layer code down to layer ``i`` space (``i = 0``: signal).

    Applies the synthesis operators of layers L..i+1 in order.  ``i = L``
    returns the code unchanged.

    Parameters
    ----------
    model : MLCSCModel
    i : int
        Target layer in ``0..depth``.
    gamma : array_like
        Code in the deepest layer's space.
    hw_chain : sequence of (H, W), optional
        Spatial extents for spaces ``0..depth``; canonical minimal extents
        are inferred when omitted.
    """
    depth = model.depth
    if not 0 <= i <= depth:
        raise ValueError(f"layer index {i} outside 0..{depth}")
    out = np.asarray(gamma)
    for j in range(depth, i, -1):
        d = model.layers[j - 1][0]
        target = None if hw_chain is None else tuple(hw_chain[j - 1])
        out = synthesize(d, out, output_shape=target)
    return out


def mlista_forward(model: MLCSCModel, x, iters: int, threshold: str | None = None) -> PursuitResult:
    """Globally iterated encoding; ``iters = 0`` is exactly :func:`lta_forward`.

    The state after the initial thresholding pass is refined ``iters``
    times.  Each refinement first maps the current deepest code down to
    every layer's space (the re-anchoring step), then sweeps the layers
    shallowest-first, taking one proximal-gradient step at the anchor
    against the freshly updated previous layer:

    ``g_i = prox(h_i - (1/beta_i) A_i (A_i^T h_i - g_{i-1}))``

    where ``h_i`` is the down-mapped anchor for layer ``i``.
    """
    if not isinstance(iters, (int, np.integer)) or iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters!r}")
    mode = model.threshold if threshold is None else threshold
    x = np.asarray(x)
    t0 = time.perf_counter()
    codes, traces = _lta_pass(model, x)
    hw_chain = [x.shape[-2:]] + [c.shape[-2:] for c in codes]
    for _ in range(iters):
        hats = [
            effective_dictionary_apply(model, i, codes[-1], hw_chain)
            for i in range(1, model.depth + 1)
        ]
        prev = x
        for idx, (d, p) in enumerate(model.layers):
            alpha = 1.0 / p.beta
            hat = hats[idx]
            resid = synthesize(d, hat, output_shape=prev.shape[-2:]) - prev
            gamma = _prox(hat - alpha * analyze(d, resid), p.xi, mode)
            codes[idx] = gamma
            traces[idx].append(_trace_value(prev, d, gamma, p, mode))
            prev = gamma
    return PursuitResult(codes, traces, time.perf_counter() - t0, tuple(x.shape))


def wsebp_forward(model: MLCSCModel, x, anchor: AnchorPolicy | None = None) -> PursuitResult:
    """Single corrected pass per layer around an anchor code.

    For each layer with input ``u`` the anchor ``z`` is chosen by policy
    (ZERO: zeros; ANALYSIS: ``A u``; LITERAL: ``u`` itself, valid only when
    the code space matches the input space), then

    ``g = ReLU(z + (1/beta) A (u - A^T z) + xi)``.

    At ``beta = 1`` the ZERO policy reproduces :func:`lta_forward` exactly.
    """
    policy = AnchorPolicy(model.anchor if anchor is None else anchor)
    x = np.asarray(x)
    t0 = time.perf_counter()
    codes: list[np.ndarray] = []
    traces: list[list[float]] = []
    prev = x
    for idx, (d, p) in enumerate(model.layers):
        alpha = 1.0 / p.beta
        in_hw = prev.shape[-2:]
        oh, ow = d.code_hw(in_hw)
        if policy is AnchorPolicy.ZERO:
            # Zero anchor: the correction sees the raw input, nothing to expand.
            gamma = shifted_relu(alpha * analyze(d, prev), p.xi)
            traces.append([_trace_value(prev, d, gamma, p, "relu")])
            codes.append(gamma)
            prev = gamma
            continue
        if policy is AnchorPolicy.ANALYSIS:
            z = analyze(d, prev)
        else:
            if prev.shape[-3] != d.atoms or (oh, ow) != tuple(in_hw):
                raise DimensionError(
                    f"literal anchor needs matching input/code spaces at layer {idx}: "
                    f"input {prev.shape[-3:]} vs code {(d.atoms, oh, ow)}"
                )
            z = prev
        resid = prev - synthesize(d, z, output_shape=in_hw)
        gamma = shifted_relu(z + alpha * analyze(d, resid), p.xi)
        traces.append([_trace_value(prev, d, gamma, p, "relu")])
        codes.append(gamma)
        prev = gamma
    return PursuitResult(codes, traces, time.perf_counter() - t0, tuple(x.shape))


def run_pursuit(model: MLCSCModel, x) -> PursuitResult:
    """Dispatch on ``model.algorithm`` with the model's own budget.

    A zero iteration budget for the iterative solvers means the shared
    thresholding pass, so ``lbp``/``mlista`` at ``iters = 0`` and ``lta``
    coincide by construction.
    """
    if model.algorithm == "lta":
        return lta_forward(model, x)
    if model.algorithm == "lbp":
        if model.iters == 0:
            return lta_forward(model, x)
        return lbp_forward(model, x, model.iters)
    if model.algorithm == "mlista":
        return mlista_forward(model, x, model.iters)
    return wsebp_forward(model, x, model.anchor)


def reconstruct(model: MLCSCModel, result: PursuitResult, from_layer: int | None = None, x=None):
    """Synthesize a signal estimate from the codes of one solve.

    Parameters
    ----------
    model : MLCSCModel
    result : PursuitResult
        Codes produced by any solver on this model.
    from_layer : int, optional
        Start layer in ``1..depth`` (default: deepest); shallower layers'
        synthesis operators are applied in turn.
    x : array_like, optional
        When given, returns ``(estimate, nmse(x, estimate))`` instead of the
        estimate alone.
    """
    depth = model.depth
    start = depth if from_layer is None else int(from_layer)
    if not 1 <= start <= depth:
        raise ValueError(f"from_layer {start} outside 1..{depth}")
    hw_chain = [result.input_shape[-2:]] + [c.shape[-2:] for c in result.codes]
    out = result.codes[start - 1]
    for j in range(start, 0, -1):
        out = synthesize(model.layers[j - 1][0], out, output_shape=hw_chain[j - 1])
    if x is None:
        return out
    return out, nmse(x, out)


def nmse(x, xhat) -> float:
    """Normalized squared error ||x - xhat||^2 / ||x||^2 (0 when both vanish)."""
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    num = float(((x - xhat) ** 2).sum())
    den = float((x**2).sum())
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den
