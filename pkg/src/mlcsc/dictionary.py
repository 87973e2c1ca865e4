"""Convolutional dictionaries as explicit linear operators.

A dictionary is a bank of ``atoms`` filters over ``in_channels`` input
planes.  ``analyze`` applies the transpose operator (strided
cross-correlation), ``synthesize`` applies the forward operator (the exact
adjoint of ``analyze``), ``materialize`` writes the analysis operator out as
a dense matrix for small geometries, and ``estimate_spectral_bound`` returns
a power-iteration upper bound on the operator's largest eigenvalue.
Signals are ``[channels, height, width]`` arrays or ``[batch, channels,
height, width]`` batches; codes use the same layout with ``atoms`` in the
channel slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Array rank or extent does not match the operator's geometry."""


class NonFiniteError(ValueError):
    """Input contains NaN or infinity."""


class ResourceError(RuntimeError):
    """A dense materialization would exceed the configured element cap."""


def as_tensor(data, dtype=None) -> np.ndarray:
    """Coerce to an ndarray of rank 1..4 with all-finite entries.

    Parameters
    ----------
    data : array_like
        Anything ``np.asarray`` accepts.
    dtype : numpy dtype, optional
        Target dtype; left as inferred when omitted.

    Returns
    -------
    np.ndarray
        The validated array (no copy when none is needed).
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim < 1 or arr.ndim > 4:
        raise DimensionError(f"expected rank 1..4, got rank {arr.ndim}")
    require_finite(arr, "tensor")
    return arr


def require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial extent after strided correlation: floor((n + 2p - k)/s) + 1."""
    span = extent + 2 * padding - kernel
    if span < 0:
        raise DimensionError(
            f"extent {extent} with padding {padding} is smaller than kernel {kernel}"
        )
    return span // stride + 1


def minimal_input_extent(out_extent: int, kernel: int, stride: int, padding: int) -> int:
    """Smallest input extent that maps to ``out_extent`` under the floor rule."""
    extent = (out_extent - 1) * stride - 2 * padding + kernel
    if extent < 1:
        raise DimensionError(
            f"no valid input extent for output {out_extent} "
            f"(kernel {kernel}, stride {stride}, padding {padding})"
        )
    return extent


@dataclass
class ConvDictionary:
    """Filter bank plus the geometry that fixes its linear operator.

    Parameters
    ----------
    weights : np.ndarray
        Filters, shape ``[atoms, in_channels, kh, kw]``.
    stride : int
        Correlation stride, >= 1.
    padding : int
        Symmetric zero padding (zero boundary only).
    boundary : str
        ``"zero"`` or ``"circular"``; circular requires stride 1 and no
        padding, and preserves spatial extent.
    unit_norm : bool
        When set, every atom must have unit Euclidean norm (checked to 1e-6).
    """

    weights: np.ndarray
    stride: int = 1
    padding: int = 0
    boundary: str = "zero"
    unit_norm: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 4:
            raise DimensionError(
                f"weights must be [atoms, in_channels, kh, kw], got rank {self.weights.ndim}"
            )
        if min(self.weights.shape) < 1:
            raise DimensionError(f"degenerate weights shape {self.weights.shape}")
        require_finite(self.weights, "weights")
        if not isinstance(self.stride, (int, np.integer)) or self.stride < 1:
            raise DimensionError(f"stride must be a positive int, got {self.stride!r}")
        if not isinstance(self.padding, (int, np.integer)) or self.padding < 0:
            raise DimensionError(f"padding must be a nonnegative int, got {self.padding!r}")
        if self.boundary not in ("zero", "circular"):
            raise DimensionError(f"unknown boundary {self.boundary!r}")
        if self.boundary == "circular":
            if self.stride != 1:
                raise DimensionError("circular boundary requires stride 1")
            if self.padding != 0:
                raise DimensionError("circular boundary wraps; padding must be 0")
        if self.unit_norm:
            norms = np.sqrt((self.weights.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError(
                    f"unit_norm set but atom norms stray to {np.abs(norms - 1.0).max():.2e}"
                )

    @property
    def atoms(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return (self.weights.shape[2], self.weights.shape[3])

    def code_hw(self, in_hw: tuple[int, int]) -> tuple[int, int]:
        """Code-plane extent produced by ``analyze`` for a given input extent."""
        if self.boundary == "circular":
            return (int(in_hw[0]), int(in_hw[1]))
        kh, kw = self.kernel
        return (
            output_extent(int(in_hw[0]), kh, self.stride, self.padding),
            output_extent(int(in_hw[1]), kw, self.stride, self.padding),
        )

    def signal_hw(self, code_hw: tuple[int, int]) -> tuple[int, int]:
        """Canonical (minimal) input extent that yields ``code_hw``."""
        if self.boundary == "circular":
            return (int(code_hw[0]), int(code_hw[1]))
        kh, kw = self.kernel
        return (
            minimal_input_extent(int(code_hw[0]), kh, self.stride, self.padding),
            minimal_input_extent(int(code_hw[1]), kw, self.stride, self.padding),
        )


def random_dictionary(
    atoms: int,
    in_channels: int,
    kernel,
    stride: int = 1,
    padding: int = 0,
    boundary: str = "zero",
    unit_norm: bool = False,
    seed: int = 0,
    dtype=np.float64,
) -> ConvDictionary:
    """Gaussian filter bank, scaled by sqrt(2 / fan_in), optionally unit-norm."""
    kh, kw = (kernel, kernel) if isinstance(kernel, (int, np.integer)) else kernel
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((atoms, in_channels, kh, kw))
    w *= np.sqrt(2.0 / (in_channels * kh * kw))
    if unit_norm:
        w /= np.sqrt((w**2).sum(axis=(1, 2, 3), keepdims=True))
    return ConvDictionary(
        w.astype(dtype), stride=stride, padding=padding, boundary=boundary, unit_norm=unit_norm
    )


def identity_dictionary(channels: int = 1, dtype=np.float64) -> ConvDictionary:
    """1x1 dictionary whose operator is the identity on ``channels`` planes."""
    w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1)
    return ConvDictionary(w)


def _batched(x: np.ndarray):
    """Return (4-D view, had_batch_axis)."""
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise DimensionError(f"expected rank 3 or 4, got rank {x.ndim}")


def _patches(u4: np.ndarray, kh: int, kw: int, stride: int, padding: int, boundary: str):
    """im2col view: [batch, out_h, out_w, channels, kh, kw], contiguous."""
    if boundary == "circular":
        padded = np.pad(u4, ((0, 0), (0, 0), (0, kh - 1), (0, kw - 1)), mode="wrap")
    elif padding > 0:
        padded = np.pad(u4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        padded = u4
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _correlate(
    weights: np.ndarray, u4: np.ndarray, stride: int, padding: int, boundary: str
) -> np.ndarray:
    """Analysis kernel on a 4-D batch; returns [batch, atoms, out_h, out_w]."""
    atoms, c, kh, kw = weights.shape
    n = u4.shape[0]
    pat = _patches(u4, kh, kw, stride, padding, boundary)
    oh, ow = pat.shape[1], pat.shape[2]
    flat = pat.reshape(n * oh * ow, c * kh * kw)
    out = flat @ weights.reshape(atoms, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, atoms).transpose(0, 3, 1, 2))


def _correlate_adjoint(
    weights: np.ndarray,
    g4: np.ndarray,
    stride: int,
    padding: int,
    boundary: str,
    out_hw: tuple[int, int],
) -> np.ndarray:
    """Exact adjoint of :func:`_correlate`; returns [batch, in_channels, H, W]."""
    atoms, c, kh, kw = weights.shape
    n, _, oh, ow = g4.shape
    h, w = out_hw
    # One GEMM spreads every code entry over its receptive field ...
    spread = np.tensordot(g4, weights, axes=([1], [0]))  # [n, oh, ow, c, kh, kw]
    dtype = spread.dtype
    if boundary == "circular":
        buf = np.zeros((n, c, h + kh - 1, w + kw - 1), dtype=dtype)
    else:
        buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dtype)
    # ... then kh*kw strided slice-adds accumulate the overlaps.
    for dy in range(kh):
        for dx in range(kw):
            piece = spread[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            buf[
                :,
                :,
                dy : dy + stride * (oh - 1) + 1 : stride,
                dx : dx + stride * (ow - 1) + 1 : stride,
            ] += piece
    if boundary == "circular":
        out = buf[:, :, :h, :w].copy()
        if kh > 1:
            out[:, :, : kh - 1, :] += buf[:, :, h:, :w]
        if kw > 1:
            out[:, :, :, : kw - 1] += buf[:, :, :h, w:]
        if kh > 1 and kw > 1:
            out[:, :, : kh - 1, : kw - 1] += buf[:, :, h:, w:]
        return out
    if padding > 0:
        return buf[:, :, padding : padding + h, padding : padding + w].copy()
    return buf


def _weight_gradient(
    u4: np.ndarray, g4: np.ndarray, stride: int, padding: int, boundary: str, kh: int, kw: int
) -> np.ndarray:
    """d(correlate)/d(weights) contracted with cotangent g4: [atoms, c, kh, kw]."""
    n, c = u4.shape[0], u4.shape[1]
    atoms = g4.shape[1]
    pat = _patches(u4, kh, kw, stride, padding, boundary)
    oh, ow = pat.shape[1], pat.shape[2]
    gflat = g4.transpose(1, 0, 2, 3).reshape(atoms, n * oh * ow)
    pflat = pat.reshape(n * oh * ow, c * kh * kw)
    return (gflat @ pflat).reshape(atoms, c, kh, kw)


def analyze(d: ConvDictionary, u) -> np.ndarray:
    """Apply the transpose operator: strided cross-correlation with the atoms.

    Parameters
    ----------
    d : ConvDictionary
    u : array_like
        Signal ``[in_channels, H, W]`` or batch ``[n, in_channels, H, W]``.

    Returns
    -------
    np.ndarray
        Code ``[atoms, H', W']`` (or batched), where ``H' = floor((H + 2p -
        kh)/s) + 1`` for the zero boundary and ``H' = H`` for circular.
    """
    u = np.asarray(u)
    u4, batched = _batched(u)
    require_finite(u4, "analyze input")
    if u4.shape[1] != d.in_channels:
        raise DimensionError(
            f"expected {d.in_channels} input channels, got {u4.shape[1]}"
        )
    d.code_hw((u4.shape[2], u4.shape[3]))  # validates the geometry up front
    out = _correlate(d.weights, u4, d.stride, d.padding, d.boundary)
    return out if batched else out[0]


def synthesize(d: ConvDictionary, gamma, output_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Apply the forward operator (exact adjoint of :func:`analyze`).

    Parameters
    ----------
    d : ConvDictionary
    gamma : array_like
        Code ``[atoms, H', W']`` or batch ``[n, atoms, H', W']``.
    output_shape : (int, int), optional
        Spatial extent ``(H, W)`` of the signal to produce.  Omitted, the
        canonical minimal extent ``(H'-1)*s - 2p + k`` is inferred; supplied,
        it must map back to ``(H', W')`` under the floor rule.

    Returns
    -------
    np.ndarray
        Signal ``[in_channels, H, W]`` (or batched).
    """
    gamma = np.asarray(gamma)
    g4, batched = _batched(gamma)
    require_finite(g4, "synthesize input")
    if g4.shape[1] != d.atoms:
        raise DimensionError(f"expected {d.atoms} code channels, got {g4.shape[1]}")
    code_hw = (g4.shape[2], g4.shape[3])
    if output_shape is None:
        out_hw = d.signal_hw(code_hw)
    else:
        out_hw = (int(output_shape[0]), int(output_shape[1]))
        if min(out_hw) < 1:
            raise DimensionError(f"invalid output extent {out_hw}")
        if d.code_hw(out_hw) != code_hw:
            raise DimensionError(
                f"output extent {out_hw} maps to code extent {d.code_hw(out_hw)}, "
                f"but the code has extent {code_hw}"
            )
    out = _correlate_adjoint(d.weights, g4, d.stride, d.padding, d.boundary, out_hw)
    return out if batched else out[0]


def materialize(
    d: ConvDictionary, input_shape: tuple[int, int, int], cap: int = 10_000_000
) -> np.ndarray:
    """Dense analysis matrix ``A`` with ``analyze(d, u) == A @ u.ravel()``.

    Parameters
    ----------
    d : ConvDictionary
    input_shape : (channels, H, W)
        Signal geometry the matrix should act on.
    cap : int
        Maximum number of matrix elements; beyond it a :class:`ResourceError`
        is raised instead of allocating.

    Returns
    -------
    np.ndarray
        ``[atoms * H' * W', channels * H * W]`` array; ``synthesize`` is its
        transpose.
    """
    c, h, w = (int(x) for x in input_shape)
    if c != d.in_channels:
        raise DimensionError(f"expected {d.in_channels} input channels, got {c}")
    oh, ow = d.code_hw((h, w))
    rows = d.atoms * oh * ow
    cols = c * h * w
    if rows * cols > cap:
        raise ResourceError(
            f"dense matrix would hold {rows}x{cols} = {rows * cols} elements (cap {cap})"
        )
    a = np.empty((rows, cols), dtype=d.weights.dtype)
    chunk = max(1, min(cols, 4096))
    for start in range(0, cols, chunk):
        stop = min(start + chunk, cols)
        basis = np.zeros((stop - start, cols), dtype=d.weights.dtype)
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        out = _correlate(
            d.weights, basis.reshape(stop - start, c, h, w), d.stride, d.padding, d.boundary
        )
        a[:, start:stop] = out.reshape(stop - start, rows).T
    return a


@dataclass
class SpectralEstimate:
    """Power-iteration summary for ``analyze(synthesize(.))``."""

    bound: float
    iterations: int
    residual: float
    degenerate: bool = False


def estimate_spectral_bound(
    d: ConvDictionary,
    input_shape: tuple[int, int, int],
    max_iters: int = 200,
    tol: float = 1e-9,
    seed: int = 0,
) -> SpectralEstimate:
    """Upper bound on the largest eigenvalue of the composed operator.

    Runs power iteration on ``v -> analyze(d, synthesize(d, v))`` from a
    seeded random unit start and returns 1.01x the final Rayleigh quotient.
    A zero operator (or a start annihilated by it) is flagged ``degenerate``
    with the floor bound 1e-12.

    Parameters
    ----------
    d : ConvDictionary
    input_shape : (channels, H, W)
        Signal geometry; fixes the code space the iteration lives in.
    max_iters, tol : int, float
        Stop after ``max_iters`` rounds or when the relative Rayleigh change
        drops below ``tol``.
    seed : int
        Seed for the starting vector.
    """
    c, h, w = (int(x) for x in input_shape)
    if c != d.in_channels:
        raise DimensionError(f"expected {d.in_channels} input channels, got {c}")
    oh, ow = d.code_hw((h, w))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((d.atoms, oh, ow))
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    lam = 0.0
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        fv = analyze(d, synthesize(d, v, output_shape=(h, w)))
        lam = float(np.vdot(v, fv))
        nrm = float(np.linalg.norm(fv))
        if nrm == 0.0:
            return SpectralEstimate(1e-12, iterations, 0.0, degenerate=True)
        residual = abs(lam - lam_prev) / max(abs(lam), 1e-300)
        if residual <= tol:
            break
        lam_prev = lam
        v = fv / nrm
    return SpectralEstimate(1.01 * lam, iterations, residual, degenerate=False)
