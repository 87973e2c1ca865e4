"""Dataset and tensor I/O plus synthetic problem generators.

Covers the two binary image formats (single-byte-label and two-byte-label
record layouts at 32x32 RGB), a tiny tensor file format for checkpoints, a
plain-text manifest codec, layered sparse test problems with known codes,
and a deterministic synthetic image corpus written through the real binary
codec so loader, splitter, and trainer can be exercised without external
downloads.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dictionary import ConvDictionary, DimensionError, materialize, random_dictionary, synthesize
from .pursuit import LayerParams, MLCSCModel


class FormatError(ValueError):
    """A byte stream does not parse as the expected file format."""


CIFAR_VARIANTS = {
    # record = label byte(s) + 3*32*32 channel-planar pixels
    "cifar10": {"record": 3073, "label_offset": 0, "label_bytes": 1, "classes": 10},
    "cifar100": {"record": 3074, "label_offset": 1, "label_bytes": 2, "classes": 100},
}


@dataclass
class Dataset:
    """In-memory image classification split."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [n, c, h, w], got rank {self.images.ndim}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels outside 0..{self.num_classes - 1}: "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def load_cifar(paths, variant: str = "cifar10") -> Dataset:
    """Parse binary batch files into one dataset, pixels scaled to [0, 1].

    Parameters
    ----------
    paths : str or sequence of str
        Batch files, concatenated in order.
    variant : str
        ``"cifar10"`` (3073-byte records, one label byte) or ``"cifar100"``
        (3074-byte records; the fine label in byte 1 is used).
    """
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    spec = CIFAR_VARIANTS[variant]
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % spec["record"] != 0:
            raise FormatError(
                f"{path}: {len(raw)} bytes is not a positive multiple of "
                f"record size {spec['record']}"
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, spec["record"]))
    records = np.concatenate(chunks, axis=0)
    labels = records[:, spec["label_offset"]].astype(np.int64)
    if labels.max(initial=0) >= spec["classes"]:
        raise FormatError(
            f"label {labels.max()} out of range for {variant} ({spec['classes']} classes)"
        )
    pixels = records[:, spec["label_bytes"] :].reshape(-1, 3, 32, 32)
    images = pixels.astype(np.float32) / 255.0
    return Dataset(images, labels, variant, spec["classes"])


def write_cifar_batch(path, images_u8: np.ndarray, labels: np.ndarray, variant: str = "cifar10"):
    """Inverse of :func:`load_cifar` for uint8 images (test/fixture helper)."""
    spec = CIFAR_VARIANTS[variant]
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels)
    n = images_u8.shape[0]
    if images_u8.shape != (n, 3, 32, 32):
        raise DimensionError(f"expected [n, 3, 32, 32] uint8 images, got {images_u8.shape}")
    rows = np.empty((n, spec["record"]), dtype=np.uint8)
    if variant == "cifar100":
        rows[:, 0] = labels // 5  # stand-in coarse label; only byte 1 is read back
        rows[:, 1] = labels
    else:
        rows[:, 0] = labels
    rows[:, spec["label_bytes"] :] = images_u8.reshape(n, -1)
    Path(path).write_bytes(rows.tobytes())


def split(data: Dataset, sizes, seed: int = 0) -> list[Dataset]:
    """Disjoint random subsets with the given sizes, order fixed by seed."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ValueError(f"sizes must be nonnegative, got {sizes}")
    if sum(sizes) > len(data):
        raise ValueError(f"requested {sum(sizes)} samples from {len(data)}")
    order = np.random.default_rng(seed).permutation(len(data))
    parts = []
    at = 0
    for i, size in enumerate(sizes):
        idx = order[at : at + size]
        at += size
        parts.append(
            Dataset(data.images[idx], data.labels[idx], f"{data.name}#{i}", data.num_classes)
        )
    return parts


def channel_stats(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over every pixel."""
    mean = data.images.mean(axis=(0, 2, 3))
    std = data.images.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


def normalize(data: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Standardize channels with externally supplied statistics."""
    mean = np.asarray(mean, dtype=data.images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=data.images.dtype).reshape(1, -1, 1, 1)
    return Dataset((data.images - mean) / std, data.labels, data.name, data.num_classes)


# --- tensor files -----------------------------------------------------------

TENSOR_MAGIC = b"MLCT"
TENSOR_VERSION = 1


def write_tensor_file(path, tensor) -> None:
    """Serialize a rank 1..4 tensor as float32: magic, version, rank, extents, payload.

    Header is 4 magic bytes, a version byte, a rank byte, then rank
    little-endian uint32 extents; the payload is the row-major float32
    values.  A rank-1 single-value file is exactly 14 bytes.
    """
    arr = np.asarray(tensor)
    if arr.ndim < 1 or arr.ndim > 4:
        raise DimensionError(f"tensor files hold rank 1..4, got rank {arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    if any(s >= 2**32 for s in arr.shape):
        raise ValueError(f"extent too large for the format: {arr.shape}")
    header = TENSOR_MAGIC + struct.pack("<BB", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_file(path) -> np.ndarray:
    """Parse a tensor file back into a float32 array; strict on every byte."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError(f"{path}: {len(raw)} bytes is too short for a header")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = raw[4], raw[5]
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if not 1 <= rank <= 4:
        raise FormatError(f"{path}: rank {rank} outside 1..4")
    header_len = 6 + 4 * rank
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated extent list")
    shape = struct.unpack(f"<{rank}I", raw[6:header_len])
    count = int(np.prod(shape, dtype=np.int64))
    expected = header_len + 4 * count
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - header_len} bytes, expected {4 * count}")
    values = np.frombuffer(raw, dtype="<f4", offset=header_len).reshape(shape).copy()
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return values


# --- manifests ---------------------------------------------------------------


def write_manifest(path, mapping: dict) -> None:
    """Plain-text key=value lines, one per entry, insertion order."""
    lines = []
    for key, value in mapping.items():
        key = str(key)
        if "=" in key or "\n" in key:
            raise ValueError(f"bad manifest key {key!r}")
        value = str(value)
        if "\n" in value:
            raise ValueError(f"manifest value for {key!r} contains a newline")
        lines.append(f"{key}={value}\n")
    Path(path).write_text("".join(lines))


def read_manifest(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


# --- synthetic layered sparse problems ---------------------------------------


@dataclass
class SynthProblem:
    """Generative instance: known model, known codes, observed signal.

    ``codes[-1]`` carries ``k_sparse`` spikes; shallower codes and the clean
    signal follow by synthesis, so at ``sigma = 0`` the chain reconstructs
    the signal exactly.  ``support`` holds the flat indices of the deepest
    code's nonzeros.
    """

    model: MLCSCModel
    codes: list[np.ndarray]
    signal: np.ndarray
    clean_signal: np.ndarray
    support: np.ndarray
    sigma: float
    k_sparse: int
    seed: int


def synth_sparse_problem(
    channels: tuple[int, ...],
    in_channels: int = 1,
    spatial: tuple[int, int] = (8, 8),
    kernel: int = 3,
    k_sparse: int = 3,
    sigma: float = 0.0,
    seed: int = 0,
    xi: float = 0.0,
) -> SynthProblem:
    """Draw unit-norm circular dictionaries and a sparse deepest code.

    Circular stride-1 layers keep every code plane the same spatial size as
    the signal, which makes the generative chain exact and the dense oracle
    cheap.  Spike magnitudes are uniform in [0.5, 1.5] with random signs.
    """
    if k_sparse < 0:
        raise ValueError(f"k_sparse must be >= 0, got {k_sparse}")
    rng = np.random.default_rng(seed)
    h, w = (int(spatial[0]), int(spatial[1]))
    layers = []
    cin = in_channels
    for i, m in enumerate(channels):
        d = random_dictionary(
            m,
            cin,
            kernel,
            boundary="circular",
            unit_norm=True,
            seed=int(rng.integers(2**31)),
        )
        layers.append((d, LayerParams(np.full(m, float(xi)))))
        cin = m
    model = MLCSCModel(layers, algorithm="lbp", threshold="soft")
    deep = np.zeros((channels[-1], h, w))
    size = deep.size
    k = min(k_sparse, size)
    support = np.sort(rng.choice(size, size=k, replace=False))
    magnitudes = rng.uniform(0.5, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    deep.reshape(-1)[support] = magnitudes
    codes = [deep]
    for d, _ in reversed(model.layers[1:]):
        codes.insert(0, synthesize(d, codes[0], output_shape=(h, w)))
    clean = synthesize(model.layers[0][0], codes[0], output_shape=(h, w))
    noise = sigma * rng.standard_normal(clean.shape) if sigma > 0 else 0.0
    return SynthProblem(
        model, codes, clean + noise, clean, support, float(sigma), k, seed
    )


def flat_spectrum_dictionary(atoms: int, length: int, seed: int = 0) -> ConvDictionary:
    """Circular 1-D-like dictionary whose atoms have unit-modulus spectra.

    A full-width circular filter with a flat power spectrum has exactly
    orthogonal translates, so the dictionary's coherence reduces to the
    cross-correlations between distinct atoms; random spectral phases keep
    those low.  Useful for constructing low-coherence recovery instances.
    """
    if length % 2 != 0:
        raise ValueError("length must be even")
    rng = np.random.default_rng(seed)
    weights = np.empty((atoms, 1, 1, length))
    half = length // 2
    for a in range(atoms):
        spec = np.empty(length, dtype=np.complex128)
        spec[0] = rng.choice([-1.0, 1.0])
        spec[half] = rng.choice([-1.0, 1.0])
        phases = rng.uniform(0.0, 2 * np.pi, size=half - 1)
        spec[1:half] = np.exp(1j * phases)
        spec[half + 1 :] = np.conj(spec[1:half][::-1])
        atom = np.fft.ifft(spec).real
        weights[a, 0, 0] = atom / np.linalg.norm(atom)
    return ConvDictionary(weights, boundary="circular", unit_norm=True)


def coherence(d: ConvDictionary, input_shape: tuple[int, int, int]) -> float:
    """Mutual coherence: max |cosine| between distinct synthesis columns."""
    a = materialize(d, input_shape)
    cols = a.T.astype(np.float64)
    norms = np.linalg.norm(cols, axis=0)
    cols = cols / np.maximum(norms, 1e-300)
    gram = np.abs(cols.T @ cols)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


def support_mask(gamma: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Boolean mask of entries with magnitude above ``tol``."""
    return np.abs(gamma) > tol


# --- synthetic image corpus ---------------------------------------------------


def synthetic_corpus(
    n: int, classes: int = 10, hw: tuple[int, int] = (32, 32), seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic class-patterned RGB images as uint8.

    Each class owns a fixed band-limited pattern (class-specific spatial
    frequencies per channel); samples scale it by a random amplitude and add
    pixel noise.  Classes stay linearly separable enough for a small net
    while leaving the task non-trivial.
    """
    h, w = hw
    labels = (np.arange(n) % classes).astype(np.int64)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    patterns = np.empty((classes, 3, h, w))
    pat_rng = np.random.default_rng(seed + 1)
    for c in range(classes):
        for ch in range(3):
            fy = pat_rng.uniform(0.5, 3.0)
            fx = pat_rng.uniform(0.5, 3.0)
            py, px = pat_rng.uniform(0, 2 * np.pi, size=2)
            patterns[c, ch] = np.sin(2 * np.pi * fy * yy / h + py) * np.cos(
                2 * np.pi * fx * xx / w + px
            )
    amp = rng.uniform(0.7, 1.3, size=n)
    noise = rng.standard_normal((n, 3, h, w))
    img = 0.5 + 0.33 * amp[:, None, None, None] * patterns[labels] + 0.10 * noise
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8), labels


def ensure_synthetic_cifar(
    directory, n_train: int = 6000, n_test: int = 2000, seed: int = 7
) -> tuple[Path, Path]:
    """Write (once) a synthetic corpus through the binary codec; return paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train_path = directory / f"synth_train_{n_train}_{seed}.bin"
    test_path = directory / f"synth_test_{n_test}_{seed}.bin"
    if not train_path.exists() or not test_path.exists():
        images, labels = synthetic_corpus(n_train + n_test, seed=seed)
        write_cifar_batch(train_path, images[:n_train], labels[:n_train])
        write_cifar_batch(test_path, images[n_train:], labels[n_train:])
    return train_path, test_path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
