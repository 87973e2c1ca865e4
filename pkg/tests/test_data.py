"""I/O formats, splits, synthetic generators, and the committed golden batch."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlcsc.data import (
    Dataset,
    FormatError,
    channel_stats,
    coherence,
    ensure_synthetic_cifar,
    flat_spectrum_dictionary,
    load_cifar,
    normalize,
    read_manifest,
    read_tensor_file,
    sha256_file,
    split,
    support_mask,
    synth_sparse_problem,
    synthetic_corpus,
    write_cifar_batch,
    write_manifest,
    write_tensor_file,
)
from mlcsc.dictionary import DimensionError, materialize
from mlcsc.pursuit import effective_dictionary_apply

FIXTURE = Path(__file__).parent / "fixtures" / "synth_batch.bin"
FIXTURE_SHA256 = "546e5bd02440f5ff26099d8ab266537a494a977aa6046f8e82b8948e23ec7dbb"


@st.composite
def small_tensors(draw):
    rank = draw(st.integers(1, 4))
    shape = tuple(draw(st.integers(1, 4)) for _ in range(rank))
    seed = draw(st.integers(0, 2**16))
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


@given(tensor=small_tensors())
def test_tensor_file_roundtrip_bitwise(tmp_path_factory, tensor):
    path = tmp_path_factory.mktemp("tensors") / "t.mlct"
    write_tensor_file(path, tensor)
    back = read_tensor_file(path)
    assert back.dtype == np.float32
    assert back.shape == tensor.shape
    np.testing.assert_array_equal(back, tensor)


def test_tensor_single_value_file_is_14_bytes(tmp_path):
    path = tmp_path / "one.mlct"
    write_tensor_file(path, np.array([2.5], dtype=np.float32))
    assert path.stat().st_size == 14
    np.testing.assert_array_equal(read_tensor_file(path), [2.5])


def test_tensor_file_format_errors(tmp_path):
    good = tmp_path / "good.mlct"
    write_tensor_file(good, np.ones((2, 3), dtype=np.float32))
    raw = good.read_bytes()

    bad_magic = tmp_path / "magic.mlct"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_tensor_file(bad_magic)

    bad_version = tmp_path / "version.mlct"
    bad_version.write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(FormatError, match="version"):
        read_tensor_file(bad_version)

    truncated = tmp_path / "trunc.mlct"
    truncated.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="payload"):
        read_tensor_file(truncated)

    tiny = tmp_path / "tiny.mlct"
    tiny.write_bytes(raw[:5])
    with pytest.raises(FormatError, match="header"):
        read_tensor_file(tiny)

    import struct

    poisoned = tmp_path / "nan.mlct"
    poisoned.write_bytes(raw[:-4] + struct.pack("<f", np.nan))
    with pytest.raises(FormatError, match="non-finite"):
        read_tensor_file(poisoned)


def test_tensor_write_refuses_bad_input(tmp_path):
    with pytest.raises(DimensionError):
        write_tensor_file(tmp_path / "r5.mlct", np.zeros((1, 1, 1, 1, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        write_tensor_file(tmp_path / "inf.mlct", np.array([np.inf], dtype=np.float32))


def test_cifar_roundtrip_both_variants(tmp_path):
    rng = np.random.default_rng(4)
    images = rng.integers(0, 256, size=(6, 3, 32, 32), dtype=np.uint8)
    for variant, classes in (("cifar10", 10), ("cifar100", 100)):
        labels = rng.integers(0, classes, size=6)
        path = tmp_path / f"{variant}.bin"
        write_cifar_batch(path, images, labels, variant=variant)
        ds = load_cifar(path, variant=variant)
        assert ds.num_classes == classes
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_array_equal(ds.images, images.astype(np.float32) / 255.0)


def test_cifar_concatenates_multiple_files(tmp_path):
    images = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    write_cifar_batch(tmp_path / "a.bin", images, [1, 2])
    write_cifar_batch(tmp_path / "b.bin", images, [3, 4])
    ds = load_cifar([tmp_path / "a.bin", tmp_path / "b.bin"])
    np.testing.assert_array_equal(ds.labels, [1, 2, 3, 4])


def test_cifar_rejects_malformed_files(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\0" * 100)  # not a record multiple
    with pytest.raises(FormatError, match="record size"):
        load_cifar(bad)
    bad_label = tmp_path / "label.bin"
    record = bytes([250]) + b"\0" * 3072
    bad_label.write_bytes(record)
    with pytest.raises(FormatError, match="label"):
        load_cifar(bad_label)
    with pytest.raises(ValueError):
        load_cifar(bad, variant="cifar7")


def test_golden_fixture_parses_and_matches_hash():
    assert sha256_file(FIXTURE) == FIXTURE_SHA256
    ds = load_cifar(FIXTURE)
    assert ds.images.shape == (40, 3, 32, 32)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, np.arange(40) % 10)
    # pinned pixels, scaled from the raw bytes
    np.testing.assert_array_equal(
        ds.images[0, 0, 0, :6],
        np.array([146, 87, 149, 106, 93, 99], dtype=np.float32) / 255.0,
    )
    np.testing.assert_array_equal(
        ds.images[7, 2, 31, 26:32],
        np.array([151, 121, 153, 147, 132, 140], dtype=np.float32) / 255.0,
    )


def test_split_is_seeded_and_disjoint():
    images = np.arange(20 * 3 * 2 * 2, dtype=np.float32).reshape(20, 3, 2, 2)
    data = Dataset(images, np.arange(20) % 4, "toy", 4)
    a1, b1 = split(data, (12, 5), seed=3)
    a2, b2 = split(data, (12, 5), seed=3)
    np.testing.assert_array_equal(a1.images, a2.images)
    np.testing.assert_array_equal(b1.labels, b2.labels)
    ids_a = {int(img[0, 0, 0]) for img in a1.images}
    ids_b = {int(img[0, 0, 0]) for img in b1.images}
    assert not ids_a & ids_b
    assert len(a1) == 12 and len(b1) == 5
    with pytest.raises(ValueError):
        split(data, (15, 10))


def test_channel_stats_and_normalize():
    rng = np.random.default_rng(9)
    data = Dataset(
        rng.uniform(0, 1, size=(50, 3, 4, 4)).astype(np.float32), np.zeros(50, dtype=int), "u", 2
    )
    mean, std = channel_stats(data)
    normed = normalize(data, mean, std)
    np.testing.assert_allclose(normed.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(normed.images.std(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_dataset_validation():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((2, 3, 4)), np.zeros(2, dtype=int), "bad", 2)
    with pytest.raises(DimensionError):
        Dataset(np.zeros((2, 3, 4, 4)), np.zeros(3, dtype=int), "bad", 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 7]), "bad", 2)


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "manifest.txt"
    write_manifest(path, {"alpha": 1, "beta": "two words", "gamma": 0.5})
    assert read_manifest(path) == {"alpha": "1", "beta": "two words", "gamma": "0.5"}
    path.write_text("# comment\n\nkey=value\n")
    assert read_manifest(path) == {"key": "value"}
    path.write_text("no separator here\n")
    with pytest.raises(FormatError):
        read_manifest(path)
    with pytest.raises(ValueError):
        write_manifest(tmp_path / "bad.txt", {"a=b": 1})


def test_synth_problem_chain_reconstructs_exactly():
    problem = synth_sparse_problem((3, 4), in_channels=2, spatial=(6, 6), k_sparse=5, seed=11)
    assert problem.signal.shape == (2, 6, 6)
    assert len(problem.codes) == 2
    assert problem.support.size == 5
    # generative chain: deepest code synthesized down equals the clean signal
    hw_chain = [(6, 6)] * 3
    down = effective_dictionary_apply(problem.model, 0, problem.codes[-1], hw_chain)
    np.testing.assert_allclose(down, problem.clean_signal, atol=1e-12)
    noisy = synth_sparse_problem((3,), sigma=0.1, seed=12)
    assert not np.array_equal(noisy.signal, noisy.clean_signal)


def test_flat_spectrum_translates_are_orthonormal():
    d = flat_spectrum_dictionary(1, 16, seed=0)
    a = materialize(d, (1, 1, 16))
    np.testing.assert_allclose(a @ a.T, np.eye(16), atol=1e-10)
    with pytest.raises(ValueError):
        flat_spectrum_dictionary(1, 15)


def test_flat_spectrum_low_coherence_instance():
    # the pinned recovery dictionary: distinct-atom correlations stay low
    d = flat_spectrum_dictionary(2, 64, seed=3)
    mu = coherence(d, (1, 1, 64))
    assert mu < 0.3


def test_support_mask_threshold():
    gamma = np.array([0.0, 1e-9, -0.5, 2.0])
    np.testing.assert_array_equal(support_mask(gamma), [False, False, True, True])


def test_synthetic_corpus_is_deterministic():
    imgs1, labels1 = synthetic_corpus(30, seed=5)
    imgs2, labels2 = synthetic_corpus(30, seed=5)
    np.testing.assert_array_equal(imgs1, imgs2)
    np.testing.assert_array_equal(labels1, labels2)
    assert imgs1.dtype == np.uint8
    np.testing.assert_array_equal(labels1, np.arange(30) % 10)
    imgs3, _ = synthetic_corpus(30, seed=6)
    assert not np.array_equal(imgs1, imgs3)


def test_ensure_synthetic_cifar_idempotent(tmp_path):
    p1, q1 = ensure_synthetic_cifar(tmp_path, n_train=50, n_test=20, seed=3)
    sha_before = sha256_file(p1)
    p2, q2 = ensure_synthetic_cifar(tmp_path, n_train=50, n_test=20, seed=3)
    assert (p1, q1) == (p2, q2)
    assert sha256_file(p2) == sha_before
    train = load_cifar(p1)
    test = load_cifar(q1)
    assert len(train) == 50 and len(test) == 20
