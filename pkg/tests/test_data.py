import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfit import data as D
from sfit.errors import BadMagic, BatchTooLarge, CountMismatch, EmptySplit, IncompatibleChannels, TruncatedFile

from conftest import digits


def idx_images(pixels: np.ndarray, magic=0x803) -> bytes:
    return np.array([magic, *pixels.shape], dtype=">u4").tobytes() + pixels.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    return np.array([0x801, len(labels)], dtype=">u4").tobytes() + np.asarray(labels, np.uint8).tobytes()


def test_load_idx_header_and_shape(tmp_path):
    px = np.arange(4 * 28 * 28).reshape(4, 28, 28) % 256
    (tmp_path / "img").write_bytes(idx_images(px))
    (tmp_path / "lbl").write_bytes(idx_labels([3, 1, 4, 1]))
    s = D.load_idx(tmp_path / "img", tmp_path / "lbl")
    assert s.images.shape == (4, 1, 28, 28)
    assert s.labels.tolist() == [3, 1, 4, 1]


def test_load_idx_endpoints(tmp_path):
    px = np.zeros((1, 16, 16), np.uint8)
    px[0, 0, 0] = 255
    (tmp_path / "img").write_bytes(idx_images(px))
    s = D.load_idx(tmp_path / "img")
    assert s.images[0, 0, 0, 0] == 1.0
    assert s.images[0, 0, 0, 1] == -1.0
    assert s.labels is None


def test_load_idx_gzip(tmp_path):
    px = np.full((2, 16, 16), 128, np.uint8)
    with gzip.open(tmp_path / "img.gz", "wb") as f:
        f.write(idx_images(px))
    assert len(D.load_idx(tmp_path / "img.gz")) == 2


def test_labels_file_as_images_is_bad_magic(tmp_path):
    (tmp_path / "lbl").write_bytes(idx_labels([1, 2]))
    with pytest.raises(BadMagic):
        D.load_idx(tmp_path / "lbl")


def test_images_file_as_labels_is_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(idx_images(np.zeros((2, 16, 16))))
    with pytest.raises(BadMagic):
        D.load_idx(tmp_path / "img", tmp_path / "img")


def test_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(idx_images(np.zeros((3, 16, 16))))
    (tmp_path / "lbl").write_bytes(idx_labels([1, 2]))
    with pytest.raises(CountMismatch):
        D.load_idx(tmp_path / "img", tmp_path / "lbl")


@pytest.mark.parametrize("cut", [2, 10, 100])
def test_truncated(tmp_path, cut):
    raw = idx_images(np.zeros((2, 16, 16)))
    (tmp_path / "img").write_bytes(raw[:cut])
    with pytest.raises(TruncatedFile):
        D.load_idx(tmp_path / "img")


def test_idx_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(1)
    px = rng.integers(0, 256, (5, 28, 28))
    raw = idx_images(px)
    (tmp_path / "img").write_bytes(raw)
    s = D.load_idx(tmp_path / "img")
    assert D.encode_idx_images(s.images) == raw


def test_colour_round_trip(tmp_path):
    s = D.apply_transform(digits(6, seed=2), D.DomainTransform("colorize", {"seed": 7}))
    D.save_idx(s, tmp_path / "img", tmp_path / "lbl")
    back = D.load_idx(tmp_path / "img", tmp_path / "lbl")
    assert back.images.shape == (6, 3, 28, 28)
    np.testing.assert_allclose(back.images, s.images, atol=1 / 127.5)


def test_bundled_mnist():
    s = D.load_bundled_mnist()
    assert s.images.shape == (10000, 1, 28, 28)
    assert s.images.min() == -1.0 and s.images.max() == 1.0
    assert sorted(np.unique(s.labels)) == list(range(10))


def test_imageset_is_immutable(small_set):
    with pytest.raises(ValueError):
        small_set.images[0, 0, 0, 0] = 0.5


def test_invert():
    s = digits(4)
    out = D.apply_transform(s, D.DomainTransform("invert"))
    np.testing.assert_array_equal(out.images, -s.images)
    np.testing.assert_array_equal(out.labels, s.labels)


def test_identity_bit_identical():
    s = digits(4)
    out = D.apply_transform(s, D.DomainTransform("identity"))
    assert out.images.tobytes() == s.images.tobytes()


def test_colorize_deterministic():
    s = digits(8, seed=3)
    t = D.DomainTransform("colorize", {"seed": 7})
    a, b = D.apply_transform(s, t), D.apply_transform(s, t)
    assert a.images.shape == (8, 3, 28, 28)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.min() >= -1 and a.images.max() <= 1


def test_colorize_depends_on_seed():
    s = digits(2, seed=3)
    a = D.apply_transform(s, D.DomainTransform("colorize", {"seed": 1}))
    b = D.apply_transform(s, D.DomainTransform("colorize", {"seed": 2}))
    assert not np.array_equal(a.images, b.images)


@pytest.mark.parametrize("kind", ["channel-permute", "saturation-scale"])
def test_rgb_only_transforms_reject_grey(kind):
    with pytest.raises(IncompatibleChannels):
        D.apply_transform(digits(2), D.DomainTransform(kind))


def test_colorize_rejects_rgb():
    with pytest.raises(IncompatibleChannels):
        D.apply_transform(digits(2, channels=3), D.DomainTransform("colorize"))


def test_channel_permute_and_saturation():
    s = digits(3, channels=3)
    out = D.apply_transform(s, D.DomainTransform("channel-permute", {"order": "2,0,1"}))
    np.testing.assert_array_equal(out.images[:, 0], s.images[:, 2])
    grey = D.apply_transform(s, D.DomainTransform("saturation-scale", {"factor": 0.0}))
    np.testing.assert_allclose(grey.images[:, 0], grey.images[:, 1], atol=1e-6)


def test_background_shift_moves_background_only():
    s = D.ImageSet(np.stack([np.full((1, 16, 16), -1.0), np.full((1, 16, 16), 1.0)]).astype(np.float32), [0, 1])
    out = D.apply_transform(s, D.DomainTransform("background-shift", {"shift": 1.5}))
    np.testing.assert_allclose(out.images[0], 0.5)
    np.testing.assert_allclose(out.images[1], 1.0)


def test_transform_text_round_trip():
    t = D.DomainTransform("background-shift", {"shift": 1.5})
    assert D.DomainTransform.parse(str(t)) == t
    assert D.DomainTransform.parse("invert") == D.DomainTransform("invert")


def test_make_domain_pair_split():
    base = digits(1000, size=16)
    src, tgt = D.make_domain_pair(base, D.DomainTransform("identity"), D.DomainTransform("invert"), 5)
    assert len(src) == len(tgt) == 500
    # recover indices by matching rows back to the base set
    rows = {base.images[i].tobytes(): i for i in range(len(base))}
    src_idx = {rows[img.tobytes()] for img in src.images}
    tgt_idx = {rows[(-img).tobytes()] for img in tgt.images}
    assert not src_idx & tgt_idx
    assert len(src_idx | tgt_idx) == 1000


def test_make_domain_pair_deterministic():
    base = digits(50, size=16)
    a = D.make_domain_pair(base, D.DomainTransform(), D.DomainTransform("invert"), 9)
    b = D.make_domain_pair(base, D.DomainTransform(), D.DomainTransform("invert"), 9)
    assert a[0].images.tobytes() == b[0].images.tobytes()
    assert a[1].labels.tolist() == b[1].labels.tolist()


def test_empty_split():
    with pytest.raises(EmptySplit):
        D.make_domain_pair(digits(1), D.DomainTransform(), D.DomainTransform(), 0)


def test_batches_drop_last():
    out = list(D.batches(digits(100, size=16), D.BatchPlan(16, 0, True, True)))
    assert [len(b.indices) for b in out] == [16] * 6


def test_batches_in_order_without_shuffle():
    out = list(D.batches(digits(40, size=16), D.BatchPlan(16, 0, False, False)))
    assert np.concatenate([b.indices for b in out]).tolist() == list(range(40))
    assert len(out[-1].indices) == 8


def test_batches_reproducible():
    plan = D.BatchPlan(16, 12345, True, False)
    a = [b.indices.tolist() for b in D.batches(digits(100, size=16), plan)]
    b = [b.indices.tolist() for b in D.batches(digits(100, size=16), plan)]
    assert a == b


def test_batch_too_large():
    with pytest.raises(BatchTooLarge):
        list(D.batches(digits(10, size=16), D.BatchPlan(16)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 300), bs=st.integers(1, 64), seed=st.integers(0, 2**64 - 1), drop=st.booleans())
def test_batch_coverage(n, bs, seed, drop):
    if bs > n:
        return
    idx = D.batch_indices(n, D.BatchPlan(bs, seed, True, drop))
    flat = np.concatenate(idx)
    assert len(flat) == len(set(flat.tolist()))
    expected = n - n % bs if drop else n
    assert len(flat) == expected
    assert set(flat.tolist()) <= set(range(n))
    if not drop:
        assert sorted(flat.tolist()) == list(range(n))


def test_manifest_round_trip(tmp_path):
    D.write_manifest(tmp_path / "m.txt", base="x.idx", target_transform=D.DomainTransform("invert"), split_seed=3)
    m = D.read_manifest(tmp_path / "m.txt")
    assert m == {"base": "x.idx", "target_transform": "invert", "split_seed": "3"}


def test_resize_usps_like():
    s = D.ImageSet(np.zeros((2, 1, 16, 16), np.float32), [1, 2])
    out = D.resize(s, 28)
    assert out.images.shape == (2, 1, 28, 28)
