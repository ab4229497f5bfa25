import numpy as np
import pytest
import torch

from ssgan.rotation import NUM_ROTATIONS, RotationBatch, Source, make_rotation_batch, rotate_image


def rotate_by_index_oracle(image: np.ndarray, r: int) -> np.ndarray:
    """Brute-force reference: move pixel (i, j) to its rotated position, one at a time.

    One counter-clockwise quarter turn of an HxH image sends (i, j) -> (H-1-j, i).
    """
    out = image
    h = image.shape[0]
    for _ in range(r):
        nxt = np.empty_like(out)
        for i in range(h):
            for j in range(h):
                nxt[h - 1 - j, i] = out[i, j]
        out = nxt
    return out


def test_rotate_identity():
    img = torch.randn(3, 8, 8)
    assert torch.equal(rotate_image(img, 0), img)


def test_rotate_2x2_quarter_turn():
    # [[a, b], [c, d]] -> [[b, d], [a, c]] under one counter-clockwise turn
    img = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    expected = torch.tensor([[2.0, 4.0], [1.0, 3.0]])
    assert torch.equal(rotate_image(img, 1), expected)


@pytest.mark.parametrize("r", [0, 1, 2, 3])
def test_rotate_matches_index_oracle(r):
    rng = np.random.default_rng(7)
    for _ in range(5):
        img = rng.normal(size=(6, 6, 3)).astype(np.float32)
        got = rotate_image(torch.from_numpy(img).permute(2, 0, 1), r)
        want = rotate_by_index_oracle(img, r)
        assert np.array_equal(got.permute(1, 2, 0).numpy(), want)


def test_rotation_group_composition():
    rng = torch.Generator().manual_seed(11)
    x = torch.randn(2, 3, 5, 5, generator=rng)
    for a in range(4):
        for b in range(4):
            lhs = rotate_image(rotate_image(x, a), b)
            rhs = rotate_image(x, (a + b) % 4)
            assert torch.equal(lhs, rhs), (a, b)


def test_four_rotations_are_identity():
    x = torch.randn(3, 7, 7)
    y = x
    for _ in range(4):
        y = rotate_image(y, 1)
    assert torch.equal(y, x)


def test_pixel_multiset_preserved():
    x = torch.randn(3, 9, 9)
    for r in range(4):
        got = rotate_image(x, r)
        assert torch.equal(got.flatten().sort().values, x.flatten().sort().values)


def test_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        rotate_image(torch.randn(3, 4, 6), 1)


def test_rejects_bad_label():
    with pytest.raises(ValueError, match="0..3"):
        rotate_image(torch.randn(3, 4, 4), 4)


def test_make_rotation_batch_counts():
    batch = torch.randn(64, 3, 8, 8)
    rb = make_rotation_batch(batch, Source.REAL)
    assert rb.images.shape[0] == 64
    assert rb.source is Source.REAL
    # 16 distinct source images, each appearing in all four orientations
    for r in range(NUM_ROTATIONS):
        chunk = rb.images[16 * r : 16 * (r + 1)]
        assert torch.equal(chunk, rotate_image(batch[:16], r))


def test_make_rotation_batch_minimal():
    batch = torch.randn(4, 1, 4, 4)
    rb = make_rotation_batch(batch, Source.FAKE)
    assert rb.images.shape[0] == 4
    for r in range(4):
        assert torch.equal(rb.images[r], rotate_image(batch[0], r))


def test_label_histogram_from_enumeration():
    rb = make_rotation_batch(torch.randn(8, 3, 4, 4), Source.REAL)
    counts = torch.bincount(rb.labels, minlength=4).tolist()
    assert counts == [2, 2, 2, 2]


def test_make_rotation_batch_rejects_bad_size():
    with pytest.raises(ValueError, match="divisible by 4"):
        make_rotation_batch(torch.randn(6, 3, 4, 4), Source.REAL)


def test_rotation_batch_length_check():
    with pytest.raises(ValueError, match="mismatch"):
        RotationBatch(torch.randn(4, 3, 2, 2), torch.zeros(3, dtype=torch.long), Source.REAL)
