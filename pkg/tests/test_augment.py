import numpy as np
import pytest

from copper_rating.augment import (PatchBank, extract_impurity_regions, hflip, paste_impurities, rot90, rotate,
                                   standard_augment, translate, vflip)


def scene(rng, size=32):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[4:10, 4:12] = 1
    mask[20:26, 18:22] = 1
    mask[0, 30] = 1  # below min area
    img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    return img, mask


def flood_components(mask):
    """Reference 4-connected labelling by explicit flood fill."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack, comp = [(r, c)], []
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    comp.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack.append((yy, xx))
                comps.append(comp)
    return comps


def test_extraction_matches_flood_fill(rng):
    mask = (rng.random((24, 24)) < 0.35).astype(np.uint8)
    img = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
    bank = extract_impurity_regions([img], [mask], min_area=3)
    ref = sorted(len(c) for c in flood_components(mask) if len(c) >= 3)
    assert sorted(p.area for p in bank.patches) == ref


def test_extraction_respects_min_area(rng):
    img, mask = scene(rng)
    bank = extract_impurity_regions([img], [mask], min_area=16)
    assert sorted(p.area for p in bank.patches) == [24, 48]
    p = bank.patches[0]
    r0, c0, r1, c1 = p.bbox
    np.testing.assert_array_equal(p.pixels[p.coverage], img[r0:r1, c0:c1][p.coverage])


def test_empty_bank_and_errors(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    mask = np.zeros((16, 16), dtype=np.uint8)
    bank = extract_impurity_regions([img], [mask])
    assert len(bank) == 0
    with pytest.raises(ValueError):
        paste_impurities(img, mask, bank, 1, 0)
    assert paste_impurities(img, mask, bank, 0, 0).pasted == 0
    with pytest.raises(ValueError):
        paste_impurities(img, mask, bank, -1, 0)


def test_paste_soundness_many(rng):
    """Pasted pixels turn impurity, every other pixel is untouched, no impurity is lost."""
    img, mask = scene(rng, 48)
    bank = extract_impurity_regions([img], [mask], min_area=8)
    target, _ = scene(np.random.default_rng(9), 48)
    tmask = np.zeros((48, 48), dtype=np.uint8)
    tmask[30:40, 30:40] = 1
    for seed in range(200):
        res = paste_impurities(target, tmask, bank, int(seed % 4) + 1, seed)
        changed_mask = res.mask != tmask
        assert (res.mask[changed_mask] == 1).all()
        assert (res.mask >= tmask).all()
        changed_img = (res.image != target).any(axis=2)
        assert not (changed_img & (res.mask == tmask) & (tmask == 0)).any()


def test_paste_on_all_impurity_target_does_nothing(rng):
    img, mask = scene(rng)
    bank = extract_impurity_regions([img], [mask])
    full = np.ones_like(mask)
    res = paste_impurities(img, full, bank, 3, 0)
    assert res.pasted == 0 and res.requested == 3
    np.testing.assert_array_equal(res.image, img)


def test_paste_is_seeded(rng):
    img, mask = scene(rng)
    bank = extract_impurity_regions([img], [mask])
    a = paste_impurities(img, mask, bank, 2, 5)
    b = paste_impurities(img, mask, bank, 2, 5)
    np.testing.assert_array_equal(a.image, b.image)


def test_bank_save_load(tmp_path, rng):
    img, mask = scene(rng)
    bank = extract_impurity_regions([img], [mask], source_ids=["x"])
    bank.save(tmp_path / "bank")
    back = PatchBank.load(tmp_path / "bank")
    assert len(back) == len(bank)
    for a, b in zip(bank.patches, back.patches):
        np.testing.assert_array_equal(a.coverage, b.coverage)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.bbox == b.bbox and a.source_id == b.source_id


@pytest.mark.parametrize("op", [hflip, vflip, lambda i, m: rot90(i, m, 1), lambda i, m: translate(i, m, 3, -5),
                                lambda i, m: rotate(i, m, 90), lambda i, m: rotate(i, m, 0)])
def test_geometric_ops_keep_image_and_mask_aligned(rng, op):
    # encode the mask into the image so alignment is checkable after the op
    mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
    img = np.repeat((mask * 200)[..., None], 3, axis=2).astype(np.uint8)
    i2, m2 = op(img, mask)
    np.testing.assert_array_equal(i2[..., 0] == 200, m2 == 1)
    assert m2.sum() == mask.sum()


def test_arbitrary_rotation_keeps_labels_consistent(rng):
    mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
    img = np.repeat((mask * 200)[..., None], 3, axis=2).astype(np.uint8)
    i2, m2 = rotate(img, mask, 33)
    np.testing.assert_array_equal(i2[..., 0] == 200, m2 == 1)


def test_standard_augment_seeded_and_consistent(rng):
    mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
    img = np.repeat((mask * 200)[..., None], 3, axis=2).astype(np.uint8)
    a = standard_augment(img, mask, ("flip", "rotate", "translate"), 3)
    b = standard_augment(img, mask, ("flip", "rotate", "translate"), 3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[0][..., 0] == 200, a[1] == 1)
    with pytest.raises(ValueError):
        standard_augment(img, mask, ("shear",), 0)
