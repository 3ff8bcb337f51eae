import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from copper_rating.heatmap import (area_purity, confusion_matrix, dataset_miou, impurity_fraction,
                                   load_heatmap_png, miou, save_heatmap_png, stack_heatmaps)
from copper_rating.validation import (check_divisible, check_heatmap, check_images, check_masks,
                                      check_unit_interval)

binary_maps = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def test_area_purity_counts_copper():
    h = np.zeros((4, 4), dtype=np.uint8)
    h[0, :2] = 1
    assert area_purity(h) == pytest.approx(14 / 16)
    assert impurity_fraction(h) == pytest.approx(2 / 16)


@given(binary_maps)
def test_area_and_impurity_complement(h):
    assert area_purity(h) + impurity_fraction(h) == pytest.approx(1.0)


def test_check_heatmap_rejects_non_binary():
    with pytest.raises(ValueError):
        check_heatmap(np.array([[0, 2]]))
    with pytest.raises(ValueError):
        check_heatmap(np.zeros(4))
    assert check_heatmap(np.array([[True, False]])).dtype == np.uint8


def test_perfect_prediction_miou_one():
    h = np.random.default_rng(0).integers(0, 2, (8, 8))
    assert miou(h, h).miou == 1.0


def test_miou_hand_example():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    m = miou(pred, truth)
    assert m.iou_copper == pytest.approx(1 / 2)
    assert m.iou_impurity == pytest.approx(2 / 3)
    assert m.miou == pytest.approx(7 / 12)
    np.testing.assert_array_equal(confusion_matrix(pred, truth), [[1, 1], [0, 2]])


def test_absent_class_scores_one():
    z = np.zeros((3, 3))
    assert miou(z, z).iou_impurity == 1.0


def test_dataset_miou_sums_confusions():
    a, b = np.array([[0, 1]]), np.array([[1, 1]])
    total = confusion_matrix(a, a) + confusion_matrix(a, b)
    assert dataset_miou([a, a], [a, b]).confusion.tolist() == total.tolist()
    with pytest.raises(ValueError):
        dataset_miou([a], [])


def test_stack_preserves_order_and_checks_shape():
    hs = [np.full((2, 2), i % 2) for i in range(3)]
    s = stack_heatmaps(hs)
    assert s.shape == (3, 2, 2) and s[1, 0, 0] == 1
    with pytest.raises(ValueError):
        stack_heatmaps([np.zeros((2, 2)), np.zeros((3, 3))])
    with pytest.raises(ValueError):
        stack_heatmaps([])


@settings(max_examples=20, deadline=None)
@given(binary_maps)
def test_png_round_trip(tmp_path_factory, h):
    path = tmp_path_factory.mktemp("png") / "m.png"
    save_heatmap_png(h, path)
    np.testing.assert_array_equal(load_heatmap_png(path), h)


def test_load_rejects_grey_values(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((2, 2), 128, dtype=np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(ValueError):
        load_heatmap_png(tmp_path / "g.png")


def test_validation_helpers():
    with pytest.raises(ValueError, match="pad by 2 rows and 0 columns"):
        check_divisible((30, 32), 8)
    check_divisible((32, 64), 8)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 4, 4, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        check_images([])
    assert check_images(np.zeros((4, 4, 3), dtype=np.uint8)).shape == (1, 4, 4, 3)
    with pytest.raises(ValueError):
        check_masks(np.zeros((2, 4, 4)), n_images=3)
    with pytest.raises(ValueError):
        check_unit_interval(1.5, "p")
    with pytest.raises(ValueError):
        check_unit_interval(0.0, "p", open_low=True)
