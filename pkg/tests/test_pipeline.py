import numpy as np
import pytest
from hypothesis import given, strategies as st

from copper_rating.bundle import RatingBundle, evaluate_bundle
from copper_rating.ladder import DEFAULT_THRESHOLDS, LevelLadder, purity_to_level
from copper_rating.pipeline import (RatingReport, error_vs_levels, eval_dataset, rate_by_threshold, rate_sample,
                                    sweep_is_monotone)
from copper_rating.purity_net import PurityNet
from copper_rating.scene_sim.dataset import GranuleDataset
from copper_rating.seg_net import SegNet
from copper_rating.trainer import freeze

TABLE_PAIRS = [(0.970, 1), (0.944, 2), (0.938, 3), (0.908, 3), (0.855, 4), (0.842, 5), (0.797, 6),
               (0.771, 6), (0.751, 6), (0.735, 7), (0.976, 1)]


@pytest.mark.parametrize("p,level", TABLE_PAIRS)
def test_default_ladder_table_values(p, level):
    assert purity_to_level(p, LevelLadder()) == level


def test_ladder_edges():
    lad = LevelLadder()
    assert lad.num_levels == 7
    assert lad.level(1.0) == 1 and lad.level(0.0) == 7
    assert lad.level(0.95) == 1  # boundary belongs to the better level
    assert lad.level(np.nextafter(0.95, 0)) == 2
    with pytest.raises(ValueError):
        LevelLadder((0.9, 0.95))
    with pytest.raises(ValueError):
        LevelLadder((1.2, 0.5))
    with pytest.raises(ValueError):
        LevelLadder(())


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8, unique=True),
       st.floats(0, 1), st.floats(0, 1))
def test_ladder_monotone(ts, a, b):
    lad = LevelLadder(tuple(sorted(ts, reverse=True)))
    hi, lo = max(a, b), min(a, b)
    assert lad.level(hi) <= lad.level(lo)
    assert 1 <= lad.level(lo) <= lad.num_levels


def test_equal_width():
    lad = LevelLadder.equal_width(5, 0.7)
    np.testing.assert_allclose(lad.thresholds, [0.94, 0.88, 0.82, 0.76])
    with pytest.raises(ValueError):
        LevelLadder.equal_width(1, 0.7)


def test_report_json_round_trip():
    rep = RatingReport("s001", [0.912345678901234, 0.1 + 0.2], 0.87654321012345, 4, 4,
                       LevelLadder().to_dict(), "abc", 2, "network", 0.0123, "cfg")
    back = RatingReport.from_json(rep.to_json())
    assert back == rep
    assert back.to_json() == rep.to_json()


def test_threshold_baseline_with_masks():
    masks = np.zeros((4, 8, 8), dtype=np.uint8)
    r = rate_by_threshold(None, None, LevelLadder(), masks=masks)
    assert r.mass_purity == 1.0 and r.level == 1
    r = rate_by_threshold(None, None, LevelLadder(), masks=np.ones_like(masks))
    assert r.mass_purity == 0.0 and r.level == 7
    with pytest.raises(ValueError):
        rate_by_threshold(None, None, LevelLadder(), masks=masks, n=3)


def test_uniform_density_baseline_equals_mass_purity():
    from copper_rating.scene_sim.materials import DEFAULT_PALETTE, MaterialSpec
    from copper_rating.scene_sim.population import Granule, SamplePopulation, true_mass_purity
    from copper_rating.scene_sim.render import stir_and_render

    # square granules tiling the frame exactly: the mask is the full population
    pal = tuple(MaterialSpec(m.name, 8.96, m.is_copper, m.color) for m in DEFAULT_PALETTE)
    sq = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]) * 100
    pop = SamplePopulation("u", (Granule(0, sq, 0.1),), pal, 0, 0.025, (8, 8), 1)
    scene = stir_and_render(pop, 0)
    r = rate_by_threshold(None, None, LevelLadder(), masks=[scene.mask])
    assert abs(r.mass_purity - true_mass_purity(pop)) < 1e-9


def _untrained_bundle(n=2, size=(32, 32)):
    seg = freeze(SegNet(width=8))
    pur = freeze(PurityNet(n=n, image_size=size))
    return RatingBundle(seg, pur, LevelLadder(), "cfg")


def test_rate_sample_validates(rng):
    b = _untrained_bundle()
    imgs = rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
    rep = rate_sample(b.seg, b.purity, imgs, b.ladder)
    assert len(rep.area_purities) == 2 and 1 <= rep.level <= 7 and rep.n == 2
    with pytest.raises(ValueError, match="exactly 2"):
        rate_sample(b.seg, b.purity, imgs[:1], b.ladder)
    with pytest.raises(ValueError):
        rate_sample(b.seg, b.purity, rng.integers(0, 256, (2, 64, 64, 3), dtype=np.uint8), b.ladder)


def test_shuffle_permutes_area_vector(rng):
    b = _untrained_bundle()
    imgs = rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
    a = rate_sample(b.seg, b.purity, imgs, b.ladder)
    s = rate_sample(b.seg, b.purity, imgs[::-1], b.ladder)
    np.testing.assert_allclose(s.area_purities, a.area_purities[::-1])


def test_bundle_save_load(tmp_path, rng):
    b = _untrained_bundle()
    b.save(tmp_path / "b")
    back = RatingBundle.load(tmp_path / "b", verify=True)
    assert back.digest() == b.digest()
    imgs = rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8)
    assert back.rate(imgs).mass_purity == b.rate(imgs).mass_purity
    with pytest.raises(FileNotFoundError):
        RatingBundle.load(tmp_path)


def test_eval_passthrough_is_perfect(tiny_dataset, tmp_path):
    ds = GranuleDataset(tiny_dataset)
    s = evaluate_bundle(None, ds, passthrough=True)
    assert s.area_mae == 0 and s.mass_mae == 0 and s.level_exact == 1.0
    assert all(err == 0 for _, err, _ in s.levels_sweep)
    assert [L for L, _, _ in s.levels_sweep] == list(range(2, 11))
    assert len(s.curve) == ds.manifest.num_images
    s.write(tmp_path)
    for f in ("curve.csv", "groups.csv", "levels.csv", "errors_vs_levels.csv", "summary.md"):
        assert (tmp_path / f).exists()
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == ds.manifest.num_images + 1
    assert "| Mass Purity | Prediction | Ground Truth |" in (tmp_path / "summary.md").read_text()


def test_eval_n_mismatch(tiny_dataset):
    with pytest.raises(ValueError, match="n=3"):
        evaluate_bundle(_untrained_bundle(n=3), GranuleDataset(tiny_dataset))


def test_eval_with_model(tiny_dataset):
    s = evaluate_bundle(_untrained_bundle(), GranuleDataset(tiny_dataset), ("val",))
    assert len(s.groups) == 2 and s.order_sensitivity is not None


def test_error_vs_levels():
    t = np.array([0.70, 0.75, 0.85, 0.95, 1.0])
    rows = error_vs_levels(t, t)
    assert all(e == 0 for _, e, _ in rows)
    rows = error_vs_levels(t, t - 0.02, [2, 4])
    assert rows[0][1] <= rows[1][1]
    with pytest.raises(ValueError):
        error_vs_levels(t, t, [1])
    assert sweep_is_monotone([(2, 0.0, 5), (4, 0.2, 5)])
    assert not sweep_is_monotone([(2, 0.3, 5), (4, 0.2, 5)])


def test_eval_dataset_group_mode():
    truths = {f"s{i}": {"area": [0.9], "mass": 0.9, "level": 3} for i in range(3)}
    preds = {"s0": {"area": [0.9], "mass": 0.95, "level": 1}, "s1": {"area": [0.9], "mass": 0.9, "level": 3},
             "s2": {"area": [0.9], "mass": 0.9, "level": 1}}
    s = eval_dataset(preds, truths, [{"label": "G", "split": "val", "ids": ["s0", "s1", "s2"]}], LevelLadder())
    g = s.groups[0]
    assert g["level_prediction"] == 1 and g["level_truth"] == 3
    assert g["mass_prediction"] == pytest.approx(2.75 / 3)
    assert s.level_exact == pytest.approx(1 / 3)


def test_default_thresholds_constant():
    assert LevelLadder().thresholds == DEFAULT_THRESHOLDS
