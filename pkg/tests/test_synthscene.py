import numpy as np
import pytest

from bathyscope.synthscene import (OpticsProfile, RegionProfile, SceneSpec, gen_depth_field, load_scene_config,
                                   make_region_pair, make_tiles, planted_lobo_optics, profile_from_mapping,
                                   reflectance, render_bands, shifted_profile)


def test_reflectance_hand_value():
    # (0.4 - 0.1) * exp(-2 * 0.1 * 5) + 0.1
    assert reflectance(5.0, 0.4, 0.1, 0.1) == pytest.approx(0.2104, abs=5e-5)


def test_reflectance_limits():
    assert reflectance(0.0, 0.3, 0.2, 0.05) == pytest.approx(0.3)
    assert reflectance(1e3, 0.3, 0.2, 0.05) == pytest.approx(0.05)


def test_ramp_is_linear_in_column():
    d = gen_depth_field(SceneSpec(size=(4, 11), depth_range=(0, 10), depth_mode="ramp", shoreline=False)).values
    np.testing.assert_allclose(d[0], np.linspace(0, 10, 11))
    assert (d == d[0]).all()


def test_shoreline_columns_are_land():
    d = gen_depth_field(SceneSpec(size=(32, 32), shoreline=True, seed=3)).values
    assert (d[:, :4] == 0).all() and (d[:, 4:] > 0).mean() > 0.95


def test_bimodal_histogram_modes():
    d = np.concatenate([gen_depth_field(SceneSpec(size=(64, 64), depth_range=(0, 5), depth_mode="bimodal",
                                                  shoreline=False, seed=s)).values.ravel() for s in range(4)])
    hist, edges = np.histogram(d, bins=np.arange(0, 5.01, 0.5))
    top2 = sorted(edges[np.argsort(hist)[-2:]] + 0.25)
    assert abs(top2[0] - 1.0) <= 0.5 and abs(top2[1] - 4.0) <= 0.5
    assert hist[4] < 0.2 * hist.max()  # the 2-2.5 m valley


def test_degenerate_range_only_for_ramp():
    with pytest.raises(ValueError):
        SceneSpec(depth_range=(3, 3), depth_mode="bimodal")
    d = gen_depth_field(SceneSpec(size=(4, 4), depth_range=(3, 3), depth_mode="ramp", shoreline=False)).values
    assert (d == 3).all()


def test_invalid_optics():
    with pytest.raises(ValueError):
        OpticsProfile(k_att=(0.1, -0.1, 0.3))
    with pytest.raises(ValueError):
        OpticsProfile(k_att=(0.1, 0.1), albedo_mean=(0.2, 0.2, 0.2))


def test_render_is_deterministic_and_georeferenced():
    depth = gen_depth_field(SceneSpec(seed=5))
    a = render_bands(depth, OpticsProfile(), seed=9)
    b = render_bands(depth, OpticsProfile(), seed=9)
    np.testing.assert_array_equal(a.bands, b.bands)
    assert a.bands.shape == (3, 64, 64) and a.crs_id and a.affine.a == 10.0
    assert a.bands.min() >= 0 and a.bands.max() <= 1e4


def test_glint_only_on_water():
    depth = gen_depth_field(SceneSpec(seed=1))
    optics = OpticsProfile(glint_frac=0.05, noise_sigma=0.0)
    clean = render_bands(depth, OpticsProfile(noise_sigma=0.0), seed=2)
    glinted = render_bands(depth, optics, seed=2)
    land = depth.values == 0
    np.testing.assert_array_equal(glinted.bands[:, land], clean.bands[:, land])
    assert (glinted.bands[0] > clean.bands[0] + 2000).sum() == round(0.05 * (~land).sum())


def test_default_attenuation_ordering():
    k = OpticsProfile().k_att
    assert k[1] < k[0] < k[2]


def test_planted_red_is_uninformative_beyond_one_metre():
    k_red = planted_lobo_optics().k_att[2]
    assert np.exp(-2 * k_red * 1.0) < 0.01


def test_doubled_attenuation_darkens_deep_water():
    a = RegionProfile(scene=SceneSpec(seed=2))
    b = shifted_profile(a, k_factor=2.0, depth_mode="smooth_field", depth_range=(0, 10), seed=2)
    ta, tb = make_tiles(a, 2), make_tiles(b, 2)
    for x, y in zip(ta, tb):
        deep = x.depth.values > 5
        np.testing.assert_array_equal(deep, y.depth.values > 5)
        assert (y.tile.bands[:, deep].mean(axis=1) < x.tile.bands[:, deep].mean(axis=1)).all()


def test_bimodal_region_differs_from_smooth():
    a = RegionProfile(scene=SceneSpec(depth_range=(0, 5)))
    b = shifted_profile(a)
    ta, tb = make_region_pair(a, b, 3)
    bins = np.arange(0, 5.01, 0.5)
    ha = np.histogram(np.concatenate([t.depth.values[t.depth.values > 0] for t in ta]), bins)[0]
    hb = np.histogram(np.concatenate([t.depth.values[t.depth.values > 0] for t in tb]), bins)[0]
    # flat-ish vs two-mode: the middle bin is well populated in A, sparse in B
    assert hb[4] / hb.max() < 0.2 < ha[4] / ha.max()


def test_region_pair_requires_a_difference():
    p = RegionProfile()
    with pytest.raises(ValueError):
        make_region_pair(p, RegionProfile(), 1)


def test_make_tiles_seeds_are_per_tile():
    tiles = make_tiles(RegionProfile(scene=SceneSpec(size=(32, 32))), 3, prefix="r")
    assert [t.tile_id for t in tiles] == ["r_000", "r_001", "r_002"]
    assert not np.array_equal(tiles[0].depth.values, tiles[1].depth.values)
    again = make_tiles(RegionProfile(scene=SceneSpec(size=(32, 32))), 3, prefix="r")
    np.testing.assert_array_equal(tiles[2].tile.bands, again[2].tile.bands)
    assert tiles[0].pair.mask.any() and tiles[0].pair.x_norm.max() <= 1


def test_profile_from_mapping_dotted_and_nested():
    a = profile_from_mapping({"k_att.b2": 1.5, "size": 32, "depth_mode": "ramp"})
    b = profile_from_mapping({"k_att": {"b2": 1.5}, "size": [32, 32], "depth_mode": "ramp"})
    assert a == b and a.optics.k_att[2] == 1.5 and a.scene.size == (32, 32)
    with pytest.raises(KeyError):
        profile_from_mapping({"k_attenuation": 1})
    with pytest.raises(KeyError):
        profile_from_mapping({"k_att.b7": 1})


def test_load_scene_config(tmp_path):
    p = tmp_path / "scene.yaml"
    p.write_text("r_inf:\n  b0: 0.05\nseed: 4\nnoise_sigma: 0\n")
    prof = load_scene_config(p)
    assert prof.optics.r_inf[0] == 0.05 and prof.scene.seed == 4 and prof.optics.noise_sigma == 0
