import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamfuse.backbone import BackboneConfig, cross_correlate, extract_features, init_backbone_params
from siamfuse.tensor import ShapeError, Tensor, grad_check


def tiny_cfg():
    return BackboneConfig(stage_channels=(2, 3, 3), out_channels=2, template_size=15, search_size=31)


def test_feature_extents_for_standard_sizes():
    cfg = BackboneConfig()
    assert cfg.feature_extent(127) == 15
    assert cfg.feature_extent(287) == 35
    desk = BackboneConfig.desk()
    assert desk.feature_extent(47) == 5
    assert desk.feature_extent(111) == 13


@given(st.integers(17, 400))
def test_feature_extent_matches_stagewise_formula(n):
    cfg = BackboneConfig()
    n1 = (n - 5) // 2 + 1
    n2 = (n1 - 3) // 2 + 1
    assert cfg.feature_extent(n) == n2 // 2


def test_validate_accepts_presets():
    BackboneConfig().validate()
    BackboneConfig.desk().validate()


def test_validate_rejects_even_extent():
    with pytest.raises(ShapeError):
        BackboneConfig(template_size=63 + 8, search_size=287).validate()


def test_validate_rejects_template_not_smaller():
    with pytest.raises(ShapeError):
        BackboneConfig(template_size=127, search_size=127).validate()


def test_extract_features_shapes():
    cfg = tiny_cfg()
    params = init_backbone_params(cfg, np.random.default_rng(0))
    fz = extract_features(np.random.default_rng(1).normal(size=(3, 15, 15)), params, cfg)
    fx = extract_features(np.random.default_rng(2).normal(size=(3, 31, 31)), params, cfg)
    assert fz.shape == (2, cfg.feature_extent(15), cfg.feature_extent(15))
    assert fx.shape == (2, cfg.feature_extent(31), cfg.feature_extent(31))


def test_zero_image_gives_zero_features_at_init():
    cfg = tiny_cfg()
    params = init_backbone_params(cfg, np.random.default_rng(3))
    out = extract_features(np.zeros((3, 15, 15)), params, cfg)
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_init_is_deterministic_per_seed():
    cfg = tiny_cfg()
    a = init_backbone_params(cfg, np.random.default_rng(7))
    b = init_backbone_params(cfg, np.random.default_rng(7))
    c = init_backbone_params(cfg, np.random.default_rng(8))
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)
    assert not np.array_equal(a["conv1.w"].data, c["conv1.w"].data)


def test_extract_rejects_wrong_channel_count():
    cfg = tiny_cfg()
    params = init_backbone_params(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        extract_features(np.zeros((1, 15, 15)), params, cfg)


def test_backbone_gradients_flow_end_to_end():
    cfg = tiny_cfg()
    params = init_backbone_params(cfg, np.random.default_rng(5))
    img = np.random.default_rng(6).normal(size=(3, 15, 15))

    def loss_wrt_image(t):
        return (extract_features(t, params, cfg) * Tensor(np.ones((2, 1, 1)))).sum()

    res = grad_check(loss_wrt_image, Tensor(img))
    assert res.passed, res

    # and with respect to a mid-stack weight
    def loss_wrt_w3(t):
        p = dict(params)
        p["conv3.w"] = t
        return extract_features(Tensor(img), p, cfg).sum()

    res = grad_check(loss_wrt_w3, Tensor(params["conv3.w"].data))
    assert res.passed, res


def test_cross_correlate_shape_and_errors():
    fz = Tensor(np.ones((4, 3, 3)))
    fx = Tensor(np.ones((4, 7, 7)))
    out = cross_correlate(fz, fx)
    assert out.shape == (4, 5, 5)
    with pytest.raises(ShapeError):
        cross_correlate(fx, fz)  # template bigger than search
    with pytest.raises(ShapeError):
        cross_correlate(Tensor(np.ones((3, 3, 3))), fx)


def test_cross_correlate_matched_filter_peaks_at_alignment():
    # correlating a patch against a search that embeds it peaks where it sits
    g = np.random.default_rng(9)
    z = g.normal(size=(2, 3, 3))
    x = np.zeros((2, 9, 9))
    x[:, 4:7, 2:5] = z
    resp = cross_correlate(Tensor(z), Tensor(x)).data.sum(axis=0)
    assert np.unravel_index(resp.argmax(), resp.shape) == (4, 2)
