import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftsim.corruptions import (
    KINDS,
    MAX_LEVEL,
    CorruptionSpec,
    apply_corruption,
    calibrate_transform,
    corrupt_images,
    pick_kind,
    relative_drop,
    search_severity,
)
from driftsim.errors import CalibrationInfeasible, InvalidConfig, InvalidInput
from driftsim.experiments import cf_feasibility_check, pretrained_model
from driftsim.federation import desk_defaults, get_federation
from driftsim.tasks import evaluate_model, gen_classification

IMAGES = gen_classification(100, seed=9).images


@pytest.mark.parametrize("kind", KINDS)
def test_level_zero_is_bit_exact_identity(kind):
    img = IMAGES[0]
    assert np.array_equal(apply_corruption(img, CorruptionSpec(kind, level=0), [0, 0]), img)


@pytest.mark.parametrize("kind", KINDS)
def test_distortion_grows_with_level(kind):
    def mean_l2(level):
        spec = CorruptionSpec(kind, level=level, salt=1)
        return np.mean([np.linalg.norm(apply_corruption(im, spec, [1, i]) - im) for i, im in enumerate(IMAGES)])

    dist = [mean_l2(lv) for lv in range(MAX_LEVEL + 1)]
    assert dist[5] > dist[1]
    assert all(b >= a for a, b in zip(dist, dist[1:]))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (8, 8), elements=st.floats(0.0, 1.0)),
    st.sampled_from(KINDS),
    st.integers(0, MAX_LEVEL),
    st.integers(0, 2**32 - 1),
)
def test_range_and_determinism(img, kind, level, seed):
    spec = CorruptionSpec(kind, level=level)
    a = apply_corruption(img, spec, seed)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, apply_corruption(img, spec, seed))


def test_out_of_range_pixels_rejected():
    with pytest.raises(InvalidInput):
        apply_corruption(np.full((8, 8), 1.5), CorruptionSpec("brightness", level=1), 0)


@pytest.mark.parametrize(
    "kw", [dict(kind="fog", level=1), dict(kind="contrast"), dict(kind="contrast", level=1, coverage=0.5),
           dict(kind="contrast", level=6), dict(kind="occlusion_overlay", coverage=1.5)]
)
def test_spec_validation(kw):
    with pytest.raises(InvalidConfig):
        CorruptionSpec(**kw)


def test_occlusion_area_tracks_coverage():
    img = np.ones((16, 16))
    for cov in (0.2, 0.5, 1.0):
        out = apply_corruption(img, CorruptionSpec("occlusion_overlay", coverage=cov), 3)
        assert abs((out == 0).mean() - cov) < 0.08


def test_corrupt_images_is_order_independent():
    spec = CorruptionSpec("gaussian_noise", level=3, salt=5)
    idx = np.arange(10)
    whole = corrupt_images(IMAGES[:10], spec, idx)
    rev = corrupt_images(IMAGES[:10][::-1], spec, idx[::-1])
    assert np.array_equal(whole, rev[::-1])


def test_kind_mix_is_per_sample_and_roughly_uniform():
    kinds = ("brightness", "contrast")
    picks = [pick_kind(kinds, 0, i) for i in range(2000)]
    assert 0.45 < picks.count("brightness") / 2000 < 0.55


def test_search_severity_target_zero_is_identity():
    spec, drop = search_severity(lambda s: 1.0, "occlusion_overlay", 0.0, 0.02)
    assert spec.is_identity and drop == 0.0


def test_search_severity_on_linear_response():
    # metric falls linearly with coverage: drop(cov) = 0.5 * cov
    def evaluate(spec):
        return 1.0 if spec is None else 1.0 - 0.5 * spec.coverage

    spec, drop = search_severity(evaluate, "gaussian_noise", 0.2, 0.005)
    assert abs(drop - 0.2) <= 0.005 and spec.coverage == pytest.approx(0.4, abs=0.01)


def test_search_severity_not_bracketing():
    with pytest.raises(CalibrationInfeasible) as err:
        search_severity(lambda s: 1.0 if s is None else 0.9, "occlusion_overlay", 0.5, 0.02)
    assert err.value.max_drop == pytest.approx(0.1)


def test_box_blur_cannot_be_calibrated():
    with pytest.raises(InvalidConfig):
        search_severity(lambda s: 1.0, "box_blur", 0.2, 0.02)


@pytest.fixture(scope="module")
def segmentation_reference():
    cfg = desk_defaults("segmentation")
    return pretrained_model(cfg, 1), get_federation(cfg, 1).test


def test_calibrate_segmentation_occlusion(segmentation_reference):
    model, test = segmentation_reference
    spec, drop = calibrate_transform(model, test, "occlusion_overlay", 0.20, 0.02, salt=1)
    assert 0.18 <= drop <= 0.22
    measured = relative_drop(evaluate_model(model, test), evaluate_model(model, test, corrupt_images(test.images, spec)))
    assert measured == drop


def test_calibration_drop_monotone_in_coverage(segmentation_reference):
    model, test = segmentation_reference
    clean = evaluate_model(model, test)

    def drop(cov):
        spec = CorruptionSpec("occlusion_overlay", coverage=cov, salt=1)
        return relative_drop(clean, evaluate_model(model, test, corrupt_images(test.images, spec)))

    assert drop(0.8) >= drop(0.2)


def test_feasibility_identity_fails(desk_cfg):
    rep = cf_feasibility_check(desk_cfg, CorruptionSpec("gaussian_noise", level=0), seed=1)
    assert rep.drop_after_retrain == pytest.approx(0.0, abs=0.01)
    assert not rep.order_switched and not rep.passes


def test_feasibility_tiny_occlusion_fails(desk_cfg):
    # stand-in for a transform that leaves the class signal untouched
    rep = cf_feasibility_check(desk_cfg, CorruptionSpec("occlusion_overlay", coverage=0.004, salt=1), seed=1)
    assert rep.drop_after_retrain < 0.05 and not rep.passes


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_feasibility_noise_level5_passes(desk_cfg, seed):
    rep = cf_feasibility_check(desk_cfg, CorruptionSpec("gaussian_noise", level=5, salt=seed), seed)
    assert rep.passes and rep.drop_after_retrain >= 0.05 and rep.order_switched
