import math

import numpy as np
import pytest

from oodkit.augment import (AugPipeline, AugPolicy, BankEntry, CutMixParams, ObjectBank, PolicyKind,
                            Resources, Stage, Weather, WeatherKind, apply_policy, copy_paste_context,
                            copy_paste_occlusion, cutmix, weather)
from oodkit.augment.copypaste import in_frame_weight
from oodkit.augment.policy import STRONG_OPS, apply_op, equalize, posterize, solarize, weak, weak_draw
from oodkit.augment.weather import glare_profile, plasma_fractal
from oodkit.errors import ConfigError, ContractViolation
from oodkit.imaging import AffineParams, ColorParams, resize

from conftest import random_image


def _disc(side=16, r=5):
    ys, xs = np.mgrid[0:side, 0:side]
    return ((ys - side / 2 + 0.5) ** 2 + (xs - side / 2 + 0.5) ** 2 <= r * r).astype(float)


# -- weather -------------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(Weather))
@pytest.mark.parametrize("severity", [1, 3, 5])
def test_weather_stays_in_range_and_is_seeded(kind, severity, rng):
    img = random_image(rng, 32, 32)
    a = weather(img, WeatherKind(kind, severity), np.random.default_rng(4))
    b = weather(img, WeatherKind(kind, severity), np.random.default_rng(4))
    assert a.shape == img.shape and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", [Weather.SNOW, Weather.FOG, Weather.SUNSHINE])
def test_weather_never_darkens(kind, rng):
    img = random_image(rng, 32, 32)
    out = weather(img, WeatherKind(kind, 4), rng)
    assert np.all(out >= img - 1e-12)


def test_fog_on_white_is_white():
    out = weather(np.ones((16, 16, 3)), WeatherKind("fog", 5), np.random.default_rng(0))
    assert np.array_equal(out, np.ones((16, 16, 3)))


def test_severity_bounds():
    with pytest.raises(ContractViolation):
        WeatherKind("rain", 0)
    with pytest.raises(ContractViolation):
        WeatherKind("rain", 6)


def test_glare_peaks_at_centre_and_decays():
    g = glare_profile(32, 32, (4, 10), 3)
    assert np.unravel_index(g.argmax(), g.shape) == (4, 10)
    assert g[4, 10] > g[4, 20] > g[4, 31]


def test_plasma_is_normalised_and_needs_power_of_two(rng):
    p = plasma_fractal(32, 2.0, rng)
    assert p.min() == 0.0 and p.max() == 1.0
    with pytest.raises(ContractViolation):
        plasma_fractal(30, 2.0, rng)


# -- policies ------------------------------------------------------------------------

def test_weak_view_is_a_resized_crop_possibly_flipped(rng):
    img = random_image(rng, 32, 32)
    for seed in range(20):
        flip, top, left, side = weak_draw(np.random.default_rng(seed), 32, 32)
        assert 24 <= side <= 32 and 0 <= top <= 32 - side and 0 <= left <= 32 - side
        want = img[top:top + side, left:left + side]
        want = resize(want, 32, 32) if side != 32 else want
        want = want[:, ::-1] if flip else want
        assert np.array_equal(weak(img, np.random.default_rng(seed)), want)


def test_weak_preserves_constant_images():
    img = np.full((16, 16, 3), 0.4)
    assert np.allclose(weak(img, np.random.default_rng(1)), 0.4)


def test_apply_policy_is_reproducible_and_in_range(rng):
    img = random_image(rng, 32, 32)
    pol = AugPolicy(PolicyKind.STRONG, 3, 9, rng_seed=5)
    a, b = apply_policy(img, pol), apply_policy(img, pol)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, img)


def test_strong_with_zero_ops_is_identity(rng):
    img = random_image(rng)
    assert np.array_equal(apply_policy(img, AugPolicy(op_count=0)), img)


@pytest.mark.parametrize("name", STRONG_OPS)
def test_every_op_keeps_shape_and_range(name, rng):
    img = random_image(rng)
    out = apply_op(img, name, 1.0, rng)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_op_strength_zero_is_near_identity(rng):
    img = random_image(rng)
    for name in ("rotate", "shear_x", "translate_y", "brightness", "contrast", "sharpness"):
        assert np.allclose(apply_op(img, name, 0.0, rng), img, atol=1e-12), name


def test_posterize_solarize_equalize_examples():
    img = np.full((8, 8, 3), 0.7)
    assert np.allclose(solarize(img, 0.5), 0.3)
    assert np.allclose(solarize(img, 1.0), 0.7)
    assert np.all(np.abs(posterize(img, 1) - 0.7) <= 0.5)
    ramp = np.linspace(0, 0.5, 64).reshape(8, 8, 1).repeat(3, 2)
    eq = equalize(ramp)
    assert eq.max() > 0.9 and np.all(np.diff(eq[..., 0].ravel()) >= 0)


def test_policy_validation():
    with pytest.raises(ContractViolation):
        AugPolicy(magnitude=11)
    with pytest.raises(ContractViolation):
        AugPolicy(op_count=-1)


# -- copy-paste --------------------------------------------------------------------

def test_context_paste_keeps_object_and_label(rng):
    obj_img = random_image(rng)
    mask = _disc()
    bg = np.zeros((16, 16, 3))
    out, label = copy_paste_context([bg], BankEntry(obj_img, mask, 3), AffineParams(), ColorParams(),
                                    rng, offset=(0, 0))
    assert label == 3
    inside = mask == 1
    assert np.allclose(out[inside], obj_img[inside])
    assert np.all(out[mask == 0] == 0)


def test_context_paste_needs_pool_and_related_object(rng):
    obj = BankEntry(random_image(rng), _disc(), 1)
    with pytest.raises(ConfigError):
        copy_paste_context([], obj, AffineParams(), ColorParams(), rng)
    with pytest.raises(ContractViolation):
        copy_paste_context([random_image(rng)], BankEntry(obj.image, obj.mask, None), AffineParams(),
                           ColorParams(), rng)


def test_occlusion_respects_coverage_cap(rng):
    base = random_image(rng, 32, 32)
    big = BankEntry(np.ones((32, 32, 3)), np.ones((32, 32)), None)
    for cap in (0.1, 0.4):
        out, label = copy_paste_occlusion((base, 2), big, AffineParams(), ColorParams(), rng, cap, offset=(0, 0))
        changed = np.any(np.abs(out - base) > 1e-12, axis=2).mean()
        assert label == 2
        assert changed <= cap + 0.05


def test_occlusion_rejects_related_distractor(rng):
    with pytest.raises(ContractViolation):
        copy_paste_occlusion((random_image(rng), 0), BankEntry(random_image(rng), _disc(), 1),
                             AffineParams(), ColorParams(), rng)


def test_in_frame_weight():
    m = np.ones((4, 4))
    assert in_frame_weight(m, (0, 0), (4, 4)) == 16
    assert in_frame_weight(m, (2, 2), (4, 4)) == 4
    assert in_frame_weight(m, (9, 0), (4, 4)) == 0


def test_object_bank_round_trip(tmp_path, rng):
    bank = ObjectBank((BankEntry(random_image(rng), _disc(), 1), BankEntry(random_image(rng), _disc(), None)), 3)
    bank.save(tmp_path)
    back = ObjectBank.load(tmp_path)
    assert len(back) == 2 and back.num_classes == 3
    assert len(back.related) == 1 and len(back.unrelated) == 1
    assert np.abs(back.entries[0].image - bank.entries[0].image).max() <= 1 / 255


def test_object_bank_validation(rng):
    with pytest.raises(ContractViolation):
        ObjectBank((BankEntry(random_image(rng), np.zeros((16, 16)), 1),))
    with pytest.raises(ContractViolation):
        ObjectBank((BankEntry(random_image(rng), _disc(), 7),), num_classes=5)


def test_cutmix_label_matches_pasted_area(rng):
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    la, lb = np.eye(3)[0], np.eye(3)[1]
    for _ in range(50):
        out, label = cutmix((a, la), (b, lb), CutMixParams(), rng)
        frac = out[..., 0].mean()
        assert label[1] == pytest.approx(frac)
        assert label.sum() == pytest.approx(1.0)


def test_cutmix_same_label_and_lam_one(rng):
    a, b = random_image(rng), random_image(rng)
    out, label = cutmix((a, np.eye(2)[1]), (b, np.eye(2)[1]), CutMixParams(), rng)
    assert np.array_equal(label, np.eye(2)[1])
    out, label = cutmix((a, np.eye(2)[0]), (b, np.eye(2)[1]), CutMixParams(), rng, lam=1.0)
    assert np.array_equal(out, a) and np.array_equal(label, np.eye(2)[0])


def test_cutmix_seeded_by_params(rng):
    a, b = random_image(rng), random_image(rng)
    p = CutMixParams(rng_seed=9)
    assert np.array_equal(cutmix((a, [1, 0]), (b, [0, 1]), p)[0], cutmix((a, [1, 0]), (b, [0, 1]), p)[0])
    with pytest.raises(ContractViolation):
        CutMixParams(alpha=0)


# -- pipeline -----------------------------------------------------------------------

def _resources(rng):
    bgs = tuple(random_image(rng) for _ in range(3))
    dis = tuple(BankEntry(random_image(rng) * _disc()[..., None], _disc(), None) for _ in range(3))
    return Resources(bgs, dis)


def test_empty_pipeline_is_identity_with_onehot_labels(rng):
    x = rng.random((5, 16, 16, 3))
    out, soft = AugPipeline().apply_batch(x, np.ones((5, 16, 16)), np.arange(5) % 3, 3, rng)
    assert np.array_equal(out, x)
    assert np.array_equal(soft, np.eye(3)[np.arange(5) % 3])


def test_full_pipeline_runs_and_is_seeded(rng):
    pipe = AugPipeline.from_doc([{"name": n, "prob": 1.0} for n in
                                 ("copy_paste_context", "copy_paste_occlusion", "weak", "strong", "weather",
                                  "cutmix")])
    x = rng.random((6, 16, 16, 3))
    masks = np.stack([_disc()] * 6)
    res = _resources(rng)
    a = pipe.apply_batch(x, masks, np.arange(6) % 3, 3, np.random.default_rng(1), res)
    b = pipe.apply_batch(x, masks, np.arange(6) % 3, 3, np.random.default_rng(1), res)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].min() >= 0 and a[0].max() <= 1
    assert np.allclose(a[1].sum(1), 1.0)
    assert pipe.needs_resources


def test_stage_doc_round_trip_and_defaults():
    pipe = AugPipeline.from_doc([{"name": "weak"}, {"name": "strong", "magnitude": 5}])
    assert pipe.stages[0].prob == 1.0 and pipe.stages[1].prob == 0.5
    assert pipe.stages[1].params == {"op_count": 2, "magnitude": 5}
    assert AugPipeline.from_doc(pipe.to_doc()) == pipe


@pytest.mark.parametrize("doc,field", [
    ({"name": "blur"}, "augment.stages.name"),
    ({"name": "weak", "prob": 2}, "augment.weak.prob"),
    ({"name": "cutmix", "beta": 1}, "augment.cutmix.beta"),
    ({"prob": 0.5}, "augment.stages.name"),
])
def test_stage_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        Stage.from_doc(doc)
    assert exc.value.field == field


def test_occlusion_stage_without_distractors_is_a_config_error(rng):
    pipe = AugPipeline((Stage("copy_paste_occlusion", 1.0),))
    with pytest.raises(ConfigError):
        pipe.apply_batch(rng.random((2, 16, 16, 3)), np.ones((2, 16, 16)), [0, 1], 2, rng, Resources((), ()))


def test_probability_zero_stages_never_fire(rng):
    pipe = AugPipeline(tuple(Stage(n, 0.0) for n in ("weak", "strong", "weather", "cutmix")))
    x = rng.random((4, 16, 16, 3))
    out, _ = pipe.apply_batch(x, np.ones((4, 16, 16)), [0, 1, 0, 1], 2, rng)
    assert np.array_equal(out, x)
