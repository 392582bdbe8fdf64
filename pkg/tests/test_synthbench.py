import numpy as np
import pytest

from oodkit.errors import ConfigError
from oodkit.synthbench import (GROUP_OF, NUISANCES, BenchSpec, changed_groups, export, generate, generate_split,
                               import_images, import_set, perturb, read_manifest, render, sample_base_factors,
                               sample_factors)

SMALL = BenchSpec(num_classes=3, image_side=16, train_size=12, val_size=6, test_size_per_split=6, aux_size=4,
                  rng_seed=3)


def test_generation_is_deterministic_and_order_free():
    a = generate_split(SMALL, "pose", 6)
    b = generate_split(SMALL, "pose", 6)
    assert np.array_equal(a.images, b.images)
    f3, _ = sample_factors(SMALL, "pose", 3)
    assert np.array_equal(render(f3, 16)[0], a.images[3])


def test_splits_differ_and_labels_are_balanced():
    train = generate_split(SMALL, "train", 12)
    iid = generate_split(SMALL, "iid", 12)
    assert not np.array_equal(train.images, iid.images)
    assert np.bincount(train.labels).tolist() == [4, 4, 4]


@pytest.mark.parametrize("nuisance", NUISANCES)
def test_each_nuisance_changes_exactly_its_group(nuisance):
    for i in range(5):
        ood, base = sample_factors(SMALL, nuisance, i)
        assert changed_groups(base, ood) == {GROUP_OF[nuisance]}
        assert ood.label == base.label


@pytest.mark.parametrize("nuisance", NUISANCES)
def test_zero_strength_is_identity(nuisance):
    rng = np.random.default_rng(0)
    f = sample_base_factors(rng, 1, 32)
    assert perturb(f, nuisance, 0.0, rng, 32) is f
    spec = BenchSpec(image_side=16, nuisance_strengths={nuisance: 0.0}, rng_seed=3)
    ood, base = sample_factors(spec, nuisance, 2)
    assert ood == base


def test_rendered_images_are_valid():
    bench = generate(SMALL)
    for split in bench.test_splits().values():
        assert split.images.shape == (6, 16, 16, 3)
        assert split.images.min() >= 0 and split.images.max() <= 1
        assert np.all(split.masks.sum(axis=(1, 2)) > 0)
    assert len(bench.backgrounds) == 4 and len(bench.distractors) == 4
    assert all(not d.task_related for d in bench.distractors)


def test_spec_validation_names_fields():
    with pytest.raises(ConfigError) as exc:
        BenchSpec(num_classes=9)
    assert exc.value.field == "benchmark.num_classes"
    with pytest.raises(ConfigError) as exc:
        BenchSpec(nuisance_strengths={"blur": 1.0})
    assert exc.value.field == "benchmark.nuisance_strengths.blur"


def test_export_import_round_trip(tmp_path):
    ds = generate_split(SMALL, "texture", 6)
    export(ds, tmp_path / "t")
    back = import_set(tmp_path / "t")
    assert np.array_equal(back.labels, ds.labels)
    assert back.tags == ["TEXTURE"] * 6
    assert np.abs(back.images - ds.images).max() <= 1 / 255
    assert np.array_equal(import_images(tmp_path / "t"), back.images)


def test_export_without_labels(tmp_path):
    ds = generate_split(SMALL, "iid", 3)
    export(ds, tmp_path / "u", with_labels=False)
    assert all("label" not in r for r in read_manifest(tmp_path / "u"))
    assert import_set(tmp_path / "u").labels.tolist() == [-1, -1, -1]


def test_missing_manifest_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        read_manifest(tmp_path / "nope")
