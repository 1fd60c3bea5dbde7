import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bagstorm import data
from bagstorm.errors import ConfigurationError, FormatError


def small(**kw):
    base = dict(n_slides=20, n_patches=8)
    base.update(kw)
    return data.generate_dataset(**base)


def test_zero_tumor_fraction_gives_all_normal():
    ds = small(tumor_slide_fraction=0.0)
    for s in ds:
        assert s.labels["A"] == 0
        assert set(s.tags) == {data.NORMAL}


def test_same_config_is_bitwise_identical():
    a, b = small(seed=4), small(seed=4)
    for s, t in zip(a, b):
        assert s.pixels.tobytes() == t.pixels.tobytes()
        assert s.tags == t.tags and s.labels == t.labels


def test_different_seed_differs():
    assert small(seed=1)[0].pixels.tobytes() != small(seed=2)[0].pixels.tobytes()


def test_tumor_slide_count_within_binomial_interval():
    ds = data.generate_dataset(n_slides=200, n_patches=4, tumor_slide_fraction=0.5)
    lo, hi = stats.binom.interval(0.99, 200, 0.5)
    assert lo <= sum(s.labels["A"] for s in ds) <= hi


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), frac=st.floats(0.0, 1.0))
def test_pixels_in_range_and_tags_consistent(seed, frac):
    ds = data.generate_dataset(n_slides=3, n_patches=6, seed=seed, tumor_slide_fraction=frac)
    for s in ds:
        assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
        n_tumor = s.tags.count(data.TUMOR)
        assert s.labels["A"] == int(n_tumor > 0)
        assert 0 <= s.labels["B"] < ds.gen_config.texture_families
        assert len(s.patches) == 6 and s.patches[0].texture_family == s.families[0]


def test_slides_are_read_only():
    with pytest.raises(ValueError):
        small()[0].pixels[0, 0, 0, 0] = 0.5


@pytest.mark.parametrize(
    "key,value",
    [("tumor_slide_fraction", 1.5), ("tumor_patch_fraction", 0.0), ("n_patches", 0), ("patch_shape", (2, 2, 3))],
)
def test_invalid_config_rejected(key, value):
    with pytest.raises(ConfigurationError, match=f"data.{key}"):
        data.generate_dataset(**{key: value})


def test_split_half_on_hundred():
    ds = data.generate_dataset(n_slides=100, n_patches=2)
    train, test = data.split(ds, 0.5, seed=0)
    a = {s.slide_id for s in train}
    b = {s.slide_id for s in test}
    assert len(a) == len(b) == 50
    assert not a & b and a | b == set(range(100))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(10, 60), frac=st.floats(0.2, 0.8), seed=st.integers(0, 1000))
def test_split_is_stratified(n, frac, seed):
    ds = data.generate_dataset(n_slides=n, n_patches=2, seed=seed)
    train, _ = data.split(ds, frac, seed)
    for c in (0, 1):
        total = sum(s.labels["A"] == c for s in ds)
        got = sum(s.labels["A"] == c for s in train)
        assert abs(got - frac * total) <= 1.0 + 1e-9


def test_kfold_partitions_slides():
    ds = data.generate_dataset(n_slides=40, n_patches=2)
    folds = data.kfold(ds, 5, seed=3)
    seen = [s.slide_id for _, test in folds for s in test]
    assert sorted(seen) == list(range(40))
    for train, test in folds:
        assert not {s.slide_id for s in train} & {s.slide_id for s in test}


def test_kfold_needs_enough_members():
    ds = data.generate_dataset(n_slides=6, n_patches=2, tumor_slide_fraction=0.0)
    ds_mixed = data.Dataset(ds.slides[:5] + [small(tumor_slide_fraction=1.0)[0]], ds.gen_config)
    with pytest.raises(ConfigurationError):
        data.kfold(ds_mixed, 3, seed=0)


def test_manifest_regenerates_bitwise(tmp_path):
    ds = small(seed=9)
    data.save_manifest(ds, tmp_path / "d.json")
    back = data.load_manifest(tmp_path / "d.json")
    assert back.gen_config == ds.gen_config
    for s, t in zip(ds, back):
        assert s.pixels.tobytes() == t.pixels.tobytes()


def test_manifest_bad_version(tmp_path):
    (tmp_path / "d.json").write_text('{"format_version": "2", "gen_config": {}}')
    with pytest.raises(FormatError):
        data.load_manifest(tmp_path / "d.json")
