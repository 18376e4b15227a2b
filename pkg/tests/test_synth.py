import numpy as np
import pytest

from difftraverse import synth
from difftraverse.synth import AttributeFlags, ContentParams


def _content(cx=0.5, cy=0.45):
    return ContentParams((cx, cy), (0.3, 0.3), 0.11, identity_seed=12345)


def test_render_is_deterministic():
    c = _content()
    a = AttributeFlags.of(device=0.7, grid=0.9)
    np.testing.assert_array_equal(synth.render_phantom(c, a), synth.render_phantom(c, a))


def test_render_range_and_shape():
    img = synth.render_phantom(_content(), AttributeFlags.of(effusion=1.0, marker=1.0))
    assert img.shape == (32, 32)
    assert img.min() >= -1 and img.max() <= 1


@pytest.mark.parametrize("attr", synth.ATTRIBUTES)
def test_edit_confined_to_mask(attr):
    c = _content()
    plain = synth.render_phantom(c, AttributeFlags())
    edited = synth.render_phantom(c, AttributeFlags.of(**{attr: 1.0}))
    changed = plain != edited
    assert changed.any()
    assert not (changed & ~synth.attribute_mask(c, attr)).any()


def test_effusion_stays_in_lower_lung_thirds():
    c = _content()
    mask = synth.attribute_mask(c, "effusion")
    rows = np.flatnonzero(mask.any(axis=1))
    (_, ly, _, lay), _ = synth._lungs(c)
    # lower third of the lung ellipse starts at ly + lay/3 (in unit coordinates)
    assert rows.min() / 32 >= ly + lay / 3 - 1.0 / 32


def test_effusion_brightens():
    c = _content()
    plain = synth.render_phantom(c, AttributeFlags())
    eff = synth.render_phantom(c, AttributeFlags.of(effusion=1.0))
    assert eff.mean() > plain.mean()


def test_out_of_range_parameters_rejected():
    with pytest.raises(synth.SynthError):
        synth.render_phantom(ContentParams((0.9, 0.5), (0.3, 0.3), 0.1, 1), AttributeFlags())
    with pytest.raises(synth.SynthError):
        synth.render_phantom(_content(), AttributeFlags.of(device=0.2))


def test_content_quadrant_boundaries():
    assert synth.content_quadrant(_content(0.40, 0.40)) == 0
    assert synth.content_quadrant(_content(0.60, 0.40)) == 1
    assert synth.content_quadrant(_content(0.40, 0.60)) == 2
    assert synth.content_quadrant(_content(0.50, 0.50)) == 3


def test_device_frequency_binomial_interval():
    ds = synth.sample_dataset(1000, seed=5, attr_probs={"device": 0.5})
    count = int(ds.attr_labels()[:, synth.ATTRIBUTES.index("device")].sum())
    assert 440 <= count <= 560


def test_zero_probabilities_give_neutral():
    ds = synth.sample_dataset(5, seed=1, attr_probs={a: 0.0 for a in synth.ATTRIBUTES})
    assert ds.attr_labels().sum() == 0


def test_dataset_determinism_and_splits():
    a = synth.sample_dataset(20, 3, {"grid": 0.5})
    b = synth.sample_dataset(20, 3, {"grid": 0.5})
    np.testing.assert_array_equal(a.images(), b.images())
    c = synth.sample_dataset(20, 3, {"grid": 0.5}, split="test")
    assert not np.array_equal(a.images(), c.images())


def test_dataset_validation():
    with pytest.raises(synth.SynthError):
        synth.sample_dataset(3, 0, {"lasers": 0.5})
    with pytest.raises(synth.SynthError):
        synth.sample_dataset(3, 0, {"grid": 1.5})
    with pytest.raises(synth.SynthError):
        synth.sample_dataset(3, 0, {}, split="holdout")


def test_save_load_round_trip(tmp_path):
    ds = synth.sample_dataset(6, 2, {"marker": 0.5, "effusion": 0.5})
    synth.save_dataset(ds, tmp_path / "d")
    back = synth.load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.images(), ds.images())
    np.testing.assert_array_equal(back.attr_labels(), ds.attr_labels())
    pgm = synth.read_pgm(tmp_path / "d" / "000000.pgm")
    assert np.max(np.abs(pgm - ds.images()[0])) <= 1.0 / 255 + 1e-12


def test_load_missing_index(tmp_path):
    with pytest.raises(synth.SynthError, match="index.json"):
        synth.load_dataset(tmp_path)
