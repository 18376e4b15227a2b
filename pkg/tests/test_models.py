import numpy as np
import pytest

from difftraverse import models as md
from difftraverse import numeric as nm
from difftraverse.diffusion import make_schedule
from difftraverse.synth import ATTRIBUTES, sample_dataset


def _den_loss(model, seed=0, n=4):
    g = np.random.default_rng(seed)
    x = g.normal(size=(n, 1024))
    t = g.integers(1, model.config.T + 1, size=n)
    e = g.normal(size=(n, model.config.embed_dim))
    eps = g.normal(size=(n, 1024))

    def loss(store):
        return md.denoiser_loss(model, x, t, e, eps)
    return loss


def _clf_loss(model, seed=0, n=5):
    g = np.random.default_rng(seed)
    x = g.normal(size=(n, 1024))
    y = g.integers(0, 4, size=n)
    a = g.integers(0, 2, size=(n, 4)).astype(float)
    return lambda store: md.classifier_loss(model, x, y, a)


def test_predict_noise_shape_and_determinism(tiny_denoiser, table):
    e = table.base_vector
    x = np.random.default_rng(0).normal(size=(32, 32))
    a = md.predict_noise(tiny_denoiser, x, 7, e)
    assert a.shape == (32, 32)
    np.testing.assert_array_equal(a, md.predict_noise(tiny_denoiser, x, 7, e))
    batch = md.predict_noise(tiny_denoiser, np.stack([x, x]), 7, e)
    assert batch.shape == (2, 32, 32)
    with pytest.raises(md.ModelError):
        md.predict_noise(tiny_denoiser, x, 0, e)
    with pytest.raises(md.ModelError):
        md.predict_noise(tiny_denoiser, np.zeros((16, 16)), 3, e)


def test_denoiser_gradients(tiny_denoiser):
    # make the zero-initialized gate non-trivial so its gradient path is exercised
    tiny_denoiser.store.params["skip.w"][...] = 0.05
    assert nm.check_gradients(_den_loss(tiny_denoiser), tiny_denoiser.store,
                              coords_per_param=150) < 1e-4


def test_classifier_gradients(tiny_classifier):
    assert nm.check_gradients(_clf_loss(tiny_classifier), tiny_classifier.store,
                              coords_per_param=150) < 1e-4


def test_train_denoiser_zero_steps_is_init(small_dataset, table):
    cfg = md.TrainConfig(steps=0, batch_size=8, seed=5)
    conf = md.DenoiserConfig(hidden=(16, 16))
    model, rep = md.train_denoiser(small_dataset, table, make_schedule(), cfg, conf)
    assert model.store.equal(md.DenoiserModel.init(conf, 5).store)
    assert len(rep.loss_curve) == 1


def test_train_denoiser_deterministic_and_learns(small_dataset, table):
    cfg = md.TrainConfig(steps=150, batch_size=16, lr=2e-3, seed=5)
    conf = md.DenoiserConfig(hidden=(32, 32))
    a, ra = md.train_denoiser(small_dataset, table, make_schedule(), cfg, conf)
    b, rb = md.train_denoiser(small_dataset, table, make_schedule(), cfg, conf)
    assert a.store.equal(b.store)
    assert ra.loss_curve == rb.loss_curve
    s = ra.smoothed(50)
    assert s[-1] < s[0]


def test_train_denoiser_empty(table):
    ds = sample_dataset(1, 0, {})
    ds.phantoms.clear()
    with pytest.raises(md.ModelError):
        md.train_denoiser(ds, table)


def test_classify_ranges(tiny_classifier):
    img = np.random.default_rng(1).uniform(-1, 1, size=(32, 32))
    cp, ap = md.classify(tiny_classifier, img)
    assert abs(cp.sum() - 1) < 1e-9
    assert set(ap) == set(ATTRIBUTES) and all(0 <= v <= 1 for v in ap.values())
    with pytest.raises(md.ModelError):
        md.classify(tiny_classifier, np.zeros((2, 32, 32)))


def test_features_normalized_and_zero_flag(tiny_classifier):
    img = np.random.default_rng(2).uniform(-1, 1, size=(32, 32))
    feats, flags = md.features(tiny_classifier, img, return_flags=True)
    assert len(feats) == 2 and flags == [False, False]
    for f in feats:
        assert abs(np.linalg.norm(f) - 1) < 1e-9
    for a, b in zip(feats, md.features(tiny_classifier, img)):
        np.testing.assert_array_equal(a, b)
    zero = md.ClassifierModel(tiny_classifier.config, tiny_classifier.store.copy())
    for v in zero.store.params.values():
        v[...] = 0.0
    feats, flags = md.features(zero, img, return_flags=True)
    assert flags == [True, True] and not any(f.any() for f in feats)


def test_train_classifier_report_and_determinism(small_dataset):
    cfg = md.TrainConfig(steps=60, batch_size=16, seed=3)
    conf = md.ClassifierConfig(hidden=(16, 8))
    a, ra = md.train_classifier(small_dataset, cfg, small_dataset, conf)
    b, rb = md.train_classifier(small_dataset, cfg, small_dataset, conf)
    assert set(ra.metrics["train"]) == {"content", *ATTRIBUTES}
    assert ra.metrics == rb.metrics and a.store.equal(b.store)


def test_train_classifier_single_class_head():
    ds = sample_dataset(30, 1, {"effusion": 0.5, "device": 0.5, "marker": 0.5})
    with pytest.raises(md.ModelError, match="grid"):
        md.train_classifier(ds, md.TrainConfig(steps=1))


def test_head_metrics_oracle():
    pred = np.array([1, 1, 0, 0, 1], bool)
    truth = np.array([1, 0, 0, 1, 1], bool)
    m = md.head_metrics(pred, truth)
    assert m["accuracy"] == pytest.approx(3 / 5)
    assert m["f1"] == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))


@pytest.mark.parametrize("which", ["den", "clf"])
def test_checkpoint_round_trip(which, tiny_denoiser, tiny_classifier, tmp_path):
    model = tiny_denoiser if which == "den" else tiny_classifier
    path = md.save_checkpoint(model, tmp_path / "m.mdl")
    back = md.load_checkpoint(path)
    assert type(back) is type(model) and back.config == model.config
    assert back.store.equal(md.round_to_f32(model).store)
    md.save_checkpoint(back, tmp_path / "m2.mdl")
    assert (tmp_path / "m2.mdl").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tiny_classifier, tmp_path):
    path = md.save_checkpoint(tiny_classifier, tmp_path / "m.mdl")
    data = path.read_bytes()
    (tmp_path / "bad.mdl").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(md.CheckpointError, match="magic"):
        md.load_checkpoint(tmp_path / "bad.mdl")
    (tmp_path / "short.mdl").write_bytes(data[:-10])
    with pytest.raises(md.CheckpointError, match="truncated"):
        md.load_checkpoint(tmp_path / "short.mdl")
    with pytest.raises(md.CheckpointError, match="not found"):
        md.load_checkpoint(tmp_path / "none.mdl")
