import numpy as np
import pytest
import torch
from torch.nn import functional as F

from neurodecode.encoder import (Encoder, EncoderSpec, EncoderTrainConfig, build_encoder, encode, encode_batch,
                                 fit_encoder, import_features, load_encoder, load_split_images, save_encoder,
                                 train_encoder)
from neurodecode.synth import SynthConfig, gen_toy_dataset
from neurodecode.tensor_io import write_tensor
from oracles import directional_gradcheck


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("enc")
    return gen_toy_dataset(SynthConfig(num_categories=2, samples_per_category=50, image_size=32, seed=0), d)


def test_feature_length():
    model = build_encoder(EncoderSpec.desk(3, 40))
    z, logits = encode(model, np.random.default_rng(0).random((32, 32, 3)))
    assert z.shape == (40,) and logits.shape == (3,)
    assert (z >= 0).all()


def test_large_preset_feature_width():
    spec = EncoderSpec.full_scale()
    assert spec.feature_dim == 4096
    with torch.device("meta"):
        model = Encoder(spec)
        z, logits = model(torch.empty(1, 3, 224, 224))
    assert spec.conv_output() == (512, 7)
    assert tuple(z.shape) == (1, 4096) and tuple(logits.shape) == (1, 1000)


def test_encode_is_deterministic():
    model = build_encoder(EncoderSpec.desk(), seed=3)
    img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    a, b = encode(model, img), encode(model, img)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_seeded_init():
    a = build_encoder(EncoderSpec.desk(), seed=1).state_dict()
    b = build_encoder(EncoderSpec.desk(), seed=1).state_dict()
    c = build_encoder(EncoderSpec.desk(), seed=2).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_wrong_input_size():
    with pytest.raises(ValueError):
        encode(build_encoder(EncoderSpec.desk()), np.zeros((16, 16, 3)))


def test_head_consistent_with_tap():
    model = build_encoder(EncoderSpec(32, ((8, 3, 2),), (20, 10, 3)))
    imgs = np.random.default_rng(2).random((4, 32, 32, 3)).astype(np.float32)
    z, logits = encode_batch(model, imgs)
    with torch.no_grad():
        again = model.head(torch.as_tensor(z)).numpy()
    np.testing.assert_allclose(again, logits, atol=1e-6)


def test_train_to_high_accuracy(toy):
    # all 100 images of the toy set, as in the training oracle run
    images, labels = load_split_images(toy, None, 32)
    model, hist = fit_encoder(images, labels, EncoderSpec.desk(2, 64), EncoderTrainConfig(steps=500, seed=0))
    _, logits = encode_batch(model, images)
    acc = (logits.argmax(1) == labels).mean()
    assert acc >= 0.95
    assert len(hist.loss) == 500 and hist.loss[-1] < hist.loss[0]


def test_zero_steps_returns_init(toy):
    spec = EncoderSpec.desk()
    model, _ = train_encoder(toy, spec, EncoderTrainConfig(steps=0, seed=4))
    ref = build_encoder(spec, seed=4).state_dict()
    assert all(torch.equal(model.state_dict()[k], ref[k]) for k in ref)


def test_single_category_rejected(tmp_path):
    images = np.zeros((4, 32, 32, 3), np.float32)
    with pytest.raises(ValueError, match="2 categories"):
        fit_encoder(images, [0, 0, 0, 0], EncoderSpec.desk(), EncoderTrainConfig(steps=1))


def test_single_category_manifest(toy):
    from neurodecode.tensor_io import DatasetManifest

    only0 = DatasetManifest([r for r in toy.records if r.category_id == 0], 2, toy.root)
    with pytest.raises(ValueError):
        train_encoder(only0, EncoderSpec.desk(), EncoderTrainConfig(steps=1))


def test_cross_entropy_gradcheck():
    spec = EncoderSpec(8, ((4, 3, 2),), (6, 2))
    model = build_encoder(spec, seed=0)
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([1])

    def loss(mods, dtype):
        _, logits = mods[0](x.to(dtype))
        return F.cross_entropy(logits, y)

    errs = directional_gradcheck(loss, [model], n_dirs=50, rel_step=1e-5)
    assert errs.max() < 1e-3


def test_save_load(tmp_path):
    model = build_encoder(EncoderSpec.desk(), seed=5)
    save_encoder(model, tmp_path / "e")
    back = load_encoder(tmp_path / "e")
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    assert encode(back, img)[0].tobytes() == encode(model, img)[0].tobytes()


def test_import_features(toy, tmp_path):
    Z = np.random.default_rng(0).standard_normal((len(toy), 7)).astype(np.float32)
    write_tensor(Z, tmp_path / "z.dctf")
    np.testing.assert_array_equal(import_features(tmp_path / "z.dctf", toy), Z)
    write_tensor(Z[:5], tmp_path / "short.dctf")
    with pytest.raises(ValueError):
        import_features(tmp_path / "short.dctf", toy)
