import pytest
import torch

from inversion_audit.classifiers import (
    ClassifierSpec,
    build_classifier,
    forward_features,
    leaf_forward,
    train_classifier,
)
from inversion_audit.data import DatasetSpec, load_dataset
from inversion_audit.errors import ConfigError


@pytest.mark.parametrize(
    "arch,shape,feat",
    [("mlp", (1, 28, 28), 64), ("cnn", (1, 28, 28), 2048), ("cnn", (3, 32, 32), 2048), ("vit", (3, 32, 32), 128)],
)
def test_shapes_and_feature_dims(arch, shape, feat):
    clf = build_classifier(ClassifierSpec(arch, shape, 10), seed=0).freeze()
    out = forward_features(clf, torch.zeros((2,) + shape))
    assert out.logits.shape == (2, 10)
    assert out.features.shape == (2, feat) and clf.feature_dim == feat
    assert torch.isfinite(out.logits).all()


def test_cnn_fc_features():
    clf = build_classifier(ClassifierSpec("cnn", (1, 28, 28), 10, cnn_features="fc"), seed=0).freeze()
    assert forward_features(clf, torch.zeros(2, 1, 28, 28)).features.shape == (2, 128)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ClassifierSpec("resnet", (1, 28, 28), 10)
    with pytest.raises(ConfigError):
        ClassifierSpec("vit", (1, 30, 30), 10)
    with pytest.raises(ConfigError):
        ClassifierSpec("mlp", (1, 28, 28), 10, mlp_hidden=(8, 8))
    spec = ClassifierSpec("ViT", (3, 32, 32), 10)
    assert ClassifierSpec.from_dict(spec.as_dict()) == spec


def test_build_is_seeded():
    spec = ClassifierSpec("cnn", (1, 28, 28), 10)
    a, b = build_classifier(spec, 1).model.state_dict(), build_classifier(spec, 1).model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_wrong_input_shape_and_unfrozen_rejected():
    clf = build_classifier(ClassifierSpec("mlp", (1, 28, 28), 10), seed=0)
    with pytest.raises(ConfigError):
        forward_features(clf, torch.zeros(2, 1, 28, 28))
    clf.freeze()
    with pytest.raises(ConfigError):
        forward_features(clf, torch.zeros(2, 3, 28, 28))


@pytest.mark.parametrize("arch", ["mlp", "cnn", "vit"])
def test_leaf_forward_matches_model(arch):
    clf = build_classifier(ClassifierSpec(arch, (1, 28, 28), 10), seed=0).freeze()
    x = torch.rand(3, 1, 28, 28)
    out, params = leaf_forward(clf, x)
    ref = forward_features(clf, x)
    assert torch.allclose(out.logits, ref.logits, atol=1e-6)
    assert all(p.requires_grad for p in params.values())


def test_training_is_deterministic_and_freezes(shapes_train):
    def run():
        clf = build_classifier(ClassifierSpec("cnn", (1, 28, 28), 4), seed=3)
        return train_classifier(clf, shapes_train, epochs=1, seed=3)

    a, b = run(), run()
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert a.frozen and not a.model.training
    assert not any(p.requires_grad for p in a.model.parameters())
    assert a.manifest["steps"] > 0 and 0 <= a.manifest["train_accuracy"] <= 1


def test_dataset_mismatch_rejected(shapes_train):
    clf = build_classifier(ClassifierSpec("mlp", (1, 28, 28), 10), seed=0)
    with pytest.raises(ConfigError):
        train_classifier(clf, shapes_train, epochs=1)


def test_toy_mlp_fits(toy_mlp):
    assert toy_mlp.manifest["train_accuracy"] >= 0.95
    test = load_dataset(DatasetSpec("synthetic", subset_size=50, split="test"))
    from inversion_audit.classifiers import accuracy

    assert accuracy(toy_mlp, test) >= 0.9
