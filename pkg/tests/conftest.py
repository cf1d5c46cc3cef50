import pytest
import torch

from inversion_audit.classifiers import ClassifierSpec, build_classifier, train_classifier
from inversion_audit.data import DatasetSpec, load_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes_train():
    return load_dataset(DatasetSpec("synthetic", subset_size=100))


@pytest.fixture(scope="session")
def toy_mlp(shapes_train):
    """MLP trained on the 400-sample synthetic shapes set (frozen)."""
    clf = build_classifier(ClassifierSpec("mlp", (1, 28, 28), 4), seed=0)
    return train_classifier(clf, shapes_train, epochs=30, seed=0)


def double_classifier(arch, shape=(1, 12, 12), n=4, seed=0):
    """Small frozen float64 classifier for gradient checks."""
    spec = ClassifierSpec(
        arch, shape, n, mlp_hidden=(16, 12, 10, 8), cnn_channels=(4, 6, 8), vit_embed_dim=16, dropout=0.0
    )
    clf = build_classifier(spec, seed)
    clf.model.double()
    # perturb BN running stats away from the identity so they matter
    with torch.no_grad():
        for m in clf.model.modules():
            if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
                m.running_mean.uniform_(-0.1, 0.1)
                m.running_var.uniform_(0.5, 1.5)
    return clf.freeze()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
