import pytest
import torch

from simdis.config import DataConfig, ModelConfig, OptimConfig, ProbeConfig, SchemeConfig
from simdis.data import fetch_dataset


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    fetch_dataset("shapes", root, image_size=8, num_classes=4, n_train=40, n_eval=24, seed=1)
    return root


def tiny_config(data_root, **overrides) -> SchemeConfig:
    fields = dict(
        epochs=2,
        batch_size=16,
        base_lr=0.1,
        seed=3,
        data=DataConfig(name="shapes", root=str(data_root), image_size=8, num_classes=4),
        model=ModelConfig(teacher_encoder="resnet_w8", student_encoder="resnet_w4", proj_hidden=16, proj_dim=8),
        optim=OptimConfig(warmup_epochs=1),
        probe=ProbeConfig(epochs=5, batch_size=16, knn_k=3),
    )
    fields.update(overrides)
    return SchemeConfig(**fields)


@pytest.fixture
def make_cfg(data_root):
    return lambda **kw: tiny_config(data_root, **kw)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
