import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from maskedge import fixture, kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


@pytest.fixture(scope="session")
def det_float():
    return fixture.build_fixture_model(seed=1, quantized=False)


@pytest.fixture(scope="session")
def det_quant():
    return fixture.build_fixture_model(seed=1, quantized=True)


@pytest.fixture(scope="session")
def face_float():
    return fixture.build_fixture_model(seed=1, quantized=False, num_classes=1)


@pytest.fixture(scope="session")
def face_quant():
    return fixture.build_fixture_model(seed=1, quantized=True, num_classes=1)


@pytest.fixture(scope="session")
def cls_float():
    return fixture.build_fixture_classifier(seed=1, quantized=False, input_size=64)


@pytest.fixture(scope="session")
def cls_quant():
    return fixture.build_fixture_classifier(seed=1, quantized=True, input_size=64)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Synthetic PNG dataset plus manifest, shared across tests."""
    directory = tmp_path_factory.mktemp("dataset")
    manifest = fixture.write_synthetic_dataset(directory, count=8, seed=11)
    return manifest.parent


@pytest.fixture()
def numpy_backend():
    prev = kernels.set_backend("numpy")
    yield
    kernels.set_backend(prev)
