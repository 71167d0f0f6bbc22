import pytest
import torch


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(0)
    yield
