import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)
