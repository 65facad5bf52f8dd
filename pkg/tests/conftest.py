import pytest
import torch

from mnclglf.data import Dataset


def random_dataset(n=10, hw=(32, 32), channels=3, classes=10, seed=0, split="train"):
    g = torch.Generator().manual_seed(seed)
    images = torch.randint(0, 256, (n, channels, *hw), generator=g, dtype=torch.uint8)
    labels = torch.randint(0, classes, (n,), generator=g)
    return Dataset(images, labels, classes, split)


@pytest.fixture
def tiny_dataset():
    return random_dataset()


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps float reductions reproducible run to run
    torch.set_num_threads(1)
