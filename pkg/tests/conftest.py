# Keep BLAS single-threaded: the suite's GEMMs are small and thread sync
# costs more than it saves. Must run before numpy is first imported.
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from pathlib import Path

import numpy as np
import pytest

from groupmamba import data as data_mod

REPO_ROOT = Path(__file__).resolve().parent.parent
CIFAR_SUBSET = REPO_ROOT / "data" / "cifar10-subset-5000.bin"


@pytest.fixture(scope="session")
def cifar_images():
    if not CIFAR_SUBSET.exists():
        pytest.fail(
            f"CIFAR-10 subset fixture missing at {CIFAR_SUBSET}; "
            "regenerate it with scripts/fetch_cifar10.py"
        )
    return data_mod.read_cifar10(str(CIFAR_SUBSET))


@pytest.fixture(scope="session")
def cifar_split(cifar_images):
    train_imgs, eval_imgs = data_mod.split_shuffle(cifar_images, (0.9, 0.1), seed=0)
    tx, ty = data_mod.as_arrays(train_imgs)
    ex, ey = data_mod.as_arrays(eval_imgs)
    tx = data_mod.normalize(tx, data_mod.CIFAR10_MEAN, data_mod.CIFAR10_STD)
    ex = data_mod.normalize(ex, data_mod.CIFAR10_MEAN, data_mod.CIFAR10_STD)
    return tx, ty, ex, ey
