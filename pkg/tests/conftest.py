import numpy as np
import pytest
import torch

from deblurkit import models
from deblurkit.synthetic import make_dataset

# Keep CPU math run-to-run stable for the reproducibility assertions.
torch.set_num_threads(2)


TINY_NAFREPLOCAL = models.ModelConfig(
    family="nafreplocal",
    width=8,
    enc_blocks=(1, 1, 1, 1),
    middle_blocks=1,
    dec_blocks=(1, 1, 1, 1),
    sca_mode="local",
    local_window=24,
    use_middle_scag=False,
    use_reparam=False,
    reparam_branch_norm=False,
)


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("blurset")
    make_dataset(root, {"train": 8, "val": 2, "test": 3}, image_size=48, seed=0)
    return root


@pytest.fixture(scope="session")
def mirror_root(tmp_path_factory):
    """Tree whose ground truth duplicates the blurred image."""
    root = tmp_path_factory.mktemp("mirrorset")
    make_dataset(root, {"val": 4}, image_size=48, seed=1, sharp_equals_blur=True)
    return root


def build_identity_model(width: int = 4) -> torch.nn.Module:
    """Tiny model whose output equals its input (all weights zeroed,
    global residual intact)."""
    cfg = models.ModelConfig(
        family="nafnet",
        width=width,
        enc_blocks=(1, 1, 1, 1),
        middle_blocks=1,
        dec_blocks=(1, 1, 1, 1),
    )
    model = models.NAFNetFamily(cfg)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
    return model.eval()


@pytest.fixture()
def identity_model():
    return build_identity_model()


@pytest.fixture()
def identity_checkpoint(tmp_path):
    model = build_identity_model()
    return models.save_checkpoint(model, tmp_path / "identity.pt")


def rand_image(rng: np.random.Generator, h: int = 48, w: int = 48) -> np.ndarray:
    return rng.random((h, w, 3)).astype(np.float32)
