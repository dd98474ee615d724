import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture(scope="session")
def small_pyramid():
    from flexissl.pyramid import build_synthetic_pyramid

    return build_synthetic_pyramid(seed=3, base_size=512, texture_class="stripes")


@pytest.fixture(scope="session")
def desk_checkpoint(tmp_path_factory):
    """A desk-scale training checkpoint after two optimizer steps on four small pyramids."""
    from flexissl.config import desk_config
    from flexissl.data import SyntheticTileSource
    from flexissl.pretrain import pretrain

    out = tmp_path_factory.mktemp("desk_pretrain")
    src = SyntheticTileSource(4, 256, ("stripes", "dots"), (1, 0, 0, 0), 224, seed=0)
    cfg = desk_config(batch_size=2, total_epochs=2, warmup_epochs=1, patch_size_probs={32: 1.0})
    pretrain(cfg, str(out), source=src, max_steps=2)
    return str(out / "checkpoint.npz")
