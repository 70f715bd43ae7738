import numpy as np
import pytest
import torch

from seda.data import PairedFeatureDataset
from seda.denoiser import DenoiserConfig, ModelSpec, build_model

torch.set_num_threads(1)


@pytest.fixture
def tiny_model():
    """Factory for small seeded models in double precision."""

    def make(kind="seda", d=8, classes=3, label_mode="single", seed=0, dtype=torch.float64, **cfg):
        cfg.setdefault("token_count", 2)
        spec = ModelSpec(kind, classes, label_mode, DenoiserConfig(feature_dim=d, **cfg))
        return build_model(spec, torch.Generator().manual_seed(seed)).to(dtype)

    return make


@pytest.fixture
def toy_dataset():
    def make(n_per_class=16, classes=2, d=8, seed=0, split="train", multi=False):
        rng = np.random.default_rng(seed)
        protos = rng.normal(size=(classes, d)) * 3
        labels = np.repeat(np.arange(classes), n_per_class)
        text = (protos[labels] + rng.normal(size=(len(labels), d)) * 0.3).astype(np.float32)
        vis = (0.5 * protos[labels] + rng.normal(size=(len(labels), d))).astype(np.float32)
        if multi:
            hot = np.zeros((len(labels), classes), dtype=bool)
            hot[np.arange(len(labels)), labels] = True
            hot[::3, (labels[::3] + 1) % classes] = True
            labels = hot
        return PairedFeatureDataset(vis, text if split == "train" else None, labels, classes, split).validate()

    return make
