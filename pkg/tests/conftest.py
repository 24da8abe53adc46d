import numpy as np
import pytest

from hyperverify.backbone import BackboneConfig, train_reference_backbone
from hyperverify.config import RunConfig
from hyperverify.data import SynthConfig, split_identities, synth_identity_dataset
from hyperverify.modelio import save_system
from hyperverify.training import Prepared, train

TINY_SYNTH = SynthConfig(identities=24, samples_per_identity=6, seed=0)
TINY_BACKBONE = BackboneConfig(embed_dim=16, channels=(8, 16, 16, 16), epochs=3, batch_size=32,
                               lr=0.05, seed=0)


def tiny_config(**kw):
    """A RunConfig matching the tiny dataset and backbone fixtures."""
    base = dict(identities=24, samples_per_identity=6, data_seed=0, steps=40, initial_B=2,
                doubling_fractions=[0.1, 0.2, 0.3], kcs_start=25, warmup=5, lr=0.01,
                hidden=[16, 16, 16], beta=1.0, embed_dim=16, backbone_channels=[8, 16, 16, 16],
                backbone_epochs=3, backbone_batch=32, kmeans_k=3, eval_pairs=40)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return synth_identity_dataset(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_ds):
    bb, _ = train_reference_backbone(tiny_ds, TINY_BACKBONE)
    return bb


@pytest.fixture(scope="session")
def tiny_prepared(tiny_ds, tiny_backbone):
    cfg = tiny_config()
    train_ds, val_ds, test_ds = split_identities(tiny_ds, cfg.split, cfg.split_seed)
    return Prepared(train_ds, val_ds, test_ds, tiny_backbone)


@pytest.fixture(scope="session")
def tiny_system_dir(tiny_prepared, tmp_path_factory):
    cfg = tiny_config(steps=30)
    res = train(cfg, tiny_prepared)
    out = tmp_path_factory.mktemp("system")
    save_system(out, res.system, cfg, res.cluster_index)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)
