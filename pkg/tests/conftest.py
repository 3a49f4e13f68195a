import pytest

from av2tsam import load_config
from av2tsam.avsbench_io import make_synthetic
from av2tsam.datamodel import Split, Subset

TINY_SETS = [
    "backend.stub.d_v=6",
    "backend.stub.d_a=5",
    "backend.stub.d_text=4",
    "backend.stub.num_layers=3",
    "backend.stub.channels=[4,4,4]",
    "backend.stub.num_tokens=2",
    "backend.stub.token_dim=3",
    "fusion.d_s=4",
    "train.resolution=8",
    "train.decoder_hidden=4",
    "data.sample_rate=1600",
]


@pytest.fixture(scope="session")
def base_cfg():
    return load_config()


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small-dimension stub config for gradient checks and fast pipelines."""
    return load_config(sets=list(TINY_SETS))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Shared synthetic trees: s4 and ms3, train and val, 32 px, 3 frames."""
    root = tmp_path_factory.mktemp("synthdata")
    for subset in (Subset.S4, Subset.MS3):
        for split in (Split.TRAIN, Split.VAL):
            make_synthetic(
                root,
                subset,
                split,
                num_clips=2,
                resolution=32,
                num_frames=3,
                sample_rate=4000,
                seed=11,
            )
    return root
