import numpy as np
import pytest
import torch

from glam.data import SyntheticSpec, generate_synthetic_dataset, load_patches, synthetic_profiles
from glam.network import NetworkConfig

ACCEPTANCE_LINES = []

TINY_NET = NetworkConfig(num_classes=6, base_channels=4, depth=2, decoder_channels=4, head_channels=4, blocks_per_level=1, seed=0)


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two-species synthetic set: 6 classes, 32x32, (2 train, 1 val, 1 test) per class and species."""
    root = tmp_path_factory.mktemp("small_ds")
    spec = SyntheticSpec(patches_per_class=(2, 1, 1), image_size=32, species=("mouse", "human"), seed=3)
    profiles = synthetic_profiles(32)
    manifest = generate_synthetic_dataset(spec, root, profiles)
    return root, manifest, profiles


@pytest.fixture(scope="session")
def small_patches(small_dataset):
    root, manifest, profiles = small_dataset
    return load_patches(manifest.entries, root, profiles)


def tiny_config_text(manifests, out_dir, size=32, epochs=2, extra=""):
    """Run config for the tiny network on synthetic data of side ``size``."""
    species = "".join(f"[species.{sp}]\ncapture_size = {size}\nworking_size = {size}\n" for sp in ("mouse", "human"))
    return (
        f"[data]\nmanifests = {', '.join(str(m) for m in manifests)}\n"
        + species
        + "[network]\nbase_channels = 4\ndepth = 2\ndecoder_channels = 4\nhead_channels = 4\nblocks_per_level = 1\n"
        + f"[training]\nepochs = {epochs}\nlearning_rate = 1e-2\nleftover = carry\n"
        + f"[output]\ndir = {out_dir}\n"
        + extra
    )
