import sys
from pathlib import Path

import pytest

# make sibling oracle helpers importable as plain modules
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def pipeline_fixture(tmp_path_factory):
    """Clustered + trained walled-pair pipeline directory (see fixtures.py).

    Instance 1 sits inside a two-gap wall (2 conditions / 14 targets);
    instance 2 is fully observed. Shared by CLI, service, and acceptance
    tests; every command rerun on it is byte-identical by contract.
    """
    from fixtures import walled_pair_spec, write_pipeline_fixture
    from splitscene.cli import main

    root = tmp_path_factory.mktemp("pipeline_walled")
    cfg = write_pipeline_fixture(
        root, walled_pair_spec(),
        config_lines=["[training]", "iters = 2200",
                      "[completion]", "timesteps = 10", "latent_factor = 1",
                      # pixel-sharp latents, no warped overwrites: the mock
                      # convergence property is exact for pure generation
                      "warp_alpha_floor = 2.0",
                      "[refine]", "iters = 60", "refresh_every = 30"])
    assert main(["--config", str(cfg), "cluster"]) == 0
    assert main(["--config", str(cfg), "fit"]) == 0
    return cfg
