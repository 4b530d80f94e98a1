import numpy as np
import pytest

from panp.checkpoint import save_checkpoint
from panp.model import ModelConfig
from panp.rng import Rng
from panp.tasks import TaskConfig
from panp.training import TrainConfig, train


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_panp(tmp_path_factory):
    """Default PANP trained for 2000 steps of 8 episodes on 16x16 GP images.

    Returns ``(result, checkpoint_path, metrics_path)``; shared by the CLI
    and acceptance tests so the run happens once per session.
    """
    out = tmp_path_factory.mktemp("panp_run")
    metrics = out / "metrics.csv"
    result = train(ModelConfig(), TrainConfig(steps=2000, batch_size=8, seed=0), TaskConfig(), metrics_path=metrics)
    ckpt = out / "checkpoint.panp"
    save_checkpoint(ckpt, result.checkpoint)
    return result, ckpt, metrics
