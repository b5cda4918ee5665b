import numpy as np
import pytest

from idennet.config import BackboneConfig, TrainConfig
from idennet.data import SynthSpec, synth_generate
from idennet.model import PretrainNet

D16 = BackboneConfig(depth=16)


@pytest.fixture(scope="session")
def tiny_samples():
    """4 identities x 3 expressions x 5 images; 20 subjects."""
    return synth_generate(SynthSpec(num_identities=4, num_expressions=3, samples_per_cell=5, seed=7))


@pytest.fixture(scope="session")
def tiny_nets(tiny_samples):
    """Briefly trained depth-16 emotion and identity networks (populated BN stats)."""
    from idennet.train import PretrainTrainer

    cfg = TrainConfig(stage="pretrain", epochs=1, batch_size=30, augment=False, dropout=0.0)
    nets = []
    for task, classes, seed in (("emotion", 3, 1), ("identity", 4, 2)):
        net = PretrainNet(task, D16, classes, np.random.default_rng(seed))
        PretrainTrainer(net, tiny_samples, cfg).train()
        nets.append(net)
    return tuple(nets)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
