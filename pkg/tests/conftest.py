import numpy as np
import pytest

from leakguard import detector as det
from leakguard.autoencoder import TrainConfig, train_autoencoder
from leakguard.data import SyntheticConfig, synthetic_splits
from leakguard.numeric import make_rng
from leakguard.service_models import ServiceConfig, train_service_model

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    return synthetic_splits(SyntheticConfig.small(seed=3))


@pytest.fixture(scope="session")
def small_models(small_data):
    """Autoencoder + softmax regression on the small synthetic set, calibrated for T=50."""
    train, test = small_data
    fit, hold = train.subset(np.arange(600)), train.subset(np.arange(600, 800))
    ae = train_autoencoder(fit.features, TrainConfig(epochs=20, optimizer="adam", learning_rate=3e-3,
                                                     batch_size=32, hidden=(16,), seed=1))
    svc = train_service_model(ae.encode(fit.features), fit.labels, "lr", ServiceConfig(seed=1), 4)
    cfg = det.DetectorConfig(max_horizon=50)
    cal = det.calibrate(hold, ae, svc, cfg, 40, make_rng(5, 1))
    return {"ae": ae, "svc": svc, "cfg": cfg, "cal": cal, "fit": fit, "hold": hold, "test": test}
