import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ml5g.mlfo import InstanceState, default_hosts, load_intent  # noqa: E402
from ml5g.nn import MlpModel  # noqa: E402
from ml5g.pipeline import distribute, sha256_hex  # noqa: E402
from ml5g.sandbox import validate_model  # noqa: E402
from ml5g.usecase import deploy, production_network, run_training_phase  # noqa: E402


@pytest.fixture(scope="session")
def trained():
    """One full training phase on the default intent, shared read-only."""
    start = time.perf_counter()
    inst = deploy(load_intent(), default_hosts(2), production_network(0, "medium"))
    run_training_phase(inst)
    inst.train_seconds = time.perf_counter() - start
    return inst


def serve_artifact(artifact: bytes, edges: int = 2, seed: int = 0, density: str = "medium", transport=None):
    """A fresh serving instance running ``artifact``, without retraining.

    The model still goes through the real validate/distribute/activate path.
    """
    intent = load_intent()
    inst = deploy(intent, default_hosts(edges), production_network(seed, density), transport=transport)
    rt = inst.runtime
    digest = sha256_hex(artifact)
    inst.transition(InstanceState.TRAINING)
    inst.transition(InstanceState.VALIDATING, hash=digest)
    verdict = validate_model(MlpModel.from_bytes(artifact), rt["sandbox"].config, intent.validation, intent.policies)
    inst.record_validation(digest, verdict)
    receipts = distribute(artifact, list(rt["sinks"].values()), rt["transport"])
    inst.activate(digest, artifact, receipts)
    return inst


@pytest.fixture
def serving(trained):
    return serve_artifact(trained.active_artifact)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
