import re

import numpy as np
import pytest

from lnforge.config import from_mapping
from lnforge.volume import Mask


def random_mask(rng, shape=(16, 16, 16), p=0.5, spacing=(1.0, 1.0, 1.0)) -> Mask:
    return Mask(rng.random(shape) < p, spacing)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    """A configuration small enough for unit-level training runs."""
    return from_mapping({
        "codec": {"shape_latent_dim": "16", "texture_latent_dim": "16"},
        "training": {"steps": "400", "hidden": "64", "adapter_steps": "20", "adapter_batch": "4"},
    })


@pytest.fixture(scope="session")
def small_models(small_cfg):
    from lnforge.workflow import train_toy_models

    models, _ = train_toy_models(small_cfg, n_shapes=60, seed=0)
    return models


# ---------------------------------------------------------------- acceptance verdicts

ACCEPTANCE_TITLES = {
    1: "EDT exactness",
    2: "TSDF round trip",
    3: "codec fidelity",
    4: "diffusion marginal",
    5: "gradient checks",
    6: "training sanity",
    7: "adapter benefit",
    8: "IP/IR exactness",
    9: "directional ablation",
    10: "long-axis rebalancing",
    11: "placement contract",
    12: "determinism",
}
_VERDICTS: dict[int, tuple[bool, str]] = {}


class AcceptanceRecorder:
    def record(self, number: int, ok: bool, detail: str) -> None:
        _VERDICTS[number] = (bool(ok), detail)
        assert ok, f"criterion {number} ({ACCEPTANCE_TITLES[number]}): {detail}"


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    ran = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            match = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if match:
                ran[int(match.group(1))] = key
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        title = ACCEPTANCE_TITLES[n]
        if n in _VERDICTS:
            ok, detail = _VERDICTS[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}")
        else:
            terminalreporter.write_line(f"FAIL criterion {n:2d} {title}: test {ran[n]} before reaching a verdict")
