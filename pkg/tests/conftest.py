import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mm3d import detector
from mm3d.detector import ModelConfig

torch.set_num_threads(1)
settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

# every 3D forward pass run by the suite checks the slice-weight contract
detector.CONTRACT_CHECKS["enabled"] = True


def micro_config(**kw) -> ModelConfig:
    """N=3, D=16, k=2, 12x12 images: small enough for exhaustive gradient checks."""
    base = dict(n_proposals=3, dim=16, pool=2, n_heads=6, attn_heads=4, backbone_width=8,
                image_size=(12, 12), n_slices=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
