import numpy as np
import pytest
import torch

from dcacseg.data import SynthSpec, load_cases, synth_generate
from dcacseg.planner import PlanConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """3 domains x 10 samples of 48 px images."""
    out = tmp_path_factory.mktemp("synth")
    return synth_generate(SynthSpec(num_domains=3, samples_per_domain=10, image_size=48), 5, out)


@pytest.fixture(scope="session")
def synth_cases(synth_dataset):
    return load_cases(synth_dataset)


@pytest.fixture
def tiny_plan():
    return PlanConfig(patch_size=16, depth=2, base_channels=4, max_channels=16, num_domains=3,
                      minibatches_per_epoch=3, epochs=2, batch_size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class AcceptanceRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        _ACCEPTANCE[self.number] = ("FAIL", self.title, "did not complete")
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _ACCEPTANCE[self.number] = (status, self.title, detail.splitlines()[0] if detail else "")
        return False


@pytest.fixture
def criterion():
    return AcceptanceRecorder


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}" + (f" | {detail}" if detail else ""))
