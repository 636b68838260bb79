import numpy as np
import pytest
import torch

from scenvad.dataset import load_manifest
from scenvad.predictor import PredictorConfig, init_predictor
from scenvad.synthetic import DatasetSpec, Dynamics, SceneConfig, generate_dataset


def small_scenes(n=2, frame_size=(16, 16)):
    return tuple(
        SceneConfig(
            scenario_id=f"s{i}",
            dynamics=Dynamics(n_agents=2, agent_speed_px_per_frame=1.0 + 0.5 * i, agent_size_px=3,
                              background_level=0.2, noise_std=0.01),
            frame_size=frame_size,
            seed=i,
        )
        for i in range(n)
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 scenarios x 2 views x (2 normal + 1 abnormal) videos of 16 frames at 16x16."""
    out = tmp_path_factory.mktemp("tiny")
    spec = DatasetSpec(small_scenes(2), views_per_scenario=2, normals_per_view=2, abnormals_per_view=1,
                       length=16, seed=3)
    generate_dataset(spec, out)
    return load_manifest(out / "manifest.json")


@pytest.fixture
def tiny_model():
    """263-parameter predictor on 16x16 frames."""
    return init_predictor(PredictorConfig((16, 16), 4, 2, 1), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
