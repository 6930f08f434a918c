import pytest

from deskvla import data, simarm
from deskvla.policy import PolicyConfig

SMALL_SIM = simarm.SimConfig(top_shape=(16, 16), wrist_shape=(8, 8))
SMALL_POLICY = PolicyConfig(top_shape=(16, 16), wrist_shape=(8, 8), patch=4, d_model=16, n_layers=1, n_heads=2,
                            n_chunk=10, head_hidden=32, lora_rank=4)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    data.generate_demos(6, root, SMALL_SIM, seed=3)
    return root


@pytest.fixture(scope="session")
def small_episodes(small_dataset_dir):
    return data.load_dataset(small_dataset_dir)


# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
