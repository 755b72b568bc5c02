import pytest

from harmodt import harness
from harmodt.config import RunConfig

TINY = dict(embed_dim=8, n_layer=1, n_head=2, K=4, K_star=2, E=20, t_m=5, batch_size=4,
            n_traj=6, eval_episodes=3, gating_epochs=2, gating_windows=20, eta_max=6, dropout=0.1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small datasets for both suites, shared by the whole session."""
    root = tmp_path_factory.mktemp("data")
    for suite in ("pointgoal8", "dir8"):
        harness.prepare_data(RunConfig(data_dir=str(root), suite=suite, n_traj=6))
    return root


@pytest.fixture
def tiny_cfg(tiny_data, tmp_path):
    def make(**kw):
        base = dict(TINY, data_dir=str(tiny_data), out=str(tmp_path / "run"))
        base.update(kw)
        return RunConfig(**base).validate()
    return make


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
