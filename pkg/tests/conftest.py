import pytest

from hepco.harness import ExperimentConfig, load_dataset


@pytest.fixture(scope="session")
def tiny_cfg():
    """Small federated benchmark that runs in well under a second per method."""
    return ExperimentConfig(n_classes=6, samples_per_class=20, test_per_class=10, dim=6, n_tokens=2,
                            n_tasks=3, rounds=2, clients=3, gamma=0.5, kappa=0.6, pool_size=3, prompt_length=2,
                            client_epochs=2, client_lr=1e-2, gen_epochs=3, distill_epochs=3, gen_lr=1e-3,
                            distill_lr=1e-3, gen_batch=16, distill_batch=16)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    return load_dataset(tiny_cfg)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, passed, detail):
        lines.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
