import pytest

from gmgenet.config import phantom_run_config
from gmgenet.phantom import PhantomSpec, generate

TINY = dict(extractor_n=10, extractor_epochs=2, classifier_epochs=1, batch_size=4)


def tiny_config(dataset, run_dir, **kw):
    return phantom_run_config(str(dataset / "manifest.csv")).with_values(run_dir=str(run_dir), **{**TINY, **kw})


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    generate(PhantomSpec(seed=1), 15, out)
    return out


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
